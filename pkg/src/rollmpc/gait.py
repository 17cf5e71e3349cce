"""Utility-based gait sequencing for a wheeled quadruped.

A stance leg is useful while its wheel can still reach the spot the torso
reference expects it at. The utility is 1 at touch-down and decays as the
reference drifts away from what pure rolling can track; once it crosses a
threshold the leg is recovered by a swing of fixed duration. Swings are
serialized when the schedule can afford it and escalate to simultaneous
diagonal-pair stepping when it cannot, which keeps the generated gaits in
the driving / static-walk / trot families.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import DIAGONAL_PARTNER, LEG_NAMES, LEG_NEIGHBORS, N_LEGS
from .numerics import make_time_grid


class InfeasibleScheduleError(RuntimeError):
    """A required swing cannot be placed anywhere inside the horizon."""


@dataclass
class GaitConfig:
    """Utility-ellipse geometry and swing timing parameters."""

    lambda_par: float = 0.25     # half axis along the rolling direction (m)
    lambda_perp: float = 0.10    # half axis lateral to it (m)
    u_bar: float = 0.2           # swing-trigger utility threshold
    t_swing: float = 0.3         # constant swing duration (s)
    dt_grid: float = 0.015       # schedule discretization (s)
    u_floor: float = -0.3        # escalate to paired stepping below this

    def __post_init__(self):
        if self.lambda_par <= 0 or self.lambda_perp <= 0:
            raise ValueError("ellipse half axes must be positive")
        if not 0.0 < self.u_bar < 1.0:
            raise ValueError("utility threshold must lie in (0, 1)")
        if self.t_swing <= 0 or self.dt_grid <= 0:
            raise ValueError("swing duration and grid step must be positive")

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg or {})
        return cls(**{k: float(v) for k, v in cfg.items()
                      if k in ("lambda_par", "lambda_perp", "u_bar",
                               "t_swing", "dt_grid", "u_floor")})


@dataclass
class ModeSchedule:
    """Per-leg contact flags over [t_start, t_end] with switch times.

    ``event_times`` are strictly increasing interior times; ``contact_flags``
    has one row per phase (len(event_times) + 1 rows), columns ordered
    LF, RF, LH, RH. Phase k covers [event_times[k-1], event_times[k]).
    """

    t_start: float
    t_end: float
    event_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    contact_flags: np.ndarray = field(
        default_factory=lambda: np.ones((1, N_LEGS), dtype=bool))

    def __post_init__(self):
        self.event_times = np.asarray(self.event_times, dtype=float)
        self.contact_flags = np.asarray(self.contact_flags, dtype=bool)
        if self.contact_flags.shape != (len(self.event_times) + 1, N_LEGS):
            raise ValueError("one flag row per phase is required")
        if len(self.event_times):
            if np.any(np.diff(self.event_times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if (self.event_times[0] <= self.t_start
                    or self.event_times[-1] >= self.t_end):
                raise ValueError("event times must lie inside the schedule span")

    def phase_index(self, t):
        # Nanosecond snap so grid times assembled from different float sums
        # resolve to the same phase.
        return int(np.searchsorted(self.event_times, t + 1e-9, side="right"))

    def flags_at(self, t):
        return self.contact_flags[self.phase_index(t)]

    def in_contact(self, leg, t):
        return bool(self.contact_flags[self.phase_index(t), leg])

    def swing_window(self, leg, t):
        """(lift_off, touch_down) of the swing containing ``t``, or None."""
        k = self.phase_index(t)
        if self.contact_flags[k, leg]:
            return None
        lo = k
        while lo > 0 and not self.contact_flags[lo - 1, leg]:
            lo -= 1
        hi = k
        n_phase = self.contact_flags.shape[0]
        while hi + 1 < n_phase and not self.contact_flags[hi + 1, leg]:
            hi += 1
        t_lift = self.t_start if lo == 0 else self.event_times[lo - 1]
        t_down = self.t_end if hi == n_phase - 1 else self.event_times[hi]
        return t_lift, t_down

    def to_csv(self, path):
        """Write (time, LF, RF, LH, RH) rows, one per phase boundary."""
        times = np.concatenate([[self.t_start], self.event_times])
        with open(path, "w") as fh:
            fh.write("time," + ",".join(LEG_NAMES) + "\n")
            for t, flags in zip(times, self.contact_flags):
                fh.write("%.17g,%d,%d,%d,%d\n" % (t, *flags.astype(int)))

    @classmethod
    def from_grid(cls, times, contact_grid):
        """Build from per-grid-time flags; merges equal consecutive rows."""
        contact_grid = np.asarray(contact_grid, dtype=bool)
        events = []
        flags = [contact_grid[0]]
        for k in range(1, len(times) - 1):
            if not np.array_equal(contact_grid[k], flags[-1]):
                events.append(times[k])
                flags.append(contact_grid[k])
        return cls(t_start=float(times[0]), t_end=float(times[-1]),
                   event_times=np.array(events), contact_flags=np.array(flags))


@dataclass
class ReferenceTrajectory:
    """Sampled torso reference: world position and yaw over a time span.

    Built by integrating commanded body-frame velocity and yaw rate.
    """

    times: np.ndarray
    position: np.ndarray   # (n, 3) world
    yaw: np.ndarray        # (n,)
    v_body: np.ndarray     # (n, 3) commanded velocity in the heading frame
    yaw_rate: np.ndarray   # (n,)

    @classmethod
    def from_velocity_profile(cls, v_of_t, wz_of_t, t0, duration, dt,
                              start_position=(0.0, 0.0, 0.0), start_yaw=0.0):
        """Midpoint-rule integration of the commanded velocities."""
        n = int(round(duration / dt))
        times = t0 + dt * np.arange(n + 1)
        pos = np.zeros((n + 1, 3))
        yaw = np.zeros(n + 1)
        pos[0] = np.asarray(start_position, dtype=float)
        yaw[0] = start_yaw
        v_body = np.array([v_of_t(t) for t in times], dtype=float)
        wz = np.array([wz_of_t(t) for t in times], dtype=float)
        for k in range(n):
            yaw_mid = yaw[k] + 0.5 * dt * wz[k]
            v_mid = 0.5 * (v_body[k] + v_body[k + 1])
            c, s = np.cos(yaw_mid), np.sin(yaw_mid)
            pos[k + 1] = pos[k] + dt * np.array([
                c * v_mid[0] - s * v_mid[1],
                s * v_mid[0] + c * v_mid[1],
                v_mid[2]])
            yaw[k + 1] = yaw[k] + dt * 0.5 * (wz[k] + wz[k + 1])
        return cls(times, pos, yaw, v_body, wz)

    def _interp(self, arr, t):
        t = np.clip(t, self.times[0], self.times[-1])
        return np.array([np.interp(t, self.times, arr[..., i])
                         for i in range(arr.shape[-1])]).T \
            if arr.ndim > 1 else np.interp(t, self.times, arr)

    def position_at(self, t):
        return self._interp(self.position, t)

    def yaw_at(self, t):
        return self._interp(self.yaw, t)

    def velocity_at(self, t):
        return self._interp(self.v_body, t)

    def yaw_rate_at(self, t):
        return self._interp(self.yaw_rate, t)


@dataclass
class LegReferenceState:
    """Rolling anchors of one leg.

    ``contact_point`` is the measured wheel contact position in world frame
    at the anchor time; ``touchdown_offset_body`` the torso-to-contact
    offset recorded at the last touch-down, expressed in the heading frame
    so it rotates with the reference yaw; ``rolling_direction_body`` the
    wheel rolling direction in the heading frame. ``nominal_offset_body``
    is the resting torso-to-contact offset used when predicting where an
    inserted swing will land.
    """

    contact_point: np.ndarray
    touchdown_offset_body: np.ndarray
    rolling_direction_body: np.ndarray
    anchor_time: float = 0.0
    nominal_offset_body: np.ndarray | None = None

    def __post_init__(self):
        if self.nominal_offset_body is None:
            self.nominal_offset_body = np.asarray(
                self.touchdown_offset_body, dtype=float).copy()


def project_rolling(vec, rolling_dir):
    """Component of ``vec`` along the rolling direction (scalar)."""
    return float(np.dot(vec, rolling_dir))


def project_lateral(vec, rolling_dir, normal=(0.0, 0.0, 1.0)):
    """Component of ``vec`` along the in-plane lateral direction."""
    lat = np.cross(np.asarray(normal, dtype=float), rolling_dir)
    return float(np.dot(vec, lat))


def leg_utility(cfg, r_ref_torso, touchdown_offset, r_ref_wheel, rolling_dir):
    """Kinematic utility of one leg; 1 when the wheel sits where the
    reference wants it, 0 on the reach-ellipse boundary, negative beyond."""
    err = np.asarray(r_ref_torso) + np.asarray(touchdown_offset) \
        - np.asarray(r_ref_wheel)
    par = project_rolling(err, rolling_dir)
    perp = project_lateral(err, rolling_dir)
    return 1.0 - np.sqrt((par / cfg.lambda_par) ** 2
                         + (perp / cfg.lambda_perp) ** 2)


def rolled_reference(r_wheel, torso_displacement, rolling_dir):
    """Wheel position reachable by pure rolling under a torso displacement.

    Only the component of the displacement along the rolling direction
    advances the wheel; lateral and vertical components are dropped.
    """
    d = np.asarray(rolling_dir, dtype=float)
    adv = float(np.dot(np.asarray(torso_displacement, dtype=float), d))
    return np.asarray(r_wheel, dtype=float) + adv * d


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class _LegTimeline:
    """Utility of one leg over the horizon grid, with swing bookkeeping."""

    def __init__(self, cfg, leg, anchors, ref, times):
        self.cfg = cfg
        self.leg = leg
        self.ref = ref
        self.times = times
        self.n = len(times)
        self.swinging = np.zeros(self.n, dtype=bool)
        self._anchor0 = anchors
        self._pos = ref.position_at(times)
        self._yaw = ref.yaw_at(times)
        self._cos = np.cos(self._yaw)
        self._sin = np.sin(self._yaw)
        self.utility = np.ones(self.n)
        self.recompute()

    def _heading_to_world(self, k, vec):
        c, s = self._cos[k], self._sin[k]
        return np.array([c * vec[0] - s * vec[1],
                         s * vec[0] + c * vec[1], vec[2]])

    def recompute(self):
        """Full-grid utility pass.

        The inherited anchor applies from the grid start; each swing leaves
        the utility frozen at 1 and resets the anchor to the predicted
        touch-down spot (reference torso plus the nominal leg offset). The
        wheel reference rolls forward incrementally so the rolling direction
        can rotate with the reference yaw.
        """
        a = self._anchor0
        wheel = np.asarray(a.contact_point, dtype=float).copy()
        offset_body = np.asarray(a.touchdown_offset_body, dtype=float)
        prev_pos = self.ref.position_at(a.anchor_time)
        prev_yaw_cs = (np.cos(self.ref.yaw_at(a.anchor_time)),
                       np.sin(self.ref.yaw_at(a.anchor_time)))
        droll_body = np.asarray(a.rolling_direction_body, dtype=float)
        j = 0
        while j < self.n:
            if self.swinging[j]:
                self.utility[j] = 1.0
                if j + 1 < self.n and not self.swinging[j + 1]:
                    # Predicted touch-down: reset all anchors there.
                    offset_body = np.asarray(a.nominal_offset_body, dtype=float)
                    wheel = self._pos[j + 1] + self._heading_to_world(
                        j + 1, offset_body)
                    prev_pos = self._pos[j + 1]
                    prev_yaw_cs = (self._cos[j + 1], self._sin[j + 1])
                j += 1
                continue
            c0, s0 = prev_yaw_cs
            droll_prev = np.array([
                c0 * droll_body[0] - s0 * droll_body[1],
                s0 * droll_body[0] + c0 * droll_body[1], droll_body[2]])
            disp = self._pos[j] - prev_pos
            wheel = wheel + np.dot(disp, droll_prev) * droll_prev
            droll_now = self._heading_to_world(j, droll_body)
            want = self._pos[j] + self._heading_to_world(j, offset_body)
            err = want - wheel
            par = np.dot(err, droll_now)
            # Lateral direction is z x droll, written out for speed.
            perp = -err[0] * droll_now[1] + err[1] * droll_now[0]
            self.utility[j] = 1.0 - np.sqrt(
                (par / self.cfg.lambda_par) ** 2
                + (perp / self.cfg.lambda_perp) ** 2)
            prev_pos = self._pos[j]
            prev_yaw_cs = (self._cos[j], self._sin[j])
            j += 1

    def mark_swing(self, k_start, k_end):
        self.swinging[k_start:k_end] = True
        self.recompute()


def generate_gait(cfg, leg_states, committed, ref, horizon, t_now=0.0):
    """Contact schedule over [t_now, t_now + horizon].

    ``leg_states`` holds one LegReferenceState per leg (anchors as of
    t_now); ``committed`` is the previous ModeSchedule whose in-flight
    swings must be honored, or None.

    The procedure: evaluate every leg's utility over the horizon grid,
    find the earliest threshold crossing (lowest utility first), and insert
    a fixed-duration swing there, postponed while either neighbor is in the
    air. A swing is further postponed into the first single-swing slot when
    the leg can afford the wait, so lightly loaded schedules step one leg
    at a time and only saturated ones escalate to diagonal pairs. Utilities
    regenerate after every insertion until no crossing remains.
    """
    times = t_now + make_time_grid(horizon, cfg.dt_grid)
    n = len(times)
    legs = [_LegTimeline(cfg, i, leg_states[i], ref, times)
            for i in range(N_LEGS)]

    # Carry committed in-flight swings into the new horizon.
    if committed is not None:
        for i in range(N_LEGS):
            window = None
            if committed.t_start <= t_now < committed.t_end:
                window = committed.swing_window(i, t_now)
            if window is not None:
                k_end = min(n, int(np.ceil(
                    (window[1] - t_now) / cfg.dt_grid - 1e-9)))
                if k_end > 0:
                    legs[i].mark_swing(0, k_end)

    swing_len = max(1, int(round(cfg.t_swing / cfg.dt_grid)))
    # Crossings already answered by a scheduled swing (or given up on) are
    # masked up to this index so the search loop can make progress.
    handled_until = [0] * N_LEGS
    guard = 0
    while True:
        guard += 1
        if guard > 16 * N_LEGS * (n // swing_len + 2):
            raise InfeasibleScheduleError("swing insertion failed to settle")
        # Earliest threshold crossing; lowest utility wins ties at that time.
        k_star, leg_star = None, None
        for k in range(n):
            below = [(legs[i].utility[k], i) for i in range(N_LEGS)
                     if k >= handled_until[i]
                     and not legs[i].swinging[k]
                     and legs[i].utility[k] < cfg.u_bar]
            if below:
                below.sort()
                k_star, leg_star = k, below[0][1]
                break
        if k_star is None:
            break

        k_end = _place_swing(cfg, legs, leg_star, k_star, swing_len, n)
        if k_end is not None:
            handled_until[leg_star] = k_end
            continue
        # No slot inside this horizon. If the need is urgent and no leg has
        # any feasible window either, the schedule is genuinely jammed.
        urgent = times[k_star] + cfg.t_swing < times[-1]
        if urgent and all(
                not _feasible(legs, i, k, swing_len, n)
                for i in range(N_LEGS) for k in range(k_star, n - 1)):
            raise InfeasibleScheduleError(
                "no leg ordering admits a swing inside the horizon")
        handled_until[leg_star] = n  # defer to the next cycle

    contact_grid = np.ones((n, N_LEGS), dtype=bool)
    for i in range(N_LEGS):
        contact_grid[:, i] = ~legs[i].swinging
    schedule = ModeSchedule.from_grid(times, contact_grid)
    return schedule


def _feasible(legs, leg, k, swing_len, n):
    """Both neighbors in contact throughout the candidate window."""
    k_end = min(k + swing_len, n)
    if k >= n - 1:
        return False
    for nb in LEG_NEIGHBORS[leg]:
        if np.any(legs[nb].swinging[k:k_end]):
            return False
    return True


def _alone(legs, leg, k, swing_len, n):
    k_end = min(k + swing_len, n)
    others = [i for i in range(N_LEGS) if i != leg]
    return not any(np.any(legs[i].swinging[k:k_end]) for i in others)


def _place_swing(cfg, legs, leg, k_star, swing_len, n):
    """Insert a swing for ``leg`` at or after grid index ``k_star``.

    Returns the end index of the inserted swing, or None when no window
    satisfying the neighbor rule exists inside the horizon.
    """
    feasible = [k for k in range(k_star, n - 1)
                if _feasible(legs, leg, k, swing_len, n)]
    if not feasible:
        return None
    k_ins = feasible[0]
    if not _alone(legs, leg, k_ins, swing_len, n):
        # Prefer stepping alone when the utility can afford the wait;
        # saturated schedules fall through to diagonal-pair stepping.
        serial = [k for k in feasible if _alone(legs, leg, k, swing_len, n)]
        if serial and legs[leg].utility[serial[0]] >= cfg.u_floor:
            k_ins = serial[0]
    k_end = min(k_ins + swing_len, n)
    legs[leg].mark_swing(k_ins, k_end)
    return k_end


def measured_leg_states(model, terrain, state_vec, t_now,
                        touchdown_offsets_body=None):
    """Anchors built from the robot's current kinematics.

    ``touchdown_offsets_body`` carries the per-leg offsets recorded at the
    most recent real touch-downs; when omitted (cold start) the current
    offsets are used. Heading-frame quantities are derotated by the current
    yaw so the utility model can rotate them with the reference later.
    """
    from .model import S_JOINTS, S_POS, S_THETA, forward_kinematics

    theta = state_vec[S_THETA]
    p = state_vec[S_POS]
    fk = forward_kinematics(model, theta, p, state_vec[S_JOINTS],
                            terrain, check_limits=False)
    yaw = theta[2]
    rz_inv = _rot_z(-yaw)
    nominal = model.hip_offsets
    states = []
    for i in range(N_LEGS):
        offset_w = fk.contact_world[i] - p
        offset_w[2] = 0.0
        offset_b = (rz_inv @ offset_w if touchdown_offsets_body is None
                    else np.asarray(touchdown_offsets_body[i], dtype=float))
        states.append(LegReferenceState(
            contact_point=fk.contact_world[i].copy(),
            touchdown_offset_body=offset_b,
            rolling_direction_body=rz_inv @ fk.rolling_direction[i],
            anchor_time=float(t_now),
            nominal_offset_body=np.array([nominal[i, 0], nominal[i, 1], 0.0])))
    return states

"""Constrained SLQ solver.

Iterates linear-quadratic approximations along a rollout of the nonlinear
problem. State-input equalities are eliminated by a null-space projection
of the input at each node (with a quadratic merit penalty as backstop),
inequalities enter through a relaxed log barrier, and a backtracking line
search on the merit function guards every accepted step. The result is a
time-varying affine policy plus the nominal trajectory it was built
around.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, qr

from .model import EulerSingularityError
from .numerics import complex_step_jacobian, rk4_step


class RolloutDivergenceError(RuntimeError):
    """State norm exceeded the guard bound during integration."""


class RegularizationError(RuntimeError):
    """Input Hessian could not be made positive definite."""


@dataclass
class SolverSettings:
    """Knobs of the SLQ iteration; all positive."""

    max_iterations: int = 20
    tolerance: float = 1e-6          # relative merit decrease to declare done
    mu_barrier: float = 1.0          # relaxed-barrier weight
    delta_barrier: float = 2.0       # relaxation threshold
    eq_penalty: float = 1e3          # quadratic merit penalty on equalities
    line_search_factor: float = 0.5
    line_search_min_step: float = 1.0 / 64.0
    reg_init: float = 1e-6           # input-Hessian regularization floor
    reg_max: float = 1e8
    divergence_norm: float = 1e6
    mpc_iterations: int = 4

    def __post_init__(self):
        if min(self.tolerance, self.mu_barrier, self.delta_barrier,
               self.eq_penalty, self.reg_init) <= 0:
            raise ValueError("solver settings must be positive")

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg or {})
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: (int(v) if k in ("max_iterations", "mpc_iterations")
                      else float(v))
                  for k, v in cfg.items() if k in known}
        return cls(**kwargs)


def relaxed_barrier(h, mu, delta):
    """Relaxed log barrier: -mu ln(h) above delta, quadratic below.

    The quadratic extension matches value, slope and curvature at the
    junction, so the penalty is twice differentiable everywhere and finite
    for violated constraints. Returns (value, d/dh, d2/dh2) elementwise.
    """
    h = np.asarray(h, dtype=float)
    log_side = h > delta
    hs = np.where(log_side, h, delta)
    value = np.where(log_side, -mu * np.log(hs),
                     mu * (0.5 * (((h - 2.0 * delta) / delta) ** 2 - 1.0)
                           - np.log(delta)))
    grad = np.where(log_side, -mu / hs, mu * (h - 2.0 * delta) / delta ** 2)
    hess = np.where(log_side, mu / hs ** 2, mu / delta ** 2 * np.ones_like(h))
    return value, grad, hess


@dataclass
class LinearPolicy:
    """Time-varying affine policy u = u_ff + K (x - x_nom).

    Defined on the node grid; between nodes the feedforward and the nominal
    state interpolate linearly while the gain holds (zero-order). ``k_dir``
    is the last backward-pass step direction, scaled by the line-search
    step inside rollouts.
    """

    times: np.ndarray            # (N+1,)
    x_nom: np.ndarray            # (N+1, nx)
    u_nom: np.ndarray            # (N, nu)
    K: np.ndarray                # (N, nu, nx)
    k_dir: np.ndarray = None     # (N, nu)

    def __post_init__(self):
        if self.k_dir is None:
            self.k_dir = np.zeros_like(self.u_nom)
        if not np.all(np.isfinite(self.K)):
            raise ValueError("policy gains must be finite")

    @property
    def n_intervals(self):
        return len(self.times) - 1

    def interval_of(self, t):
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return min(max(k, 0), self.n_intervals - 1)

    def node_input(self, k, x, alpha=0.0):
        """Policy input at node k (zero-order-hold path used by rollouts)."""
        return (self.u_nom[k] + alpha * self.k_dir[k]
                + self.K[k] @ (x - self.x_nom[k]))

    def evaluate(self, t, x):
        """Policy input at an arbitrary time: piecewise-linear feedforward
        and nominal state, zero-order-hold gain."""
        k = self.interval_of(t)
        t0, t1 = self.times[k], self.times[k + 1]
        w = 0.0 if t1 == t0 else np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        if k + 1 < len(self.u_nom):
            u_ff = (1.0 - w) * self.u_nom[k] + w * self.u_nom[k + 1]
        else:
            u_ff = self.u_nom[k]
        x_ref = (1.0 - w) * self.x_nom[k] + w * self.x_nom[k + 1]
        return u_ff + self.K[k] @ (x - x_ref)

    def resampled(self, new_times):
        """Policy sampled onto a shifted grid (receding-horizon warm start).

        Nodes beyond the original grid repeat the terminal values.
        """
        n = len(new_times)
        nx = self.x_nom.shape[1]
        nu = self.u_nom.shape[1]
        x_nom = np.zeros((n, nx))
        u_nom = np.zeros((n - 1, nu))
        K = np.zeros((n - 1, nu, nx))
        for i, t in enumerate(new_times):
            k = self.interval_of(t)
            if t >= self.times[-1]:
                x_nom[i] = self.x_nom[-1]
            else:
                t0, t1 = self.times[k], self.times[k + 1]
                w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
                x_nom[i] = (1.0 - w) * self.x_nom[k] + w * self.x_nom[k + 1]
            if i < n - 1:
                u_nom[i] = self.u_nom[min(k, len(self.u_nom) - 1)]
                K[i] = self.K[min(k, len(self.K) - 1)]
        return LinearPolicy(times=np.asarray(new_times, dtype=float),
                            x_nom=x_nom, u_nom=u_nom, K=K)

    @classmethod
    def constant_input(cls, times, u_nodes, x0):
        n = len(times)
        u_nodes = np.asarray(u_nodes, dtype=float)
        nx = len(x0)
        return cls(times=np.asarray(times, dtype=float),
                   x_nom=np.tile(np.asarray(x0, dtype=float), (n, 1)),
                   u_nom=u_nodes[:n - 1].copy(),
                   K=np.zeros((n - 1, u_nodes.shape[1], nx)))


@dataclass
class IterationStats:
    iteration: int
    cost: float
    merit: float
    eq_residual_norm: float
    min_cone_margin: float
    step_size: float


@dataclass
class SolveResult:
    """Affine policy, nominal trajectory and per-iteration diagnostics."""

    policy: LinearPolicy
    x_nom: np.ndarray
    u_nom: np.ndarray
    cost: float
    merit: float
    converged: bool
    iterations: list = field(default_factory=list)
    solve_time: float = 0.0
    degraded: bool = False
    status: str = "ok"

    def diagnostics_rows(self):
        """Rows for the per-iteration CSV stream."""
        return [(it.iteration, it.cost, it.eq_residual_norm,
                 it.min_cone_margin, it.step_size) for it in self.iterations]


class GenericDynamics:
    """Adapter giving any ODE right-hand side the dynamics interface.

    Used for scalar/toy problems in tests and the self-check suite; the
    callable must be complex-safe for the step-map sensitivities.
    """

    def __init__(self, f):
        self.f = f

    def derivative(self, x, u, external_force=None):
        return self.f(x, u)

    def rk4_step(self, x, u, dt, external_force=None):
        return rk4_step(lambda xx, uu, tt: self.f(xx, uu), x, u, 0.0, dt)

    def step_map_jacobians(self, xs, us, dts):
        n, nx = xs.shape
        nu = us.shape[1]
        A = np.zeros((n, nx, nx))
        B = np.zeros((n, nx, nu))
        for k in range(n):
            def step_x(xb):
                return np.stack([self.rk4_step(xb[i], us[k], dts[k])
                                 for i in range(xb.shape[0])])

            def step_u(ub):
                return np.stack([self.rk4_step(xs[k], ub[i], dts[k])
                                 for i in range(ub.shape[0])])

            A[k] = complex_step_jacobian(step_x, xs[k])
            B[k] = complex_step_jacobian(step_u, us[k])
        return A, B


def rollout(prob, policy, x0, settings, alpha=0.0, truncate=False):
    """Integrate the dynamics under the policy with per-node projection.

    One fourth-order step per interval; the input is frozen over each
    interval after being projected onto the node's equality constraints.
    With ``truncate`` a divergent trajectory is frozen at the last good
    state instead of raising, which keeps a blown-up warm start usable as
    an (expensive) initial nominal for the backward pass to improve on.
    """
    times = prob.times
    n = len(times) - 1
    xs = np.zeros((n + 1, prob.n_x))
    us = np.zeros((n, prob.n_u))
    xs[0] = x0
    check_attitude = prob.n_x >= 3 and getattr(prob, "schedule", None) is not None
    for k in range(n):
        u = policy.node_input(k, xs[k], alpha)
        u = prob.project_input(k, xs[k], u)
        us[k] = u
        xs[k + 1] = prob.dynamics.rk4_step(xs[k], u, times[k + 1] - times[k])
        bad = (not np.all(np.isfinite(xs[k + 1]))
               or np.linalg.norm(xs[k + 1]) > settings.divergence_norm
               # Tumbling trajectories cannot be linearized near the Euler
               # singularity; count them as divergent too.
               or (check_attitude and np.any(np.abs(xs[k + 1, 0:2]) > 1.45)))
        if bad:
            if not truncate:
                raise RolloutDivergenceError(
                    f"state diverged at node {k + 1}")
            u_hold = (prob.u_ref_nodes if prob.u_ref_nodes is not None
                      else np.zeros((n + 1, prob.n_u)))
            for j in range(k, n):
                xs[j + 1] = xs[k]
                us[j] = prob.project_input(j, xs[j], u_hold[j].copy())
            break
    return xs, us


def evaluate_trajectory(prob, xs, us, settings):
    """Cost, merit and constraint metrics of a nominal trajectory."""
    times = prob.times
    n = len(times) - 1
    cost = 0.0
    barrier = 0.0
    eq_sq = 0.0
    min_margin = np.inf
    for k in range(n):
        dt = times[k + 1] - times[k]
        l, *_ = prob.cost.running(xs[k], us[k], times[k])
        cost += l * dt
        if prob.inequality is not None:
            h, *_ = prob.inequality(k, xs[k], us[k])
            if h.size:
                min_margin = min(min_margin, float(h.min()))
                bv, _, _ = relaxed_barrier(h, settings.mu_barrier,
                                           settings.delta_barrier)
                barrier += float(bv.sum()) * dt
        if prob.equality_value is not None:
            c, _ = prob.equality_value(k, xs[k], us[k])
            eq_sq += float(c @ c) * dt
        if prob.state_equality is not None:
            c, _ = prob.state_equality(k, xs[k])
            eq_sq += float(c @ c) * dt
    phi, _, _ = prob.cost.terminal(xs[-1], times[-1])
    cost += phi
    merit = cost + barrier + 0.5 * settings.eq_penalty * eq_sq
    return cost, merit, np.sqrt(eq_sq), min_margin


def lq_approximation(prob, xs, us, settings):
    """Quadratic expansion of cost (with barrier) and linearized
    constraints along the nominal trajectory."""
    times = prob.times
    n = len(times) - 1
    dts = np.diff(times)
    A, B = prob.dynamics.step_map_jacobians(xs[:-1], us, dts)
    nx, nu = prob.n_x, prob.n_u
    q = np.zeros((n, nx))
    r = np.zeros((n, nu))
    Q = np.zeros((n, nx, nx))
    R = np.zeros((n, nu, nu))
    eq = []
    for k in range(n):
        dt = dts[k]
        _, lx, lu, lxx, luu = prob.cost.running(xs[k], us[k], times[k])
        q[k] = lx * dt
        r[k] = lu * dt
        Q[k] = lxx * dt
        R[k] = luu * dt
        if prob.inequality is not None:
            h, hx, hu, huu = prob.inequality(k, xs[k], us[k])
            if h.size:
                _, bg, bh = relaxed_barrier(h, settings.mu_barrier,
                                            settings.delta_barrier)
                q[k] += dt * (bg @ hx)
                r[k] += dt * (bg @ hu)
                Q[k] += dt * np.einsum("i,ij,ik->jk", bh, hx, hx)
                R[k] += dt * (np.einsum("i,ij,ik->jk", bh, hu, hu)
                              + np.einsum("i,ijk->jk", bg, huu))
        if prob.state_equality is not None:
            c, Gx = prob.state_equality(k, xs[k])
            if c.size:
                # Quadratic-penalty path for state-only equalities.
                q[k] += dt * settings.eq_penalty * (c @ Gx)
                Q[k] += dt * settings.eq_penalty * Gx.T @ Gx
        if prob.equality is not None:
            c, Gx, Gu = prob.equality(k, xs[k], us[k])
            eq.append((c, Gx, Gu))
        else:
            eq.append((np.zeros(0), np.zeros((0, nx)), np.zeros((0, nu))))
    _, gx, gxx = prob.cost.terminal(xs[-1], times[-1])
    return A, B, q, r, Q, R, eq, gx, gxx


def backward_pass(lq, settings, n_u=None):
    """Riccati sweep over the LQ data, eliminating the state-input
    equalities by a null-space projection of the input at each node.

    Returns (k_dir, K, expected_decrease).
    """
    A, B, q, r, Q, R, eq, gx, gxx = lq
    n = len(A)
    nx = A.shape[1]
    nu = B.shape[2]
    S = gxx.copy()
    s = gx.copy()
    K_all = np.zeros((n, nu, nx))
    k_all = np.zeros((n, nu))
    expected = 0.0
    eye_u = np.eye(nu)
    for k in range(n - 1, -1, -1):
        Ak, Bk = A[k], B[k]
        Qx = q[k] + Ak.T @ s
        Qu = r[k] + Bk.T @ s
        Qxx = Q[k] + Ak.T @ S @ Ak
        Quu = R[k] + Bk.T @ S @ Bk
        Qux = Bk.T @ S @ Ak
        c, Gx, Gu = eq[k]
        m = c.shape[0]
        if m:
            # One QR of Gu^T yields the pseudo-inverse (full row rank) and
            # an orthonormal null-space basis together.
            Qg, Rg = qr(Gu.T, mode="full")
            Rm = Rg[:m, :m]
            Gu_pinv = Qg[:, :m] @ np.linalg.inv(Rm).T
            E = -Gu_pinv @ Gx
            e = -Gu_pinv @ c
            N = Qg[:, m:]
        else:
            E = np.zeros((nu, nx))
            e = np.zeros(nu)
            N = eye_u
        # Regularize the input Hessian until its null-space block factors.
        reg = 0.0
        while True:
            Hz = N.T @ (Quu + reg * eye_u) @ N
            try:
                cholesky(0.5 * (Hz + Hz.T), lower=True)
                break
            except np.linalg.LinAlgError:
                reg = settings.reg_init if reg == 0.0 else 2.0 * reg
                if reg > settings.reg_max:
                    raise RegularizationError(
                        f"input Hessian not positive definite at node {k}")
        Quu_r = Quu + reg * eye_u
        Hz = N.T @ Quu_r @ N
        Hz = 0.5 * (Hz + Hz.T)
        rhs_K = N.T @ (Quu_r @ E + Qux)
        rhs_k = N.T @ (Quu_r @ e + Qu)
        sol = np.linalg.solve(Hz, np.column_stack([rhs_K, rhs_k]))
        Kk = E - N @ sol[:, :nx]
        kk = e - N @ sol[:, nx]
        K_all[k] = Kk
        k_all[k] = kk
        expected += float(kk @ Qu + 0.5 * kk @ Quu_r @ kk)
        S_new = (Qxx + Kk.T @ Quu_r @ Kk + Kk.T @ Qux + Qux.T @ Kk)
        s_new = Qx + Kk.T @ Quu_r @ kk + Kk.T @ Qu + Qux.T @ kk
        S = 0.5 * (S_new + S_new.T)
        s = s_new
    return k_all, K_all, expected


def slq_solve(prob, x0=None, warm_start=None, settings=None):
    """Iterate rollout / LQ expansion / backward pass / line search.

    Non-convergence is reported in the result, not raised; divergence of
    the very first rollout propagates as RolloutDivergenceError.
    """
    if settings is None:
        settings = SolverSettings()
    if x0 is None:
        x0 = prob.x0
    t_start = time.perf_counter()
    times = prob.times
    if warm_start is not None:
        policy = warm_start.resampled(times)
    else:
        u_nodes = (prob.u_ref_nodes if prob.u_ref_nodes is not None
                   else np.zeros((len(times), prob.n_u)))
        policy = LinearPolicy.constant_input(times, u_nodes, x0)

    try:
        xs, us = rollout(prob, policy, x0, settings)
        needs_rescue = False
    except RolloutDivergenceError:
        # Keep the frozen-tail trajectory as a throwaway nominal; the line
        # search only ever accepts proper rollouts that beat its merit.
        xs, us = rollout(prob, policy, x0, settings, truncate=True)
        needs_rescue = True
    cost, merit, eq_norm, margin = evaluate_trajectory(prob, xs, us, settings)
    stats = [IterationStats(0, cost, merit, eq_norm, margin, 0.0)]
    accepted_policy = LinearPolicy(times=times.copy(), x_nom=xs.copy(),
                                   u_nom=us.copy(), K=policy.K)

    converged = False
    status = "max_iterations"
    for it in range(1, settings.max_iterations + 1):
        lq = lq_approximation(prob, xs, us, settings)
        try:
            k_dir, K, _expected = backward_pass(lq, settings)
        except RegularizationError as exc:
            if needs_rescue:
                raise RolloutDivergenceError(str(exc))
            status = f"regularization_failure: {exc}"
            break
        candidate = LinearPolicy(times=times.copy(), x_nom=xs.copy(),
                                 u_nom=us.copy(), K=K, k_dir=k_dir)
        alpha = 1.0
        accepted = False
        while alpha >= settings.line_search_min_step - 1e-12:
            try:
                xs_try, us_try = rollout(prob, candidate, x0, settings, alpha)
            except (RolloutDivergenceError, EulerSingularityError):
                alpha *= settings.line_search_factor
                continue
            cost_try, merit_try, eq_try, margin_try = evaluate_trajectory(
                prob, xs_try, us_try, settings)
            if merit_try < merit:
                accepted = True
                break
            alpha *= settings.line_search_factor
        if not accepted:
            if needs_rescue:
                raise RolloutDivergenceError(
                    "warm start diverged and no descent step recovered it")
            converged = True
            status = "no_descent_step"
            break
        needs_rescue = False
        decrease = merit - merit_try
        xs, us = xs_try, us_try
        cost, merit, eq_norm, margin = cost_try, merit_try, eq_try, margin_try
        stats.append(IterationStats(it, cost, merit, eq_norm, margin, alpha))
        accepted_policy = LinearPolicy(times=times.copy(), x_nom=xs.copy(),
                                       u_nom=us.copy(), K=K)
        if decrease < settings.tolerance * max(1.0, abs(merit)):
            converged = True
            status = "tolerance"
            break

    return SolveResult(policy=accepted_policy, x_nom=xs, u_nom=us, cost=cost,
                       merit=merit, converged=converged, iterations=stats,
                       solve_time=time.perf_counter() - t_start,
                       status=status)


def mpc_step(problem_factory, x_measured, t_now, previous=None,
             settings=None):
    """One receding-horizon update.

    ``problem_factory(x, t)`` re-assembles the problem with a fresh gait
    schedule and shifted references. Warm-starts from the previous policy
    and runs a fixed small iteration budget; on solver failure the
    previous policy is kept and the result flagged degraded.
    """
    if settings is None:
        settings = SolverSettings()
    mpc_settings = SolverSettings(**{
        **{f: getattr(settings, f) for f in settings.__dataclass_fields__},
    })
    mpc_settings.max_iterations = settings.mpc_iterations
    prob = problem_factory(x_measured, t_now)
    attempts = []
    if previous is not None:
        attempts.append(("warm", previous.policy, mpc_settings))
        # Stale feedback gains are the usual divergence source after a
        # schedule change; the bare feedforward is a robust middle ground.
        ff_only = LinearPolicy(times=previous.policy.times.copy(),
                               x_nom=previous.policy.x_nom.copy(),
                               u_nom=previous.policy.u_nom.copy(),
                               K=np.zeros_like(previous.policy.K))
        attempts.append(("warm_ff", ff_only, mpc_settings))
    cold_settings = SolverSettings(**{
        f: getattr(mpc_settings, f) for f in mpc_settings.__dataclass_fields__})
    cold_settings.max_iterations = max(6, 2 * settings.mpc_iterations)
    attempts.append(("cold", None, cold_settings))

    for label, warm, st in attempts:
        try:
            result = slq_solve(prob, x_measured, warm_start=warm, settings=st)
            if label != "warm":
                result.status = f"{label}:{result.status}"
            return result, prob
        except (RolloutDivergenceError, EulerSingularityError):
            continue
    if previous is None:
        raise RolloutDivergenceError("no stable policy found from cold start")
    degraded = SolveResult(
        policy=previous.policy, x_nom=previous.x_nom,
        u_nom=previous.u_nom, cost=np.nan, merit=np.nan,
        converged=False, iterations=[], degraded=True,
        status="fallback_previous_policy")
    return degraded, prob

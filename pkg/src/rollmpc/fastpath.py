"""JIT-compiled single-sample dynamics used by rollouts and the plant loop.

The reference implementation in ``model.srbd_derivative`` is batched numpy
and stays the source of truth; this module mirrors it with explicit scalar
arithmetic for speed. Tests assert the two paths agree to machine
precision. Falls back to the numpy path when numba is unavailable.
"""

from dataclasses import dataclass

import numpy as np

from . import model as _model

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    _HAVE_NUMBA = False


def _srbd_core(x, u, mass, inertia, inertia_inv, hips, l1, l2, r_wheel,
               normal, grav, f_ext):
    out = np.zeros(24, dtype=x.dtype)
    cr, sr = np.cos(x[0]), np.sin(x[0])
    cp, sp = np.cos(x[1]), np.sin(x[1])
    cy, sy = np.cos(x[2]), np.sin(x[2])

    # World-from-body rotation, row major.
    r00 = cy * cp
    r01 = cy * sp * sr - sy * cr
    r02 = cy * sp * cr + sy * sr
    r10 = sy * cp
    r11 = sy * sp * sr + cy * cr
    r12 = sy * sp * cr - cy * sr
    r20 = -sp
    r21 = cp * sr
    r22 = cp * cr

    wx_, wy_, wz_ = x[6], x[7], x[8]
    tp = sp / cp
    out[0] = wx_ + sr * tp * wy_ + cr * tp * wz_
    out[1] = cr * wy_ - sr * wz_
    out[2] = (sr * wy_ + cr * wz_) / cp

    vx, vy, vz = x[9], x[10], x[11]
    out[3] = r00 * vx + r01 * vy + r02 * vz
    out[4] = r10 * vx + r11 * vy + r12 * vz
    out[5] = r20 * vx + r21 * vy + r22 * vz

    # Terrain normal in the body frame (R^T n).
    nbx = r00 * normal[0] + r10 * normal[1] + r20 * normal[2]
    nby = r01 * normal[0] + r11 * normal[1] + r21 * normal[2]
    nbz = r02 * normal[0] + r12 * normal[1] + r22 * normal[2]

    tq0 = x[0] * 0.0
    tq1 = tq0
    tq2 = tq0
    fbx_sum = tq0
    fby_sum = tq0
    fbz_sum = tq0
    for leg in range(4):
        q1 = x[12 + 3 * leg]
        q2 = x[13 + 3 * leg]
        q3 = x[14 + 3 * leg]
        s1, c1 = np.sin(q1), np.cos(q1)
        wxl = -l1 * np.sin(q2) - l2 * np.sin(q2 + q3)
        wzl = -l1 * np.cos(q2) - l2 * np.cos(q2 + q3)
        cbx = hips[leg, 0] + wxl - r_wheel * nbx
        cby = hips[leg, 1] - s1 * wzl - r_wheel * nby
        cbz = hips[leg, 2] + c1 * wzl - r_wheel * nbz
        lx, ly, lz = u[3 * leg], u[3 * leg + 1], u[3 * leg + 2]
        fbx = r00 * lx + r10 * ly + r20 * lz
        fby = r01 * lx + r11 * ly + r21 * lz
        fbz = r02 * lx + r12 * ly + r22 * lz
        tq0 += cby * fbz - cbz * fby
        tq1 += cbz * fbx - cbx * fbz
        tq2 += cbx * fby - cby * fbx
        fbx_sum += fbx
        fby_sum += fby
        fbz_sum += fbz

    iw0 = inertia[0, 0] * wx_ + inertia[0, 1] * wy_ + inertia[0, 2] * wz_
    iw1 = inertia[1, 0] * wx_ + inertia[1, 1] * wy_ + inertia[1, 2] * wz_
    iw2 = inertia[2, 0] * wx_ + inertia[2, 1] * wy_ + inertia[2, 2] * wz_
    m0 = tq0 - (wy_ * iw2 - wz_ * iw1)
    m1 = tq1 - (wz_ * iw0 - wx_ * iw2)
    m2 = tq2 - (wx_ * iw1 - wy_ * iw0)
    out[6] = inertia_inv[0, 0] * m0 + inertia_inv[0, 1] * m1 + inertia_inv[0, 2] * m2
    out[7] = inertia_inv[1, 0] * m0 + inertia_inv[1, 1] * m1 + inertia_inv[1, 2] * m2
    out[8] = inertia_inv[2, 0] * m0 + inertia_inv[2, 1] * m1 + inertia_inv[2, 2] * m2

    fbx_sum += r00 * f_ext[0] + r10 * f_ext[1] + r20 * f_ext[2]
    fby_sum += r01 * f_ext[0] + r11 * f_ext[1] + r21 * f_ext[2]
    fbz_sum += r02 * f_ext[0] + r12 * f_ext[1] + r22 * f_ext[2]
    out[9] = -r20 * grav + fbx_sum / mass
    out[10] = -r21 * grav + fby_sum / mass
    out[11] = -r22 * grav + fbz_sum / mass

    for j in range(12):
        out[12 + j] = u[12 + j]
    return out


def _rk4_core(x, u, dt, mass, inertia, inertia_inv, hips, l1, l2, r_wheel,
              normal, grav, f_ext):
    k1 = _srbd_core(x, u, mass, inertia, inertia_inv, hips, l1, l2, r_wheel,
                    normal, grav, f_ext)
    k2 = _srbd_core(x + 0.5 * dt * k1, u, mass, inertia, inertia_inv, hips,
                    l1, l2, r_wheel, normal, grav, f_ext)
    k3 = _srbd_core(x + 0.5 * dt * k2, u, mass, inertia, inertia_inv, hips,
                    l1, l2, r_wheel, normal, grav, f_ext)
    k4 = _srbd_core(x + dt * k3, u, mass, inertia, inertia_inv, hips, l1, l2,
                    r_wheel, normal, grav, f_ext)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _contact_rows_core(x, u, flags, crefs, hips, l1, l2, normal):
    """Stacked contact equality residuals for one node.

    Row layout: two rows (lateral, normal velocity) per stance leg in leg
    order, then four rows (force x/y/z, normal velocity minus the swing
    reference) per swing leg. Dtype follows the inputs so the same code
    serves complex-step differentiation.
    """
    n_st = 0
    n_sw = 0
    for leg in range(4):
        if flags[leg] == 1:
            n_st += 1
        else:
            n_sw += 1
    out = np.zeros(2 * n_st + 4 * n_sw, dtype=x.dtype)

    cr, sr = np.cos(x[0]), np.sin(x[0])
    cp, sp = np.cos(x[1]), np.sin(x[1])
    cy, sy = np.cos(x[2]), np.sin(x[2])
    r00 = cy * cp
    r01 = cy * sp * sr - sy * cr
    r02 = cy * sp * cr + sy * sr
    r10 = sy * cp
    r11 = sy * sp * sr + cy * cr
    r12 = sy * sp * cr - cy * sr
    r20 = -sp
    r21 = cp * sr
    r22 = cp * cr
    wx_, wy_, wz_ = x[6], x[7], x[8]
    vx, vy, vz = x[9], x[10], x[11]
    nx, ny, nz = normal[0], normal[1], normal[2]

    row_st = 0
    row_sw = 2 * n_st
    for leg in range(4):
        q1 = x[12 + 3 * leg]
        q2 = x[13 + 3 * leg]
        q3 = x[14 + 3 * leg]
        s1, c1 = np.sin(q1), np.cos(q1)
        s2, c2 = np.sin(q2), np.cos(q2)
        s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
        wxl = -l1 * s2 - l2 * s23
        wzl = -l1 * c2 - l2 * c23
        ax = hips[leg, 0] + wxl
        ay = hips[leg, 1] - s1 * wzl
        az = hips[leg, 2] + c1 * wzl
        # Axle Jacobian columns.
        j1y, j1z = -c1 * wzl, -s1 * wzl
        wx2 = -l1 * c2 - l2 * c23
        wx3 = -l2 * c23
        wz2 = l1 * s2 + l2 * s23
        wz3 = l2 * s23
        u1, u2, u3 = u[12 + 3 * leg], u[13 + 3 * leg], u[14 + 3 * leg]
        relx = (vx + wy_ * az - wz_ * ay) + wx2 * u2 + wx3 * u3
        rely = (vy + wz_ * ax - wx_ * az) + j1y * u1 - s1 * wz2 * u2 - s1 * wz3 * u3
        relz = (vz + wx_ * ay - wy_ * ax) + j1z * u1 + c1 * wz2 * u2 + c1 * wz3 * u3
        vex = r00 * relx + r01 * rely + r02 * relz
        vey = r10 * relx + r11 * rely + r12 * relz
        vez = r20 * relx + r21 * rely + r22 * relz
        vn = vex * nx + vey * ny + vez * nz
        if flags[leg] == 1:
            # Rolling direction: (R axis) x n, normalized; lateral = n x roll.
            awx = r01 * c1 + r02 * s1
            awy = r11 * c1 + r12 * s1
            awz = r21 * c1 + r22 * s1
            rx = awy * nz - awz * ny
            ry = awz * nx - awx * nz
            rz = awx * ny - awy * nx
            rn = np.sqrt(rx * rx + ry * ry + rz * rz)
            rx, ry, rz = rx / rn, ry / rn, rz / rn
            lx = ny * rz - nz * ry
            ly = nz * rx - nx * rz
            lz = nx * ry - ny * rx
            out[row_st] = lx * vex + ly * vey + lz * vez
            out[row_st + 1] = vn
            row_st += 2
        else:
            out[row_sw] = u[3 * leg]
            out[row_sw + 1] = u[3 * leg + 1]
            out[row_sw + 2] = u[3 * leg + 2]
            out[row_sw + 3] = vn - crefs[leg]
            row_sw += 4
    return out


def _contact_gu_core(x, flags, hips, l1, l2, normal):
    """Input Jacobian of _contact_rows_core (the rows are affine in u)."""
    n_st = 0
    for leg in range(4):
        if flags[leg] == 1:
            n_st += 1
    m = 2 * n_st + 4 * (4 - n_st)
    Gu = np.zeros((m, 24))

    cr, sr = np.cos(x[0]), np.sin(x[0])
    cp, sp = np.cos(x[1]), np.sin(x[1])
    cy, sy = np.cos(x[2]), np.sin(x[2])
    r00 = cy * cp
    r01 = cy * sp * sr - sy * cr
    r02 = cy * sp * cr + sy * sr
    r10 = sy * cp
    r11 = sy * sp * sr + cy * cr
    r12 = sy * sp * cr - cy * sr
    r20 = -sp
    r21 = cp * sr
    r22 = cp * cr
    nx, ny, nz = normal[0], normal[1], normal[2]

    row_st = 0
    row_sw = 2 * n_st
    for leg in range(4):
        q1 = x[12 + 3 * leg]
        q2 = x[13 + 3 * leg]
        q3 = x[14 + 3 * leg]
        s1, c1 = np.sin(q1), np.cos(q1)
        s2, c2 = np.sin(q2), np.cos(q2)
        s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
        wzl = -l1 * c2 - l2 * c23
        j1y, j1z = -c1 * wzl, -s1 * wzl
        wx2 = -l1 * c2 - l2 * c23
        wx3 = -l2 * c23
        wz2 = l1 * s2 + l2 * s23
        wz3 = l2 * s23
        # World-frame axle Jacobian columns R @ J.
        c1x = r01 * j1y + r02 * j1z
        c1y = r11 * j1y + r12 * j1z
        c1z = r21 * j1y + r22 * j1z
        c2x = r00 * wx2 - r01 * s1 * wz2 + r02 * c1 * wz2
        c2y = r10 * wx2 - r11 * s1 * wz2 + r12 * c1 * wz2
        c2z = r20 * wx2 - r21 * s1 * wz2 + r22 * c1 * wz2
        c3x = r00 * wx3 - r01 * s1 * wz3 + r02 * c1 * wz3
        c3y = r10 * wx3 - r11 * s1 * wz3 + r12 * c1 * wz3
        c3z = r20 * wx3 - r21 * s1 * wz3 + r22 * c1 * wz3
        col = 12 + 3 * leg
        if flags[leg] == 1:
            awx = r01 * c1 + r02 * s1
            awy = r11 * c1 + r12 * s1
            awz = r21 * c1 + r22 * s1
            rx = awy * nz - awz * ny
            ry = awz * nx - awx * nz
            rz = awx * ny - awy * nx
            rn = np.sqrt(rx * rx + ry * ry + rz * rz)
            rx, ry, rz = rx / rn, ry / rn, rz / rn
            lx = ny * rz - nz * ry
            ly = nz * rx - nx * rz
            lz = nx * ry - ny * rx
            Gu[row_st, col] = lx * c1x + ly * c1y + lz * c1z
            Gu[row_st, col + 1] = lx * c2x + ly * c2y + lz * c2z
            Gu[row_st, col + 2] = lx * c3x + ly * c3y + lz * c3z
            Gu[row_st + 1, col] = nx * c1x + ny * c1y + nz * c1z
            Gu[row_st + 1, col + 1] = nx * c2x + ny * c2y + nz * c2z
            Gu[row_st + 1, col + 2] = nx * c3x + ny * c3y + nz * c3z
            row_st += 2
        else:
            Gu[row_sw, 3 * leg] = 1.0
            Gu[row_sw + 1, 3 * leg + 1] = 1.0
            Gu[row_sw + 2, 3 * leg + 2] = 1.0
            Gu[row_sw + 3, col] = nx * c1x + ny * c1y + nz * c1z
            Gu[row_sw + 3, col + 1] = nx * c2x + ny * c2y + nz * c2z
            Gu[row_sw + 3, col + 2] = nx * c3x + ny * c3y + nz * c3z
            row_sw += 4
    return Gu


def _cone_rows_core(u, flags, t1, t2, normal, mu, eps):
    """Friction-cone margins, force gradients and Hessians per stance leg."""
    n_st = 0
    for leg in range(4):
        if flags[leg] == 1:
            n_st += 1
    h = np.zeros(n_st)
    grad = np.zeros((n_st, 3))
    hess = np.zeros((n_st, 3, 3))
    i = 0
    for leg in range(4):
        if flags[leg] != 1:
            continue
        fx, fy, fz = u[3 * leg], u[3 * leg + 1], u[3 * leg + 2]
        f1 = fx * t1[0] + fy * t1[1] + fz * t1[2]
        f2 = fx * t2[0] + fy * t2[1] + fz * t2[2]
        fn = fx * normal[0] + fy * normal[1] + fz * normal[2]
        s = np.sqrt(f1 * f1 + f2 * f2 + eps * eps)
        h[i] = mu * fn - s
        for a in range(3):
            grad[i, a] = mu * normal[a] - (f1 * t1[a] + f2 * t2[a]) / s
        # -T (I - p p^T / s^2) T^T / s with T = [t1 t2]
        m00 = (1.0 - f1 * f1 / (s * s)) / s
        m01 = (-f1 * f2 / (s * s)) / s
        m11 = (1.0 - f2 * f2 / (s * s)) / s
        for a in range(3):
            for b in range(3):
                hess[i, a, b] = -(t1[a] * m00 * t1[b] + t1[a] * m01 * t2[b]
                                  + t2[a] * m01 * t1[b] + t2[a] * m11 * t2[b])
        i += 1
    return h, grad, hess


if _HAVE_NUMBA:
    _srbd_core = numba.njit(cache=True)(_srbd_core)
    _rk4_core = numba.njit(cache=True)(_rk4_core)
    _contact_rows_core = numba.njit(cache=True)(_contact_rows_core)
    _contact_gu_core = numba.njit(cache=True)(_contact_gu_core)
    _cone_rows_core = numba.njit(cache=True)(_cone_rows_core)


@dataclass
class DynamicsRuntime:
    """Packs model and terrain parameters for the jitted dynamics core."""

    model: _model.RobotModel
    terrain: _model.Terrain

    def __post_init__(self):
        m = self.model
        self._args = (float(m.mass), np.ascontiguousarray(m.inertia),
                      np.ascontiguousarray(m._inertia_inv),
                      np.ascontiguousarray(m.hip_offsets),
                      float(m.thigh_length), float(m.shank_length),
                      float(m.wheel_radius),
                      np.ascontiguousarray(self.terrain.normal),
                      float(m.gravity))
        self._zero_force = np.zeros(3)

    def derivative(self, x, u, external_force=None):
        f = self._zero_force if external_force is None else external_force
        return _srbd_core(x, u, *self._args, f)

    def rk4_step(self, x, u, dt, external_force=None):
        f = self._zero_force if external_force is None else external_force
        return _rk4_core(x, u, dt, *self._args, f)

    def derivative_batch(self, x, u, external_force=None):
        """Batched, complex-safe path (delegates to the reference model)."""
        return _model.srbd_derivative(self.model, x, u, self.terrain,
                                      external_force=external_force)

    def step_map_jacobians(self, xs, us, dts):
        """Exact sensitivities of the RK4 step map at each node.

        ``xs``/``us`` are (N, 24) node values and ``dts`` the interval
        lengths. Analytic continuous Jacobians at the four stage points are
        chained through the integrator, so the result is the derivative of
        the discrete map itself. Returns (A, B) with shapes (N, 24, 24).
        """
        xs = np.asarray(xs, dtype=float)
        us = np.asarray(us, dtype=float)
        dt = np.asarray(dts, dtype=float)[:, None]
        k1 = self.derivative_batch(xs, us)
        s2 = xs + 0.5 * dt * k1
        k2 = self.derivative_batch(s2, us)
        s3 = xs + 0.5 * dt * k2
        k3 = self.derivative_batch(s3, us)
        s4 = xs + dt * k3

        stages = np.stack([xs, s2, s3, s4], axis=0)
        A_c, B_c = _model.srbd_jacobians(self.model, stages,
                                         us[None, :, :], self.terrain)
        dt_ = dt[None, :, :, None]
        eye = np.eye(_model.STATE_DIM)
        D1, E1 = A_c[0], B_c[0]
        D2 = A_c[1] @ (eye + 0.5 * dt_[0] * D1)
        E2 = A_c[1] @ (0.5 * dt_[0] * E1) + B_c[1]
        D3 = A_c[2] @ (eye + 0.5 * dt_[0] * D2)
        E3 = A_c[2] @ (0.5 * dt_[0] * E2) + B_c[2]
        D4 = A_c[3] @ (eye + dt_[0] * D3)
        E4 = A_c[3] @ (dt_[0] * E3) + B_c[3]
        A = eye + (dt_[0] / 6.0) * (D1 + 2.0 * D2 + 2.0 * D3 + D4)
        B = (dt_[0] / 6.0) * (E1 + 2.0 * E2 + 2.0 * E3 + E4)
        return A, B

    def warm_up(self):
        x = self.model.nominal_state()
        self.derivative(x, np.zeros(_model.INPUT_DIM))
        self.rk4_step(x, np.zeros(_model.INPUT_DIM), 0.01)

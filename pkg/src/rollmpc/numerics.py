"""Shared numerical helpers: exact differentiation, integration, time grids."""

import numpy as np

# Step size for complex-step differentiation. Far below sqrt(eps), which is
# safe because the method has no subtractive cancellation.
CS_STEP = 1e-30


def complex_step_jacobian(fun, z):
    """Jacobian of ``fun`` at ``z`` via complex-step differentiation.

    ``fun`` must accept a batch of inputs with shape (k, n) and return
    (k, m), and must be written with complex-safe numpy operations
    (no abs/comparison branching on perturbed values). The result is
    exact to machine precision.

    Returns an (m, n) array.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    batch = np.tile(z.astype(complex), (n, 1))
    batch[np.arange(n), np.arange(n)] += 1j * CS_STEP
    out = fun(batch)
    return np.imag(out).T / CS_STEP


def rk4_step(f, x, u, t, dt):
    """Classical fourth-order Runge-Kutta step with the input held constant."""
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def make_time_grid(horizon, dt):
    """Uniform grid over [0, horizon] at spacing ``dt``.

    If ``horizon`` is not an integer multiple of ``dt`` the final interval
    is shortened so the grid ends exactly at ``horizon``.
    """
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    n_full = int(np.floor(horizon / dt + 1e-9))
    grid = dt * np.arange(n_full + 1)
    if horizon - grid[-1] > 1e-9:
        grid = np.append(grid, horizon)
    else:
        grid[-1] = horizon
    return grid


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)

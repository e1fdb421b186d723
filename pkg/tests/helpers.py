"""Independent oracles shared by the test modules.

Everything here is deliberately written from first principles (axis-angle
rotations, the analytic Clohessy-Wiltshire solution, finite differences,
direct least-squares noise propagation) so it never reuses the code paths
it is checking.
"""

from __future__ import annotations

import numpy as np

from icpnav.attitude import quat_conj, quat_product_raw
from icpnav.dynamics import (
    I_ATT,
    I_BA,
    I_BG,
    I_R,
    I_V,
    N_STATES,
    NavState,
    OrbitParams,
    psi,
)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Unit quaternion (vector-first) for a rotation of `angle` about `axis`."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.array([*(np.sin(angle / 2.0) * axis), np.cos(angle / 2.0)])


def random_unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def rotation_angle_between(q1, q2) -> float:
    """Geodesic angle [rad] between two unit quaternions (sign-insensitive).

    Uses atan2 on the relative quaternion so angles far below 1e-8 rad
    remain resolvable (acos on the 4-dot loses them to round-off).
    """
    rel = quat_product_raw(np.asarray(q1, float), quat_conj(np.asarray(q2, float)))
    return 2.0 * np.arctan2(np.linalg.norm(rel[:3]), abs(rel[3]))


def cw_solution(r0, v0, n: float, t):
    """Analytic Clohessy-Wiltshire free-drift solution in the target frame.

    Frame convention: y points radially outward, z along the orbit
    normal, x completes the triad.  Solves x'' = 2n y', y'' = -2n x' +
    3n^2 y, z'' = -n^2 z, derived by direct integration of the linear
    system.  `t` may be an array; returns (r, v) with shape (len(t), 3).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x0, y0, z0 = r0
    vx0, vy0, vz0 = v0
    c, s = np.cos(n * t), np.sin(n * t)

    amp_c = 2.0 * vx0 / n - 3.0 * y0      # cosine amplitude of y
    amp_s = vy0 / n                       # sine amplitude of y
    y_off = 4.0 * y0 - 2.0 * vx0 / n      # constant offset of y
    drift = 6.0 * n * y0 - 3.0 * vx0      # secular rate of x

    x = x0 + drift * t + 2.0 * amp_c * s + 2.0 * amp_s * (1.0 - c)
    y = amp_c * c + amp_s * s + y_off
    z = z0 * c + (vz0 / n) * s
    vx = drift + 2.0 * amp_c * n * c + 2.0 * amp_s * n * s
    vy = -amp_c * n * s + amp_s * n * c
    vz = -z0 * n * s + vz0 * c
    return np.stack([x, y, z], axis=1), np.stack([vx, vy, vz], axis=1)


def cw_matrix_solution(r0, v0, n: float, t: float):
    """Same CW propagation through scipy's expm of the 6x6 linear system."""
    from scipy.linalg import expm

    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[4, 1] = 3.0 * n**2
    A[5, 2] = -(n**2)
    out = expm(A * t) @ np.concatenate([r0, v0])
    return out[:3], out[3:]


def error_state_derivative(nav: NavState, delta: np.ndarray, u_a, u_g,
                           orbit: OrbitParams) -> np.ndarray:
    """Exact time derivative of the 21-component error state.

    Builds the true state from the reference `nav` plus the error vector
    `delta`, differentiates both trajectories with the exact nonlinear
    kinematics (the reference propagating with the estimated biases), and
    returns d/dt of (delta_r, delta_v, q_tilde_v, delta_bg, delta_ba,
    delta_rho1, delta_rho2).
    """
    u_a = np.asarray(u_a, dtype=float)
    u_g = np.asarray(u_g, dtype=float)
    n_vec = orbit.n_vec
    n4 = np.array([*n_vec, 0.0])

    r = nav.r + delta[I_R]
    v = nav.v + delta[I_V]
    qtv = delta[I_ATT]
    q_tilde = np.array([*qtv, np.sqrt(1.0 - qtv @ qtv)])
    q = quat_product_raw(q_tilde, nav.q_ref)
    b_g = nav.b_g + delta[I_BG]
    b_a = nav.b_a + delta[I_BA]

    def rot(qq):
        from icpnav.attitude import quat_to_rot
        return quat_to_rot(qq / np.linalg.norm(qq))

    def qdot(qq, omega):
        w4 = np.array([*omega, 0.0])
        return 0.5 * quat_product_raw(w4, qq) - 0.5 * quat_product_raw(qq, n4)

    dv_true = -2.0 * np.cross(n_vec, v) + psi(r, orbit) + rot(q) @ (u_a + b_a)
    dv_ref = -2.0 * np.cross(n_vec, nav.v) + psi(nav.r, orbit) \
        + rot(nav.q_ref) @ (u_a + nav.b_a)

    dq_true = qdot(q, u_g + b_g)
    dq_ref = qdot(nav.q_ref, u_g + nav.b_g)
    # d/dt (q ⊗ q_ref*) by the product rule; conjugation is linear.
    dq_tilde = quat_product_raw(dq_true, quat_conj(nav.q_ref)) \
        + quat_product_raw(q, quat_conj(dq_ref))

    out = np.zeros(N_STATES)
    out[I_R] = v - nav.v
    out[I_V] = dv_true - dv_ref
    out[I_ATT] = dq_tilde[:3]
    return out


def numerical_jacobian(fun, x0: np.ndarray, steps) -> np.ndarray:
    """Central-difference Jacobian of `fun` at `x0` with per-component steps."""
    x0 = np.asarray(x0, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x0.shape)
    f0 = np.asarray(fun(x0))
    J = np.zeros((f0.size, x0.size))
    for j in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += steps[j]
        xm[j] -= steps[j]
        J[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * steps[j])
    return J


def random_nav_state(rng, r_scale: float = 10.0) -> NavState:
    """Random but physically plausible operating point for Jacobian tests."""
    return NavState(
        r=rng.uniform(-r_scale, r_scale, 3),
        v=rng.uniform(-0.05, 0.05, 3),
        q_tilde_v=np.zeros(3),
        b_g=rng.uniform(-5e-4, 5e-4, 3),
        b_a=rng.uniform(-1e-2, 1e-2, 3),
        rho1=rng.uniform(-0.3, 0.3, 3),
        rho2=rng.uniform(-0.3, 0.3, 3),
        q_ref=random_unit_quat(rng),
    )


def relative_match(actual: np.ndarray, expected: np.ndarray, rtol: float,
                   floor: float = 1e-9) -> float:
    """Worst relative error over entries of `expected` larger than `floor`.

    Returns the max relative error (0 when nothing exceeds the floor);
    the caller asserts it against `rtol`.  Entries below the floor in
    `expected` must be below `floor + rtol` in `actual` too.
    """
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    big = np.abs(expected) > floor
    worst = 0.0
    if np.any(big):
        worst = float(np.max(np.abs(actual[big] - expected[big])
                             / np.abs(expected[big])))
    if np.any(~big):
        small_err = float(np.max(np.abs(actual[~big] - expected[~big])))
        assert small_err < 1e-6, f"near-zero entries disagree by {small_err}"
    assert worst <= rtol, f"relative mismatch {worst} > {rtol}"
    return worst

"""Relative translational/rotational dynamics and IMU-driven propagation.

Frames: the target (station) body frame rotates with the reference orbit
at rate ``n`` about ``k = [0, 0, 1]``, with the Earth-center direction
along ``j = [0, 1, 0]``.  ``r`` is the chaser-CoM position relative to
the target CoM in the target frame; the chaser attitude quaternion ``q``
maps chaser-frame vectors into the target frame via ``quat_to_rot(q)``.

The filter error state has 21 scalar components in the fixed order
(r, r_dot, q_tilde_v, b_g, b_a, rho1, rho2); the slices below are the
single source of truth for that layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attitude import quat_normalize, quat_product_raw, quat_to_rot

__all__ = [
    "MU_EARTH",
    "N_STATES",
    "I_R",
    "I_V",
    "I_ATT",
    "I_BG",
    "I_BA",
    "I_RHO1",
    "I_RHO2",
    "OrbitParams",
    "ImuSample",
    "ImuNoise",
    "NavState",
    "psi",
    "gamma",
    "f_full",
    "propagate_full",
    "propagate_state",
]

#: Earth gravitational parameter [m^3/s^2].
MU_EARTH = 3.98e14

#: Unit vectors fixing the target-frame geometry.
K_AXIS = np.array([0.0, 0.0, 1.0])

N_STATES = 21
I_R = slice(0, 3)
I_V = slice(3, 6)
I_ATT = slice(6, 9)
I_BG = slice(9, 12)
I_BA = slice(12, 15)
I_RHO1 = slice(15, 18)
I_RHO2 = slice(18, 21)

# Full integration vector layout: quaternion expanded to 4 components.
_F_R = slice(0, 3)
_F_V = slice(3, 6)
_F_Q = slice(6, 10)
_F_PAR = slice(10, 22)  # b_g, b_a, rho1, rho2
N_FULL = 22

_MIN_STATION_RADIUS = 6.371e6  # Earth radius [m]


@dataclass(frozen=True)
class OrbitParams:
    """Reference-orbit constants of the target station.

    ``n`` is the orbit rate magnitude along ``k``; ``r_e`` points from
    the Earth center to the station CoM (default direction j = [0,1,0]).
    """

    n: float
    n_dot: float
    r_e: np.ndarray
    mu: float = MU_EARTH

    def __post_init__(self):
        object.__setattr__(self, "r_e", np.asarray(self.r_e, dtype=float))
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")
        if np.linalg.norm(self.r_e) <= _MIN_STATION_RADIUS:
            raise ValueError("station radius must exceed the Earth radius")

    @classmethod
    def circular(cls, radius: float, mu: float = MU_EARTH) -> "OrbitParams":
        """Circular orbit of geocentric radius [m]: n^2 radius^3 = mu."""
        n = np.sqrt(mu / radius**3)
        return cls(n=n, n_dot=0.0, r_e=radius * np.array([0.0, 1.0, 0.0]), mu=mu)

    @property
    def n_vec(self) -> np.ndarray:
        return self.n * K_AXIS

    @property
    def is_circular(self) -> bool:
        re = np.linalg.norm(self.r_e)
        return self.n_dot == 0.0 and abs(self.n**2 * re**3 / self.mu - 1.0) < 1e-9


@dataclass(frozen=True)
class ImuSample:
    """One IMU record: accelerometer output u_a [m/s^2], gyro output u_g [rad/s]."""

    t: float
    u_a: np.ndarray
    u_g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_a", np.asarray(self.u_a, dtype=float))
        object.__setattr__(self, "u_g", np.asarray(self.u_g, dtype=float))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time IMU noise intensities.

    sigma_a, sigma_g: accelerometer/gyro white-noise densities; sigma_b:
    gyro-bias rate random walk.  sigma_ba is an optional accelerometer
    bias pseudo-walk applied to the filter process model only (the
    dynamics fix b_a_dot = 0, so it defaults to 0).
    """

    sigma_a: float = 1e-3
    sigma_g: float = 2e-4
    sigma_b: float = 1e-6
    sigma_ba: float = 0.0

    def __post_init__(self):
        if min(self.sigma_a, self.sigma_g, self.sigma_b, self.sigma_ba) < 0.0:
            raise ValueError("noise intensities must be non-negative")


@dataclass
class NavState:
    """Filter state: 21 error-state components plus the reference quaternion.

    ``q_tilde_v`` is the multiplicative attitude-error vector part and is
    exactly zero between measurement updates; the attitude lives in
    ``q_ref``.
    """

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_tilde_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_ref: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        for name in ("r", "v", "q_tilde_v", "b_g", "b_a", "rho1", "rho2", "q_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    def copy(self) -> "NavState":
        return NavState(self.r, self.v, self.q_tilde_v, self.b_g, self.b_a,
                        self.rho1, self.rho2, self.q_ref)

    def error_vector(self) -> np.ndarray:
        """The 21 ordered scalar states (r, v, q_tilde_v, b_g, b_a, rho1, rho2)."""
        out = np.empty(N_STATES)
        out[I_R] = self.r
        out[I_V] = self.v
        out[I_ATT] = self.q_tilde_v
        out[I_BG] = self.b_g
        out[I_BA] = self.b_a
        out[I_RHO1] = self.rho1
        out[I_RHO2] = self.rho2
        return out

    def full_vector(self) -> np.ndarray:
        """22-component integration vector [r, v, q_ref, b_g, b_a, rho1, rho2]."""
        out = np.empty(N_FULL)
        out[_F_R] = self.r
        out[_F_V] = self.v
        out[_F_Q] = self.q_ref
        out[10:13] = self.b_g
        out[13:16] = self.b_a
        out[16:19] = self.rho1
        out[19:22] = self.rho2
        return out

    @classmethod
    def from_full_vector(cls, x: np.ndarray, q_tilde_v=None) -> "NavState":
        x = np.asarray(x, dtype=float)
        return cls(r=x[_F_R], v=x[_F_V],
                   q_tilde_v=np.zeros(3) if q_tilde_v is None else q_tilde_v,
                   b_g=x[10:13], b_a=x[13:16], rho1=x[16:19], rho2=x[19:22],
                   q_ref=x[_F_Q])


def psi(r, orbit: OrbitParams) -> np.ndarray:
    """Orbital-mechanics plus rotating-frame acceleration at relative position r.

    ``psi(r) = mu (r_e/|r_e|^3 - (r+r_e)/|r+r_e|^3) - n x (n x r) - n_dot x r``.
    Exactly zero at r = 0.
    """
    r = np.asarray(r, dtype=float)
    re = orbit.r_e
    rr = r + re
    nrr = np.linalg.norm(rr)
    if nrr < 1.0:
        raise ValueError("relative position coincides with the Earth center")
    n_vec = orbit.n_vec
    grav = orbit.mu * (re / np.linalg.norm(re) ** 3 - rr / nrr**3)
    return grav - np.cross(n_vec, np.cross(n_vec, r)) - orbit.n_dot * np.cross(K_AXIS, r)


def gamma(orbit: OrbitParams) -> np.ndarray:
    """Jacobian of :func:`psi` at r = 0.

    ``(mu/|r_e|^3)(2I + 3[j x]^2) - n^2 [k x]^2 - n_dot [k x]``; reduces
    to diag(0, 3n^2, -n^2) for a circular orbit with j = [0, 1, 0].
    """
    from .attitude import skew

    re_norm = np.linalg.norm(orbit.r_e)
    j = orbit.r_e / re_norm
    sj = skew(j)
    sk = skew(K_AXIS)
    return (orbit.mu / re_norm**3) * (2.0 * np.eye(3) + 3.0 * sj @ sj) \
        - orbit.n**2 * (sk @ sk) - orbit.n_dot * sk


def f_full(x: np.ndarray, u_a: np.ndarray, u_g: np.ndarray,
           orbit: OrbitParams) -> np.ndarray:
    """Zero-noise state derivative of the 22-component integration vector.

    The IMU-space inputs combine with the state's own biases:
    specific force = u_a + b_a, angular rate = u_g + b_g.  Parameter
    derivatives (b_a, rho1, rho2, and b_g without noise) are zero.
    """
    r = x[_F_R]
    v = x[_F_V]
    q = x[_F_Q]
    b_g = x[10:13]
    b_a = x[13:16]

    n_vec = orbit.n_vec
    # Rotation of a non-unit integrator-intermediate quaternion: use the
    # normalized direction for the specific-force mapping.
    A = quat_to_rot(q / np.linalg.norm(q))
    accel = -2.0 * np.cross(n_vec, v) + psi(r, orbit) + A @ (u_a + b_a)

    omega = u_g + b_g
    n4 = np.array([n_vec[0], n_vec[1], n_vec[2], 0.0])
    w4 = np.array([omega[0], omega[1], omega[2], 0.0])
    q_dot = 0.5 * quat_product_raw(w4, q) - 0.5 * quat_product_raw(q, n4)

    out = np.zeros(N_FULL)
    out[_F_R] = v
    out[_F_V] = accel
    out[_F_Q] = q_dot
    return out


def propagate_full(x: np.ndarray, u_a, u_g, dt: float,
                   orbit: OrbitParams) -> np.ndarray:
    """One classical RK4 step of :func:`f_full` with zero-order-held IMU inputs.

    The quaternion is renormalized after the step and the parameter block
    is copied through bit-for-bit.
    """
    if not 0.0 < dt <= 1.0:
        raise ValueError(f"dt must lie in (0, 1] s, got {dt}")
    u_a = np.asarray(u_a, dtype=float)
    u_g = np.asarray(u_g, dtype=float)
    k1 = f_full(x, u_a, u_g, orbit)
    k2 = f_full(x + 0.5 * dt * k1, u_a, u_g, orbit)
    k3 = f_full(x + 0.5 * dt * k2, u_a, u_g, orbit)
    k4 = f_full(x + dt * k3, u_a, u_g, orbit)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[_F_Q] = quat_normalize(out[_F_Q])
    out[_F_PAR] = x[_F_PAR]
    return out


def propagate_state(nav: NavState, imu: ImuSample, dt: float,
                    orbit: OrbitParams) -> NavState:
    """Propagate a :class:`NavState` over dt driven by one IMU sample.

    Integrates the reference trajectory (r, v, q_ref) with the state's
    estimated biases; q_tilde_v is carried through unchanged (zero
    between updates) and parameters are untouched.
    """
    x = propagate_full(nav.full_vector(), imu.u_a, imu.u_g, dt, orbit)
    return NavState.from_full_vector(x, q_tilde_v=nav.q_tilde_v.copy())

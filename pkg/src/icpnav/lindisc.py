"""Continuous-time linearization (F, G) and discretization (Phi, Q_k).

Two interchangeable discretizations are provided: the closed-form
first-order covariance assembly (the production path, no matrix
exponential required) and the van Loan method (exact for the frozen
linear model; used as the numerical oracle).  The closed form is
reproduced exactly as published, including its Q_23/Q_24 sub-blocks
whose lower-order terms do not agree with the van Loan result; the
discrepancy is characterized by the test suite rather than patched here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .attitude import quat_to_rot, skew
from .dynamics import (
    I_ATT,
    I_BA,
    I_BG,
    I_R,
    I_V,
    K_AXIS,
    N_STATES,
    ImuNoise,
    NavState,
    OrbitParams,
    gamma,
)
from .errors import NumericError

__all__ = [
    "DiscreteModel",
    "build_F",
    "build_G",
    "sigma_imu",
    "phi_first_order",
    "q_closed_form",
    "van_loan",
    "discretize",
]

I3 = np.eye(3)


@dataclass(frozen=True)
class DiscreteModel:
    """One-step discrete model: transition matrix and process noise covariance."""

    Phi: np.ndarray
    Q: np.ndarray
    dt: float


def build_F(nav: NavState, u_a, u_g, orbit: OrbitParams) -> np.ndarray:
    """21x21 continuous error-dynamics matrix at the operating point.

    Block rows (columns ordered r, v, q_tilde_v, b_g, b_a, rho1, rho2):
    r-row couples to v; the v-row is [Gamma, -2n[k x], -2*A_bar[(u_a+b_a) x],
    0, A_bar, 0, 0]; the attitude row is [0, 0, -[(u_g+b_g) x], I/2, 0, 0, 0];
    all parameter rows are zero.
    """
    u_a = np.asarray(u_a, dtype=float)
    u_g = np.asarray(u_g, dtype=float)
    A_bar = quat_to_rot(nav.q_ref)
    a_hat = u_a + nav.b_a
    w_hat = u_g + nav.b_g

    F = np.zeros((N_STATES, N_STATES))
    F[I_R, I_V] = I3
    F[I_V, I_R] = gamma(orbit)
    F[I_V, I_V] = -2.0 * orbit.n * skew(K_AXIS)
    F[I_V, I_ATT] = -2.0 * A_bar @ skew(a_hat)
    F[I_V, I_BA] = A_bar
    F[I_ATT, I_ATT] = -skew(w_hat)
    F[I_ATT, I_BG] = 0.5 * I3
    return F


def build_G(q_ref) -> np.ndarray:
    """21x9 noise input map for channels ordered (eps_a, eps_g, eps_b)."""
    A_bar = quat_to_rot(q_ref)
    G = np.zeros((N_STATES, 9))
    G[I_V, 0:3] = A_bar
    G[I_ATT, 3:6] = 0.5 * I3
    G[I_BG, 6:9] = I3
    return G


def sigma_imu(noise: ImuNoise) -> np.ndarray:
    """9x9 continuous process noise covariance diag(sa^2 I, sg^2 I, sb^2 I)."""
    return np.diag(np.repeat([noise.sigma_a**2, noise.sigma_g**2,
                              noise.sigma_b**2], 3))


def phi_first_order(F: np.ndarray, dt: float) -> np.ndarray:
    """First-order transition matrix ``I + dt F``."""
    return np.eye(F.shape[0]) + dt * F


def q_closed_form(nav: NavState, u_a, u_g, noise: ImuNoise,
                  orbit: OrbitParams, dt: float) -> np.ndarray:
    """Closed-form one-step process noise covariance (21x21).

    Assembles the published sub-blocks over (r, v, q_tilde_v, b_g)
    verbatim and mirrors the upper triangle; rho rows/columns are zero.
    The optional b_a pseudo-walk (noise.sigma_ba) adds sigma_ba^2 dt I to
    the b_a diagonal block.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u_a = np.asarray(u_a, dtype=float)
    u_g = np.asarray(u_g, dtype=float)
    A = quat_to_rot(nav.q_ref)
    Sa = skew(u_a + nav.b_a)
    Sg = skew(u_g + nav.b_g)
    Sk = skew(K_AXIS)
    sa2, sg2, sb2 = noise.sigma_a**2, noise.sigma_g**2, noise.sigma_b**2
    t, n = dt, orbit.n

    Q11 = (sa2 * t**3 / 3.0) * I3
    Q12 = sa2 * (0.5 * t**2 * I3 + (2.0 / 3.0) * t**3 * n * Sk)
    Q22 = sa2 * (t * I3 - (4.0 / 3.0) * t**3 * n**2 * (Sk @ Sk)) \
        + (sb2 * t**3 / 3.0) * I3 \
        - (sg2 * t**3 / 3.0) * A @ Sa @ Sa @ A.T
    Q23 = sg2 * A @ ((t**3 / 6.0) * Sa @ Sg + 0.25 * t * Sa)
    Q24 = 0.25 * sb2 * t**2 * A
    Q33 = sg2 * (0.25 * t * I3 - (t**3 / 12.0) * Sg @ Sg)
    Q44 = sb2 * t * I3

    Q = np.zeros((N_STATES, N_STATES))
    Q[I_R, I_R] = Q11
    Q[I_R, I_V] = Q12
    Q[I_V, I_R] = Q12.T
    Q[I_V, I_V] = Q22
    Q[I_V, I_ATT] = Q23
    Q[I_ATT, I_V] = Q23.T
    Q[I_V, I_BG] = Q24
    Q[I_BG, I_V] = Q24.T
    Q[I_ATT, I_ATT] = Q33
    Q[I_BG, I_BG] = Q44
    Q[I_BA, I_BA] = noise.sigma_ba**2 * t * I3
    return 0.5 * (Q + Q.T)


def van_loan(F: np.ndarray, G: np.ndarray, Sigma: np.ndarray,
             dt: float) -> DiscreteModel:
    """Joint (Phi, Q) discretization via one augmented matrix exponential.

    Builds ``Lambda = [[-F, G Sigma G^T], [0, F^T]]``, exponentiates over
    dt, and returns ``Phi = Psi_22^T`` and ``Q = Psi_22^T Psi_12``
    (symmetrized).  Exact for the frozen linear model to the accuracy of
    the scaling-and-squaring exponential.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    W = G @ Sigma @ G.T
    Lam = np.zeros((2 * n, 2 * n))
    Lam[:n, :n] = -F
    Lam[:n, n:] = W
    Lam[n:, n:] = F.T
    if not np.all(np.isfinite(Lam)):
        raise NumericError("van Loan input contains non-finite entries")
    Psi = expm(Lam * dt)
    if not np.all(np.isfinite(Psi)):
        raise NumericError("matrix exponential overflowed")
    Phi = Psi[n:, n:].T
    Q = Phi @ Psi[:n, n:]
    Q = 0.5 * (Q + Q.T)
    return DiscreteModel(Phi=Phi, Q=Q, dt=dt)


def discretize(nav: NavState, u_a, u_g, noise: ImuNoise, orbit: OrbitParams,
               dt: float, method: str = "closed_form") -> DiscreteModel:
    """One-step discrete model at the operating point.

    ``closed_form`` pairs the first-order Phi with the published Q
    expression (production default); ``van_loan`` computes both through
    the augmented exponential.
    """
    F = build_F(nav, u_a, u_g, orbit)
    if method == "closed_form":
        Q = q_closed_form(nav, u_a, u_g, noise, orbit, dt)
        return DiscreteModel(Phi=phi_first_order(F, dt), Q=Q, dt=dt)
    if method == "van_loan":
        G = build_G(nav.q_ref)
        disc = van_loan(F, G, sigma_imu(noise), dt)
        if noise.sigma_ba > 0.0:
            Q = disc.Q.copy()
            Q[I_BA, I_BA] += noise.sigma_ba**2 * dt * I3
            disc = DiscreteModel(Phi=disc.Phi, Q=Q, dt=dt)
        return disc
    raise ValueError(f"unknown discretization method {method!r}")

"""Noise-adaptive multiplicative Kalman filter and the ICP integration loop.

The filter carries a 21-component error state around a reference
quaternion (multiplicative attitude error, reset after every accepted
update).  The 6-vector observation is the ICP fine-alignment pose
(translation, error-quaternion vector part).  The observation covariance
is estimated online from a sliding window of innovation or residual
outer products; a fault gate zeroes the Kalman gain whenever ICP fails
to converge or its output disagrees with the prediction beyond a
Mahalanobis threshold, in which case the filter coasts on the IMU.

A filter instance is a single logical sequence; distinct instances are
fully independent and may run in parallel.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .attitude import (
    lambda_matrix,
    quat_align_sign,
    quat_mul,
    quat_to_rot,
    skew,
)
from .dynamics import (
    I_ATT,
    I_BA,
    I_BG,
    I_R,
    I_RHO1,
    I_RHO2,
    I_V,
    N_STATES,
    ImuNoise,
    ImuSample,
    NavState,
    OrbitParams,
    propagate_state,
)
from .errors import DegenerateGeometryError, NumericError
from .icp import IcpResult, ModelSet, Pose, icp_register
from .lindisc import DiscreteModel, discretize

log = logging.getLogger(__name__)

__all__ = [
    "E_TH_DEFAULT",
    "FilterConfig",
    "FilterState",
    "FaultGate",
    "AdaptiveCov",
    "StepResult",
    "h_of_x",
    "build_H",
    "predict_pose",
    "measurement_from_pose",
    "innovation",
    "residual",
    "estimate_R",
    "innovation_covariance",
    "fault_detect",
    "kf_update",
    "kf_propagate",
    "navigation_step",
]

#: Default Mahalanobis pose gate: sqrt of the 99.9% chi-square quantile
#: for 6 degrees of freedom (threshold 22.458 on the squared form).
E_TH_DEFAULT = 4.7390


@dataclass(frozen=True)
class FaultGate:
    """ICP health thresholds: fit error, Mahalanobis pose gate, iteration cap."""

    eps_th: float
    e_th: float = E_TH_DEFAULT
    i_max: int = 30


@dataclass(frozen=True)
class FilterConfig:
    """Tunables of the adaptive filter.

    ``adapt`` selects the observation-covariance source: ``residual``
    (default; always yields a positive-definite estimate), ``innovation``
    (may need PSD clamping), or ``off`` (fixed R, the non-adaptive
    filter).  ``disc`` picks the covariance discretization path.
    """

    window: int = 30
    adapt: str = "residual"
    disc: str = "closed_form"
    noise: ImuNoise = field(default_factory=ImuNoise)
    R0: np.ndarray = field(default_factory=lambda: np.diag(
        [1e-6, 1e-6, 1e-6, 1e-7, 1e-7, 1e-7]))

    def __post_init__(self):
        object.__setattr__(self, "R0", np.asarray(self.R0, dtype=float))
        if self.adapt not in ("residual", "innovation", "off"):
            raise ValueError(f"unknown adaptive mode {self.adapt!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.R0.shape != (6, 6):
            raise ValueError("R0 must be 6x6")


@dataclass
class FilterState:
    """Estimate (NavState), covariance, and epoch counter."""

    nav: NavState
    P: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (N_STATES, N_STATES):
            raise ValueError("P must be 21x21")


class AdaptiveCov:
    """Sliding-window covariance estimator over innovation/residual vectors.

    Maintains the windowed mean of outer products recursively: a running
    mean while the buffer fills, then the sliding update
    ``C <- C + (e e^T - e_old e_old^T)/w``.  The recursion equals the
    batch mean of the buffered outer products at every step.  For the
    residual mode the H P_hat H^T term saved alongside the last update
    converts the windowed mean into an R estimate.
    """

    def __init__(self, window: int, c0: np.ndarray, mode: str = "residual",
                 hph: np.ndarray | None = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)
        self.mode = mode
        self.C_hat = np.asarray(c0, dtype=float).copy()
        self.hph = np.zeros((6, 6)) if hph is None else np.asarray(hph, float).copy()
        self._buffer: deque = deque(maxlen=window)

    @property
    def count(self) -> int:
        return len(self._buffer)

    def current(self) -> np.ndarray:
        """Windowed covariance for use at the current epoch (C0 until the
        first vector is absorbed)."""
        return self.C_hat.copy()

    def updated(self, e: np.ndarray, hph: np.ndarray | None = None) -> "AdaptiveCov":
        """New estimator state with `e` absorbed into the window."""
        e = np.asarray(e, dtype=float)
        out = AdaptiveCov(self.window, self.C_hat, self.mode, self.hph)
        out._buffer = self._buffer.copy()
        k = len(out._buffer) + 1
        outer = np.outer(e, e)
        if k <= self.window:
            out.C_hat = ((k - 1) / k) * out.C_hat + outer / k
        else:
            oldest = out._buffer[0]
            out.C_hat = out.C_hat + (outer - np.outer(oldest, oldest)) / self.window
        out._buffer.append(e.copy())
        if hph is not None:
            out.hph = np.asarray(hph, dtype=float).copy()
        return out

    def batch_mean(self) -> np.ndarray:
        """Direct mean of the buffered outer products (test oracle hook)."""
        if not self._buffer:
            return self.C_hat.copy()
        return sum(np.outer(e, e) for e in self._buffer) / len(self._buffer)


def h_of_x(nav: NavState) -> np.ndarray:
    """Nonlinear observation: predicted ICP pose from the state.

    First block: ``A(q_tilde ⊗ q_ref)^T (r - rho2) + rho1`` with the full
    multiplicative composition; second block: the error-quaternion vector
    part itself.
    """
    qtv = nav.q_tilde_v
    nrm2 = qtv @ qtv
    if nrm2 >= 1.0:
        raise NumericError("attitude error vector left the unit ball")
    q_tilde = np.array([qtv[0], qtv[1], qtv[2], np.sqrt(1.0 - nrm2)])
    q = quat_mul(q_tilde, nav.q_ref)
    out = np.empty(6)
    out[:3] = quat_to_rot(q).T @ (nav.r - nav.rho2) + nav.rho1
    out[3:] = qtv
    return out


def build_H(nav: NavState) -> np.ndarray:
    """6x21 observation sensitivity at the operating point (q_tilde = 0).

    Row block 1: ``[A^T, 0, 2[(A^T(r - rho2)) x], 0, 0, I, -A^T]``;
    row block 2 selects q_tilde_v.  Columns follow the NavState order.
    """
    A_bar = quat_to_rot(nav.q_ref)
    lever = A_bar.T @ (nav.r - nav.rho2)
    H = np.zeros((6, N_STATES))
    H[0:3, I_R] = A_bar.T
    H[0:3, I_ATT] = 2.0 * skew(lever)
    H[0:3, I_RHO1] = np.eye(3)
    H[0:3, I_RHO2] = -A_bar.T
    H[3:6, I_ATT] = np.eye(3)
    return H


def predict_pose(nav: NavState) -> Pose:
    """Coarse alignment from the state prediction: (q_ref, h1(x))."""
    return Pose(nav.q_ref.copy(), h_of_x(nav)[:3])


def measurement_from_pose(pose: Pose, q_ref: np.ndarray) -> np.ndarray:
    """6-vector observation from an ICP fine alignment.

    The measured quaternion is hemisphere-aligned to the reference before
    the error-quaternion vector part is extracted, so the +-q ambiguity
    cannot create spurious innovations.
    """
    q_meas = quat_align_sign(pose.q, q_ref)
    z = np.empty(6)
    z[:3] = pose.rho
    z[3:] = lambda_matrix(q_ref) @ q_meas
    return z


def innovation(z: np.ndarray, nav: NavState) -> np.ndarray:
    """Innovation e = z - h(x_bar) against the prior state."""
    return np.asarray(z, dtype=float) - h_of_x(nav)


def residual(z: np.ndarray, nav: NavState) -> np.ndarray:
    """Residual e* = z - h(x_hat) against the posterior state."""
    return np.asarray(z, dtype=float) - h_of_x(nav)


def estimate_R(acov: AdaptiveCov, H: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Observation covariance estimate from the windowed statistics.

    Residual mode adds ``H P_hat H^T`` (always positive semi-definite);
    innovation mode subtracts ``H P_bar H^T`` and clamps negative
    eigenvalues to zero with a logged warning when the window is too
    short to dominate the prior uncertainty.
    """
    C = acov.current()
    HPH = H @ P @ H.T
    if acov.mode == "residual":
        R = C + HPH
    elif acov.mode == "innovation":
        R = C - HPH
        R = 0.5 * (R + R.T)
        vals, vecs = np.linalg.eigh(R)
        if vals.min() < 0.0:
            log.warning("innovation-mode R estimate indefinite "
                        "(min eig %.3e); clamping to PSD", vals.min())
            R = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    else:
        raise ValueError(f"estimate_R undefined for mode {acov.mode!r}")
    return 0.5 * (R + R.T)


def innovation_covariance(acov: AdaptiveCov | None, H: np.ndarray,
                          P_bar: np.ndarray, config: FilterConfig) -> np.ndarray:
    """Innovation covariance S_k used in both the gain and the fault gate.

    innovation mode: the windowed C_hat directly; residual mode:
    ``H P_bar H^T + R_hat`` with R_hat from the residual window; off:
    ``H P_bar H^T + R0``.
    """
    if config.adapt == "innovation":
        S = acov.current()
    elif config.adapt == "residual":
        R_hat = acov.current() + acov.hph
        S = H @ P_bar @ H.T + R_hat
    else:
        S = H @ P_bar @ H.T + config.R0
    return 0.5 * (S + S.T)


def fault_detect(eps: float, e: np.ndarray, S: np.ndarray,
                 gate: FaultGate) -> int:
    """ICP health flag: 0 (fault) when the fit error reaches the threshold
    or the innovation's Mahalanobis norm sqrt(e^T S^-1 e) reaches e_th."""
    if not np.isfinite(eps) or eps >= gate.eps_th:
        return 0
    e = np.asarray(e, dtype=float)
    m2 = float(e @ np.linalg.solve(S, e))
    if m2 < 0.0:
        m2 = 0.0
    return 0 if np.sqrt(m2) >= gate.e_th else 1


def _check_cov_health(P: np.ndarray, what: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    min_eig = float(np.linalg.eigvalsh(P).min())
    if min_eig < -1e-9 * max(np.trace(P), 1e-300):
        raise NumericError(f"{what} covariance lost positive semi-definiteness "
                           f"(min eig {min_eig:.3e})")
    return P


def kf_update(fs: FilterState, z: np.ndarray, S: np.ndarray,
              phi: int) -> FilterState:
    """Gated measurement update.

    ``K = phi * P_bar H^T S^-1``; with phi = 0 the prior is returned
    bit-for-bit.  The attitude correction is composed multiplicatively
    onto the reference quaternion, after which the stored error vector is
    reset to zero.  ``P_hat = (I - K H) P_bar``, re-symmetrized.
    """
    if phi == 0:
        return fs
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"innovation covariance ill-conditioned "
                           f"(cond {cond:.3e})")
    log.debug("update epoch %d: cond(S) = %.3e", fs.k, cond)

    nav = fs.nav
    H = build_H(nav)
    e = innovation(z, nav)
    K = np.linalg.solve(S, H @ fs.P).T  # P H^T S^-1 via solve on S
    dx = K @ e

    qtv = nav.q_tilde_v + dx[I_ATT]
    nrm2 = qtv @ qtv
    if nrm2 >= 1.0:
        raise NumericError("attitude update too large for the error "
                           "quaternion parameterization")
    q_corr = np.array([qtv[0], qtv[1], qtv[2], np.sqrt(1.0 - nrm2)])
    q_new = quat_mul(q_corr, nav.q_ref)
    q_new /= np.linalg.norm(q_new)

    nav_new = NavState(
        r=nav.r + dx[I_R],
        v=nav.v + dx[I_V],
        q_tilde_v=np.zeros(3),
        b_g=nav.b_g + dx[I_BG],
        b_a=nav.b_a + dx[I_BA],
        rho1=nav.rho1 + dx[I_RHO1],
        rho2=nav.rho2 + dx[I_RHO2],
        q_ref=q_new,
    )
    P_new = (np.eye(N_STATES) - K @ H) @ fs.P
    P_new = _check_cov_health(P_new, "posterior")
    return FilterState(nav=nav_new, P=P_new, k=fs.k)


def kf_propagate(fs: FilterState, imu: ImuSample, dt: float,
                 disc: DiscreteModel, orbit: OrbitParams) -> FilterState:
    """Propagate the state through the nonlinear dynamics and the
    covariance through ``Phi P Phi^T + Q`` (re-symmetrized)."""
    nav_new = propagate_state(fs.nav, imu, dt, orbit)
    P_new = disc.Phi @ fs.P @ disc.Phi.T + disc.Q
    P_new = _check_cov_health(P_new, "predicted")
    return FilterState(nav=nav_new, P=P_new, k=fs.k)


@dataclass
class StepResult:
    """Everything one scan epoch produces, for logging and the next epoch."""

    fs: FilterState              # propagated to the next scan epoch
    acov: AdaptiveCov
    phi: int
    pose: Pose                   # posterior pose estimate at the scan epoch
    eps: float
    iterations: int
    posterior: FilterState       # before propagation, for error analysis
    z: np.ndarray | None = None
    trace_R: float = np.nan


def _trace_R(acov: AdaptiveCov, H, P_bar, config: FilterConfig) -> float:
    if config.adapt == "residual":
        return float(np.trace(acov.current() + acov.hph))
    if config.adapt == "innovation":
        return float(np.trace(estimate_R(acov, H, P_bar)))
    return float(np.trace(config.R0))


def navigation_step(fs: FilterState, acov: AdaptiveCov, gate: FaultGate,
                    scan_points: np.ndarray, imu_segment, dts,
                    model: ModelSet, config: FilterConfig,
                    orbit: OrbitParams) -> StepResult:
    """One epoch of the integrated ICP/filter loop.

    Runs ICP on the scan from the predicted coarse pose, gates the
    resulting observation, applies the (possibly zeroed) update, then
    propagates through the IMU segment to the next scan epoch.  A pose
    estimate is returned even when the epoch is declared faulty, in which
    case the state, covariance, and adaptive window all coast unchanged.
    """
    nav_bar = fs.nav
    H = build_H(nav_bar)
    S = innovation_covariance(acov, H, fs.P, config)
    trace_R = _trace_R(acov, H, fs.P, config)

    scan_points = np.asarray(scan_points, dtype=float).reshape(-1, 3)
    z = None
    icp_res: IcpResult | None = None
    if scan_points.shape[0] >= 3:
        try:
            icp_res = icp_register(scan_points, model, predict_pose(nav_bar),
                                   gate.eps_th, gate.i_max)
        except DegenerateGeometryError:
            icp_res = None

    if icp_res is not None:
        z = measurement_from_pose(icp_res.pose, nav_bar.q_ref)
        e = innovation(z, nav_bar)
        phi = fault_detect(icp_res.epsilon, e, S, gate)
        eps = icp_res.epsilon
        iterations = icp_res.iterations
    else:
        phi = 0
        eps = np.inf
        iterations = 0

    posterior = kf_update(fs, z, S, phi) if z is not None else fs
    if phi == 1:
        if config.adapt == "residual":
            e_star = residual(z, posterior.nav)
            acov = acov.updated(e_star, hph=H @ posterior.P @ H.T)
        elif config.adapt == "innovation":
            acov = acov.updated(innovation(z, nav_bar))
        # adapt == "off": nothing to maintain

    pose_est = predict_pose(posterior.nav)

    fs_next = posterior
    for imu, dt in zip(imu_segment, dts):
        disc = discretize(fs_next.nav, imu.u_a, imu.u_g, config.noise, orbit,
                          dt, config.disc)
        fs_next = kf_propagate(fs_next, imu, dt, disc, orbit)
    fs_next = FilterState(nav=fs_next.nav, P=fs_next.P, k=fs.k + 1)

    return StepResult(fs=fs_next, acov=acov, phi=phi, pose=pose_est, eps=eps,
                      iterations=iterations, posterior=posterior, z=z,
                      trace_R=trace_R)

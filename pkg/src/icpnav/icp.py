"""3-D registration of a scan point set against a model point set.

Correspondence search (exact nearest neighbor on a k-d tree),
quaternion-based closed-form rigid alignment, the iterative refinement
loop, and the mean-squared fit-error metric.  Scan clouds and model
clouds are (m, 3) float arrays in meters; a fitted pose ``(q, rho)``
maps scan points into the model frame as ``quat_to_rot(q) @ c + rho``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .attitude import quat_normalize, quat_to_rot
from .errors import DegenerateGeometryError, NumericError

__all__ = [
    "Pose",
    "IcpResult",
    "ModelSet",
    "sample_model",
    "correspondences",
    "cross_covariance",
    "w_matrix",
    "max_eigen_quat",
    "horn_align",
    "fit_error",
    "icp_register",
]


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion q (vector-first) and translation rho [m]."""

    q: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform (m, 3) points into the model frame."""
        return np.atleast_2d(pts) @ quat_to_rot(self.q).T + self.rho


@dataclass
class IcpResult:
    pose: Pose
    epsilon: float
    iterations: int
    converged: bool
    eps_history: list = field(default_factory=list)


class ModelSet:
    """Immutable model cloud with an exact nearest-neighbor index.

    The k-d tree is built once per model load; queries resolve exact
    nearest points with ties broken toward the lowest model-point index.
    `resolution` records the sampling resolution when known, otherwise
    the median nearest-neighbor spacing is used as a surrogate.
    """

    def __init__(self, points: np.ndarray, resolution: float | None = None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[0] < 1 or points.shape[1] != 3:
            raise ValueError("model needs at least one 3-D point")
        if not np.all(np.isfinite(points)):
            raise ValueError("model points must be finite")
        self.points = points
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)
        if resolution is None:
            resolution = self._estimate_spacing()
        self.resolution = float(resolution)

    def __len__(self) -> int:
        return self.points.shape[0]

    def _estimate_spacing(self) -> float:
        if len(self) < 2:
            return 1.0
        sample = self.points[:: max(1, len(self) // 512)]
        d, _ = self._tree.query(sample, k=2)
        return float(np.median(d[:, 1]))

    def nearest(self, pts: np.ndarray) -> np.ndarray:
        """Indices of the exact nearest model points for (m, 3) queries.

        Exact ties (bit-equal distances) resolve to the lowest index.
        """
        pts = np.atleast_2d(pts)
        if len(self) == 1:
            return np.zeros(pts.shape[0], dtype=np.intp)
        d, idx = self._tree.query(pts, k=2)
        tied = d[:, 0] == d[:, 1]
        if np.any(tied):
            for i in np.flatnonzero(tied):
                cand = self._tree.query_ball_point(pts[i], d[i, 0] * (1 + 1e-12))
                dist = np.linalg.norm(self.points[cand] - pts[i], axis=1)
                best = dist == dist.min()
                idx[i, 0] = min(np.asarray(cand)[best])
        return idx[:, 0]


def sample_model(triangles: np.ndarray, resolution: float,
                 seed) -> np.ndarray:
    """Area-weighted uniform sampling of a triangle soup into a point cloud.

    Draws approximately one point per ``resolution**2`` of surface area
    (Poisson counts per facet, floor of one point per facet), uniformly
    by barycentric folding.  Deterministic for a given seed.  Degenerate
    zero-area facets are skipped with a warning.
    """
    triangles = np.asarray(triangles, dtype=float)
    if triangles.size == 0:
        raise ValueError("empty triangle list")
    if triangles.ndim != 3 or triangles.shape[1:] != (3, 3):
        raise ValueError("triangles must have shape (n, 3, 3)")
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)

    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    ok = areas > 0.0
    if not np.all(ok):
        warnings.warn(f"skipping {np.count_nonzero(~ok)} zero-area facet(s)",
                      stacklevel=2)
        a, b, c, areas = a[ok], b[ok], c[ok], areas[ok]
        if areas.size == 0:
            raise ValueError("all facets are degenerate")

    counts = np.maximum(1, rng.poisson(areas / resolution**2))
    ids = np.repeat(np.arange(areas.size), counts)
    u = rng.random(ids.size)
    v = rng.random(ids.size)
    over = u + v > 1.0
    u[over] = 1.0 - u[over]
    v[over] = 1.0 - v[over]
    return a[ids] + u[:, None] * (b - a)[ids] + v[:, None] * (c - a)[ids]


def correspondences(coarse: Pose, scan: np.ndarray, model: ModelSet) -> np.ndarray:
    """Closest model point for each transformed scan point.

    Returns the (m, 3) array D ordered parallel to the scan, where
    ``D[i] = argmin_j |A(q0) c_i + rho0 - m_j|``.
    """
    scan = np.atleast_2d(scan)
    if scan.shape[0] < 1:
        raise DegenerateGeometryError("empty scan")
    return model.points[model.nearest(coarse.apply(scan))]


def cross_covariance(scan: np.ndarray, matched: np.ndarray):
    """Cross-covariance S = mean(c_i d_i^T) - c_bar d_bar^T and both centroids."""
    scan = np.atleast_2d(scan)
    matched = np.atleast_2d(matched)
    if scan.shape != matched.shape:
        raise ValueError("point sets must have matching shapes")
    m = scan.shape[0]
    c_bar = scan.mean(axis=0)
    d_bar = matched.mean(axis=0)
    S = scan.T @ matched / m - np.outer(c_bar, d_bar)
    return S, c_bar, d_bar


def w_matrix(S: np.ndarray) -> np.ndarray:
    """Symmetric 4x4 weighting matrix of the alignment quadratic form.

    Written in scalar-first block form: ``[[tr S, s^T], [s, S + S^T -
    tr(S) I]]`` with ``s = (S23-S32, S31-S13, S12-S21)``.  The solver
    re-packs its eigenvector to this package's vector-first order.
    """
    S = np.asarray(S, dtype=float)
    s = np.array([S[1, 2] - S[2, 1], S[2, 0] - S[0, 2], S[0, 1] - S[1, 0]])
    W = np.empty((4, 4))
    W[0, 0] = np.trace(S)
    W[0, 1:] = s
    W[1:, 0] = s
    W[1:, 1:] = S + S.T - np.trace(S) * np.eye(3)
    return W


def _jacobi_eigh4(W: np.ndarray, max_sweeps: int = 30):
    """Cyclic Jacobi eigendecomposition of a symmetric 4x4 matrix."""
    A = W.copy()
    V = np.eye(4)
    scale = np.abs(W).max() or 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(sum(A[p, q] ** 2 for p in range(4) for q in range(p + 1, 4)))
        if off <= 1e-15 * scale:
            return np.diag(A).copy(), V
        for p in range(3):
            for q in range(p + 1, 4):
                if abs(A[p, q]) <= 1e-18 * scale:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1.0)) \
                    if theta != 0.0 else 1.0
                cos = 1.0 / np.sqrt(t**2 + 1.0)
                sin = t * cos
                rot = np.eye(4)
                rot[p, p] = rot[q, q] = cos
                rot[p, q] = sin
                rot[q, p] = -sin
                A = rot.T @ A @ rot
                V = V @ rot
    raise NumericError("Jacobi eigensolver did not converge in "
                       f"{max_sweeps} sweeps")


def max_eigen_quat(W: np.ndarray) -> np.ndarray:
    """Unit quaternion maximizing ``u^T W u``: the top eigenvector of W.

    Input is the scalar-first W from :func:`w_matrix`; the returned
    quaternion is re-packed vector-first and sign-canonicalized so its
    scalar part is non-negative.
    """
    W = np.asarray(W, dtype=float)
    if np.abs(W - W.T).max() > 1e-10 * max(1.0, np.abs(W).max()):
        raise ValueError("W must be symmetric")
    W = 0.5 * (W + W.T)
    vals, vecs = _jacobi_eigh4(W)
    u = vecs[:, int(np.argmax(vals))]
    q = np.array([u[1], u[2], u[3], u[0]])
    if q[3] < 0.0:
        q = -q
    return quat_normalize(q)


def fit_error(pose: Pose, scan: np.ndarray, matched: np.ndarray) -> float:
    """Mean squared distance between transformed scan points and their matches."""
    resid = pose.apply(scan) - np.atleast_2d(matched)
    return float(np.mean(np.sum(resid**2, axis=1)))


def horn_align(scan: np.ndarray, matched: np.ndarray):
    """Closed-form least-squares rigid alignment of paired point sets.

    Returns the pose globally minimizing the mean squared pairing
    distance, plus the achieved fit error.  Needs at least 3 points;
    collinear sets are solved but flagged with a degeneracy warning
    because the in-line rotation component is arbitrary.
    """
    scan = np.atleast_2d(scan)
    matched = np.atleast_2d(matched)
    if scan.shape[0] < 3:
        raise DegenerateGeometryError(
            f"rigid alignment needs >= 3 points, got {scan.shape[0]}")
    S, c_bar, d_bar = cross_covariance(scan, matched)
    sv = np.linalg.svd(scan - c_bar, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        warnings.warn("collinear scan points: rotation about the line is "
                      "unconstrained", stacklevel=2)
    q = max_eigen_quat(w_matrix(S))
    rho = d_bar - quat_to_rot(q) @ c_bar
    pose = Pose(q, rho)
    return pose, fit_error(pose, scan, matched)


def icp_register(scan: np.ndarray, model: ModelSet, pose0: Pose,
                 eps_th: float, i_max: int) -> IcpResult:
    """Iterative closest point refinement from a coarse pose.

    Alternates correspondence search against the model index with the
    closed-form alignment, feeding each refinement back as the next
    coarse pose.  Stops as converged once the fit error reaches
    ``eps_th``, or unconverged after ``i_max`` iterations; the last pose
    is returned either way.  The fit error is non-increasing across
    iterations (asserted to round-off).
    """
    if i_max < 1:
        raise ValueError("i_max must be at least 1")
    scan = np.atleast_2d(scan)
    pose = pose0
    history: list[float] = []
    eps = np.inf
    iterations = 0
    for iterations in range(1, i_max + 1):
        matched = correspondences(pose, scan, model)
        pose, eps = horn_align(scan, matched)
        if history and eps > history[-1] * (1.0 + 1e-9) + 1e-30:
            raise NumericError("ICP fit error increased across iterations")
        history.append(eps)
        if eps <= eps_th:
            return IcpResult(pose, eps, iterations, True, history)
    return IcpResult(pose, eps, iterations, False, history)

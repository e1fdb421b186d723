"""Quaternion and rotation algebra with vector-first storage.

Quaternions are length-4 numpy arrays ``[qx, qy, qz, qo]`` (vector part
first, scalar part last), and the same order is used for serialization.
The product here is *not* the Hamilton product: ``quat_mul(q1, q2)``
composes so that ``quat_to_rot(quat_mul(q1, q2)) == quat_to_rot(q2) @
quat_to_rot(q1)``.  Under this convention the sandwich
``q ⊗ [v, 0] ⊗ q*`` (see :func:`rotate_by_quat`) evaluates to
``quat_to_rot(q).T @ v`` — pinned by the convention tests, recorded here
rather than assumed from a named convention.

All functions are pure and operate on value arrays, so they are safe to
call concurrently.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "skew",
    "omega_matrix",
    "quat_normalize",
    "quat_identity",
    "quat_to_rot",
    "quat_mul",
    "quat_conj",
    "quat_align_sign",
    "quat_product_raw",
    "error_quat",
    "small_angle_rot",
    "rotate_by_quat",
    "lambda_matrix",
]

#: Tolerance on |norm - 1| above which a quaternion argument is rejected.
UNIT_TOL = 1e-6

_IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def quat_identity() -> np.ndarray:
    """Return the identity quaternion (0, 0, 0, 1)."""
    return _IDENTITY.copy()


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def omega_matrix(w) -> np.ndarray:
    """4x4 matrix Omega(w) such that ``Omega(w) @ q == [w, 0] ⊗ q``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


def quat_normalize(q) -> np.ndarray:
    """Rescale to unit norm.  Raises on (near-)zero input."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def _check_unit(q, name: str = "q") -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"{name} must be a length-4 array, got shape {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} is not unit-norm (|{name}| = {np.linalg.norm(q):.9g})")
    return q


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion.

    ``A(q) = (2*qo**2 - 1) I + 2*qo*[qv x] + 2 qv qv^T``.  The output is
    orthonormal with determinant +1.
    """
    q = _check_unit(q)
    qv, qo = q[:3], q[3]
    return (2.0 * qo * qo - 1.0) * np.eye(3) + 2.0 * qo * skew(qv) + 2.0 * np.outer(qv, qv)


def quat_product_raw(a, b) -> np.ndarray:
    """Bilinear quaternion product on raw 4-vectors (no unit checks).

    Implements ``a ⊗ b = (a_o I + Omega(a_v)) b``; used for kinematics
    where the operands are rates or intermediate integrator states.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, ao = a[:3], a[3]
    bv, bo = b[:3], b[3]
    out = np.empty(4)
    out[:3] = ao * bv + bo * av - np.cross(av, bv)
    out[3] = ao * bo - av @ bv
    return out


def quat_mul(q1, q2) -> np.ndarray:
    """Quaternion product q1 ⊗ q2 of two unit quaternions.

    Composes rotations as ``quat_to_rot(q1 ⊗ q2) = quat_to_rot(q2) @
    quat_to_rot(q1)``.
    """
    q1 = _check_unit(q1, "q1")
    q2 = _check_unit(q2, "q2")
    return quat_product_raw(q1, q2)


def quat_conj(q) -> np.ndarray:
    """Conjugate: negate the vector part.  ``q ⊗ q* = (0, 0, 0, 1)``."""
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_align_sign(q, q_ref) -> np.ndarray:
    """Flip the sign of ``q`` if needed so it lies on ``q_ref``'s hemisphere.

    q and -q encode the same rotation; comparisons and differencing first
    align signs so the relative scalar part is >= 0.
    """
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    return -q if (q @ q_ref) < 0.0 else q.copy()


def error_quat(q, q_ref) -> np.ndarray:
    """Multiplicative error quaternion ``q_err = q ⊗ q_ref*``.

    Satisfies ``q_err ⊗ q_ref = q`` up to sign; the result is
    sign-canonicalized so its scalar part is >= 0.
    """
    q = _check_unit(q, "q")
    q_ref = _check_unit(q_ref, "q_ref")
    err = quat_product_raw(q, quat_conj(q_ref))
    if err[3] < 0.0:
        err = -err
    return err


def small_angle_rot(qv) -> np.ndarray:
    """First-order rotation matrix ``I + 2[qv x]`` for a small error quaternion.

    Approximates ``quat_to_rot((qv, sqrt(1-|qv|^2)))`` to first order; a
    warning is emitted when ``|qv| > 0.1`` since the approximation is
    degraded there.
    """
    qv = np.asarray(qv, dtype=float)
    if np.linalg.norm(qv) > 0.1:
        warnings.warn("small_angle_rot called with |qv| > 0.1; first-order "
                      "approximation is degraded", stacklevel=2)
    return np.eye(3) + 2.0 * skew(qv)


def rotate_by_quat(q, v) -> np.ndarray:
    """Vector part of the sandwich ``q ⊗ [v, 0] ⊗ q*``.

    Equals ``quat_to_rot(q).T @ v`` under this module's conventions.  The
    scalar component of the sandwich is identically zero (asserted to
    round-off).
    """
    q = _check_unit(q)
    v = np.asarray(v, dtype=float)
    v4 = np.array([v[0], v[1], v[2], 0.0])
    out = quat_product_raw(quat_product_raw(q, v4), quat_conj(q))
    if abs(out[3]) > 1e-12 * max(1.0, np.linalg.norm(v)):
        raise ValueError("sandwich product produced a non-zero scalar part")
    return out[:3]


def lambda_matrix(q_ref) -> np.ndarray:
    """3x4 map extracting an error-quaternion vector part.

    ``lambda_matrix(q_ref) @ q`` equals the vector part of ``q ⊗ q_ref*``
    for any unit quaternion q: ``[qo_ref I - [qv_ref x] | -qv_ref]``.
    """
    q_ref = _check_unit(q_ref, "q_ref")
    qv, qo = q_ref[:3], q_ref[3]
    out = np.empty((3, 4))
    out[:, :3] = qo * np.eye(3) - skew(qv)
    out[:, 3] = -qv
    return out

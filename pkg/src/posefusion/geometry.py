"""Quaternion / rotation-matrix algebra and camera-frame transforms.

Conventions
-----------
- Quaternions are numpy arrays ``(w, x, y, z)``, scalar first.
- Positions and displacements are numpy 3-vectors in meters.
- A pose's orientation quaternion is the camera-to-world rotation; the
  world-to-camera map used for expressing displacements "relative to the
  camera's viewing direction" is its transpose.
- Everything here is float64; tolerances in the tests assume double
  precision.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_UNIT_TOL = 1e-6


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    return q


def _as_vec3(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"vector must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector components must be finite")
    return v


def quat_norm(q) -> float:
    return float(np.linalg.norm(_as_quat(q)))


def quat_normalize(q) -> np.ndarray:
    """Scale q to unit norm. Raises on (near-)zero input."""
    q = _as_quat(q)
    n = np.linalg.norm(q)
    if n <= 1e-12:
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / n


def quat_conjugate(q) -> np.ndarray:
    q = _as_quat(q)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b (apply b first, then a, for c2w quaternions)."""
    a, b = _as_quat(a), _as_quat(b)
    w0, x0, y0, z0 = a
    w1, x1, y1, z1 = b
    return np.array(
        [
            w0 * w1 - x0 * x1 - y0 * y1 - z0 * z1,
            w0 * x1 + x0 * w1 + y0 * z1 - z0 * y1,
            w0 * y1 + y0 * w1 + z0 * x1 - x0 * z1,
            w0 * z1 + z0 * w1 + x0 * y1 - y0 * x1,
        ]
    )


def hemisphere_canonical(q) -> np.ndarray:
    """Flip sign so the first nonzero component is positive (w >= 0 a.e.)."""
    q = _as_quat(q)
    for c in q:
        if c > 0.0:
            return q
        if c < 0.0:
            return -q
    return q


def hemisphere_align(q, reference) -> np.ndarray:
    """Return q or -q, whichever has nonnegative dot with ``reference``.

    An exactly-zero dot keeps q unchanged (deterministic tie rule).
    """
    q, reference = _as_quat(q), _as_quat(reference)
    return -q if float(np.dot(q, reference)) < 0.0 else q


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of q; rotating a vector equals q * v * q^-1.

    Accepts non-unit input (the map normalizes); a zero-norm quaternion is
    degenerate and rejected.
    """
    q = _as_quat(q)
    n2 = float(np.dot(q, q))
    if n2 <= 1e-24:
        raise ValueError("degenerate quaternion: norm below 1e-12")
    w, x, y, z = q
    s = 2.0 / n2
    xx, yy, zz = x * x * s, y * y * s, z * z * s
    wx, wy, wz = w * x * s, w * y * s, w * z * s
    xy, xz, yz = x * y * s, x * z * s, y * z * s
    return np.array(
        [
            [1.0 - (yy + zz), xy - wz, xz + wy],
            [xy + wz, 1.0 - (xx + zz), yz - wx],
            [xz - wy, yz + wx, 1.0 - (xx + yy)],
        ]
    )


def rotation_to_quat(matrix) -> np.ndarray:
    """Unit quaternion (hemisphere-canonical) for an orthonormal 3x3 matrix.

    Shepperd's max-pivot branch; stable for all rotation angles.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
    t = np.trace(m)
    if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array(
            [0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s]
        )
    else:
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    return hemisphere_canonical(quat_normalize(q))


def rotate_vector(q, v) -> np.ndarray:
    """Rotate v by q (equivalent to quat_to_rotation(q) @ v)."""
    return quat_to_rotation(q) @ _as_vec3(v)


def _require_unit(q, name: str) -> np.ndarray:
    q = _as_quat(q)
    if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise ValueError(f"{name} must be a unit quaternion (|norm-1| <= {_UNIT_TOL})")
    return q


def to_local_frame(delta_global, frame) -> np.ndarray:
    """Express a world-frame displacement in the camera frame given by ``frame``.

    ``frame`` is the camera-to-world orientation; the applied rotation is its
    transpose (the world-to-camera map).
    """
    frame = _require_unit(frame, "frame")
    return quat_to_rotation(frame).T @ _as_vec3(delta_global)


def to_global_frame(delta_local, frame) -> np.ndarray:
    """Inverse of :func:`to_local_frame` for the same frame."""
    frame = _require_unit(frame, "frame")
    return quat_to_rotation(frame) @ _as_vec3(delta_local)


def angular_error_deg(a, b) -> float:
    """Geodesic angle between two unit quaternions in degrees.

    2*arccos(|<a,b>|): symmetric, sign-invariant in either argument,
    range [0, 180].
    """
    a = _require_unit(a, "a")
    b = _require_unit(b, "b")
    d = min(1.0, abs(float(np.dot(a, b))))
    return float(np.degrees(2.0 * np.arccos(d)))


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (Gaussian 4-vector, normalized)."""
    while True:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
        if n > 1e-6:
            return q / n


@dataclass(frozen=True)
class Pose:
    """Absolute 6DoF pose: position in meters + unit orientation quaternion.

    The orientation is normalized and hemisphere-canonicalized on
    construction.
    """

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position))
        q = hemisphere_canonical(quat_normalize(self.orientation))
        object.__setattr__(self, "orientation", q)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotation(self.orientation)


@dataclass(frozen=True)
class RelativePose:
    """Motion between two frames: displacement in the first camera's frame
    plus the orientation change quaternion."""

    displacement_local: np.ndarray
    rotation_delta: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())

    def __post_init__(self):
        object.__setattr__(self, "displacement_local", _as_vec3(self.displacement_local))
        q = hemisphere_canonical(quat_normalize(self.rotation_delta))
        object.__setattr__(self, "rotation_delta", q)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.displacement_local) <= tol)
            and abs(abs(self.rotation_delta[0]) - 1.0) <= tol
        )


def relative_pose(first: Pose, second: Pose) -> RelativePose:
    """Relative motion from ``first`` to ``second``.

    Displacement is expressed in the first camera's frame; the rotation
    delta satisfies second.orientation = first.orientation * delta.
    """
    delta_global = second.position - first.position
    disp = to_local_frame(delta_global, first.orientation)
    rot = quat_multiply(quat_conjugate(first.orientation), second.orientation)
    return RelativePose(disp, rot)


def apply_relative(pose: Pose, rel: RelativePose) -> Pose:
    """Advance a pose by one relative motion (inverse of relative_pose)."""
    pos = pose.position + to_global_frame(rel.displacement_local, pose.orientation)
    rot = quat_multiply(pose.orientation, rel.rotation_delta)
    return Pose(pos, rot)


# --- text serialization -----------------------------------------------------

def pose_to_line(pose: Pose) -> str:
    """7-column line: x y z qw qx qy qz (full float64 round-trip precision)."""
    vals = np.concatenate([pose.position, pose.orientation])
    return " ".join(f"{v:.17g}" for v in vals)


def pose_from_line(line: str) -> Pose:
    parts = line.split()
    if len(parts) != 7:
        raise DataError(f"pose line must have 7 columns, got {len(parts)}: {line!r}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise DataError(f"pose line has a non-numeric column: {line!r}") from exc
    return Pose(vals[:3], vals[3:])


def pose_from_homogeneous(matrix, orthogonality_tol: float = 1e-3) -> Pose:
    """Pose from a 4x4 camera-to-world homogeneous matrix.

    The top-left 3x3 block must be orthogonal within ``orthogonality_tol``
    (Frobenius norm of R^T R - I) with positive determinant; the stored
    quaternion is re-normalized so downstream code sees an exact rotation.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise DataError(f"homogeneous pose matrix must be 4x4, got {m.shape}")
    r = m[:3, :3]
    err = np.linalg.norm(r.T @ r - np.eye(3))
    if not np.isfinite(err) or err > orthogonality_tol:
        raise DataError(f"rotation block not orthogonal (||R^T R - I||_F = {err:.3g})")
    if np.linalg.det(r) <= 0.0:
        raise DataError("rotation block has non-positive determinant")
    return Pose(m[:3, 3], rotation_to_quat(r))


def pose_from_matrix_text(text: str) -> Pose:
    """Parse the 4x4 row-major matrix format (four lines of four floats)."""
    values = text.split()
    if len(values) != 16:
        raise DataError(f"expected 16 matrix entries, got {len(values)}")
    try:
        m = np.array([float(v) for v in values]).reshape(4, 4)
    except ValueError as exc:
        raise DataError("pose matrix contains a non-numeric entry") from exc
    return pose_from_homogeneous(m)

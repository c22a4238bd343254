"""Optical-flow representation, Middlebury ``.flo`` I/O, zone-mean feature
reduction, and an analytic flow generator for planar scenes.

The zone-mean reduction turns a dense (u, v) field into a small grid of
per-zone averages; three reduced fields are concatenated into the feature
tensor consumed by the relative-pose network (shape 3 x 2*zones_x*zones_y,
3 x 512 at the default 16 x 16 zoning).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np

from . import geometry
from .errors import FlowFormatError, IngestError

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import FrameRecord

FLO_MAGIC = 202021.25
# 3-channel variant of the .flo header, used for cached mean images.
FLOAT_IMAGE_MAGIC = 202021.5


@dataclass(frozen=True)
class FlowField:
    """Dense pixel-displacement field for one ordered image pair.

    ``u`` and ``v`` are (height, width) float32 grids of x- and y-direction
    displacements in pixels.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float32)
        v = np.ascontiguousarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be 2-d with identical shape, got {u.shape} / {v.shape}")
        if u.shape[0] < 1 or u.shape[1] < 1:
            raise ValueError("flow field must be at least 1x1")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow values must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def write_flo(field: FlowField) -> bytes:
    """Serialize to the Middlebury binary format (little-endian)."""
    header = struct.pack("<fii", FLO_MAGIC, field.width, field.height)
    interleaved = np.empty((field.height, field.width, 2), dtype="<f4")
    interleaved[..., 0] = field.u
    interleaved[..., 1] = field.v
    return header + interleaved.tobytes()


def read_flo(data: bytes) -> FlowField:
    """Parse the Middlebury binary format; exact inverse of :func:`write_flo`."""
    if len(data) < 12:
        raise FlowFormatError(f"flow payload too short for header ({len(data)} bytes)")
    magic, width, height = struct.unpack_from("<fii", data, 0)
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"bad flow magic {magic!r} (expected {FLO_MAGIC})")
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"bad flow dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(data) != expected:
        raise FlowFormatError(f"flow payload has {len(data)} bytes, expected {expected}")
    interleaved = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(interleaved[..., 0], interleaved[..., 1])


def read_flo_file(path) -> FlowField:
    return read_flo(Path(path).read_bytes())


def write_flo_file(field: FlowField, path) -> None:
    Path(path).write_bytes(write_flo(field))


def write_float_image(image: np.ndarray, path) -> None:
    """Write a (h, w, 3) float32 image in the 3-channel .flo-style format."""
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(struct.pack("<fii", FLOAT_IMAGE_MAGIC, w, h) + image.tobytes())


def read_float_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError("float-image payload too short for header")
    magic, width, height = struct.unpack_from("<fii", data, 0)
    if magic != FLOAT_IMAGE_MAGIC:
        raise FlowFormatError(f"bad float-image magic {magic!r}")
    expected = 12 + 12 * width * height
    if len(data) != expected:
        raise FlowFormatError(f"float-image payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 3).copy()


# --- zone-mean reduction ----------------------------------------------------

@dataclass(frozen=True)
class ZoneGrid:
    """Per-zone mean u/v values, shape (zones_y, zones_x), float64."""

    zones_x: int
    zones_y: int
    mean_u: np.ndarray
    mean_v: np.ndarray


def zone_starts(n_pixels: int, n_zones: int) -> np.ndarray:
    """Start offsets partitioning ``n_pixels`` into ``n_zones`` contiguous
    zones whose sizes differ by at most one (leading zones take the
    remainder)."""
    if n_zones < 1:
        raise ValueError("zone count must be >= 1")
    if n_pixels < n_zones:
        raise ValueError(f"cannot split {n_pixels} pixels into {n_zones} zones")
    base, rem = divmod(n_pixels, n_zones)
    idx = np.arange(n_zones)
    return idx * base + np.minimum(idx, rem)


def zone_mean(field: FlowField, zones_x: int = 16, zones_y: int = 16) -> ZoneGrid:
    """Arithmetic mean of u and v over each zone of a zones_y x zones_x
    partition of the field."""
    row_starts = zone_starts(field.height, zones_y)
    col_starts = zone_starts(field.width, zones_x)
    row_sizes = np.diff(np.append(row_starts, field.height))
    col_sizes = np.diff(np.append(col_starts, field.width))
    counts = np.outer(row_sizes, col_sizes).astype(np.float64)

    def reduce(grid: np.ndarray) -> np.ndarray:
        g = grid.astype(np.float64)
        sums = np.add.reduceat(np.add.reduceat(g, row_starts, axis=0), col_starts, axis=1)
        return sums / counts

    return ZoneGrid(zones_x, zones_y, reduce(field.u), reduce(field.v))


def build_flow_feature(fields, zones_x: int = 16, zones_y: int = 16) -> np.ndarray:
    """Stack three zone-reduced fields into the (3, 2*zones_x*zones_y) tensor.

    Row k is reshape(mean_u_k) followed by reshape(mean_v_k), both in
    row-major zone order.
    """
    fields = list(fields)
    if len(fields) != 3:
        raise ValueError(f"expected exactly 3 flow fields, got {len(fields)}")
    shape = (fields[0].height, fields[0].width)
    for f in fields[1:]:
        if (f.height, f.width) != shape:
            raise ValueError("flow fields must share dimensions")
    rows = []
    for f in fields:
        zg = zone_mean(f, zones_x, zones_y)
        rows.append(np.concatenate([zg.mean_u.ravel(), zg.mean_v.ravel()]))
    return np.stack(rows)


def feature_width(zones_x: int = 16, zones_y: int = 16) -> int:
    return 2 * zones_x * zones_y


# --- analytic flow for planar scenes ----------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def shifted(self, dx: float, dy: float) -> "CameraIntrinsics":
        """Intrinsics of a crop whose origin sits at (dx, dy) in the parent."""
        return CameraIntrinsics(self.fx, self.fy, self.cx - dx, self.cy - dy)


def synthetic_flow(
    rel: geometry.RelativePose,
    camera: CameraIntrinsics,
    plane_depth: float,
    width: int,
    height: int,
) -> FlowField:
    """Exact flow of a fronto-parallel plane at ``plane_depth`` (meters, in
    the first camera's frame) under the relative motion ``rel``.

    Pixels whose plane point lands behind the second camera are flagged
    invalid and written as zero flow.
    """
    if plane_depth <= 0.0:
        raise ValueError("plane_depth must be positive")
    if width < 1 or height < 1:
        raise ValueError("field dimensions must be positive")
    if rel.is_identity():
        zero = np.zeros((height, width), dtype=np.float32)
        return FlowField(zero, zero.copy())

    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    jj, ii = np.meshgrid(cols, rows)
    x1 = (jj - camera.cx) * plane_depth / camera.fx
    y1 = (ii - camera.cy) * plane_depth / camera.fy
    p1 = np.stack([x1, y1, np.full_like(x1, plane_depth)], axis=-1)

    r = geometry.quat_to_rotation(rel.rotation_delta)
    p2 = (p1 - rel.displacement_local) @ r  # row-vector form of R^T (p1 - t)
    z2 = p2[..., 2]
    valid = z2 > 1e-9
    z2safe = np.where(valid, z2, 1.0)
    u = camera.fx * p2[..., 0] / z2safe + camera.cx - jj
    v = camera.fy * p2[..., 1] / z2safe + camera.cy - ii
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return FlowField(u, v)


# --- flow providers ----------------------------------------------------------

class FlowProvider(Protocol):
    """Contract: return the flow field for an ordered pair of frames.

    Implementations must be read-only after construction so window assembly
    can query them from multiple worker threads.
    """

    def flow_for_pair(self, first: "FrameRecord", second: "FrameRecord") -> FlowField:
        ...


class FloDirectoryFlow:
    """Reads precomputed flow from ``<root>/<sequence>/pair-%06d.flo``, where
    index i holds the flow from frame i to frame i+1.

    The directory must be computed at the rate the frames are consumed at;
    non-adjacent frame indices (e.g. after undersampling) are rejected.
    """

    def __init__(self, root):
        self.root = Path(root)

    def flow_for_pair(self, first, second) -> FlowField:
        if second.index != first.index + 1:
            raise IngestError(
                f"flow directory holds consecutive-frame pairs only; got frames "
                f"{first.index} -> {second.index} of sequence {first.sequence!r} "
                "(precompute flow at the effective frame rate)"
            )
        path = self.root / str(first.sequence) / f"pair-{first.index:06d}.flo"
        if not path.exists():
            raise IngestError(f"missing flow file {path}")
        return read_flo_file(path)


class SyntheticFlowProvider:
    """Analytic flow from ground-truth poses, for simulated planar scenes.

    ``camera`` must describe the frames the flow is computed on (the
    center crop, not the full render); ``plane_depth`` is the wall distance
    from the camera plane, constant because simulated cameras do not move
    along the optical axis.
    """

    def __init__(self, camera: CameraIntrinsics, plane_depth: float, width: int, height: int):
        self.camera = camera
        self.plane_depth = float(plane_depth)
        self.width = int(width)
        self.height = int(height)

    def flow_for_pair(self, first, second) -> FlowField:
        rel = geometry.relative_pose(first.pose, second.pose)
        return synthetic_flow(rel, self.camera, self.plane_depth, self.width, self.height)

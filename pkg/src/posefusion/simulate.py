"""Synthetic trajectory generator with deterministic textured-plane renders.

The simulated world is a flat textured wall at a fixed distance in front of
the camera plane. Cameras translate inside a rectangular extent parallel to
the wall and optionally roll about the optical axis; rolling keeps every
view exactly fronto-parallel, so the analytic flow of
:func:`posefusion.flow.synthetic_flow` is exact for every frame pair.

Scenario shapes follow the recording protocol used for evaluation: a
serpentine "zigzag" sweep for training and a corner-to-corner "diagonal"
(or rectangular "loop") for testing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import CROP_SIZE, DatasetSplit, FrameRecord
from .errors import SimulationSpecError
from .flow import CameraIntrinsics
from .geometry import Pose

_logger = logging.getLogger(__name__)

SHAPES = ("loop", "zigzag", "zigzag-both", "diagonal")


@dataclass(frozen=True)
class SimCamera:
    """Rendered image geometry. The principal point defaults to the image
    center; renders are slightly larger than the crop so the center crop is
    a real crop."""

    width: int = 240
    height: int = 240
    fx: float = 230.0
    fy: float = 230.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def crop_intrinsics(self, crop_w: int = CROP_SIZE, crop_h: int = CROP_SIZE) -> CameraIntrinsics:
        dx = (self.width - crop_w) // 2
        dy = (self.height - crop_h) // 2
        return self.intrinsics().shifted(dx, dy)


@dataclass(frozen=True)
class ScenarioSpec:
    """Protocol description: a train trajectory and a test trajectory over
    the same extent, viewing the same textured wall."""

    extent: tuple[float, float] = (6.5, 9.0)
    train_shape: str = "zigzag"
    test_shape: str = "diagonal"
    speed_mps: float = 0.3
    speed_variation: float = 0.0  # sinusoidal fraction of speed_mps
    frame_rate_hz: float = 30.0
    zigzag_rows: int = 5
    plane_depth_m: float = 3.0
    max_roll_deg: float = 5.0
    roll_period_m: float = 7.3
    texture_seed: int = 0
    texture_components: int = 24
    camera: SimCamera = field(default_factory=SimCamera)

    def validate(self) -> None:
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise SimulationSpecError("extent must be positive")
        if self.frame_rate_hz <= 0:
            raise SimulationSpecError("frame rate must be positive")
        if self.speed_mps <= 0:
            raise SimulationSpecError("speed must be positive for a moving trajectory")
        if not (0.0 <= self.speed_variation < 1.0):
            raise SimulationSpecError("speed_variation must be in [0, 1)")
        for shape in (self.train_shape, self.test_shape):
            if shape not in SHAPES:
                raise SimulationSpecError(f"unknown shape {shape!r} (choose from {SHAPES})")
        if self.plane_depth_m <= 0:
            raise SimulationSpecError("plane depth must be positive")
        if self.zigzag_rows < 2:
            raise SimulationSpecError("zigzag needs at least 2 rows")


def path_waypoints(shape: str, extent: tuple[float, float], zigzag_rows: int = 5) -> np.ndarray:
    """Piecewise-linear waypoints (k, 2) in [0, ex] x [0, ey]."""
    ex, ey = extent
    if shape == "diagonal":
        return np.array([[0.0, 0.0], [ex, ey]])
    if shape == "loop":
        return np.array([[0.0, 0.0], [ex, 0.0], [ex, ey], [0.0, ey], [0.0, 0.0]])
    if shape in ("zigzag", "zigzag-both"):
        pts = []
        ys = np.linspace(0.0, ey, zigzag_rows)
        for r, y in enumerate(ys):
            xs = (0.0, ex) if r % 2 == 0 else (ex, 0.0)
            pts.append([xs[0], y])
            pts.append([xs[1], y])
        if shape == "zigzag-both":
            # second sweep with vertical passes, continuing from the last point
            start_left = pts[-1][0] == 0.0
            cols = np.linspace(0.0, ex, zigzag_rows) if start_left else np.linspace(ex, 0.0, zigzag_rows)
            first_down = pts[-1][1] == ey
            for c, x in enumerate(cols):
                ys_pair = (ey, 0.0) if (c % 2 == 0) == first_down else (0.0, ey)
                pts.append([x, ys_pair[0]])
                pts.append([x, ys_pair[1]])
        return np.array(pts)
    raise SimulationSpecError(f"unknown shape {shape!r}")


def sample_path(
    waypoints: np.ndarray,
    speed_mps: float,
    frame_rate_hz: float,
    speed_variation: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Walk the polyline at the given speed profile; returns frame positions
    (n, 2) and their arc lengths (n,)."""
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    dt = 1.0 / frame_rate_hz
    arcs = [0.0]
    k = 0
    while True:
        v = speed_mps * (1.0 + speed_variation * np.sin(2.0 * np.pi * k / 50.0))
        s = arcs[-1] + v * dt
        if s > total:
            break
        arcs.append(s)
        k += 1
    arcs = np.array(arcs)
    positions = np.empty((len(arcs), 2))
    seg_idx = np.minimum(np.searchsorted(cum, arcs, side="right") - 1, len(seg_len) - 1)
    for i, (s, j) in enumerate(zip(arcs, seg_idx)):
        t = 0.0 if seg_len[j] == 0 else (s - cum[j]) / seg_len[j]
        positions[i] = waypoints[j] + t * seg[j]
    return positions, arcs


class PlaneTexture:
    """Smooth, aperiodic, seeded RGB texture over the wall plane.

    A shared bank of random cosine components (half low-frequency for global
    position cues, half higher-frequency detail) is mixed into three
    channels; evaluation is vectorized over pixel grids.
    """

    def __init__(self, seed: int = 0, components: int = 24):
        rng = np.random.default_rng(seed)
        half = max(1, components // 2)
        freqs = np.concatenate(
            [
                10 ** rng.uniform(np.log10(0.05), np.log10(0.3), size=half),
                10 ** rng.uniform(np.log10(0.3), np.log10(2.0), size=components - half),
            ]
        )
        angles = rng.uniform(0.0, 2.0 * np.pi, size=components)
        self.wavevec = (
            2.0 * np.pi * freqs[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        )  # (k, 2)
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=components)
        mix = rng.normal(size=(components, 3)) / np.sqrt(components)
        self.mix = mix * (1.0 / np.sqrt(freqs))[:, None]
        self.mix *= 1.2 / np.abs(self.mix).sum(axis=0, keepdims=True).max()

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        pts = np.stack([x, y], axis=-1)
        phase = pts @ self.wavevec.T + self.phases
        rgb = 0.5 + np.cos(phase) @ self.mix
        return np.clip(rgb, 0.0, 1.0)


def render_frame(pose: Pose, camera: SimCamera, plane_z: float, texture: PlaneTexture) -> np.ndarray:
    """Render the textured wall (a plane at world z = plane_z) seen by a
    pinhole camera at ``pose``; returns (h, w, 3) uint8."""
    intr = camera.intrinsics()
    cols = np.arange(camera.width, dtype=np.float64)
    rows = np.arange(camera.height, dtype=np.float64)
    jj, ii = np.meshgrid(cols, rows)
    dirs_cam = np.stack(
        [(jj - intr.cx) / intr.fx, (ii - intr.cy) / intr.fy, np.ones_like(jj)], axis=-1
    )
    r = pose.rotation_matrix()
    dirs_world = dirs_cam @ r.T
    dz = dirs_world[..., 2]
    if np.any(dz <= 1e-9):
        raise SimulationSpecError("camera ray parallel to or facing away from the wall")
    t = (plane_z - pose.position[2]) / dz
    wx = pose.position[0] + t * dirs_world[..., 0]
    wy = pose.position[1] + t * dirs_world[..., 1]
    rgb = texture(wx, wy)
    return np.round(rgb * 255.0).astype(np.uint8)


def _trajectory_poses(spec: ScenarioSpec, shape: str) -> list[Pose]:
    ex, ey = spec.extent
    waypoints = path_waypoints(shape, spec.extent, spec.zigzag_rows)
    xy, arcs = sample_path(waypoints, spec.speed_mps, spec.frame_rate_hz, spec.speed_variation)
    centered = xy - np.array([ex / 2.0, ey / 2.0])
    poses = []
    for (x, y), s in zip(centered, arcs):
        roll = np.radians(spec.max_roll_deg) * np.sin(2.0 * np.pi * s / spec.roll_period_m)
        quat = np.array([np.cos(roll / 2.0), 0.0, 0.0, np.sin(roll / 2.0)])
        poses.append(Pose(np.array([x, y, 0.0]), quat))
    return poses


def simulate_trajectory(
    spec: ScenarioSpec, render: bool = True
) -> tuple[DatasetSplit, DatasetSplit]:
    """Build the train/test split pair for a scenario.

    Ground-truth poses follow the spec exactly; images are deterministic
    renders of the seeded wall texture (omitted when ``render`` is False for
    pose-only uses). Frames are in memory; use the CLI simulate command to
    persist a dataset to disk.
    """
    spec.validate()
    texture = PlaneTexture(spec.texture_seed, spec.texture_components) if render else None
    splits = []
    for split_name, shape in (("train", spec.train_shape), ("test", spec.test_shape)):
        poses = _trajectory_poses(spec, shape)
        seq_id = f"{split_name}-{shape}"
        frames = []
        for i, pose in enumerate(poses):
            image = (
                render_frame(pose, spec.camera, spec.plane_depth_m, texture) if render else None
            )
            frames.append(
                FrameRecord(
                    sequence=seq_id,
                    index=i,
                    timestamp=i / spec.frame_rate_hz,
                    pose=pose,
                    image=image,
                )
            )
        _logger.info("simulated %s (%s): %d frames", seq_id, shape, len(frames))
        splits.append(DatasetSplit(split_name, [frames]))
    return splits[0], splits[1]


def desk_scale_spec(**overrides) -> ScenarioSpec:
    """The default desk-scale scenario: a 6.5 x 9.0 m zigzag/diagonal pair
    sized so that undersampling 30 Hz -> 10 Hz leaves ~310 train frames."""
    spec = ScenarioSpec(speed_mps=1.334)
    return replace(spec, **overrides) if overrides else spec

"""Sequence ingest, preprocessing, and 4-frame training-window assembly.

Supported sources: the published 7-Scenes directory layout, a generic
manifest-described layout (images + 7-column pose text), and the in-memory
output of the trajectory simulator. Windows carry center crops, per-pair
flow fields, and ground-truth absolute/relative poses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import yaml

from . import flow as flowmod
from . import geometry
from .errors import DataError, IngestError
from .flow import CameraIntrinsics, FlowField, FlowProvider
from .geometry import Pose, RelativePose

_logger = logging.getLogger(__name__)

CROP_SIZE = 224
SEVEN_SCENES_RATE_HZ = 30.0  # documented Kinect capture rate; files carry no timestamps


@dataclass
class FrameRecord:
    """One frame of a sequence: identity, timing, pixels, ground-truth pose."""

    sequence: str
    index: int
    timestamp: float
    pose: Pose
    image_path: Path | None = None
    image: np.ndarray | None = None  # (h, w, 3) uint8, for in-memory datasets

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise IngestError(f"frame {self.sequence}/{self.index} has no image")
        from PIL import Image

        try:
            with Image.open(self.image_path) as img:
                return np.asarray(img.convert("RGB"))
        except FileNotFoundError:
            raise IngestError(f"missing image file {self.image_path}") from None


@dataclass
class DatasetSplit:
    """A named split: sequences of frames plus the (train-derived) mean image.

    ``mean_source`` records which split produced ``mean_image`` so the
    no-test-leakage invariant is checkable downstream.
    """

    name: str
    sequences: list[list[FrameRecord]]
    mean_image: np.ndarray | None = None
    mean_source: str | None = None

    def frame_count(self) -> int:
        return sum(len(s) for s in self.sequences)


@dataclass(frozen=True)
class SampleWindow:
    """Four consecutive frames t_{n-1}..t_{n+2} with everything derived:
    three center crops (first three frames), three pair flow fields, three
    ground-truth poses, and three ground-truth relative poses."""

    frames: tuple[FrameRecord, FrameRecord, FrameRecord, FrameRecord]
    crops: np.ndarray  # (3, crop_h, crop_w, 3) uint8
    flows: tuple[FlowField, FlowField, FlowField]
    poses: tuple[Pose, Pose, Pose]
    relatives: tuple[RelativePose, RelativePose, RelativePose]

    @property
    def center_pose(self) -> Pose:
        return self.poses[1]


def validate_sequence(frames: Sequence[FrameRecord]) -> None:
    for prev, cur in zip(frames, frames[1:]):
        if cur.index <= prev.index:
            raise DataError(
                f"sequence {cur.sequence!r}: frame indices not strictly increasing "
                f"({prev.index} -> {cur.index})"
            )
        if cur.timestamp < prev.timestamp:
            raise DataError(f"sequence {cur.sequence!r}: timestamps decrease at frame {cur.index}")


# --- preprocessing -----------------------------------------------------------

def center_crop(image: np.ndarray, width: int = CROP_SIZE, height: int = CROP_SIZE) -> np.ndarray:
    """Centered crop; odd margins are split with floor division."""
    if image.ndim < 2:
        raise ValueError("image must be at least 2-d")
    h, w = image.shape[:2]
    if h < height or w < width:
        raise ValueError(f"image {w}x{h} smaller than crop {width}x{height}")
    r0 = (h - height) // 2
    c0 = (w - width) // 2
    return image[r0 : r0 + height, c0 : c0 + width]


def subtract_mean(crop: np.ndarray, mean_image: np.ndarray) -> np.ndarray:
    """Scale a uint8 crop to [0, 1] and subtract the per-pixel channel mean.

    Applied on the absolute-regression path only; the relative path consumes
    raw crops.
    """
    scaled = crop.astype(np.float32) / np.float32(255.0)
    if scaled.shape != mean_image.shape:
        raise ValueError(f"crop shape {scaled.shape} != mean image shape {mean_image.shape}")
    return scaled - mean_image


def compute_mean_image(
    split: DatasetSplit, width: int = CROP_SIZE, height: int = CROP_SIZE
) -> np.ndarray:
    """Per-pixel channel mean of [0, 1]-scaled center crops over all frames."""
    acc = np.zeros((height, width, 3), dtype=np.float64)
    count = 0
    for seq in split.sequences:
        for frame in seq:
            acc += center_crop(frame.load_image(), width, height).astype(np.float64)
            count += 1
    if count == 0:
        raise ValueError(f"split {split.name!r} has no frames")
    return (acc / (count * 255.0)).astype(np.float32)


def attach_mean_images(
    train: DatasetSplit,
    test: DatasetSplit,
    width: int = CROP_SIZE,
    height: int = CROP_SIZE,
    cache_path=None,
) -> np.ndarray:
    """Compute the train-split mean once (or load the cache) and attach it to
    both splits, tagging the provenance."""
    mean = None
    if cache_path is not None and Path(cache_path).exists():
        mean = flowmod.read_float_image(cache_path)
        if mean.shape != (height, width, 3):
            mean = None
    if mean is None:
        mean = compute_mean_image(train, width, height)
        if cache_path is not None:
            Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
            flowmod.write_float_image(mean, cache_path)
    train.mean_image = mean
    train.mean_source = train.name
    test.mean_image = mean
    test.mean_source = train.name
    return mean


# --- rate reduction ----------------------------------------------------------

def undersample(
    frames: Sequence[FrameRecord], source_hz: float, target_hz: float
) -> list[FrameRecord]:
    """Keep every k-th frame, k = round(source_hz / target_hz), starting at 0.

    Rounding is half-up; when the ratio is not integral the effective rate is
    logged.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if source_hz <= 0:
        raise ValueError("source_hz must be positive")
    if target_hz > source_hz:
        raise ValueError(f"target rate {target_hz} Hz exceeds source rate {source_hz} Hz")
    ratio = source_hz / target_hz
    stride = max(1, int(np.floor(ratio + 0.5)))
    if abs(stride - ratio) > 1e-9:
        _logger.info(
            "undersample: ratio %.3f rounded to stride %d (effective rate %.2f Hz)",
            ratio,
            stride,
            source_hz / stride,
        )
    return list(frames[::stride])


def undersample_split(split: DatasetSplit, source_hz: float, target_hz: float) -> DatasetSplit:
    sequences = [undersample(seq, source_hz, target_hz) for seq in split.sequences]
    return DatasetSplit(split.name, sequences, split.mean_image, split.mean_source)


# --- window assembly ---------------------------------------------------------

def window_count(sequence_length: int) -> int:
    return max(0, sequence_length - 3)


def make_windows(
    split: DatasetSplit,
    flow_provider: FlowProvider,
    crop_width: int = CROP_SIZE,
    crop_height: int = CROP_SIZE,
) -> Iterator[SampleWindow]:
    """Yield one window per valid center index (stride 1), never straddling
    sequence boundaries. Sequences shorter than 4 frames are skipped with a
    warning. Output order is deterministic."""
    for seq in split.sequences:
        if len(seq) < 4:
            name = seq[0].sequence if seq else "<empty>"
            _logger.warning("sequence %r has %d frames (< 4); skipped", name, len(seq))
            continue
        cache: dict[int, np.ndarray] = {}
        for i in range(len(seq) - 3):
            for k in range(i, i + 3):
                if k not in cache:
                    cache[k] = seq[k].load_image()
            for k in [k for k in cache if k < i]:
                del cache[k]
            frames = tuple(seq[i : i + 4])
            crops = np.stack(
                [center_crop(cache[i + t], crop_width, crop_height) for t in range(3)]
            )
            flows = tuple(
                flow_provider.flow_for_pair(seq[i + t], seq[i + t + 1]) for t in range(3)
            )
            poses = tuple(f.pose for f in frames[:3])
            relatives = tuple(
                geometry.relative_pose(frames[t].pose, frames[t + 1].pose) for t in range(3)
            )
            yield SampleWindow(frames, crops, flows, poses, relatives)


@dataclass
class WindowArrays:
    """Dense tensors for a window stream: the bridge from dataset to the
    network trainers. Crops stay uint8; conversion to float happens per
    batch."""

    crops: np.ndarray  # (n, 3, h, w, 3) uint8
    features: np.ndarray  # (n, 3, feature_width) float32 zone-mean flow features
    abs_pos: np.ndarray  # (n, 3, 3) float64
    abs_quat: np.ndarray  # (n, 3, 4) float64, hemisphere-canonical
    rel_disp: np.ndarray  # (n, 3, 3) float64, first-frame-local
    rel_quat: np.ndarray  # (n, 3, 4) float64, hemisphere-canonical
    mean_image: np.ndarray | None = None  # (h, w, 3) float32, train-split mean
    mean_source: str | None = None

    def __len__(self) -> int:
        return self.crops.shape[0]

    def center_poses(self) -> list[Pose]:
        return [Pose(self.abs_pos[i, 1], self.abs_quat[i, 1]) for i in range(len(self))]

    def relative_pose_at(self, window: int, pair: int) -> RelativePose:
        return RelativePose(self.rel_disp[window, pair], self.rel_quat[window, pair])

    @classmethod
    def from_windows(
        cls,
        windows: Iterable[SampleWindow],
        zones_x: int = 16,
        zones_y: int = 16,
        mean_image: np.ndarray | None = None,
        mean_source: str | None = None,
    ) -> "WindowArrays":
        crops, feats, apos, aquat, rdisp, rquat = [], [], [], [], [], []
        for w in windows:
            crops.append(w.crops)
            feats.append(flowmod.build_flow_feature(w.flows, zones_x, zones_y).astype(np.float32))
            apos.append([p.position for p in w.poses])
            aquat.append([p.orientation for p in w.poses])
            rdisp.append([r.displacement_local for r in w.relatives])
            rquat.append([r.rotation_delta for r in w.relatives])
        n = len(crops)
        fw = flowmod.feature_width(zones_x, zones_y)
        if n == 0:
            return cls(
                crops=np.zeros((0, 3, CROP_SIZE, CROP_SIZE, 3), dtype=np.uint8),
                features=np.zeros((0, 3, fw), dtype=np.float32),
                abs_pos=np.zeros((0, 3, 3)),
                abs_quat=np.zeros((0, 3, 4)),
                rel_disp=np.zeros((0, 3, 3)),
                rel_quat=np.zeros((0, 3, 4)),
                mean_image=mean_image,
                mean_source=mean_source,
            )
        return cls(
            crops=np.stack(crops),
            features=np.stack(feats),
            abs_pos=np.array(apos),
            abs_quat=np.array(aquat),
            rel_disp=np.array(rdisp),
            rel_quat=np.array(rquat),
            mean_image=mean_image,
            mean_source=mean_source,
        )


def load_window_arrays(
    split: DatasetSplit,
    flow_provider: FlowProvider,
    zones_x: int = 16,
    zones_y: int = 16,
) -> WindowArrays:
    return WindowArrays.from_windows(
        make_windows(split, flow_provider),
        zones_x,
        zones_y,
        mean_image=split.mean_image,
        mean_source=split.mean_source,
    )


# --- pose text files ---------------------------------------------------------

def read_pose_file(path) -> list[Pose]:
    """7-column pose lines; '#' lines are comments. Errors name the line."""
    poses = []
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            poses.append(geometry.pose_from_line(stripped))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return poses


def write_pose_file(poses: Iterable[Pose], path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(geometry.pose_to_line(p) for p in poses)
    Path(path).write_text("\n".join(lines) + "\n")


# --- 7-Scenes layout ---------------------------------------------------------

def _seven_scenes_split(scene_dir: Path, list_name: str) -> list[str]:
    list_path = scene_dir / list_name
    if not list_path.exists():
        raise IngestError(f"missing split file {list_path}")
    names = []
    for line in list_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if not line.lower().startswith("sequence"):
            raise IngestError(f"{list_path}: unexpected split entry {line!r}")
        names.append(f"seq-{int(line[len('sequence') :]):02d}")
    return names


def _load_seven_scenes_sequence(scene_dir: Path, seq_name: str) -> list[FrameRecord]:
    seq_dir = scene_dir / seq_name
    if not seq_dir.is_dir():
        raise IngestError(f"missing sequence directory {seq_dir}")
    color_files = sorted(seq_dir.glob("frame-*.color.png"))
    if not color_files:
        raise IngestError(f"no frames found in {seq_dir}")
    frames = []
    for pos, color in enumerate(color_files):
        stem = color.name[: -len(".color.png")]
        pose_path = seq_dir / f"{stem}.pose.txt"
        if not pose_path.exists():
            raise IngestError(f"missing pose file for frame {seq_name}/{stem}")
        try:
            pose = geometry.pose_from_matrix_text(pose_path.read_text())
        except DataError as exc:
            raise DataError(f"{pose_path}: {exc}") from None
        index = int(stem.split("-")[1])
        frames.append(
            FrameRecord(
                sequence=seq_name,
                index=index,
                timestamp=pos / SEVEN_SCENES_RATE_HZ,
                pose=pose,
                image_path=color,
            )
        )
    validate_sequence(frames)
    return frames


def load_seven_scenes(root, scene: str) -> tuple[DatasetSplit, DatasetSplit]:
    """Load one 7-Scenes scene using its published directory layout and the
    official TrainSplit.txt / TestSplit.txt sequence lists.

    Pose files are 4x4 row-major homogeneous camera-to-world matrices (the
    dataset's published convention). Timestamps are synthesized at 30 Hz.
    """
    scene_dir = Path(root) / scene
    if not scene_dir.is_dir():
        raise IngestError(f"scene directory {scene_dir} does not exist")
    splits = []
    for split_name, list_name in (("train", "TrainSplit.txt"), ("test", "TestSplit.txt")):
        seq_names = _seven_scenes_split(scene_dir, list_name)
        sequences = [_load_seven_scenes_sequence(scene_dir, name) for name in seq_names]
        splits.append(DatasetSplit(split_name, sequences))
    return splits[0], splits[1]


# --- generic manifest layout -------------------------------------------------

@dataclass
class ManifestSequence:
    id: str
    split: str
    images: str  # glob relative to the dataset root
    poses: str  # pose file relative to the dataset root


@dataclass
class GenericManifest:
    frame_rate_hz: float
    sequences: list[ManifestSequence]
    camera: CameraIntrinsics | None = None
    plane_depth_m: float | None = None
    image_size: tuple[int, int] | None = None  # (width, height)
    extra: dict = field(default_factory=dict)


def read_manifest(path) -> GenericManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise IngestError(f"cannot parse manifest {path}: {exc}") from None
    if not isinstance(data, dict):
        raise IngestError(f"manifest {path} must be a mapping")
    known = {"frame_rate_hz", "sequences", "camera", "plane_depth_m", "image_size", "extra"}
    unknown = set(data) - known
    if unknown:
        raise IngestError(f"manifest {path}: unknown keys {sorted(unknown)}")
    if "frame_rate_hz" not in data or "sequences" not in data:
        raise IngestError(f"manifest {path}: frame_rate_hz and sequences are required")
    sequences = []
    for i, entry in enumerate(data["sequences"]):
        if not isinstance(entry, dict):
            raise IngestError(f"manifest {path}: sequences[{i}] must be a mapping")
        missing = {"split", "images", "poses"} - set(entry)
        if missing:
            raise IngestError(f"manifest {path}: sequences[{i}] missing keys {sorted(missing)}")
        if entry["split"] not in ("train", "test"):
            raise IngestError(f"manifest {path}: sequences[{i}] split must be train or test")
        sequences.append(
            ManifestSequence(
                id=str(entry.get("id", f"seq-{i:02d}")),
                split=entry["split"],
                images=entry["images"],
                poses=entry["poses"],
            )
        )
    camera = None
    if "camera" in data:
        camera = CameraIntrinsics(**{k: float(v) for k, v in data["camera"].items()})
    image_size = tuple(data["image_size"]) if "image_size" in data else None
    plane = float(data["plane_depth_m"]) if "plane_depth_m" in data else None
    return GenericManifest(
        frame_rate_hz=float(data["frame_rate_hz"]),
        sequences=sequences,
        camera=camera,
        plane_depth_m=plane,
        image_size=image_size,
        extra=data.get("extra", {}),
    )


def load_generic(root, manifest) -> tuple[DatasetSplit, DatasetSplit]:
    """Load a manifest-described dataset rooted at ``root``.

    ``manifest`` is a path or a parsed :class:`GenericManifest`; image globs
    and pose paths are resolved relative to the root. Image count must match
    pose-line count per sequence.
    """
    root = Path(root)
    if not isinstance(manifest, GenericManifest):
        manifest = read_manifest(manifest)
    rate = manifest.frame_rate_hz
    by_split: dict[str, list[list[FrameRecord]]] = {"train": [], "test": []}
    for seq in manifest.sequences:
        image_paths = sorted(root.glob(seq.images))
        if not image_paths:
            raise IngestError(f"sequence {seq.id!r}: image glob {seq.images!r} matched nothing")
        poses = read_pose_file(root / seq.poses)
        if len(poses) != len(image_paths):
            raise IngestError(
                f"sequence {seq.id!r}: {len(image_paths)} images but {len(poses)} pose lines"
            )
        frames = [
            FrameRecord(
                sequence=seq.id,
                index=i,
                timestamp=i / rate,
                pose=pose,
                image_path=img,
            )
            for i, (img, pose) in enumerate(zip(image_paths, poses))
        ]
        validate_sequence(frames)
        by_split[seq.split].append(frames)
    return DatasetSplit("train", by_split["train"]), DatasetSplit("test", by_split["test"])

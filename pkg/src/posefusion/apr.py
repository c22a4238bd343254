"""Absolute pose regression: a shared CNN encoder applied to the three
window crops, with one dense head per timestep emitting 7 values (position
+ quaternion). The middle head is the canonical per-window prediction.

Also hosts the single-frame baseline regressor used for comparison runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import ModelCheckpoint
from .dataset import WindowArrays
from .errors import CheckpointMismatchError
from .geometry import QUAT_IDENTITY, Pose
from .net_util import count_parameters, pose_terms, train_loop

BACKBONES = ("small", "full")


@dataclass(frozen=True)
class AprConfig:
    backbone: str = "small"
    head_width: int = 2048
    alpha: float = 1.0
    beta: float = 30.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.head_width < 1:
            raise ValueError("head_width must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("loss weights must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")


class SmallEncoder(nn.Module):
    """Desk-scale encoder: 6 stride-2 conv layers pooled to a 2x2 map.

    Pooling all the way to 1x1 averages out the coarse spatial layout that
    absolute position regression relies on; keeping a 2x2 map regains it
    without the overfitting of a full flatten.
    """

    feature_dim = 96 * 2 * 2

    def __init__(self):
        super().__init__()
        chans = (12, 24, 32, 48, 64, 96)
        layers: list[nn.Module] = []
        c_in = 3
        for i, c in enumerate(chans):
            k = 5 if i == 0 else 3
            layers += [nn.Conv2d(c_in, c, k, stride=2, padding=k // 2), nn.ReLU(inplace=True)]
            c_in = c
        self.convs = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.convs(x)).flatten(1)


class GoogLeNetEncoder(nn.Module):
    """Full-scale GoogLeNet-class encoder (1024-dim features)."""

    feature_dim = 1024

    def __init__(self):
        super().__init__()
        from torchvision.models import googlenet

        net = googlenet(weights=None, aux_logits=False, init_weights=True)
        net.fc = nn.Identity()
        net.dropout = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def make_encoder(backbone: str) -> nn.Module:
    if backbone == "small":
        return SmallEncoder()
    if backbone == "full":
        return GoogLeNetEncoder()
    raise ValueError(f"unknown backbone {backbone!r}")


def _make_head(feature_dim: int, head_width: int) -> nn.Module:
    return nn.Sequential(
        nn.Linear(feature_dim, head_width), nn.ReLU(inplace=True), nn.Linear(head_width, 7)
    )


class AprNet(nn.Module):
    """Time-distributed absolute regressor: the encoder runs with shared
    weights on each of the 3 crops; three separate heads emit one pose each."""

    def __init__(self, config: AprConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = make_encoder(config.backbone)
        self.heads = nn.ModuleList(
            _make_head(self.encoder.feature_dim, config.head_width) for _ in range(3)
        )

    def encode(self, crops: torch.Tensor) -> torch.Tensor:
        """(b, 3, c, h, w) -> per-timestep features (b, 3, f)."""
        b, t = crops.shape[:2]
        feats = self.encoder(crops.reshape(b * t, *crops.shape[2:]))
        return feats.reshape(b, t, -1)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.ndim != 5 or crops.shape[1] != 3 or crops.shape[2] != 3:
            raise ValueError(f"expected crops of shape (b, 3, 3, h, w), got {tuple(crops.shape)}")
        feats = self.encode(crops)
        return torch.stack([head(feats[:, k]) for k, head in enumerate(self.heads)], dim=1)


class PoseNetBaseline(nn.Module):
    """Single-frame variant: one encoder, one head."""

    def __init__(self, config: AprConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = make_encoder(config.backbone)
        self.head = _make_head(self.encoder.feature_dim, config.head_width)

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        if crop.ndim != 4 or crop.shape[1] != 3:
            raise ValueError(f"expected crops of shape (b, 3, h, w), got {tuple(crop.shape)}")
        return self.head(self.encoder(crop))


def apr_loss(
    pred: torch.Tensor,
    gt_pos: torch.Tensor,
    gt_quat: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 30.0,
) -> torch.Tensor:
    """Mean over timesteps (and batch) of the weighted position/orientation
    terms; pred is (..., 3, 7) against (..., 3, 3) and (..., 3, 4) targets."""
    if pred.shape[-2] != 3:
        raise ValueError(f"expected 3 timesteps, got {pred.shape[-2]}")
    return pose_terms(pred, gt_pos, gt_quat, alpha, beta).mean()


def posenet_loss(
    pred: torch.Tensor,
    gt_pos: torch.Tensor,
    gt_quat: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 30.0,
) -> torch.Tensor:
    return pose_terms(pred, gt_pos, gt_quat, alpha, beta).mean()


@dataclass(frozen=True)
class AprOutput:
    """Per-window prediction: raw (3, 7) head outputs; exposed poses carry
    normalized quaternions. The middle pose is the canonical prediction."""

    raw: np.ndarray

    def poses(self) -> list[Pose]:
        return [raw_to_pose(self.raw[k]) for k in range(3)]

    @property
    def middle_pose(self) -> Pose:
        return raw_to_pose(self.raw[1])


def raw_to_pose(vec7: np.ndarray) -> Pose:
    """7-vector to Pose; a degenerate (near-zero) quaternion falls back to
    identity so prediction always yields a unit orientation."""
    quat = vec7[3:7]
    if np.linalg.norm(quat) < 1e-8:
        quat = QUAT_IDENTITY
    return Pose(np.asarray(vec7[:3], dtype=np.float64), quat)


# --- training / prediction ---------------------------------------------------

def _require_train_mean(arrays: WindowArrays) -> np.ndarray:
    if arrays.mean_image is None:
        raise ValueError("window arrays carry no mean image (run attach_mean_images)")
    if arrays.mean_source != "train":
        raise ValueError(
            f"mean image must come from the train split, got {arrays.mean_source!r}"
        )
    return arrays.mean_image


def _window_tensor(crops_u8: np.ndarray, mean: np.ndarray) -> torch.Tensor:
    """(b, 3, h, w, 3) uint8 -> mean-subtracted (b, 3, 3, h, w) float32."""
    x = crops_u8.astype(np.float32) / np.float32(255.0) - mean
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3)))


def _frame_tensor(crops_u8: np.ndarray, mean: np.ndarray) -> torch.Tensor:
    """(b, h, w, 3) uint8 -> mean-subtracted (b, 3, h, w) float32."""
    x = crops_u8.astype(np.float32) / np.float32(255.0) - mean
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _resume_state(model: nn.Module, resume_from: ModelCheckpoint | None, kind: str, config):
    if resume_from is None:
        return
    if resume_from.kind != kind:
        raise CheckpointMismatchError(f"resume checkpoint kind {resume_from.kind!r} != {kind!r}")
    if resume_from.config != asdict(config):
        raise CheckpointMismatchError("resume checkpoint config differs from requested config")
    model.load_state_dict(resume_from.state_dict)


def train_apr(
    arrays: WindowArrays,
    config: AprConfig,
    resume_from: ModelCheckpoint | None = None,
) -> ModelCheckpoint:
    """Train the time-distributed regressor on mean-subtracted train crops.

    The checkpoint stores the mean image so prediction reproduces the
    training preprocessing.
    """
    config.validate()
    if len(arrays) == 0:
        raise ValueError("train_apr: empty dataset")
    mean = _require_train_mean(arrays)
    torch.manual_seed(config.seed)
    model = AprNet(config)
    _resume_state(model, resume_from, "apr", config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gt_pos = torch.from_numpy(arrays.abs_pos.astype(np.float32))
    gt_quat = torch.from_numpy(arrays.abs_quat.astype(np.float32))

    def batch_fn(idx: np.ndarray) -> torch.Tensor:
        crops = _window_tensor(arrays.crops[idx], mean)
        pred = model(crops)
        return apr_loss(pred, gt_pos[idx], gt_quat[idx], config.alpha, config.beta)

    metrics, interrupted = train_loop(
        len(arrays),
        batch_fn,
        optimizer,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed + 1,
        label="apr",
    )
    if resume_from is not None:
        metrics = resume_from.metrics + [(e + len(resume_from.metrics), l) for e, l in metrics]
    return ModelCheckpoint(
        kind="apr",
        config=asdict(config),
        state_dict=model.state_dict(),
        metrics=metrics,
        extra={"mean_image": torch.from_numpy(mean.copy()), "interrupted": interrupted},
    )


def _load_apr_model(ck: ModelCheckpoint) -> tuple[AprNet, np.ndarray]:
    config = AprConfig(**ck.config)
    model = AprNet(config)
    model.load_state_dict(ck.state_dict)
    model.eval()
    return model, ck.extra["mean_image"].numpy()


def predict_apr(ck: ModelCheckpoint, arrays: WindowArrays, batch_size: int = 64) -> np.ndarray:
    """Raw (n, 3, 7) head outputs for every window, in window order."""
    if ck.kind != "apr":
        raise CheckpointMismatchError(f"expected an apr checkpoint, got {ck.kind!r}")
    model, mean = _load_apr_model(ck)
    outs = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            crops = _window_tensor(arrays.crops[start : start + batch_size], mean)
            outs.append(model(crops).numpy())
    if not outs:
        return np.zeros((0, 3, 7), dtype=np.float32)
    return np.concatenate(outs)


def apr_outputs(raw: np.ndarray) -> list[AprOutput]:
    return [AprOutput(raw[i]) for i in range(raw.shape[0])]


def train_posenet(
    arrays: WindowArrays,
    config: AprConfig,
    resume_from: ModelCheckpoint | None = None,
) -> ModelCheckpoint:
    """Train the single-frame baseline on the middle frame of each window,
    so it consumes exactly the same data as the windowed regressor."""
    config.validate()
    if len(arrays) == 0:
        raise ValueError("train_posenet: empty dataset")
    mean = _require_train_mean(arrays)
    torch.manual_seed(config.seed)
    model = PoseNetBaseline(config)
    _resume_state(model, resume_from, "posenet", config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gt_pos = torch.from_numpy(arrays.abs_pos[:, 1].astype(np.float32))
    gt_quat = torch.from_numpy(arrays.abs_quat[:, 1].astype(np.float32))

    def batch_fn(idx: np.ndarray) -> torch.Tensor:
        crops = _frame_tensor(arrays.crops[idx, 1], mean)
        pred = model(crops)
        return posenet_loss(pred, gt_pos[idx], gt_quat[idx], config.alpha, config.beta)

    metrics, interrupted = train_loop(
        len(arrays),
        batch_fn,
        optimizer,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed + 1,
        label="posenet",
    )
    if resume_from is not None:
        metrics = resume_from.metrics + [(e + len(resume_from.metrics), l) for e, l in metrics]
    return ModelCheckpoint(
        kind="posenet",
        config=asdict(config),
        state_dict=model.state_dict(),
        metrics=metrics,
        extra={"mean_image": torch.from_numpy(mean.copy()), "interrupted": interrupted},
    )


def predict_posenet(ck: ModelCheckpoint, arrays: WindowArrays, batch_size: int = 64) -> np.ndarray:
    """Raw (n, 7) outputs on the middle frames."""
    if ck.kind != "posenet":
        raise CheckpointMismatchError(f"expected a posenet checkpoint, got {ck.kind!r}")
    config = AprConfig(**ck.config)
    model = PoseNetBaseline(config)
    model.load_state_dict(ck.state_dict)
    model.eval()
    mean = ck.extra["mean_image"].numpy()
    outs = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            crops = _frame_tensor(arrays.crops[start : start + batch_size, 1], mean)
            outs.append(model(crops).numpy())
    if not outs:
        return np.zeros((0, 7), dtype=np.float32)
    return np.concatenate(outs)


def apr_parameter_count(config: AprConfig) -> int:
    torch.manual_seed(0)
    return count_parameters(AprNet(config))

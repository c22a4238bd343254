"""Relative pose regression: the 3-step zone-mean flow feature sequence runs
through 3 stacked LSTM layers; two heads map each step's output to a
displacement (3x3 total) and a rotation change (3x4 total).

Also provides dead-reckoning integration of relative poses into an absolute
trajectory for the displacement-evaluation protocol.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from . import geometry
from .checkpoint import ModelCheckpoint
from .dataset import WindowArrays
from .errors import CheckpointMismatchError
from .geometry import Pose, RelativePose
from .net_util import count_parameters, pose_terms, train_loop


@dataclass(frozen=True)
class RprConfig:
    feature_width: int = 512  # 2 * zones_x * zones_y
    hidden_size: int = 64
    num_layers: int = 3
    alpha: float = 1.0
    beta: float = 1.0  # environment-dependent; grid-search knob
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.feature_width < 1 or self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("feature_width, hidden_size and num_layers must be positive")
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("alpha must be positive and beta nonnegative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")


class RprNet(nn.Module):
    def __init__(self, config: RprConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.lstm = nn.LSTM(
            config.feature_width, config.hidden_size, config.num_layers, batch_first=True
        )
        self.head_disp = nn.Linear(config.hidden_size, 3)
        self.head_rot = nn.Linear(config.hidden_size, 4)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(b, 3, feature_width) -> displacements (b, 3, 3), rotations (b, 3, 4)."""
        if features.ndim != 3 or features.shape[1] != 3:
            raise ValueError(
                f"expected features of shape (b, 3, {self.config.feature_width}), "
                f"got {tuple(features.shape)}"
            )
        if features.shape[2] != self.config.feature_width:
            raise ValueError(
                f"feature width {features.shape[2]} != configured {self.config.feature_width}"
            )
        out, _ = self.lstm(features)
        return self.head_disp(out), self.head_rot(out)


def rpr_loss(
    pred_disp: torch.Tensor,
    pred_rot: torch.Tensor,
    gt_disp: torch.Tensor,
    gt_rot: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> torch.Tensor:
    """Mean over the three pairs (and batch) of
    alpha*||dp_gt - dp|| + beta*||dq_gt - dq/||dq||||.

    Ground-truth displacements must already be in first-frame-local
    coordinates; rotation targets are hemisphere-aligned internally.
    """
    pred = torch.cat([pred_disp, pred_rot], dim=-1)
    return pose_terms(pred, gt_disp, gt_rot, alpha, beta).mean()


def integrate_dead_reckoning(start: Pose, rels: Iterable[RelativePose]) -> list[Pose]:
    """Chain relative motions from a start pose; returns len(rels)+1 poses
    beginning with the start."""
    poses = [start]
    for rel in rels:
        poses.append(geometry.apply_relative(poses[-1], rel))
    return poses


def train_rpr(
    arrays: WindowArrays,
    config: RprConfig,
    resume_from: ModelCheckpoint | None = None,
) -> ModelCheckpoint:
    config.validate()
    if len(arrays) == 0:
        raise ValueError("train_rpr: empty dataset")
    if arrays.features.shape[2] != config.feature_width:
        raise ValueError(
            f"dataset feature width {arrays.features.shape[2]} != config "
            f"{config.feature_width} (check zone counts)"
        )
    torch.manual_seed(config.seed)
    model = RprNet(config)
    if resume_from is not None:
        if resume_from.kind != "rpr":
            raise CheckpointMismatchError(f"resume checkpoint kind {resume_from.kind!r} != 'rpr'")
        if resume_from.config != asdict(config):
            raise CheckpointMismatchError("resume checkpoint config differs from requested config")
        model.load_state_dict(resume_from.state_dict)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    feats = torch.from_numpy(arrays.features)
    gt_disp = torch.from_numpy(arrays.rel_disp.astype(np.float32))
    gt_rot = torch.from_numpy(arrays.rel_quat.astype(np.float32))

    def batch_fn(idx: np.ndarray) -> torch.Tensor:
        disp, rot = model(feats[idx])
        return rpr_loss(disp, rot, gt_disp[idx], gt_rot[idx], config.alpha, config.beta)

    metrics, interrupted = train_loop(
        len(arrays),
        batch_fn,
        optimizer,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed + 1,
        label="rpr",
    )
    if resume_from is not None:
        metrics = resume_from.metrics + [(e + len(resume_from.metrics), l) for e, l in metrics]
    return ModelCheckpoint(
        kind="rpr",
        config=asdict(config),
        state_dict=model.state_dict(),
        metrics=metrics,
        extra={"interrupted": interrupted},
    )


def predict_rpr(
    ck: ModelCheckpoint, arrays: WindowArrays, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Raw (n, 3, 3) displacements and (n, 3, 4) rotations per window."""
    if ck.kind != "rpr":
        raise CheckpointMismatchError(f"expected an rpr checkpoint, got {ck.kind!r}")
    config = RprConfig(**ck.config)
    model = RprNet(config)
    model.load_state_dict(ck.state_dict)
    model.eval()
    disps, rots = [], []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            d, r = model(torch.from_numpy(arrays.features[start : start + batch_size]))
            disps.append(d.numpy())
            rots.append(r.numpy())
    if not disps:
        return np.zeros((0, 3, 3), dtype=np.float32), np.zeros((0, 3, 4), dtype=np.float32)
    return np.concatenate(disps), np.concatenate(rots)


def rpr_parameter_count(config: RprConfig | None = None) -> int:
    torch.manual_seed(0)
    return count_parameters(RprNet(config or RprConfig()))

"""Fusion pose estimator: packs the absolute and relative predictions into a
3 x 14 sequence tensor, runs 2 stacked LSTM layers, and regresses the final
6DoF pose from the last step through two parallel heads.

Row k of the input pairs the absolute pose at timestep k with relative pair
k: [x, y, z, w, p, q, r, dx, dy, dz, dw, dp, dq, dr].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .apr import predict_apr, raw_to_pose
from .checkpoint import ModelCheckpoint
from .dataset import WindowArrays
from .errors import CheckpointMismatchError, DependencyError
from .geometry import Pose
from .net_util import QUAT_NORM_FLOOR, count_parameters, pose_terms, train_loop
from .rpr import predict_rpr

FUSION_COLUMNS = 14


@dataclass(frozen=True)
class PeConfig:
    hidden_size: int = 64
    num_layers: int = 2
    alpha: float = 1.0  # environment-dependent; grid-search knob
    beta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be positive")
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be nonnegative and beta positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")


def _normalize_quat_rows(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(norm, QUAT_NORM_FLOOR)


def build_fusion_input(apr_raw: np.ndarray, rpr_disp: np.ndarray, rpr_rot: np.ndarray) -> np.ndarray:
    """One window's (3, 14) fusion tensor from APR raw (3, 7) and RPR raw
    (3, 3) + (3, 4) outputs; quaternions are normalized before insertion."""
    return build_fusion_batch(apr_raw[None], rpr_disp[None], rpr_rot[None])[0]


def build_fusion_batch(
    apr_raw: np.ndarray, rpr_disp: np.ndarray, rpr_rot: np.ndarray
) -> np.ndarray:
    if apr_raw.shape[-2:] != (3, 7):
        raise ValueError(f"apr output must end in (3, 7), got {apr_raw.shape}")
    if rpr_disp.shape[-2:] != (3, 3) or rpr_rot.shape[-2:] != (3, 4):
        raise ValueError(
            f"rpr outputs must end in (3, 3) and (3, 4), got {rpr_disp.shape} / {rpr_rot.shape}"
        )
    if not (apr_raw.shape[0] == rpr_disp.shape[0] == rpr_rot.shape[0]):
        raise ValueError("batch sizes differ between apr and rpr outputs")
    out = np.concatenate(
        [
            apr_raw[..., :3],
            _normalize_quat_rows(apr_raw[..., 3:7]),
            rpr_disp,
            _normalize_quat_rows(rpr_rot),
        ],
        axis=-1,
    ).astype(np.float32)
    assert out.shape[-1] == FUSION_COLUMNS
    return out


class PeNet(nn.Module):
    def __init__(self, config: PeConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.lstm = nn.LSTM(FUSION_COLUMNS, config.hidden_size, config.num_layers, batch_first=True)
        self.head_pos = nn.Linear(config.hidden_size, 3)
        self.head_quat = nn.Linear(config.hidden_size, 4)

    def forward(self, fusion: torch.Tensor) -> torch.Tensor:
        """(b, 3, 14) -> raw (b, 7) final pose from the last sequence step."""
        if fusion.ndim != 3 or fusion.shape[1] != 3 or fusion.shape[2] != FUSION_COLUMNS:
            raise ValueError(
                f"expected fusion input of shape (b, 3, {FUSION_COLUMNS}), got {tuple(fusion.shape)}"
            )
        out, _ = self.lstm(fusion)
        last = out[:, -1]
        return torch.cat([self.head_pos(last), self.head_quat(last)], dim=-1)


def pe_loss(
    pred: torch.Tensor,
    gt_pos: torch.Tensor,
    gt_quat: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> torch.Tensor:
    """alpha*||p_gt - p|| + beta*||q_gt - q/||q|||| averaged over the batch."""
    return pose_terms(pred, gt_pos, gt_quat, alpha, beta).mean()


def _upstream_fusion(
    apr_ck: ModelCheckpoint, rpr_ck: ModelCheckpoint, arrays: WindowArrays
) -> np.ndarray:
    if apr_ck is None or rpr_ck is None:
        raise DependencyError("fusion stage requires both apr and rpr checkpoints")
    if apr_ck.kind != "apr":
        raise DependencyError(f"expected an apr checkpoint, got {apr_ck.kind!r}")
    if rpr_ck.kind != "rpr":
        raise DependencyError(f"expected an rpr checkpoint, got {rpr_ck.kind!r}")
    apr_raw = predict_apr(apr_ck, arrays)
    rpr_disp, rpr_rot = predict_rpr(rpr_ck, arrays)
    return build_fusion_batch(apr_raw, rpr_disp, rpr_rot)


def train_pe(
    arrays: WindowArrays,
    apr_ck: ModelCheckpoint,
    rpr_ck: ModelCheckpoint,
    config: PeConfig,
    resume_from: ModelCheckpoint | None = None,
) -> ModelCheckpoint:
    """Train the fusion stage on frozen upstream predictions over the train
    windows; the supervision target is the ground-truth pose at the window
    center."""
    config.validate()
    if len(arrays) == 0:
        raise ValueError("train_pe: empty dataset")
    fusion = _upstream_fusion(apr_ck, rpr_ck, arrays)
    torch.manual_seed(config.seed)
    model = PeNet(config)
    if resume_from is not None:
        if resume_from.kind != "pe":
            raise CheckpointMismatchError(f"resume checkpoint kind {resume_from.kind!r} != 'pe'")
        if resume_from.config != asdict(config):
            raise CheckpointMismatchError("resume checkpoint config differs from requested config")
        model.load_state_dict(resume_from.state_dict)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    fusion_t = torch.from_numpy(fusion)
    gt_pos = torch.from_numpy(arrays.abs_pos[:, 1].astype(np.float32))
    gt_quat = torch.from_numpy(arrays.abs_quat[:, 1].astype(np.float32))

    def batch_fn(idx: np.ndarray) -> torch.Tensor:
        pred = model(fusion_t[idx])
        return pe_loss(pred, gt_pos[idx], gt_quat[idx], config.alpha, config.beta)

    metrics, interrupted = train_loop(
        len(arrays),
        batch_fn,
        optimizer,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed + 1,
        label="pe",
    )
    if resume_from is not None:
        metrics = resume_from.metrics + [(e + len(resume_from.metrics), l) for e, l in metrics]
    return ModelCheckpoint(
        kind="pe",
        config=asdict(config),
        state_dict=model.state_dict(),
        metrics=metrics,
        extra={
            "interrupted": interrupted,
            "apr_fingerprint": apr_ck.fingerprint,
            "rpr_fingerprint": rpr_ck.fingerprint,
        },
    )


def predict_pe(ck: ModelCheckpoint, fusion: np.ndarray, batch_size: int = 512) -> np.ndarray:
    if ck.kind != "pe":
        raise CheckpointMismatchError(f"expected a pe checkpoint, got {ck.kind!r}")
    config = PeConfig(**ck.config)
    model = PeNet(config)
    model.load_state_dict(ck.state_dict)
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, fusion.shape[0], batch_size):
            outs.append(model(torch.from_numpy(fusion[start : start + batch_size])).numpy())
    if not outs:
        return np.zeros((0, 7), dtype=np.float32)
    return np.concatenate(outs)


def predict_fused(
    apr_ck: ModelCheckpoint,
    rpr_ck: ModelCheckpoint,
    pe_ck: ModelCheckpoint,
    arrays: WindowArrays,
) -> tuple[list[Pose], np.ndarray]:
    """Full-pipeline inference: windows -> APR + RPR -> fusion tensor -> one
    final pose per window (raw 7-vectors returned alongside)."""
    if pe_ck is None:
        raise DependencyError("fusion prediction requires a pe checkpoint")
    fusion = _upstream_fusion(apr_ck, rpr_ck, arrays)
    raw = predict_pe(pe_ck, fusion)
    return [raw_to_pose(raw[i]) for i in range(raw.shape[0])], raw


def pe_parameter_count(config: PeConfig | None = None) -> int:
    torch.manual_seed(0)
    return count_parameters(PeNet(config or PeConfig()))

"""Shared pieces of the three network stages: the position/quaternion loss
terms, parameter counting, and the deterministic training loop."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np
import torch

from .errors import TrainingDivergedError

_logger = logging.getLogger(__name__)

QUAT_NORM_FLOOR = 1e-8


def quaternion_residual(pred_quat: torch.Tensor, gt_quat: torch.Tensor) -> torch.Tensor:
    """||q_gt_aligned - q_pred / max(||q_pred||, 1e-8)|| over the last axis.

    The target is hemisphere-aligned to the normalized prediction (sign from
    a detached dot product), so antipodal targets produce identical loss.
    """
    norm = pred_quat.norm(dim=-1, keepdim=True).clamp_min(QUAT_NORM_FLOOR)
    unit = pred_quat / norm
    dot = (unit.detach() * gt_quat).sum(dim=-1, keepdim=True)
    aligned = torch.where(dot < 0, -gt_quat, gt_quat)
    return (aligned - unit).norm(dim=-1)


def pose_terms(
    pred: torch.Tensor,
    gt_pos: torch.Tensor,
    gt_quat: torch.Tensor,
    alpha: float,
    beta: float,
) -> torch.Tensor:
    """Per-element alpha*||p_gt - p_pred||_2 + beta*quaternion residual.

    ``pred`` packs [position(3), quaternion(4)] in its last axis; leading
    axes are arbitrary (batch, timestep, ...).
    """
    if pred.shape[-1] != 7:
        raise ValueError(f"prediction last axis must be 7, got {pred.shape[-1]}")
    pos_err = (gt_pos - pred[..., :3]).norm(dim=-1)
    quat_err = quaternion_residual(pred[..., 3:], gt_quat)
    return alpha * pos_err + beta * quat_err


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def train_loop(
    n_samples: int,
    batch_fn: Callable[[np.ndarray], torch.Tensor],
    optimizer: torch.optim.Optimizer,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    label: str,
) -> tuple[list[tuple[int, float]], bool]:
    """Epoch loop with seeded shuffling and divergence/interrupt handling.

    ``batch_fn`` maps an index array to the batch loss tensor. Returns the
    per-epoch (epoch, mean loss) log and whether the loop was interrupted
    (Ctrl-C); on interrupt the partial log is preserved so the caller can
    still write a checkpoint.
    """
    if n_samples < 1:
        raise ValueError(f"{label}: training set is empty")
    if epochs < 1 or batch_size < 1:
        raise ValueError(f"{label}: epochs and batch_size must be positive")
    rng = np.random.default_rng(seed)
    metrics: list[tuple[int, float]] = []
    interrupted = False
    try:
        for epoch in range(epochs):
            order = rng.permutation(n_samples)
            losses = []
            for start in range(0, n_samples, batch_size):
                idx = order[start : start + batch_size]
                optimizer.zero_grad()
                loss = batch_fn(idx)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{label}: non-finite loss {loss.item()} at epoch {epoch}, "
                        f"batch starting {start} (batch size {len(idx)}, "
                        f"first indices {idx[:5].tolist()})"
                    )
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            metrics.append((epoch, float(np.mean(losses))))
            if epoch == 0 or (epoch + 1) % 10 == 0 or epoch == epochs - 1:
                _logger.info("%s epoch %d/%d: loss %.6g", label, epoch + 1, epochs, metrics[-1][1])
    except KeyboardInterrupt:
        _logger.warning("%s interrupted at epoch %d; partial metrics kept", label, len(metrics))
        interrupted = True
    return metrics, interrupted


def metrics_csv(metrics: list[tuple[int, float]]) -> str:
    """One 'epoch,loss' row per epoch; %.10g keeps identical runs byte-identical."""
    return "".join(f"{epoch},{loss:.10g}\n" for epoch, loss in metrics)

"""Median-error metrics, improvement percentages, per-axis displacement
medians, and trajectory plotting/report export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import geometry
from .geometry import Pose


def median(values) -> float:
    """Middle of the sorted values; even counts average the central pair."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("median of an empty list is undefined")
    return float(np.median(values))


@dataclass(frozen=True)
class TrajectoryMetrics:
    position_median_m: float
    orientation_median_deg: float
    count: int


def evaluate_trajectory(pred: Sequence[Pose], gt: Sequence[Pose]) -> TrajectoryMetrics:
    """Median Euclidean position error and median geodesic orientation error
    over index-aligned pose streams."""
    if len(pred) != len(gt):
        raise ValueError(f"stream lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("cannot evaluate empty streams")
    pos_err = [float(np.linalg.norm(p.position - g.position)) for p, g in zip(pred, gt)]
    ang_err = [geometry.angular_error_deg(p.orientation, g.orientation) for p, g in zip(pred, gt)]
    return TrajectoryMetrics(median(pos_err), median(ang_err), len(pred))


def improvement_pct(apr_median: float, fused_median: float) -> float | None:
    """(apr - fused) / apr * 100; positive when fusion is better. A zero
    baseline median makes the ratio undefined (returns None, reported n/a)."""
    if apr_median < 0 or fused_median < 0:
        raise ValueError("medians must be nonnegative")
    if apr_median == 0:
        return None
    return (apr_median - fused_median) / apr_median * 100.0


@dataclass(frozen=True)
class AxisMedians:
    """Per-axis displacement error medians in cm plus the error as a fraction
    of the median ground-truth step magnitude (None if steps are all zero)."""

    median_cm: tuple[float, float, float]
    step_magnitude_cm: float
    relative: tuple[float, float, float] | None


def rpr_axis_medians(pred_disp: np.ndarray, gt_disp: np.ndarray) -> AxisMedians:
    """Displacement evaluation: per-axis absolute-error medians of aligned
    (m, 3) displacement streams, converted to centimeters."""
    pred_disp = np.asarray(pred_disp, dtype=np.float64)
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    if pred_disp.shape != gt_disp.shape or pred_disp.ndim != 2 or pred_disp.shape[1] != 3:
        raise ValueError(f"expected aligned (m, 3) arrays, got {pred_disp.shape} / {gt_disp.shape}")
    if pred_disp.shape[0] == 0:
        raise ValueError("cannot evaluate empty displacement streams")
    err_cm = np.abs(pred_disp - gt_disp) * 100.0
    med = tuple(float(np.median(err_cm[:, k])) for k in range(3))
    step_cm = float(np.median(np.linalg.norm(gt_disp, axis=1))) * 100.0
    rel = tuple(m / step_cm for m in med) if step_cm > 0 else None
    return AxisMedians(med, step_cm, rel)


def spatial_extent(poses: Sequence[Pose]) -> tuple[float, float, float]:
    """Axis-aligned bounding box of the positions (meters)."""
    if len(poses) == 0:
        raise ValueError("cannot compute the extent of an empty stream")
    pos = np.array([p.position for p in poses])
    size = pos.max(axis=0) - pos.min(axis=0)
    return tuple(float(s) for s in size)


@dataclass
class EvalReport:
    methods: dict[str, TrajectoryMetrics] = field(default_factory=dict)
    improvement_pct: float | None = None
    improvement_applicable: bool = False
    axis_medians: AxisMedians | None = None
    extent_m: tuple[float, float, float] | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "methods": {
                name: {
                    "position_median_m": m.position_median_m,
                    "orientation_median_deg": m.orientation_median_deg,
                    "count": m.count,
                }
                for name, m in sorted(self.methods.items())
            }
        }
        if self.improvement_applicable:
            out["improvement_pct"] = (
                "n/a" if self.improvement_pct is None else self.improvement_pct
            )
        if self.axis_medians is not None:
            out["rpr_axis_median_cm"] = list(self.axis_medians.median_cm)
            out["rpr_step_magnitude_cm"] = self.axis_medians.step_magnitude_cm
            if self.axis_medians.relative is not None:
                out["rpr_axis_relative"] = list(self.axis_medians.relative)
        if self.extent_m is not None:
            out["spatial_extent_m"] = list(self.extent_m)
        return out


def build_report(
    methods: dict[str, TrajectoryMetrics],
    gt: Sequence[Pose],
    axis_medians: AxisMedians | None = None,
) -> EvalReport:
    report = EvalReport(methods=dict(methods), axis_medians=axis_medians)
    report.extent_m = spatial_extent(gt)
    if "apr" in methods and "fused" in methods:
        report.improvement_applicable = True
        report.improvement_pct = improvement_pct(
            methods["apr"].position_median_m, methods["fused"].position_median_m
        )
    return report


def write_report_yaml(report: EvalReport, path) -> None:
    Path(path).write_text(yaml.safe_dump(report.to_dict(), sort_keys=True))


def format_report_table(report: EvalReport) -> str:
    """Fixed-column plain-text table for diffing in CI."""
    lines = [f"{'method':<10} {'pos_median_m':>14} {'ori_median_deg':>15} {'count':>7}"]
    for name, m in sorted(report.methods.items()):
        lines.append(
            f"{name:<10} {m.position_median_m:>14.6f} {m.orientation_median_deg:>15.6f} "
            f"{m.count:>7d}"
        )
    if report.improvement_applicable:
        shown = "n/a" if report.improvement_pct is None else f"{report.improvement_pct:+.2f}"
        lines.append(f"improvement_pct {shown}")
    if report.axis_medians is not None:
        ax = report.axis_medians
        lines.append(
            "rpr_axis_median_cm "
            + " ".join(f"{v:.4f}" for v in ax.median_cm)
            + f"  step_cm {ax.step_magnitude_cm:.4f}"
        )
        if ax.relative is not None:
            lines.append("rpr_axis_relative " + " ".join(f"{v:.4f}" for v in ax.relative))
    if report.extent_m is not None:
        lines.append("spatial_extent_m " + " ".join(f"{v:.3f}" for v in report.extent_m))
    return "\n".join(lines) + "\n"


def write_report_table(report: EvalReport, path) -> None:
    Path(path).write_text(format_report_table(report))


def export_trajectory_plot(streams: dict[str, Sequence[Pose]], path) -> None:
    """Top-down x-y plot of one or more pose streams with a legend.

    Rendering is deterministic for identical inputs (fixed figure size,
    Agg backend).
    """
    if not streams:
        raise ValueError("need at least one pose stream to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 6.0), dpi=120)
    for name, poses in streams.items():
        pos = np.array([p.position for p in poses])
        if pos.size == 0:
            continue
        style = {"ground_truth": dict(color="tab:blue", lw=1.5)}.get(name, dict(lw=1.0))
        ax.plot(pos[:, 0], pos[:, 1], label=name, **style)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

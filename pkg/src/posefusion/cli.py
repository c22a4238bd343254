"""Command-line entry point: ``simulate``, ``train {apr|rpr|pe}``,
``evaluate``, and ``predict`` subcommands over a YAML experiment config.

Every run works inside one experiment directory (checkpoints, logs,
reports, predictions, caches); nothing is written outside it. Exit codes:
0 success, 2 usage/config error, 3 data or ingest error, 4 missing
dependency (e.g. training the fusion stage before its inputs exist).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import apr as aprmod
from . import pe as pemod
from . import rpr as rprmod
from .checkpoint import load_checkpoint, save_checkpoint, file_sha256
from .config import ExperimentConfig, load_config
from .dataset import (
    CROP_SIZE,
    DatasetSplit,
    SEVEN_SCENES_RATE_HZ,
    attach_mean_images,
    load_generic,
    load_seven_scenes,
    load_window_arrays,
    read_manifest,
    undersample_split,
    write_pose_file,
)
from .errors import (
    ConfigError,
    DataError,
    DependencyError,
    FlowFormatError,
    IngestError,
    SimulationSpecError,
)
from .evaluation import (
    build_report,
    evaluate_trajectory,
    export_trajectory_plot,
    rpr_axis_medians,
    write_report_table,
    write_report_yaml,
)
from .flow import CameraIntrinsics, FloDirectoryFlow, SyntheticFlowProvider, write_flo_file
from .net_util import metrics_csv
from .simulate import simulate_trajectory

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DEPENDENCY = 4

STAGES = ("apr", "rpr", "pe")
CHECKPOINT_NAMES = {"apr": "apr.pt", "posenet": "posenet.pt", "rpr": "rpr.pt", "pe": "pe.pt"}


@dataclass
class ExperimentPaths:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def cache(self) -> Path:
        return self.root / "cache"

    def checkpoint(self, kind: str) -> Path:
        return self.checkpoints / CHECKPOINT_NAMES[kind]

    def ensure(self) -> "ExperimentPaths":
        for p in (self.root, self.checkpoints, self.logs, self.reports, self.predictions, self.cache):
            p.mkdir(parents=True, exist_ok=True)
        return self


@dataclass
class LoadedData:
    train: DatasetSplit
    test: DatasetSplit
    crop_camera: CameraIntrinsics | None
    plane_depth_m: float | None
    source_rate_hz: float
    root: Path | None


def apply_determinism(cfg: ExperimentConfig, deterministic_flag: bool) -> None:
    deterministic = deterministic_flag or cfg.deterministic
    if cfg.torch_threads is not None:
        torch.set_num_threads(int(cfg.torch_threads))
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def load_dataset(cfg: ExperimentConfig) -> LoadedData:
    src = cfg.dataset.source
    if src == "simulate":
        spec = cfg.simulate.scenario()
        train, test = simulate_trajectory(spec)
        data = LoadedData(
            train,
            test,
            spec.camera.crop_intrinsics(),
            spec.plane_depth_m,
            spec.frame_rate_hz,
            None,
        )
    elif src == "generic":
        root = Path(cfg.dataset.root)
        manifest = read_manifest(root / cfg.dataset.manifest)
        train, test = load_generic(root, manifest)
        crop_cam = None
        if manifest.camera is not None and manifest.image_size is not None:
            w, h = manifest.image_size
            crop_cam = manifest.camera.shifted((w - CROP_SIZE) // 2, (h - CROP_SIZE) // 2)
        data = LoadedData(train, test, crop_cam, manifest.plane_depth_m, manifest.frame_rate_hz, root)
    elif src == "seven-scenes":
        train, test = load_seven_scenes(cfg.dataset.root, cfg.dataset.scene)
        data = LoadedData(train, test, None, None, SEVEN_SCENES_RATE_HZ, Path(cfg.dataset.root))
    else:  # pragma: no cover - config validation rejects this earlier
        raise ConfigError(f"unknown dataset source {src!r}")
    if cfg.dataset.undersample_to_hz is not None:
        data.train = undersample_split(data.train, data.source_rate_hz, cfg.dataset.undersample_to_hz)
        data.test = undersample_split(data.test, data.source_rate_hz, cfg.dataset.undersample_to_hz)
    return data


def make_flow_provider(cfg: ExperimentConfig, data: LoadedData, override: str | None):
    provider = override or cfg.flow.provider
    if provider == "synthetic":
        if data.crop_camera is None or data.plane_depth_m is None:
            raise ConfigError(
                "synthetic flow needs camera intrinsics and a plane depth; use a simulated "
                "dataset (or a manifest carrying camera/image_size/plane_depth_m), or --flow flo-dir"
            )
        return SyntheticFlowProvider(data.crop_camera, data.plane_depth_m, CROP_SIZE, CROP_SIZE)
    if provider == "flo-dir":
        if not cfg.flow.flo_dir:
            raise ConfigError("flow.flo_dir must be set for the flo-dir provider")
        flo_dir = Path(cfg.flow.flo_dir)
        if not flo_dir.is_absolute() and data.root is not None:
            flo_dir = data.root / flo_dir
        return FloDirectoryFlow(flo_dir)
    raise ConfigError(f"unknown flow provider {provider!r}")


def build_arrays(cfg: ExperimentConfig, data: LoadedData, provider, paths: ExperimentPaths, splits):
    attach_mean_images(
        data.train, data.test, cache_path=paths.cache / "mean_image.flo3"
    )
    out = {}
    for name in splits:
        split = data.train if name == "train" else data.test
        out[name] = load_window_arrays(split, provider, cfg.flow.zones_x, cfg.flow.zones_y)
    return out


def snapshot_config(config_path: Path, paths: ExperimentPaths) -> None:
    (paths.root / "config.snapshot.yaml").write_bytes(Path(config_path).read_bytes())


def write_metrics_log(ck, kind: str, paths: ExperimentPaths) -> Path:
    log_path = paths.logs / f"{kind}_metrics.csv"
    log_path.write_text(metrics_csv(ck.metrics))
    return log_path


def effective_rpr_config(cfg: ExperimentConfig) -> rprmod.RprConfig:
    width = 2 * cfg.flow.zones_x * cfg.flow.zones_y
    if cfg.rpr.feature_width != width:
        return dataclasses.replace(cfg.rpr, feature_width=width)
    return cfg.rpr


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    spec = cfg.simulate.scenario()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)

    train, test = simulate_trajectory(spec)
    from PIL import Image

    sequences_meta = []
    for split in (train, test):
        for seq in split.sequences:
            seq_id = seq[0].sequence
            img_dir = out / "images" / seq_id
            img_dir.mkdir(parents=True, exist_ok=True)
            for frame in seq:
                Image.fromarray(frame.image).save(img_dir / f"frame-{frame.index:06d}.png")
            pose_path = out / "poses" / f"{seq_id}.txt"
            pose_path.parent.mkdir(parents=True, exist_ok=True)
            write_pose_file((f.pose for f in seq), pose_path)
            sequences_meta.append(
                {
                    "id": seq_id,
                    "split": split.name,
                    "images": f"images/{seq_id}/*.png",
                    "poses": f"poses/{seq_id}.txt",
                }
            )
            _logger.info("wrote %s: %d frames", seq_id, len(seq))

    if args.write_flo:
        provider = SyntheticFlowProvider(
            spec.camera.crop_intrinsics(), spec.plane_depth_m, CROP_SIZE, CROP_SIZE
        )
        for split in (train, test):
            for seq in split.sequences:
                flo_dir = out / "flow" / seq[0].sequence
                flo_dir.mkdir(parents=True, exist_ok=True)
                for first, second in zip(seq, seq[1:]):
                    field = provider.flow_for_pair(first, second)
                    write_flo_file(field, flo_dir / f"pair-{first.index:06d}.flo")

    intr = spec.camera.intrinsics()
    manifest = {
        "frame_rate_hz": spec.frame_rate_hz,
        "camera": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
        "image_size": [spec.camera.width, spec.camera.height],
        "plane_depth_m": spec.plane_depth_m,
        "sequences": sequences_meta,
    }
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    print(f"simulated {train.frame_count()} train / {test.frame_count()} test frames -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    apply_determinism(cfg, args.deterministic)
    paths = ExperimentPaths(Path(args.out)).ensure()
    snapshot_config(args.config, paths)
    stage = args.stage

    if stage == "pe":
        for dep in ("apr", "rpr"):
            if not paths.checkpoint(dep).exists():
                raise DependencyError(
                    f"train pe requires the {dep} checkpoint {paths.checkpoint(dep)} "
                    f"(run `train {dep}` first)"
                )

    data = load_dataset(cfg)
    provider = make_flow_provider(cfg, data, args.flow)
    arrays = build_arrays(cfg, data, provider, paths, ["train"])["train"]
    if len(arrays) == 0:
        raise IngestError("train split produced no windows (sequences shorter than 4 frames?)")

    interrupted = False
    if stage == "apr":
        ck = aprmod.train_apr(arrays, cfg.apr)
        save_checkpoint(ck, paths.checkpoint("apr"))
        write_metrics_log(ck, "apr", paths)
        interrupted = bool(ck.extra.get("interrupted"))
        print(f"apr: {len(ck.metrics)} epochs, final loss {ck.metrics[-1][1]:.6g}")
        if args.with_baseline:
            bck = aprmod.train_posenet(arrays, cfg.apr)
            save_checkpoint(bck, paths.checkpoint("posenet"))
            write_metrics_log(bck, "posenet", paths)
            interrupted = interrupted or bool(bck.extra.get("interrupted"))
            print(f"posenet: {len(bck.metrics)} epochs, final loss {bck.metrics[-1][1]:.6g}")
    elif stage == "rpr":
        ck = rprmod.train_rpr(arrays, effective_rpr_config(cfg))
        save_checkpoint(ck, paths.checkpoint("rpr"))
        write_metrics_log(ck, "rpr", paths)
        interrupted = bool(ck.extra.get("interrupted"))
        print(f"rpr: {len(ck.metrics)} epochs, final loss {ck.metrics[-1][1]:.6g}")
    else:
        apr_ck = load_checkpoint(paths.checkpoint("apr"), expected_kind="apr")
        rpr_ck = load_checkpoint(paths.checkpoint("rpr"), expected_kind="rpr")
        ck = pemod.train_pe(arrays, apr_ck, rpr_ck, cfg.pe)
        save_checkpoint(ck, paths.checkpoint("pe"))
        write_metrics_log(ck, "pe", paths)
        interrupted = bool(ck.extra.get("interrupted"))
        print(f"pe: {len(ck.metrics)} epochs, final loss {ck.metrics[-1][1]:.6g}")
    if interrupted:
        print("training interrupted; checkpoint saved with partial metrics", file=sys.stderr)
        return 130
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    apply_determinism(cfg, args.deterministic)
    paths = ExperimentPaths(Path(args.out)).ensure()

    available = {k: paths.checkpoint(k) for k in ("posenet", "apr", "rpr", "pe")}
    present = {k: p for k, p in available.items() if p.exists()}
    if not present:
        print(f"error: no checkpoints found under {paths.checkpoints}", file=sys.stderr)
        return EXIT_USAGE

    data = load_dataset(cfg)
    provider = make_flow_provider(cfg, data, args.flow)
    arrays = build_arrays(cfg, data, provider, paths, ["test"])["test"]
    if len(arrays) == 0:
        raise IngestError("test split produced no windows")
    gt = arrays.center_poses()

    methods = {}
    streams = {"ground_truth": gt}
    if "posenet" in present:
        ck = load_checkpoint(present["posenet"], expected_kind="posenet")
        poses = [aprmod.raw_to_pose(v) for v in aprmod.predict_posenet(ck, arrays)]
        methods["posenet"] = evaluate_trajectory(poses, gt)
        streams["posenet"] = poses
    apr_ck = None
    if "apr" in present:
        apr_ck = load_checkpoint(present["apr"], expected_kind="apr")
        raw = aprmod.predict_apr(apr_ck, arrays)
        poses = [aprmod.raw_to_pose(raw[i, 1]) for i in range(raw.shape[0])]
        methods["apr"] = evaluate_trajectory(poses, gt)
        streams["apr"] = poses
    axis = None
    rpr_ck = None
    if "rpr" in present:
        rpr_ck = load_checkpoint(present["rpr"], expected_kind="rpr")
        disp, _ = rprmod.predict_rpr(rpr_ck, arrays)
        axis = rpr_axis_medians(disp.reshape(-1, 3), arrays.rel_disp.reshape(-1, 3))
    if "pe" in present:
        if apr_ck is None or rpr_ck is None:
            raise DependencyError("evaluating the fused method requires apr and rpr checkpoints")
        pe_ck = load_checkpoint(present["pe"], expected_kind="pe")
        poses, _ = pemod.predict_fused(apr_ck, rpr_ck, pe_ck, arrays)
        methods["fused"] = evaluate_trajectory(poses, gt)
        streams["fused"] = poses

    report = build_report(methods, gt, axis_medians=axis)
    write_report_yaml(report, paths.reports / "report.yaml")
    write_report_table(report, paths.reports / "report.txt")
    print((paths.reports / "report.txt").read_text(), end="")
    if args.plot or cfg.evaluation.plot:
        export_trajectory_plot(streams, paths.reports / "trajectory.png")
        print(f"plot -> {paths.reports / 'trajectory.png'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    apply_determinism(cfg, args.deterministic)
    paths = ExperimentPaths(Path(args.out)).ensure()

    for kind in ("apr", "rpr", "pe"):
        if not paths.checkpoint(kind).exists():
            raise DependencyError(
                f"predict requires the {kind} checkpoint {paths.checkpoint(kind)}"
            )
    apr_ck = load_checkpoint(paths.checkpoint("apr"), expected_kind="apr")
    rpr_ck = load_checkpoint(paths.checkpoint("rpr"), expected_kind="rpr")
    pe_ck = load_checkpoint(paths.checkpoint("pe"), expected_kind="pe")

    if args.input is not None:
        manifest_path = Path(args.input)
        root = manifest_path.parent
        manifest = read_manifest(manifest_path)
        train, test = load_generic(root, manifest)
        crop_cam = None
        if manifest.camera is not None and manifest.image_size is not None:
            w, h = manifest.image_size
            crop_cam = manifest.camera.shifted((w - CROP_SIZE) // 2, (h - CROP_SIZE) // 2)
        data = LoadedData(train, test, crop_cam, manifest.plane_depth_m, manifest.frame_rate_hz, root)
        if cfg.dataset.undersample_to_hz is not None:
            data.train = undersample_split(data.train, data.source_rate_hz, cfg.dataset.undersample_to_hz)
            data.test = undersample_split(data.test, data.source_rate_hz, cfg.dataset.undersample_to_hz)
    else:
        data = load_dataset(cfg)
    provider = make_flow_provider(cfg, data, args.flow)

    split = data.train if args.split == "train" else data.test
    if split.frame_count() and max(len(s) for s in split.sequences) < 4:
        raise IngestError("input sequences have fewer than 4 frames; cannot form windows")
    # mean image comes from the checkpoint; attach a placeholder tag so array
    # assembly does not recompute statistics from the input data
    split.mean_image = apr_ck.extra["mean_image"].numpy()
    split.mean_source = "train"
    arrays = load_window_arrays(split, provider, cfg.flow.zones_x, cfg.flow.zones_y)
    if len(arrays) == 0:
        raise IngestError("input produced no prediction windows")

    poses, _ = pemod.predict_fused(apr_ck, rpr_ck, pe_ck, arrays)
    effective_hz = cfg.dataset.undersample_to_hz or data.source_rate_hz
    header = "\n".join(
        [
            "posefusion predict",
            f"windows {len(poses)}  effective_rate_hz {effective_hz:g}",
            f"apr_checkpoint sha256 {file_sha256(paths.checkpoint('apr'))}",
            f"rpr_checkpoint sha256 {file_sha256(paths.checkpoint('rpr'))}",
            f"pe_checkpoint sha256 {file_sha256(paths.checkpoint('pe'))}",
            "columns: x y z qw qx qy qz",
        ]
    )
    out_path = paths.predictions / f"poses_{args.split}.txt"
    write_pose_file(poses, out_path, header=header)
    print(f"{len(poses)} poses -> {out_path}")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posefusion",
        description="simulate, train, evaluate, and run the fused 6DoF pose pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--out", required=True, help="experiment directory")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--flow", choices=("flo-dir", "synthetic"), default=None,
                       help="override the flow provider")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, strictly deterministic torch ops")

    p_sim = sub.add_parser("simulate", help="render a synthetic dataset to disk")
    common(p_sim)
    p_sim.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p_sim.add_argument("--write-flo", action="store_true",
                       help="also write crop-resolution .flo files for consecutive pairs")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train one pipeline stage")
    p_train.add_argument("stage", choices=STAGES)
    common(p_train)
    p_train.add_argument("--with-baseline", action="store_true",
                         help="with stage apr: also train the single-frame baseline")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="median-error report on the test split")
    common(p_eval)
    p_eval.add_argument("--plot", action="store_true", help="write the trajectory plot")
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="write fused poses for an input sequence")
    common(p_pred)
    p_pred.add_argument("--input", default=None, help="generic manifest to predict on")
    p_pred.add_argument("--split", choices=("train", "test"), default="test")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SimulationSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IngestError, FlowFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY


if __name__ == "__main__":
    sys.exit(main())

"""Single-file checkpoint container shared by the three network stages.

A checkpoint stores the stage kind, the stage config (with a fingerprint so
stale configs are rejected at load time), the weights, the training-metric
history, and stage extras (e.g. the train-split mean image for the
absolute-regression stages).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointMismatchError


def config_fingerprint(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(canon.encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ModelCheckpoint:
    kind: str  # apr | posenet | rpr | pe
    config: dict
    state_dict: dict
    metrics: list[tuple[int, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = config_fingerprint(self.config)


def save_checkpoint(ck: ModelCheckpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": ck.kind,
            "config": ck.config,
            "fingerprint": ck.fingerprint,
            "state_dict": ck.state_dict,
            "metrics": ck.metrics,
            "extra": ck.extra,
        },
        path,
    )


def load_checkpoint(
    path, *, expected_kind: str | None = None, expected_config: dict | None = None
) -> ModelCheckpoint:
    """Load a checkpoint; rejects kind mismatches and, when
    ``expected_config`` is given, config-fingerprint mismatches."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    ck = ModelCheckpoint(
        kind=payload["kind"],
        config=payload["config"],
        state_dict=payload["state_dict"],
        metrics=[tuple(m) for m in payload["metrics"]],
        extra=payload.get("extra", {}),
        fingerprint=payload["fingerprint"],
    )
    if config_fingerprint(ck.config) != ck.fingerprint:
        raise CheckpointMismatchError(f"{path}: stored config does not match its fingerprint")
    if expected_kind is not None and ck.kind != expected_kind:
        raise CheckpointMismatchError(f"{path}: kind {ck.kind!r}, expected {expected_kind!r}")
    if expected_config is not None:
        want = config_fingerprint(expected_config)
        if want != ck.fingerprint:
            raise CheckpointMismatchError(
                f"{path}: config fingerprint {ck.fingerprint[:12]} does not match "
                f"expected {want[:12]}"
            )
    return ck

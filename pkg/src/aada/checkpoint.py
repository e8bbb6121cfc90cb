"""Single-file checkpoints holding all three networks and their context."""

from __future__ import annotations

import dataclasses
import os
import tempfile
from pathlib import Path
from typing import Any

import torch

from .networks import (
    AdapterSpec,
    ClassifierSpec,
    DiscriminatorSpec,
    ModelBundle,
    build_adapter,
    build_classifier,
    build_discriminator,
)

FORMAT_VERSION = 1


def _spec_dict(model) -> dict | None:
    if model is None:
        return None
    return dataclasses.asdict(model.spec)


def save_checkpoint(path: str | Path, bundle: ModelBundle, **extra: Any) -> Path:
    """Write the bundle atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "epoch": bundle.epoch,
        "specs": {
            "classifier": _spec_dict(bundle.classifier),
            "adapter": _spec_dict(bundle.adapter),
            "discriminator": _spec_dict(bundle.discriminator),
        },
        "classifier": bundle.classifier.state_dict(),
        "adapter": bundle.adapter.state_dict() if bundle.adapter is not None else None,
        "discriminator": bundle.discriminator.state_dict() if bundle.discriminator is not None else None,
        "optimizers": bundle.optimizer_states,
    }
    payload.update(extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict]:
    """Rebuild the bundle from a checkpoint; returns ``(bundle, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    specs = payload["specs"]
    classifier = build_classifier(ClassifierSpec(**{**specs["classifier"], "pretrained_backbone": None}))
    classifier.load_state_dict(payload["classifier"])
    adapter = discriminator = None
    if specs.get("adapter") and payload.get("adapter") is not None:
        adapter = build_adapter(AdapterSpec(**specs["adapter"]))
        adapter.load_state_dict(payload["adapter"])
    if specs.get("discriminator") and payload.get("discriminator") is not None:
        discriminator = build_discriminator(DiscriminatorSpec(**specs["discriminator"]))
        discriminator.load_state_dict(payload["discriminator"])
    bundle = ModelBundle(classifier, adapter, discriminator, payload.get("optimizers", {}), payload.get("epoch", 0))
    return bundle, payload

"""Checkpoint persistence: one tensor file per named parameter plus a
manifest carrying the config snapshot, step count and format version."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, save_config
from .data import DataError, MODALITY_INFO, read_tensor, write_tensor
from .model import MultiModalSegmenter

FORMAT_VERSION = 1


def build_model(cfg: RunConfig) -> MultiModalSegmenter:
    """Instantiate the model a config describes (seeded by optim.seed)."""
    channels = {}
    for m in cfg.data.modalities:
        if m not in MODALITY_INFO:
            raise ConfigError(f"unknown modality {m!r}; known: {sorted(MODALITY_INFO)}")
        channels[m] = MODALITY_INFO[m][0]
    return MultiModalSegmenter(
        modalities=channels,
        num_classes=cfg.model.classes,
        d=cfg.model.d,
        stages=cfg.model.stages,
        window=cfg.model.window,
        heads=cfg.model.heads,
        rank=cfg.model.r,
        k=cfg.model.k if cfg.model.k > 0 else None,
        renormalize_topk=cfg.model.renormalize_topk,
        dropout=cfg.model.dropout,
        inference_head=cfg.model.inference_head,
        shared_neck=cfg.model.shared_neck,
        freeze_neck=cfg.model.freeze_neck,
        seed=cfg.optim.seed,
    )


def save_checkpoint(directory, model: MultiModalSegmenter, cfg: RunConfig,
                    step: int) -> None:
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for param in model.registry.all():
        write_tensor(params_dir / f"{param.name}.mmt",
                     param.data.astype(np.float32))
        names.append(param.name)
    save_config(directory / "config.cfg", cfg)
    manifest = [
        f"format_version = {FORMAT_VERSION}",
        f"step = {step}",
        f"params = {len(names)}",
    ]
    (directory / "manifest").write_text("\n".join(manifest) + "\n")


def load_checkpoint(directory, live_cfg: RunConfig | None = None):
    """Rebuild the checkpointed model. With ``live_cfg`` given, reject
    class-count / width / stage mismatches instead of silently rebuilding."""
    directory = Path(directory)
    if not (directory / "manifest").is_file():
        raise DataError(f"{directory} is not a checkpoint (no manifest)")
    meta = {}
    for line in (directory / "manifest").read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    version = int(meta.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise DataError(f"checkpoint format {version} unsupported (want {FORMAT_VERSION})")
    step = int(meta.get("step", 0))

    cfg = load_config(directory / "config.cfg")
    if live_cfg is not None:
        for attr in ("classes", "d", "stages"):
            have = getattr(cfg.model, attr)
            want = getattr(live_cfg.model, attr)
            if have != want:
                raise ConfigError(
                    f"checkpoint model.{attr}={have} conflicts with live config {want}")

    model = build_model(cfg)
    state = {}
    for param in model.registry.all():
        path = directory / "params" / f"{param.name}.mmt"
        if not path.is_file():
            raise DataError(f"checkpoint missing parameter file {path.name}")
        state[param.name] = read_tensor(path)
    model.load_state_dict(state)
    return model, cfg, step

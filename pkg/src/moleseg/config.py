"""Run configuration: flat ``key = value`` lines under [section] headers.

Every field has a default except ``data.root``. Unknown sections or keys are
rejected with the offending line number. Parsing then serializing yields a
canonical normal form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(Exception):
    """Unparseable or invalid run configuration."""


@dataclass
class ModelCfg:
    d: int = 32
    stages: int = 3
    window: int = 4
    heads: int = 2
    r: int = 32                      # adapter rank
    k: int = 0                       # 0 = auto (ceil of modality count / 2)
    renormalize_topk: bool = False
    dropout: float = 0.1
    classes: int = 5
    inference_head: str = "combined"
    w0: float = 1.0
    w1: float = 1.0
    p_th: float = 0.7
    shared_neck: bool = True
    freeze_neck: bool = False


@dataclass
class DataCfg:
    root: str = ""                   # required; the only defaultless field
    modalities: tuple[str, ...] = ("rgb", "depth", "event", "lidar")
    height: int = 64
    width: int = 64
    augment: bool = False


@dataclass
class OptimCfg:
    base_lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch: int = 4
    epochs: int = 50
    warmup_epochs: int = 10
    warmup_ratio: float = 0.1
    poly_power: float = 0.9
    seed: int = 0
    checkpoint_every: int = 10


@dataclass
class RunConfig:
    model: ModelCfg = field(default_factory=ModelCfg)
    data: DataCfg = field(default_factory=DataCfg)
    optim: OptimCfg = field(default_factory=OptimCfg)

    def validate(self):
        if not self.data.root:
            raise ConfigError("data.root is required")
        if self.model.d % 8:
            raise ConfigError(f"model.d must be divisible by 8, got {self.model.d}")
        if self.model.inference_head not in ("combined", "s0", "s1"):
            raise ConfigError(f"inference_head must be combined/s0/s1, "
                              f"got {self.model.inference_head!r}")
        if not self.data.modalities:
            raise ConfigError("data.modalities must name at least one modality")
        if self.model.classes < 2:
            raise ConfigError("model.classes must be at least 2")
        if not 0 < self.model.p_th <= 1:
            raise ConfigError("model.p_th must lie in (0, 1]")
        if self.optim.epochs < 0 or self.optim.batch < 1:
            raise ConfigError("optim.epochs must be >= 0 and optim.batch >= 1")
        if self.optim.warmup_epochs >= max(self.optim.epochs, 1):
            # clamped by the schedule; only reject nonsense
            if self.optim.warmup_epochs < 0:
                raise ConfigError("optim.warmup_epochs must be >= 0")
        return self


_SECTIONS = {"model": ModelCfg, "data": DataCfg, "optim": OptimCfg}


def _parse_value(raw: str, kind, key: str, lineno: int):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[str, ...]:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        if kind == tuple[float, float]:
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError(raw)
            return (parts[0], parts[1])
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"line {lineno}: unsupported type for {key}")


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    schema = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            section = getattr(cfg, name)
            schema = {f.name: f.type for f in fields(section)}
            continue
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = _resolve_type(schema[key])
        setattr(section, key, _parse_value(value, kind, key, lineno))
    return cfg.validate()


def _resolve_type(annotation):
    mapping = {
        "int": int, "float": float, "str": str, "bool": bool,
        "tuple[str, ...]": tuple[str, ...],
        "tuple[float, float]": tuple[float, float],
    }
    if isinstance(annotation, str):
        return mapping[annotation]
    return annotation


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name in ("model", "data", "optim"):
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(serialize_config(cfg))

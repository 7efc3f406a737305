"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

STRATEGIES = ("S1", "S2", "S3", "S4_1", "S4_2")


@dataclass
class TrainConfig:
    strategy: str = "S4_2"
    lam: Optional[float] = None
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay: float = 1.0          # multiplicative per epoch
    weight_decay: float = 0.0
    seed: int = 0
    tile_size: int = 512
    augment: bool = True
    clip_max: float = 1000.0
    val_fraction: float = 0.1
    depth: int = 4
    blocks_per_level: int = 1
    base_width: int = 16
    batch_norm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "S4_1":
            if self.lam is None:
                raise ValueError("strategy S4_1 requires lam")
            if self.lam < 0:
                raise ValueError("lam must be non-negative")
        elif self.lam is not None:
            raise ValueError(f"lam is only used by S4_1, not {self.strategy}")
        for name in ("epochs_stage1", "epochs_stage2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.tile_size % (2**self.depth):
            raise ValueError(f"tile_size must be divisible by 2**depth = {2**self.depth}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key == "lambda":
                key = "lam"
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls.from_dict({**parse_flat(text), **overrides})

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def parse_flat(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    if raw.lower() in ("none", ""):
        return None
    typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if "bool" in typ:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: not a boolean: {raw!r}")
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw

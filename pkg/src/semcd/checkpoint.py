"""Versioned checkpoints with a human-readable structural sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import TrainConfig
from .inference import ChannelScaler
from .models import describe, rebuild

FORMAT = "semcd-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    strategy: str
    models: Dict[str, torch.nn.Module]
    config: TrainConfig
    scaler: Optional[ChannelScaler] = None
    history: List[dict] = field(default_factory=list)
    epoch: int = 0
    optimizer_state: Dict[str, dict] = field(default_factory=dict)
    nomenclature_id: str = "urban_atlas_l1"

    def structure(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "strategy": self.strategy,
            "nomenclature": self.nomenclature_id,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "models": {name: describe(m) for name, m in self.models.items()},
            "history": self.history,
        }

    def save(self, path) -> Path:
        """Write ``path`` and the ``path.json`` structure sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "format": FORMAT,
            "version": VERSION,
            # torch serialises tensors little-endian; recorded for readers
            "byteorder": "little",
            "strategy": self.strategy,
            "nomenclature": self.nomenclature_id,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "history": self.history,
            "scaler": None
            if self.scaler is None
            else {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "models": {
                name: {
                    "kind": type(m).__name__,
                    "arch": dict(m.arch),
                    "dtype": str(next(m.parameters()).dtype),
                    "state_dict": m.state_dict(),
                }
                for name, m in self.models.items()
            },
            "optimizer_state": self.optimizer_state,
        }
        torch.save(blob, path)
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.structure(), indent=2, default=_json_default))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        if blob.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if blob.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        if blob.get("byteorder", "little") != "little":
            raise ValueError("unsupported byte order")
        models = {}
        for name, entry in blob["models"].items():
            m = rebuild(entry["kind"], entry["arch"])
            if entry.get("dtype") == "torch.float64":
                m = m.double()
            m.load_state_dict(entry["state_dict"])
            m.eval()
            models[name] = m
        scaler = None
        if blob.get("scaler") is not None:
            scaler = ChannelScaler(
                np.asarray(blob["scaler"]["mean"]), np.asarray(blob["scaler"]["std"])
            )
        return cls(
            strategy=blob["strategy"],
            models=models,
            config=TrainConfig.from_dict(blob["config"]),
            scaler=scaler,
            history=list(blob.get("history", [])),
            epoch=int(blob.get("epoch", 0)),
            optimizer_state=blob.get("optimizer_state", {}),
            nomenclature_id=blob.get("nomenclature", "urban_atlas_l1"),
        )


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


"""The five semantic change detection strategies: networks, heads and forward."""

from __future__ import annotations

from typing import Dict

import torch.nn as nn

from .config import TrainConfig
from .models import build_fc_ef_res, build_integrated, build_lcm_branch
from .raster import L1, Nomenclature, change_pair_nomenclature

DESCRIPTIONS = {
    "S1": ("Diff. of LCMs", "LCM supervision"),
    "S2": ("Direct semantic CD", "Multiclass CD supervision"),
    "S3": ("Separate CD and LCM", "Separate LCM and CD"),
    "S4_1": ("Integrated CD and LCM", "Triple loss function"),
    "S4_2": ("Integrated CD and LCM", "Sequential training"),
}

# output heads produced by each strategy
HEADS = {
    "S1": ("lcm1", "lcm2"),
    "S2": ("change_pair",),
    "S3": ("lcm1", "lcm2", "change"),
    "S4_1": ("lcm1", "lcm2", "change"),
    "S4_2": ("lcm1", "lcm2", "change"),
}


def build_models(
    strategy: str, config: TrainConfig, input_channels: int, nomenclature: Nomenclature = L1
) -> Dict[str, nn.Module]:
    arch = dict(
        depth=config.depth,
        blocks_per_level=config.blocks_per_level,
        base_width=config.base_width,
        batch_norm=config.batch_norm,
    )
    n_lcm = nomenclature.n_classes
    if strategy == "S1":
        return {"lcm": build_lcm_branch(input_channels, n_lcm, **arch)}
    if strategy == "S2":
        n_pairs = change_pair_nomenclature(nomenclature).n_classes
        return {"cd": build_fc_ef_res(input_channels, n_pairs, head="change_pair", **arch)}
    if strategy == "S3":
        return {
            "lcm": build_lcm_branch(input_channels, n_lcm, **arch),
            "cd": build_fc_ef_res(input_channels, 2, **arch),
        }
    if strategy in ("S4_1", "S4_2"):
        return {"net": build_integrated(input_channels, n_lcm, **arch)}
    raise ValueError(f"unknown strategy {strategy!r}")


def strategy_forward(strategy: str, models: Dict[str, nn.Module], x1, x2) -> dict:
    """Run the strategy's networks on a batch and return every head's scores."""
    if strategy == "S1":
        return models["lcm"](x1, x2)
    if strategy == "S2":
        return models["cd"](x1, x2)
    if strategy == "S3":
        out = dict(models["lcm"](x1, x2))
        out.update(models["cd"](x1, x2))
        return out
    if strategy in ("S4_1", "S4_2"):
        return models["net"](x1, x2)
    raise ValueError(f"unknown strategy {strategy!r}")


def depth_of(models: Dict[str, nn.Module]) -> int:
    return max(m.depth for m in models.values())

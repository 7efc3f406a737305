"""Pixel-wise weighted cross entropy and the multitask loss combinations."""

from __future__ import annotations

import logging
from typing import Dict, Mapping, Optional

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1


def _as_weight_tensor(weights, like: torch.Tensor) -> torch.Tensor:
    w = getattr(weights, "weights", weights)
    return torch.as_tensor(w, dtype=like.dtype, device=like.device)


def weighted_ce(scores: torch.Tensor, target: torch.Tensor, weights) -> Optional[torch.Tensor]:
    """Mean over counted pixels of ``weight[target] * -log p(target)``.

    ``scores`` is ``(N, K, H, W)``, ``target`` holds class positions as
    ``(N, H, W)`` integers. Pixels whose target is ``IGNORE_INDEX`` or whose
    class weight is 0 are left out of both sum and denominator. Returns
    ``None`` when no pixel is counted.
    """
    if scores.dim() != 4 or target.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ValueError(f"scores {tuple(scores.shape)} and target {tuple(target.shape)} mismatch")
    w = _as_weight_tensor(weights, scores)
    if w.numel() != scores.shape[1]:
        raise ValueError(f"{w.numel()} class weights for {scores.shape[1]} classes")
    target = target.long()
    if target.numel() and (target.max() >= scores.shape[1] or target.min() < IGNORE_INDEX):
        raise ValueError("target class out of range")
    valid = target != IGNORE_INDEX
    safe = torch.where(valid, target, torch.zeros_like(target))
    pix_w = w[safe] * valid.to(scores.dtype)
    counted = pix_w > 0
    n = int(counted.sum())
    if n == 0:
        logger.warning("weighted_ce: every pixel is excluded; loss undefined")
        return None
    nll = -torch.gather(F.log_softmax(scores, dim=1), 1, safe.unsqueeze(1)).squeeze(1)
    return (pix_w * nll).sum() / n


def _sum_defined(*terms):
    defined = [t for t in terms if t is not None]
    if not defined:
        return None
    total = defined[0]
    for t in defined[1:]:
        total = total + t
    return total


def lcm_loss(out: Mapping, targets: Mapping, weights: Mapping) -> Optional[torch.Tensor]:
    """Land cover loss: both LCM heads added (the two branches play symmetric roles)."""
    return _sum_defined(
        weighted_ce(out["lcm1"], targets["lcm1"], weights["lcm"]),
        weighted_ce(out["lcm2"], targets["lcm2"], weights["lcm"]),
    )


def cd_loss(out: Mapping, targets: Mapping, weights: Mapping) -> Optional[torch.Tensor]:
    return weighted_ce(out["change"], targets["change"], weights["change"])


def loss_combined(out: Mapping, targets: Mapping, weights: Mapping, lam: float):
    """Joint multitask objective ``L_CD + lam * (L_LCM1 + L_LCM2)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_cd = cd_loss(out, targets, weights)
    if lam == 0:
        return l_cd
    l_lcm = lcm_loss(out, targets, weights)
    return _sum_defined(l_cd, None if l_lcm is None else lam * l_lcm)


def loss_lcm_stage(out, targets, weights):
    """First sequential stage: only the land cover term."""
    return lcm_loss(out, targets, weights)


def loss_cd_stage(out, targets, weights):
    """Second sequential stage: only the change term."""
    return cd_loss(out, targets, weights)


def head_losses(out: Mapping, targets: Mapping, weights: Mapping) -> Dict[str, float]:
    """Per-head loss values for logging."""
    res = {}
    for head in ("lcm1", "lcm2", "change", "change_pair"):
        if head in out and head in targets:
            key = "lcm" if head.startswith("lcm") else head
            v = weighted_ce(out[head], targets[head], weights[key])
            res[head] = float("nan") if v is None else float(v.detach())
    return res

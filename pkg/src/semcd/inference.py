"""Tiled prediction, score stitching and decoding of strategy outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset import TileSpec, tile
from .raster import (
    L1,
    Nomenclature,
    SemanticChange,
    compare_lcms,
    compose_semantic_change,
    decode_change_pairs,
)
from .strategies import HEADS, depth_of, strategy_forward
from .validation import ImagePair


@dataclass
class ChannelScaler:
    """Per-channel standardisation fitted on training images."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: Sequence[np.ndarray]) -> "ChannelScaler":
        c = images[0].shape[2]
        s = np.zeros(c)
        s2 = np.zeros(c)
        n = 0
        for im in images:
            x = im.reshape(-1, c).astype(np.float64)
            s += x.sum(0)
            s2 += (x**2).sum(0)
            n += x.shape[0]
        mean = s / n
        std = np.sqrt(np.maximum(s2 / n - mean**2, 0.0))
        std[std < 1e-6] = 1.0
        return cls(mean, std)

    def transform(self, image: np.ndarray) -> np.ndarray:
        return ((image.astype(np.float64) - self.mean) / self.std).astype(np.float32)


def _to_batch(arr: np.ndarray, dtype) -> torch.Tensor:
    """(H, W, C) or (N, H, W, C) array -> (N, C, H, W) tensor."""
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _model_dtype(models) -> torch.dtype:
    return next(iter(next(iter(models.values())).parameters())).dtype


def set_eval(models) -> None:
    for m in models.values():
        m.eval()


@torch.no_grad()
def forward_batch(strategy: str, models, x1: np.ndarray, x2: np.ndarray) -> Dict[str, np.ndarray]:
    """Scores for a batch of ``(N, H, W, C)`` normalised tiles -> ``{head: (N, K, H, W)}``."""
    dtype = _model_dtype(models)
    out = strategy_forward(strategy, models, _to_batch(x1, dtype), _to_batch(x2, dtype))
    return {k: v.cpu().numpy() for k, v in out.items() if k in HEADS[strategy]}


def forward_padded(strategy: str, models, x1: np.ndarray, x2: np.ndarray) -> Dict[str, np.ndarray]:
    """Whole-image forward of one ``(H, W, C)`` pair, reflect-padded to a valid size."""
    h, w = x1.shape[:2]
    m = 2 ** depth_of(models)
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
        x1 = np.pad(x1, [(0, ph), (0, pw), (0, 0)], mode=mode)
        x2 = np.pad(x2, [(0, ph), (0, pw), (0, 0)], mode=mode)
    out = forward_batch(strategy, models, x1, x2)
    return {k: v[0, :, :h, :w] for k, v in out.items()}


def stitch(
    tile_scores: Sequence[np.ndarray],
    origins: Sequence[Tuple[int, int]],
    shape: Tuple[int, int],
) -> np.ndarray:
    """Average overlapping ``(K, t, t)`` tile scores into a ``(K, H, W)`` raster.

    Tile parts beyond ``shape`` (padding) are discarded.
    """
    h, w = shape
    k = tile_scores[0].shape[0]
    acc = np.zeros((k, h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    for s, (r, c) in zip(tile_scores, origins):
        vh, vw = min(s.shape[1], h - r), min(s.shape[2], w - c)
        acc[:, r : r + vh, c : c + vw] += s[:, :vh, :vw]
        cnt[r : r + vh, c : c + vw] += 1
    if (cnt == 0).any():
        raise ValueError("tiles do not cover the raster")
    return (acc / cnt).astype(np.float32)


def predict_tiled(
    strategy: str,
    models,
    pair: ImagePair,
    spec: Optional[TileSpec] = None,
    scaler: Optional[ChannelScaler] = None,
    batch_size: int = 4,
) -> Dict[str, np.ndarray]:
    """Full-resolution per-head scores, averaged where tiles overlap.

    The default spec uses 512 px tiles with half-tile stride.
    """
    if spec is None:
        spec = TileSpec(512, 256, "reflect")
    m = 2 ** depth_of(models)
    if spec.tile_size % m:
        raise ValueError(f"tile_size {spec.tile_size} must be divisible by {m}")
    set_eval(models)
    x1, x2 = pair.image1, pair.image2
    if scaler is not None:
        x1, x2 = scaler.transform(x1), scaler.transform(x2)
    else:
        x1, x2 = x1.astype(np.float32), x2.astype(np.float32)
    tiles = tile({"x1": x1, "x2": x2}, spec)
    per_head: Dict[str, list] = {}
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i : i + batch_size]
        out = forward_batch(
            strategy, models,
            np.stack([t.rasters["x1"] for t in chunk]),
            np.stack([t.rasters["x2"] for t in chunk]),
        )
        for head, scores in out.items():
            per_head.setdefault(head, []).extend(list(scores))
    origins = [t.origin for t in tiles]
    return {head: stitch(s, origins, pair.shape) for head, s in per_head.items()}


def argmax_scoring(scores: np.ndarray, nomenclature: Nomenclature) -> np.ndarray:
    """Per-pixel arg max over the scored classes, returned as class codes."""
    mask = nomenclature.scoring_mask
    if scores.shape[0] != len(mask):
        raise ValueError(f"{scores.shape[0]} score channels for {len(mask)} classes")
    s = np.where(mask[:, None, None], scores, -np.inf)
    return nomenclature.codes[np.argmax(s, axis=0)].astype(np.uint8)


@dataclass
class Prediction:
    change: np.ndarray
    lcm1: Optional[np.ndarray] = None
    lcm2: Optional[np.ndarray] = None
    semantic: Optional[SemanticChange] = None


def decode_strategy(outputs: Dict[str, np.ndarray], strategy: str,
                    nomenclature: Nomenclature = L1) -> Prediction:
    """Turn per-head scores ``(K, H, W)`` into change maps and land cover maps."""
    missing = [h for h in HEADS.get(strategy, ()) if h not in outputs]
    if strategy not in HEADS:
        raise ValueError(f"unknown strategy {strategy!r}")
    if missing:
        raise ValueError(f"strategy {strategy} needs head(s) {missing}")
    if strategy == "S2":
        codes = np.argmax(outputs["change_pair"], axis=0)
        changed, a, b = decode_change_pairs(codes, nomenclature)
        sem = SemanticChange(changed, a.astype(np.uint8), b.astype(np.uint8))
        return Prediction(changed.astype(np.uint8), semantic=sem)
    lcm1 = argmax_scoring(outputs["lcm1"], nomenclature)
    lcm2 = argmax_scoring(outputs["lcm2"], nomenclature)
    if strategy == "S1":
        change = compare_lcms(lcm1, lcm2, nomenclature)
    else:
        change = np.argmax(outputs["change"], axis=0).astype(np.uint8)
    return Prediction(change, lcm1, lcm2, compose_semantic_change(change, lcm1, lcm2))


def predict_pair(
    strategy: str,
    models,
    pair: ImagePair,
    scaler: Optional[ChannelScaler] = None,
    spec: Optional[TileSpec] = None,
    nomenclature: Nomenclature = L1,
) -> Prediction:
    """Decoded prediction for one pair.

    Rasters that fit in one tile (or any raster when ``spec`` is ``None``)
    go through the network whole; larger ones are tiled with ``spec``.
    """
    h, w = pair.shape
    if spec is None or (h <= spec.tile_size and w <= spec.tile_size):
        set_eval(models)
        if scaler is not None:
            x1, x2 = scaler.transform(pair.image1), scaler.transform(pair.image2)
        else:
            x1, x2 = pair.image1.astype(np.float32), pair.image2.astype(np.float32)
        scores = forward_padded(strategy, models, x1, x2)
    else:
        scores = predict_tiled(strategy, models, pair, spec, scaler)
    return decode_strategy(scores, strategy, nomenclature)

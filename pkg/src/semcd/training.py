"""Training procedures for the five strategies.

Each strategy is a list of stages. A stage optimises one set of modules
against one loss; every other module is frozen (``requires_grad=False`` and
eval mode, so normalisation statistics stay put too).
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .config import TrainConfig
from .dataset import DatasetIndex, TileSpec, class_weights_from_counts, label_counts, split_pairs, tile
from .evaluation import score_pair
from .inference import ChannelScaler, decode_strategy, forward_padded, predict_tiled
from .losses import (
    IGNORE_INDEX,
    head_losses,
    lcm_loss,
    loss_cd_stage,
    loss_combined,
    loss_lcm_stage,
    weighted_ce,
)
from .raster import L1, Nomenclature, encode_change_pairs
from .strategies import HEADS, build_models
from .validation import ImagePair, check_pairs

logger = logging.getLogger(__name__)

# whole-image validation forward below this many pixels, tiled above
_WHOLE_IMAGE_PIXELS = 1024 * 1024


def _check_contiguous(nomenclature: Nomenclature) -> None:
    if not np.array_equal(nomenclature.codes, np.arange(nomenclature.n_classes)):
        raise ValueError("network heads need class codes 0..K-1 in order")


def pair_targets(pair: ImagePair, heads: Sequence[str]) -> Dict[str, np.ndarray]:
    """Integer training targets per head; ``IGNORE_INDEX`` marks unscored pixels."""
    out = {}
    for head in heads:
        if head in ("lcm1", "lcm2"):
            m = getattr(pair, head)
            if m is None:
                raise ValueError(f"pair {pair.pair_id!r} has no {head} for training")
            out[head] = m.astype(np.int64)
        elif head == "change":
            if pair.change is None:
                raise ValueError(f"pair {pair.pair_id!r} has no change map for training")
            t = pair.change.astype(np.int64)
            t[~pair.scored_mask()] = IGNORE_INDEX
            out[head] = t
        elif head == "change_pair":
            if not (pair.has_lcms and pair.change is not None):
                raise ValueError(f"pair {pair.pair_id!r} lacks labels for change-pair targets")
            out[head] = encode_change_pairs(
                pair.change, pair.lcm1, pair.lcm2, pair.nomenclature, IGNORE_INDEX
            )
    return out


@dataclass
class TileSet:
    x1: np.ndarray                  # (N, t, t, C) float32
    x2: np.ndarray
    targets: Dict[str, np.ndarray]  # head -> (N, t, t) int64

    def __len__(self):
        return len(self.x1)


def make_tiles(pairs: Sequence[ImagePair], heads, scaler: ChannelScaler, tile_size: int) -> TileSet:
    spec = TileSpec(tile_size, tile_size, "reflect")
    x1, x2 = [], []
    targets = {h: [] for h in heads}
    for p in pairs:
        group = {"x1": scaler.transform(p.image1), "x2": scaler.transform(p.image2)}
        group.update(pair_targets(p, heads))
        for t in tile(group, spec):
            vh, vw = t.valid
            x1.append(t.rasters["x1"])
            x2.append(t.rasters["x2"])
            for h in heads:
                y = t.rasters[h].copy()
                y[vh:, :] = IGNORE_INDEX
                y[:, vw:] = IGNORE_INDEX
                targets[h].append(y)
    return TileSet(
        np.stack(x1), np.stack(x2), {h: np.stack(v) for h, v in targets.items()}
    )


def augment_batch(rng: np.random.Generator, arrays: List[np.ndarray]) -> List[np.ndarray]:
    """Same random 90-degree rotation and flips for every array (axes 1, 2)."""
    k = int(rng.integers(4))
    flip_v, flip_h = rng.random(2) < 0.5
    out = []
    for a in arrays:
        a = np.rot90(a, k, axes=(1, 2))
        if flip_v:
            a = a[:, ::-1]
        if flip_h:
            a = a[:, :, ::-1]
        out.append(np.ascontiguousarray(a))
    return out


def compute_weights(pairs, strategy: str, nomenclature: Nomenclature, clip_max: float) -> Dict[str, np.ndarray]:
    """Inverse-frequency class weights for every loss the strategy uses."""
    need = {"lcm1": "lcm", "lcm2": "lcm", "change": "change", "change_pair": "change_pair"}
    out = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for head in HEADS[strategy]:
            key = need[head]
            if key in out:
                continue
            counts, nom = label_counts(pairs, key, nomenclature)
            out[key] = class_weights_from_counts(counts, nom, clip_max).weights
    for w in caught:
        logger.warning("%s", w.message)
    return out


@dataclass
class Stage:
    name: str
    modules: List[nn.Module]          # trained in this stage
    loss: Callable                    # (out, targets, weights) -> tensor | None
    forward: Callable                 # (x1, x2) -> dict of head scores
    heads: Sequence[str]
    epochs: int
    select: str                       # validation metric: "lcm" or "cd"


def plan_stages(strategy: str, models: Dict[str, nn.Module], config: TrainConfig) -> List[Stage]:
    e1, e2 = config.epochs_stage1, config.epochs_stage2
    lcm_heads = ("lcm1", "lcm2")
    if strategy == "S1":
        lcm = models["lcm"]
        return [Stage("lcm", [lcm], lcm_loss, lcm, lcm_heads, e1, "lcm")]
    if strategy == "S2":
        cd = models["cd"]

        def pair_loss(out, targets, weights):
            return weighted_ce(out["change_pair"], targets["change_pair"], weights["change_pair"])

        return [Stage("cd", [cd], pair_loss, cd, ("change_pair",), e1, "cd")]
    if strategy == "S3":
        lcm, cd = models["lcm"], models["cd"]
        return [
            Stage("lcm", [lcm], lcm_loss, lcm, lcm_heads, e1, "lcm"),
            Stage("cd", [cd], loss_cd_stage, cd, ("change",), e1, "cd"),
        ]
    net = models["net"]
    if strategy == "S4_1":
        lam = config.lam

        def joint(out, targets, weights):
            return loss_combined(out, targets, weights, lam)

        return [Stage("joint", [net], joint, net, HEADS["S4_1"], e1, "cd")]
    if strategy == "S4_2":
        return [
            Stage("stage1", [net.lcm], loss_lcm_stage, net.lcm, lcm_heads, e1, "lcm"),
            Stage("stage2", [net.cd_encoder, net.cd_decoder], loss_cd_stage, net,
                  ("change",), e2, "cd"),
        ]
    raise ValueError(f"unknown strategy {strategy!r}")


def validation_kappa(strategy, models, pairs, scaler, select: str, tile_size: int) -> Optional[float]:
    """Pooled kappa on held-out pairs: binary CD (``cd``) or land cover (``lcm``)."""
    if not pairs:
        return None
    cm = None
    for p in pairs:
        if p.shape[0] * p.shape[1] <= _WHOLE_IMAGE_PIXELS:
            for m in models.values():
                m.eval()
            out = forward_padded(strategy, models, scaler.transform(p.image1), scaler.transform(p.image2))
        else:
            out = predict_tiled(strategy, models, p, TileSpec(tile_size, tile_size // 2), scaler)
        if select == "lcm" and "lcm1" not in out:
            return None
        pred = decode_strategy(out, strategy, p.nomenclature)
        if select == "lcm":
            s = score_pair(p, lcm1=pred.lcm1, lcm2=pred.lcm2).lcm
        else:
            s = score_pair(p, change=pred.change).cd
        cm = s if cm is None else cm.merge(s)
    if cm is None or cm.total == 0:
        return None
    return cm.metrics().kappa


def _freeze_all_but(models: Dict[str, nn.Module], trainable: List[nn.Module]) -> List[nn.Parameter]:
    for m in models.values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    params = []
    for m in trainable:
        m.train()
        for p in m.parameters():
            p.requires_grad_(True)
            params.append(p)
    return params


def _snapshot(models):
    return {k: copy.deepcopy(m.state_dict()) for k, m in models.items()}


def train(
    strategy: str,
    models: Optional[Dict[str, nn.Module]],
    data,
    config: TrainConfig,
    val_data: Optional[Sequence[ImagePair]] = None,
    checkpoint_dir=None,
    metrics_log=None,
    callback: Optional[Callable] = None,
    dtype: torch.dtype = torch.float32,
) -> Checkpoint:
    """Train one strategy and return the checkpoint of the selected parameters.

    ``data`` is a :class:`DatasetIndex` (its train split is used) or a list of
    labelled :class:`ImagePair`. Unless ``val_data`` is given,
    ``config.val_fraction`` of the training pairs is held out for selecting
    the best epoch of every stage by validation kappa. ``callback(stage,
    step, models)`` runs after every optimiser step.
    """
    if strategy != config.strategy:
        config = TrainConfig.from_dict({**config.to_dict(), "strategy": strategy})
    if isinstance(data, DatasetIndex):
        data = list(data.pairs("train"))
    need = {"lcm1", "lcm2", "change"} if strategy != "S1" else {"lcm1", "lcm2"}
    pairs = check_pairs(data, require=sorted(need))
    nomenclature = pairs[0].nomenclature
    _check_contiguous(nomenclature)

    if val_data is None:
        pairs, val_pairs = split_pairs(pairs, config.val_fraction, config.seed)
    else:
        val_pairs = check_pairs(val_data, require=sorted(need))

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    channels = pairs[0].image1.shape[2]
    if models is None:
        models = build_models(strategy, config, channels, nomenclature)
    models = {k: m.to(dtype) for k, m in models.items()}

    scaler = ChannelScaler.fit([p.image1 for p in pairs] + [p.image2 for p in pairs])
    weights = {
        k: torch.as_tensor(v, dtype=dtype)
        for k, v in compute_weights(pairs, strategy, nomenclature, config.clip_max).items()
    }
    heads = HEADS[strategy] if strategy != "S2" else ("change_pair",)
    tiles = make_tiles(pairs, heads, scaler, config.tile_size)

    history: List[dict] = []
    opt_states: Dict[str, dict] = {}
    epoch_total = 0
    log_file = open(metrics_log, "a") if metrics_log else None
    ckpt = Checkpoint(strategy, models, config, scaler, history, 0, opt_states, nomenclature.id)
    try:
        for stage in plan_stages(strategy, models, config):
            params = _freeze_all_but(models, stage.modules)
            optimizer = torch.optim.Adam(
                params, lr=config.learning_rate, weight_decay=config.weight_decay
            )
            scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, config.lr_decay)
            best_kappa, best_state = None, None
            step = 0
            for epoch in range(stage.epochs):
                sums: Dict[str, float] = {}
                n_batches = 0
                order = rng.permutation(len(tiles))
                for i in range(0, len(order), config.batch_size):
                    idx = np.sort(order[i : i + config.batch_size])
                    arrays = [tiles.x1[idx], tiles.x2[idx]] + [tiles.targets[h][idx] for h in stage.heads]
                    if config.augment:
                        arrays = augment_batch(rng, arrays)
                    x1 = torch.from_numpy(arrays[0].transpose(0, 3, 1, 2).copy()).to(dtype)
                    x2 = torch.from_numpy(arrays[1].transpose(0, 3, 1, 2).copy()).to(dtype)
                    targets = {h: torch.from_numpy(a) for h, a in zip(stage.heads, arrays[2:])}
                    out = stage.forward(x1, x2)
                    loss = stage.loss(out, targets, weights)
                    if loss is None:
                        logger.warning("batch with no scored pixels skipped")
                        continue
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    step += 1
                    n_batches += 1
                    sums["loss"] = sums.get("loss", 0.0) + float(loss.detach())
                    for k, v in head_losses(out, targets, weights).items():
                        sums[k] = sums.get(k, 0.0) + v
                    if callback is not None:
                        callback(stage.name, step, models)
                scheduler.step()
                epoch_total += 1
                kappa = validation_kappa(
                    strategy, models, val_pairs, scaler, stage.select, config.tile_size
                )
                _freeze_all_but(models, stage.modules)
                record = {
                    "stage": stage.name,
                    "epoch": epoch + 1,
                    **{k: v / max(n_batches, 1) for k, v in sums.items()},
                    "val_kappa": kappa,
                }
                history.append(record)
                line = "\t".join(f"{k}={_fmt(v)}" for k, v in record.items())
                logger.info("%s", line)
                if log_file:
                    log_file.write(line + "\n")
                    log_file.flush()
                if kappa is not None and (best_kappa is None or kappa > best_kappa):
                    best_kappa, best_state = kappa, _snapshot(models)
                    if checkpoint_dir:
                        _write(ckpt, epoch_total, optimizer, stage, Path(checkpoint_dir) / "best.pt")
                if checkpoint_dir:
                    _write(ckpt, epoch_total, optimizer, stage, Path(checkpoint_dir) / "last.pt")
            if best_state is not None:
                for k, m in models.items():
                    m.load_state_dict(best_state[k])
            opt_states[stage.name] = optimizer.state_dict()
    finally:
        if log_file:
            log_file.close()
    for m in models.values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(True)
    ckpt.epoch = epoch_total
    return ckpt


def _write(ckpt: Checkpoint, epoch: int, optimizer, stage: Stage, path: Path) -> None:
    ckpt.epoch = epoch
    ckpt.optimizer_state = {**ckpt.optimizer_state, stage.name: optimizer.state_dict()}
    ckpt.save(path)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "-" if v is None else str(v)


def lambda_grid(train_fn: Callable[[float], float], lambdas: Sequence[float]) -> Dict[float, float]:
    """Score of ``train_fn(lam)`` for every ``lam``; ``train_fn`` returns validation kappa."""
    return {float(lam): train_fn(float(lam)) for lam in lambdas}

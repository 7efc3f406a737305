"""Estimator interface over the training and inference functions."""

from __future__ import annotations

from typing import List, Optional

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .config import TrainConfig
from .dataset import DatasetIndex, TileSpec
from .evaluation import EvaluationReport, evaluate
from .inference import Prediction, predict_pair
from .raster import nomenclature_by_id
from .training import train
from .validation import check_pairs

DEFAULT_LAMBDA = 0.05


class SemanticChangeDetector(BaseEstimator):
    """Semantic change detector trained with one of the five strategies.

    Parameters
    ----------
    strategy : {"S1", "S2", "S3", "S4_1", "S4_2"}
        S1 compares two land cover maps, S2 segments change pairs directly,
        S3 trains separate networks, S4_1 trains the integrated network with
        the combined loss and S4_2 trains it sequentially.
    lam : float, optional
        Weight of the land cover terms for ``S4_1`` (defaults to 0.05 there;
        ignored by the other strategies).
    inference_tile, inference_stride : int
        Tiling used at prediction time for rasters larger than one tile.

    The remaining parameters mirror :class:`~semcd.config.TrainConfig`.

    Attributes
    ----------
    checkpoint_ : Checkpoint
    models_ : dict of torch.nn.Module
    history_ : list of dict
    n_features_in_ : int
        Number of image channels seen during ``fit``.
    """

    def __init__(
        self,
        strategy: str = "S4_2",
        lam: Optional[float] = None,
        depth: int = 4,
        blocks_per_level: int = 1,
        base_width: int = 16,
        batch_norm: bool = True,
        epochs_stage1: int = 30,
        epochs_stage2: int = 30,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        lr_decay: float = 1.0,
        weight_decay: float = 0.0,
        tile_size: int = 512,
        augment: bool = True,
        clip_max: float = 1000.0,
        val_fraction: float = 0.1,
        inference_tile: int = 512,
        inference_stride: int = 256,
        random_state: int = 0,
    ):
        self.strategy = strategy
        self.lam = lam
        self.depth = depth
        self.blocks_per_level = blocks_per_level
        self.base_width = base_width
        self.batch_norm = batch_norm
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.tile_size = tile_size
        self.augment = augment
        self.clip_max = clip_max
        self.val_fraction = val_fraction
        self.inference_tile = inference_tile
        self.inference_stride = inference_stride
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        lam = None
        if self.strategy == "S4_1":
            lam = DEFAULT_LAMBDA if self.lam is None else self.lam
        return TrainConfig(
            strategy=self.strategy,
            lam=lam,
            epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            tile_size=self.tile_size,
            augment=self.augment,
            clip_max=self.clip_max,
            val_fraction=self.val_fraction,
            depth=self.depth,
            blocks_per_level=self.blocks_per_level,
            base_width=self.base_width,
            batch_norm=self.batch_norm,
        )

    @classmethod
    def from_config(cls, config: TrainConfig, **kwargs) -> "SemanticChangeDetector":
        c = config.to_dict()
        c["random_state"] = c.pop("seed")
        c.update(kwargs)
        return cls(**c)

    def fit(self, X, y=None, val_data=None, checkpoint_dir=None, metrics_log=None,
            dtype: torch.dtype = torch.float32):
        """Train on labelled pairs (or the train split of a dataset index)."""
        config = self.to_config()
        if isinstance(X, DatasetIndex):
            X = list(X.pairs("train"))
        pairs = check_pairs(X)
        ckpt = train(self.strategy, None, pairs, config, val_data=val_data,
                     checkpoint_dir=checkpoint_dir, metrics_log=metrics_log, dtype=dtype)
        self._set_checkpoint(ckpt)
        return self

    def _set_checkpoint(self, ckpt: Checkpoint) -> None:
        self.checkpoint_ = ckpt
        self.models_ = ckpt.models
        self.history_ = ckpt.history
        self.scaler_ = ckpt.scaler
        self.nomenclature_ = nomenclature_by_id(ckpt.nomenclature_id)
        self.n_features_in_ = len(ckpt.scaler.mean) if ckpt.scaler is not None else None

    def _spec(self) -> TileSpec:
        return TileSpec(self.inference_tile, self.inference_stride, "reflect")

    def predict(self, X) -> List[Prediction]:
        """Change map, land cover maps (when produced) and semantic change per pair."""
        check_is_fitted(self, "checkpoint_")
        pairs = check_pairs(X)
        if self.n_features_in_ is not None and pairs[0].image1.shape[2] != self.n_features_in_:
            raise ValueError(
                f"pairs have {pairs[0].image1.shape[2]} channels, model expects {self.n_features_in_}"
            )
        return [
            predict_pair(self.strategy, self.models_, p, self.scaler_, self._spec(), self.nomenclature_)
            for p in pairs
        ]

    def evaluate(self, X) -> EvaluationReport:
        pairs = check_pairs(X, require=("change",))
        return evaluate(self.predict(pairs), pairs)

    def score(self, X, y=None) -> Optional[float]:
        """Pixel-pooled binary change kappa."""
        agg = self.evaluate(X).aggregate()
        return agg.cd.metrics().kappa

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.save(path)

    @classmethod
    def load(cls, path, **kwargs) -> "SemanticChangeDetector":
        ckpt = Checkpoint.load(path)
        est = cls.from_config(ckpt.config, **kwargs)
        est._set_checkpoint(ckpt)
        return est

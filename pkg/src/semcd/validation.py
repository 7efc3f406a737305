"""Input validation helpers shared by the estimators and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .raster import BINARY_CHANGE, L1, Nomenclature


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a finite ``(H, W, C)`` array."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 2-D or 3-D, got shape {arr.shape}")
    if arr.dtype.kind not in "uif":
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_label_map(labels, nomenclature: Nomenclature, name: str = "label map") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind not in "uib":
        raise ValueError(f"{name} must hold integer class codes, got {arr.dtype}")
    try:
        nomenclature.check_codes(arr)
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from None
    return arr


def check_same_hw(arrays: dict) -> tuple:
    """All non-None arrays share height and width; returns that shape."""
    hw = None
    first = None
    for role, arr in arrays.items():
        if arr is None:
            continue
        if hw is None:
            hw, first = arr.shape[:2], role
        elif arr.shape[:2] != hw:
            raise ValueError(
                f"{role} has shape {arr.shape[:2]} but {first} has shape {hw}"
            )
    return hw


@dataclass
class ImagePair:
    """Two co-registered images with optional ground truth.

    ``lcm1``/``lcm2`` are land cover label maps in ``nomenclature``;
    ``change`` is a binary change map.
    """

    image1: np.ndarray
    image2: np.ndarray
    lcm1: Optional[np.ndarray] = None
    lcm2: Optional[np.ndarray] = None
    change: Optional[np.ndarray] = None
    pair_id: str = ""
    nomenclature: Nomenclature = L1

    def __post_init__(self):
        where = f" (pair {self.pair_id!r})" if self.pair_id else ""
        self.image1 = check_image(self.image1, "image1" + where)
        self.image2 = check_image(self.image2, "image2" + where)
        if self.image1.shape[2] != self.image2.shape[2]:
            raise ValueError(f"image1 and image2 channel counts differ{where}")
        if self.lcm1 is not None:
            self.lcm1 = check_label_map(self.lcm1, self.nomenclature, "lcm1" + where)
        if self.lcm2 is not None:
            self.lcm2 = check_label_map(self.lcm2, self.nomenclature, "lcm2" + where)
        if self.change is not None:
            change = check_label_map(self.change, BINARY_CHANGE, "change" + where)
            self.change = change.astype(np.uint8)
        try:
            check_same_hw(
                {
                    "image1": self.image1,
                    "image2": self.image2,
                    "lcm1": self.lcm1,
                    "lcm2": self.lcm2,
                    "change": self.change,
                }
            )
        except ValueError as exc:
            raise ValueError(f"{exc}{where}") from None

    @property
    def shape(self):
        return self.image1.shape[:2]

    @property
    def has_lcms(self) -> bool:
        return self.lcm1 is not None and self.lcm2 is not None

    def scored_mask(self) -> np.ndarray:
        """Pixels where both land cover codes are scored (all pixels without LCMs)."""
        if not self.has_lcms:
            return np.ones(self.shape, dtype=bool)
        lut = self.nomenclature.scoring_lut()
        return lut[self.lcm1] & lut[self.lcm2]

    def swapped(self) -> "ImagePair":
        return ImagePair(
            self.image2, self.image1, self.lcm2, self.lcm1, self.change,
            self.pair_id, self.nomenclature,
        )


def check_pairs(pairs: Sequence, require: Sequence[str] = ()) -> list:
    """Validate a sequence of :class:`ImagePair` and the ground truth it must carry."""
    if isinstance(pairs, ImagePair):
        pairs = [pairs]
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one image pair")
    channels = None
    for p in pairs:
        if not isinstance(p, ImagePair):
            raise TypeError(f"expected ImagePair, got {type(p).__name__}")
        for role in require:
            if getattr(p, role) is None:
                raise ValueError(f"pair {p.pair_id!r} has no {role} raster")
        c = p.image1.shape[2]
        if channels is None:
            channels = c
        elif c != channels:
            raise ValueError("all pairs must have the same number of channels")
    return pairs


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)

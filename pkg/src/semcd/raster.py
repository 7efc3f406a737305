"""Label nomenclatures, confusion matrices and the evaluation metrics.

Conventions used throughout the package:

* image rasters are ``(H, W, C)`` float or integer arrays,
* label rasters are ``(H, W)`` integer arrays of class codes,
* confusion matrices hold ground truth on rows and predictions on columns,
* metrics are proportions in ``[0, 1]``; ``None`` marks an undefined ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import Dict, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class ClassInfo:
    code: int
    name: str
    counts_toward_metrics: bool = True


@dataclass(frozen=True)
class Nomenclature:
    """Ordered table of class codes.

    Classes flagged ``counts_toward_metrics=False`` (the "No information"
    code of land cover maps) are never scored and never contribute to a loss.
    """

    id: str
    classes: Tuple[ClassInfo, ...]

    def __post_init__(self):
        codes = [c.code for c in self.classes]
        if len(set(codes)) != len(codes):
            raise ValueError(f"duplicate class codes in nomenclature {self.id!r}")
        if any(c < 0 for c in codes):
            raise ValueError("class codes must be non-negative")

    @property
    def codes(self) -> np.ndarray:
        return np.array([c.code for c in self.classes], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def scoring_codes(self) -> np.ndarray:
        return np.array(
            [c.code for c in self.classes if c.counts_toward_metrics], dtype=np.int64
        )

    @property
    def scoring_mask(self) -> np.ndarray:
        """Boolean mask over class *positions* of the scored classes."""
        return np.array([c.counts_toward_metrics for c in self.classes], dtype=bool)

    @property
    def max_code(self) -> int:
        return int(self.codes.max()) if self.classes else -1

    def name_of(self, code: int) -> str:
        for c in self.classes:
            if c.code == code:
                return c.name
        raise KeyError(code)

    def index_lut(self) -> np.ndarray:
        """Lookup table code -> position, ``-1`` for codes outside the table."""
        lut = np.full(max(self.max_code + 1, 1), -1, dtype=np.int64)
        lut[self.codes] = np.arange(self.n_classes)
        return lut

    def scoring_lut(self) -> np.ndarray:
        """Lookup table code -> counts_toward_metrics (False for unknown codes)."""
        lut = np.zeros(max(self.max_code + 1, 1), dtype=bool)
        lut[self.codes] = self.scoring_mask
        return lut

    def positions(self, labels: np.ndarray) -> np.ndarray:
        """Map class codes to positions, raising on unknown codes."""
        labels = np.asarray(labels)
        lut = self.index_lut()
        bad = (labels < 0) | (labels >= lut.size)
        if not bad.any():
            pos = lut[labels]
            bad = pos < 0
        if bad.any():
            unknown = np.unique(labels[bad])
            raise ValueError(
                f"unknown class code(s) {unknown.tolist()} for nomenclature {self.id!r}"
            )
        return pos

    def check_codes(self, labels: np.ndarray) -> None:
        self.positions(labels)


L1 = Nomenclature(
    "urban_atlas_l1",
    (
        ClassInfo(0, "No information", False),
        ClassInfo(1, "Artificial surfaces"),
        ClassInfo(2, "Agricultural areas"),
        ClassInfo(3, "Forests"),
        ClassInfo(4, "Wetlands"),
        ClassInfo(5, "Water"),
    ),
)

BINARY_CHANGE = Nomenclature(
    "binary_change", (ClassInfo(0, "No change"), ClassInfo(1, "Change"))
)


def change_pair_nomenclature(base: Nomenclature = L1) -> Nomenclature:
    """Derived nomenclature for direct semantic change detection.

    Code 0 is "No change"; codes 1.. enumerate the ordered pairs of distinct
    scoring classes of ``base`` in lexicographic order.
    """
    pairs = list(permutations(base.scoring_codes.tolist(), 2))
    pairs.sort()
    classes = [ClassInfo(0, "No change")]
    for i, (a, b) in enumerate(pairs, start=1):
        classes.append(ClassInfo(i, f"{a}->{b}"))
    return Nomenclature(f"{base.id}_change_pairs", tuple(classes))


def change_pair_table(base: Nomenclature = L1) -> List[Tuple[int, int]]:
    """``table[code - 1]`` is the (from, to) pair of change-pair ``code``."""
    pairs = list(permutations(base.scoring_codes.tolist(), 2))
    pairs.sort()
    return pairs


def encode_change_pairs(
    change: np.ndarray,
    lcm1: np.ndarray,
    lcm2: np.ndarray,
    base: Nomenclature = L1,
    ignore_index: int = -1,
) -> np.ndarray:
    """Build change-pair targets from a binary change map and two LCMs.

    Changed pixels whose LCM codes agree, or whose codes are not scored,
    have no change-pair class and receive ``ignore_index``.
    """
    change = np.asarray(change)
    lcm1 = np.asarray(lcm1, dtype=np.int64)
    lcm2 = np.asarray(lcm2, dtype=np.int64)
    lut = np.full((base.max_code + 1, base.max_code + 1), ignore_index, dtype=np.int64)
    for code, (a, b) in enumerate(change_pair_table(base), start=1):
        lut[a, b] = code
    base.check_codes(lcm1)
    base.check_codes(lcm2)
    out = np.where(change > 0, lut[lcm1, lcm2], 0)
    scoring = base.scoring_lut()
    out[~(scoring[lcm1] & scoring[lcm2])] = ignore_index
    return out


def decode_change_pairs(codes: np.ndarray, base: Nomenclature = L1):
    """Inverse of :func:`encode_change_pairs` -> (changed, from, to)."""
    codes = np.asarray(codes, dtype=np.int64)
    table = np.array([(0, 0)] + change_pair_table(base), dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= len(table)):
        raise ValueError("change-pair code out of range")
    return codes > 0, table[codes, 0], table[codes, 1]


@dataclass
class MetricReport:
    total_accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    dice: Optional[float]
    kappa: Optional[float]

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "total_accuracy": self.total_accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "dice": self.dice,
            "kappa": self.kappa,
        }


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass
class ConfusionMatrix:
    """Pixel count matrix, ``counts[truth_position, pred_position]``."""

    nomenclature: Nomenclature
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        k = self.nomenclature.n_classes
        if self.counts is None:
            self.counts = np.zeros((k, k), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (k, k):
                raise ValueError(f"counts must be {k}x{k}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(
        self,
        truth: np.ndarray,
        pred: np.ndarray,
        mask: Optional[np.ndarray] = None,
    ) -> "ConfusionMatrix":
        """Add one count per scored pixel; the matrix is unchanged on error."""
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != truth.shape:
                raise ValueError(f"shape mismatch: mask {mask.shape} vs {truth.shape}")
        nom = self.nomenclature
        t = nom.positions(truth).ravel()
        p = nom.positions(pred).ravel()
        keep = nom.scoring_mask[t]
        if mask is not None:
            keep &= mask.ravel().astype(bool)
        k = nom.n_classes
        add = np.bincount(t[keep] * k + p[keep], minlength=k * k).reshape(k, k)
        self.counts += add
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.nomenclature.id != self.nomenclature.id:
            raise ValueError("cannot merge confusion matrices of different nomenclatures")
        return ConfusionMatrix(self.nomenclature, self.counts + other.counts)

    def binary_counts(self) -> Tuple[int, int, int, int]:
        """(TP, TN, FP, FN) of a two-class matrix."""
        if self.counts.shape != (2, 2):
            raise ValueError("binary counts need a 2x2 matrix")
        c = self.counts
        return int(c[1, 1]), int(c[0, 0]), int(c[0, 1]), int(c[1, 0])

    def metrics(self) -> MetricReport:
        return metrics(self)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    return a.merge(b)


def metrics(cm: ConfusionMatrix) -> MetricReport:
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / total
    p_e = float((c.sum(axis=1) * c.sum(axis=0)).sum()) / float(total) ** 2
    kappa = _ratio(p_o - p_e, 1.0 - p_e)
    precision = recall = dice = None
    if c.shape == (2, 2):
        tp, tn, fp, fn = cm.binary_counts()
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        dice = _ratio(2 * tp, 2 * tp + fp + fn)
    return MetricReport(float(p_o), precision, recall, dice, kappa)


def confusion_matrix(
    truth: np.ndarray,
    pred: np.ndarray,
    nomenclature: Nomenclature,
    mask: Optional[np.ndarray] = None,
) -> ConfusionMatrix:
    return ConfusionMatrix(nomenclature).accumulate(truth, pred, mask)


def _check_pair_shapes(a: np.ndarray, b: np.ndarray, what: str = "label rasters") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def compare_lcms(
    lcm1: np.ndarray, lcm2: np.ndarray, nomenclature: Nomenclature = L1
) -> np.ndarray:
    """Binary change map: 1 where two scored class codes disagree."""
    lcm1 = np.asarray(lcm1)
    lcm2 = np.asarray(lcm2)
    _check_pair_shapes(lcm1, lcm2)
    nomenclature.check_codes(lcm1)
    nomenclature.check_codes(lcm2)
    scoring = nomenclature.scoring_lut()
    valid = scoring[lcm1] & scoring[lcm2]
    return ((lcm1 != lcm2) & valid).astype(np.uint8)


@dataclass
class SemanticChange:
    """Per-pixel semantic change: a change bit plus the (from, to) classes.

    ``from_class``/``to_class`` are 0 on unchanged pixels. ``inconsistent``
    flags changed pixels whose two land cover codes coincide; their change
    bit is kept as predicted.
    """

    changed: np.ndarray
    from_class: np.ndarray
    to_class: np.ndarray

    @property
    def inconsistent(self) -> np.ndarray:
        return self.changed & (self.from_class == self.to_class)

    def labels(self) -> np.ndarray:
        """Object array of ``"a->b"`` strings (``""`` where unchanged)."""
        out = np.full(self.changed.shape, "", dtype=object)
        idx = np.nonzero(self.changed)
        for r, c in zip(*idx):
            out[r, c] = f"{self.from_class[r, c]}->{self.to_class[r, c]}"
        return out


def compose_semantic_change(
    change: np.ndarray, lcm1: np.ndarray, lcm2: np.ndarray
) -> SemanticChange:
    change = np.asarray(change)
    lcm1 = np.asarray(lcm1)
    lcm2 = np.asarray(lcm2)
    _check_pair_shapes(change, lcm1)
    _check_pair_shapes(lcm1, lcm2)
    changed = change.astype(bool)
    zero = np.zeros_like(lcm1)
    return SemanticChange(
        changed,
        np.where(changed, lcm1, zero).astype(np.uint8),
        np.where(changed, lcm2, zero).astype(np.uint8),
    )


def format_percent(value: Optional[float], digits: int = 2) -> str:
    return "-" if value is None else f"{100.0 * value:.{digits}f}"


def nomenclature_by_id(ident: str) -> Nomenclature:
    for nom in (L1, BINARY_CHANGE, change_pair_nomenclature(L1)):
        if nom.id == ident:
            return nom
    raise KeyError(ident)


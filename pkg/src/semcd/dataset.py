"""Dataset layout, indexing, tiling, class weights and imbalance statistics.

On-disk layout::

    root/
      manifest.tsv
      <pair_id>/img1.png  img2.png  lcm1.png  lcm2.png  change.png

``manifest.tsv`` holds one pair per line::

    pair_id <TAB> split <TAB> img1 <TAB> img2 <TAB> lcm1 <TAB> lcm2 <TAB> change

Paths are relative to ``root``; ``-`` marks an absent optional raster and a
split of ``auto`` (or ``-``) assigns the pair by a hash of its id. Lines
starting with ``#`` are comments. TIFF files may be used instead of PNG.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .io import find_raster, read_raster
from .raster import (
    BINARY_CHANGE,
    L1,
    Nomenclature,
    change_pair_nomenclature,
    encode_change_pairs,
)
from .validation import ImagePair

logger = logging.getLogger(__name__)

ROLES = ("img1", "img2", "lcm1", "lcm2", "change")
MANDATORY = ("img1", "img2")
SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.tsv"


def default_split(pair_id: str) -> str:
    """Deterministic ~50/50 assignment from a hash of the pair id."""
    digest = hashlib.sha1(pair_id.encode("utf-8")).digest()
    return SPLITS[digest[0] % 2]


@dataclass
class PairEntry:
    pair_id: str
    split: str
    paths: Dict[str, Optional[Path]]


@dataclass
class DatasetIndex:
    root: Path
    entries: List[PairEntry] = field(default_factory=list)
    nomenclature: Nomenclature = L1

    def __len__(self):
        return len(self.entries)

    @property
    def pair_ids(self) -> List[str]:
        return [e.pair_id for e in self.entries]

    @property
    def split_assignment(self) -> Dict[str, str]:
        return {e.pair_id: e.split for e in self.entries}

    def select(self, split: Optional[str] = None) -> List[PairEntry]:
        if split is None:
            return list(self.entries)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def load(self, entry) -> ImagePair:
        if isinstance(entry, str):
            matches = [e for e in self.entries if e.pair_id == entry]
            if not matches:
                raise KeyError(entry)
            entry = matches[0]
        arrays = {
            role: (read_raster(p) if p is not None else None)
            for role, p in entry.paths.items()
        }
        return ImagePair(
            arrays["img1"],
            arrays["img2"],
            arrays["lcm1"],
            arrays["lcm2"],
            arrays["change"],
            pair_id=entry.pair_id,
            nomenclature=self.nomenclature,
        )

    def pairs(self, split: Optional[str] = None) -> Iterator[ImagePair]:
        for e in self.select(split):
            yield self.load(e)

    def to_manifest(self) -> str:
        lines = ["# pair_id\tsplit\t" + "\t".join(ROLES)]
        for e in self.entries:
            cols = [e.pair_id, e.split]
            for role in ROLES:
                p = e.paths.get(role)
                cols.append("-" if p is None else Path(p).relative_to(self.root).as_posix())
            lines.append("\t".join(cols))
        return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> List[Tuple[str, str, Dict[str, Optional[str]]]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 2 + len(MANDATORY):
            raise ValueError(f"manifest line {lineno}: expected pair_id, split and paths")
        pair_id, split, rel = cols[0], cols[1], cols[2:]
        rel = rel + ["-"] * (len(ROLES) - len(rel))
        if len(rel) > len(ROLES):
            raise ValueError(f"manifest line {lineno}: too many columns")
        if split in ("auto", "-", ""):
            split = default_split(pair_id)
        if split not in SPLITS:
            raise ValueError(f"manifest line {lineno}: unknown split {split!r}")
        paths = {role: (None if r in ("-", "") else r) for role, r in zip(ROLES, rel)}
        rows.append((pair_id, split, paths))
    return rows


def _scan_layout(root: Path):
    rows = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = {}
        for role in ROLES:
            found = find_raster(d, role)
            paths[role] = None if found is None else found.relative_to(root).as_posix()
        if paths["img1"] is None and paths["img2"] is None:
            continue
        rows.append((d.name, default_split(d.name), paths))
    return rows


def build_index(root, manifest=None, nomenclature: Nomenclature = L1) -> DatasetIndex:
    """Index a dataset and check that every referenced raster parses.

    ``manifest`` may be a path, the manifest text itself is not accepted.
    Without a manifest, ``root/manifest.tsv`` is used when present, otherwise
    every subdirectory holding ``img1``/``img2`` rasters becomes a pair.
    """
    root = Path(root)
    if manifest is None and (root / MANIFEST_NAME).exists():
        manifest = root / MANIFEST_NAME
    if manifest is not None:
        rows = parse_manifest(Path(manifest).read_text())
    else:
        rows = _scan_layout(root)

    entries = []
    seen = set()
    for pair_id, split, rel in sorted(rows, key=lambda r: r[0]):
        if pair_id in seen:
            raise ValueError(f"duplicate pair_id {pair_id!r} in manifest")
        seen.add(pair_id)
        paths = {}
        for role in ROLES:
            r = rel.get(role)
            if r is None:
                if role in MANDATORY:
                    raise FileNotFoundError(f"pair {pair_id!r}: missing mandatory {role} raster")
                paths[role] = None
                continue
            p = root / r
            if not p.exists():
                raise FileNotFoundError(f"pair {pair_id!r}: {role} file {p} does not exist")
            paths[role] = p
        entry = PairEntry(pair_id, split, paths)
        entries.append(entry)

    index = DatasetIndex(root, entries, nomenclature)
    for e in entries:
        # parses every raster; ImagePair reports role and pair id on failure
        index.load(e)
    return index


@dataclass(frozen=True)
class TileSpec:
    """Tiling geometry; ``pad_mode`` is ``"reflect"``, ``"zero"`` or ``"none"``."""

    tile_size: int = 512
    stride: int = 512
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        if not 0 < self.stride <= self.tile_size:
            raise ValueError("stride must satisfy 0 < stride <= tile_size")
        if self.pad_mode not in ("reflect", "zero", "none"):
            raise ValueError(f"unknown pad_mode {self.pad_mode!r}")


def tile_origins(length: int, tile_size: int, stride: int) -> List[int]:
    if length <= tile_size:
        return [0]
    n = math.ceil((length - tile_size) / stride) + 1
    return [i * stride for i in range(n)]


def _pad(arr: np.ndarray, rows: int, cols: int, mode: str) -> np.ndarray:
    if rows == 0 and cols == 0:
        return arr
    pad = [(0, rows), (0, cols)] + [(0, 0)] * (arr.ndim - 2)
    if mode == "zero":
        return np.pad(arr, pad, mode="constant")
    return np.pad(arr, pad, mode="reflect" if min(arr.shape[:2]) > 1 else "edge")


@dataclass
class Tile:
    origin: Tuple[int, int]
    rasters: Dict[str, np.ndarray]
    valid: Tuple[int, int]  # unpadded extent inside the tile


def tile(rasters: Dict[str, np.ndarray], spec: TileSpec) -> List[Tile]:
    """Cut aligned tiles from every raster of a group.

    Tiles are ordered row-major by origin. Edge tiles are padded up to
    ``tile_size`` according to ``spec.pad_mode``.
    """
    present = {k: np.asarray(v) for k, v in rasters.items() if v is not None}
    if not present:
        return []
    shapes = {v.shape[:2] for v in present.values()}
    if len(shapes) != 1:
        raise ValueError(f"rasters in a tile group differ in shape: {sorted(shapes)}")
    h, w = shapes.pop()
    t = spec.tile_size
    rows, cols = tile_origins(h, t, spec.stride), tile_origins(w, t, spec.stride)
    if spec.pad_mode == "none" and (rows[-1] + t > h or cols[-1] + t > w):
        raise ValueError(f"{h}x{w} raster is not covered by {t}px tiles without padding")
    out = []
    for r in rows:
        for c in cols:
            vh, vw = min(t, h - r), min(t, w - c)
            group = {}
            for k, v in present.items():
                group[k] = _pad(v[r : r + vh, c : c + vw], t - vh, t - vw, spec.pad_mode)
            out.append(Tile((r, c), group, (vh, vw)))
    return out


@dataclass
class ClassWeights:
    nomenclature_id: str
    weights: np.ndarray  # indexed by class position
    clip_max: float
    warnings: List[str] = field(default_factory=list)
    codes: Tuple[int, ...] = ()

    def as_dict(self) -> Dict[int, float]:
        return {int(c): float(w) for c, w in zip(self.codes, self.weights)}


def class_weights_from_counts(
    counts: Dict[int, int], nomenclature: Nomenclature, clip_max: float = 1000.0
) -> ClassWeights:
    """Inverse-frequency weights, normalised to mean 1 over scored classes.

    Scored classes absent from ``counts`` get ``clip_max`` times the mean and
    every weight is then capped at ``clip_max`` times the smallest one, so the
    max/min ratio never exceeds ``clip_max``. Non-scored classes weigh 0.
    """
    if clip_max < 1:
        raise ValueError("clip_max must be >= 1")
    scoring = nomenclature.scoring_mask
    codes = nomenclature.codes
    n = np.array([counts.get(int(c), 0) for c in codes], dtype=np.float64)
    if (n < 0).any():
        raise ValueError("negative class count")
    present = scoring & (n > 0)
    if not present.any():
        raise ValueError("no training pixels for any scored class")
    w = np.zeros(len(codes))
    w[present] = 1.0 / n[present]
    w[present] /= w[present].mean()
    messages = []
    absent = scoring & ~present
    for pos in np.flatnonzero(absent):
        messages.append(
            f"class {int(codes[pos])} ({nomenclature.classes[pos].name}) has no "
            "training pixels; using the clipped maximum weight"
        )
        w[pos] = clip_max
    floor = w[scoring].min()
    w[scoring] = np.minimum(w[scoring], clip_max * floor)
    for m in messages:
        warnings.warn(m, stacklevel=2)
    return ClassWeights(nomenclature.id, w, clip_max, messages, tuple(int(c) for c in codes))


def label_counts(
    pairs, target: str, nomenclature: Nomenclature = L1
) -> Tuple[Dict[int, int], Nomenclature]:
    """Pixel counts per class code for ``target`` in ``lcm``, ``change``, ``change_pair``."""
    if target == "lcm":
        out_nom = nomenclature
    elif target == "change":
        out_nom = BINARY_CHANGE
    elif target == "change_pair":
        out_nom = change_pair_nomenclature(nomenclature)
    else:
        raise ValueError(f"unknown target {target!r}")
    total = np.zeros(out_nom.max_code + 1, dtype=np.int64)
    seen = False
    for p in pairs:
        if target == "lcm":
            maps = [m for m in (p.lcm1, p.lcm2) if m is not None]
            masks = [None] * len(maps)
        elif target == "change":
            if p.change is None:
                continue
            maps, masks = [p.change], [p.scored_mask()]
        else:
            if not (p.has_lcms and p.change is not None):
                continue
            codes = encode_change_pairs(p.change, p.lcm1, p.lcm2, nomenclature)
            maps, masks = [codes], [codes >= 0]
        for m, mask in zip(maps, masks):
            vals = m[mask] if mask is not None else m.ravel()
            total += np.bincount(vals.astype(np.int64), minlength=total.size)[: total.size]
            seen = True
    if not seen:
        raise ValueError(f"no labelled pairs for target {target!r}")
    return {int(c): int(total[c]) for c in out_nom.codes}, out_nom


def class_weights(
    index: DatasetIndex,
    split: str = "train",
    nomenclature: Optional[Nomenclature] = None,
    target: str = "lcm",
    clip_max: float = 1000.0,
) -> ClassWeights:
    nomenclature = nomenclature or index.nomenclature
    counts, out_nom = label_counts(index.pairs(split), target, nomenclature)
    return class_weights_from_counts(counts, out_nom, clip_max)


@dataclass
class ImbalanceTable:
    codes: Tuple[int, ...]          # scored land cover codes, row/column order
    percent: np.ndarray             # [from, to] percentage of labelled pixels
    no_change: float                # percentage of labelled pixels
    n_pixels: int

    def transition(self, a: int, b: int) -> float:
        return float(self.percent[self.codes.index(a), self.codes.index(b)])

    def format(self, digits: int = 3) -> str:
        head = "from\\to\t" + "\t".join(str(c) for c in self.codes)
        lines = [head]
        for i, a in enumerate(self.codes):
            cells = [f"{v:.{digits}f}%" for v in self.percent[i]]
            lines.append(f"{a}\t" + "\t".join(cells))
        lines.append(f"No change\t{self.no_change:.{digits}f}%")
        return "\n".join(lines)

    def rows(self, digits: int = 3) -> List[str]:
        out = []
        for i, a in enumerate(self.codes):
            for j, b in enumerate(self.codes):
                out.append(f"{a}→{b} {self.percent[i, j]:.{digits}f}%")
        out.append(f"No change {self.no_change:.{digits}f}%")
        return out


def imbalance_table(pairs, nomenclature: Nomenclature = L1) -> ImbalanceTable:
    """Percentage of labelled pixels per (from, to) change and of no change.

    Labelled pixels are those whose two land cover codes are both scored.
    Changed pixels are keyed by their (lcm1, lcm2) codes.
    """
    if isinstance(pairs, DatasetIndex):
        pairs = pairs.pairs()
    codes = tuple(int(c) for c in nomenclature.scoring_codes)
    k = nomenclature.max_code + 1
    counts = np.zeros((k, k), dtype=np.int64)
    unchanged = 0
    n = 0
    for p in pairs:
        if not (p.has_lcms and p.change is not None):
            raise ValueError(f"pair {p.pair_id!r} lacks land cover or change maps")
        mask = p.scored_mask()
        changed = mask & (p.change > 0)
        counts += np.bincount(
            (p.lcm1[changed].astype(np.int64) * k + p.lcm2[changed]), minlength=k * k
        ).reshape(k, k)
        unchanged += int((mask & (p.change == 0)).sum())
        n += int(mask.sum())
    if n == 0:
        raise ValueError("no labelled pixels")
    sub = counts[np.ix_(codes, codes)]
    return ImbalanceTable(codes, 100.0 * sub / n, 100.0 * unchanged / n, n)


def split_pairs(entries: Sequence, fraction: float, seed: int = 0):
    """Hold out ``fraction`` of entries (at least one when there are two or more)."""
    entries = list(entries)
    if fraction <= 0 or len(entries) < 2:
        return entries, []
    n_hold = max(1, int(round(fraction * len(entries))))
    order = np.random.default_rng(seed).permutation(len(entries))
    hold = set(order[:n_hold].tolist())
    keep = [e for i, e in enumerate(entries) if i not in hold]
    held = [e for i, e in enumerate(entries) if i in hold]
    return keep, held

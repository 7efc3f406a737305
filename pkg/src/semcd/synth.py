"""Deterministic synthetic semantic change datasets.

Each pair starts from a Voronoi partition of the frame into land cover
regions. The second date repaints random axis-aligned rectangles with a
different class until the changed fraction reaches the requested density.
Images are flat per-region colours drawn around a per-class mean, with a
per-date illumination shift and pixel noise.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .dataset import MANIFEST_NAME, ROLES, default_split
from .io import write_raster
from .raster import L1, compare_lcms

# mean RGB per L1 code
DEFAULT_PALETTE: Dict[int, tuple] = {
    1: (170, 60, 70),
    2: (190, 180, 90),
    3: (40, 110, 50),
    4: (110, 120, 170),
    5: (40, 80, 160),
}

MIN_SIZE = 16


def _voronoi_labels(rng, size: int, classes: np.ndarray, n_seeds: int) -> np.ndarray:
    seeds = rng.uniform(0, size, size=(n_seeds, 2))
    labels = rng.choice(classes, size=n_seeds)
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return labels[np.argmin(d, axis=-1)].astype(np.uint8)


def _paint_changes(rng, lcm: np.ndarray, classes: np.ndarray, density: float) -> np.ndarray:
    size = lcm.shape[0]
    out = lcm.copy()
    if density <= 0:
        return out
    target = density * lcm.size
    lo, hi = max(4, size // 16), max(6, size // 5)
    for _ in range(10_000):
        changed = int((out != lcm).sum())
        if changed >= target:
            break
        remaining = target - changed
        # keep the final rectangle from overshooting by much
        side_max = int(min(hi, max(lo, np.sqrt(remaining) + 1)))
        h = int(rng.integers(lo, side_max + 1))
        w = int(rng.integers(lo, side_max + 1))
        r = int(rng.integers(0, size - h + 1))
        c = int(rng.integers(0, size - w + 1))
        window = lcm[r : r + h, c : c + w]
        base = np.bincount(window.ravel()).argmax()
        choices = classes[classes != base]
        out[r : r + h, c : c + w] = rng.choice(choices)
    return out


def _render(rng, lcm: np.ndarray, palette: Dict[int, tuple], noise: float) -> np.ndarray:
    size = lcm.shape[0]
    img = np.zeros((size, size, 3), dtype=np.float64)
    for code, mean in palette.items():
        img[lcm == code] = mean
    # flat per-region texture: a low-frequency field shared by the whole image
    coarse = rng.normal(0, noise, size=(size // 8 + 1, size // 8 + 1, 3))
    field = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    shift = rng.normal(0, noise / 2, size=3)
    img = img + field + shift + rng.normal(0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_pair(
    rng: np.random.Generator,
    size: int,
    change_density: float,
    palette: Optional[Dict[int, tuple]] = None,
    n_regions: Optional[int] = None,
    noise: float = 12.0,
):
    """Return ``(img1, img2, lcm1, lcm2, change)`` for one synthetic pair."""
    if size < MIN_SIZE:
        raise ValueError(f"size {size} too small to place any polygon (minimum {MIN_SIZE})")
    if not 0.0 <= change_density <= 1.0:
        raise ValueError("change_density must lie in [0, 1]")
    palette = dict(DEFAULT_PALETTE if palette is None else palette)
    classes = np.array(sorted(palette), dtype=np.uint8)
    if len(classes) < 2 and change_density > 0:
        raise ValueError("need at least two classes to create changes")
    n_regions = n_regions or max(4, size // 24)
    lcm1 = _voronoi_labels(rng, size, classes, n_regions)
    lcm2 = _paint_changes(rng, lcm1, classes, change_density)
    change = compare_lcms(lcm1, lcm2, L1)
    img1 = _render(rng, lcm1, palette, noise)
    img2 = _render(rng, lcm2, palette, noise)
    return img1, img2, lcm1, lcm2, change


def synth_generate(
    out_dir,
    seed: int = 0,
    n_pairs: int = 10,
    size: int = 256,
    change_density: float = 0.05,
    class_palette: Optional[Dict[int, tuple]] = None,
    n_test: Optional[int] = None,
    noise: float = 12.0,
) -> Path:
    """Write a synthetic dataset in the standard layout and return its root.

    With ``n_test`` the last ``n_test`` pairs form the test split, otherwise
    pairs are split by the pair-id hash.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = ["# pair_id\tsplit\t" + "\t".join(ROLES)]
    for i in range(n_pairs):
        pair_id = f"pair_{i:04d}"
        rasters = generate_pair(rng, size, change_density, class_palette, noise=noise)
        names = []
        for role, arr in zip(ROLES, rasters):
            rel = f"{pair_id}/{role}.png"
            write_raster(out / rel, arr)
            names.append(rel)
        if n_test is None:
            split = default_split(pair_id)
        else:
            split = "test" if i >= n_pairs - n_test else "train"
        lines.append("\t".join([pair_id, split] + names))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return out

"""Unsupervised change detection baselines on difference images.

* thresholding of the difference magnitude, with Otsu's threshold or a fixed one,
* block PCA of the difference image followed by 2-means clustering.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import ImagePair, check_image, check_pairs

# documented default for difference images built from deep features, whose
# magnitudes are orders of larger than raw-intensity differences
FIXED_THRESHOLD = 2300.0
OTSU_BINS = 256


def difference_image(pair_or_image1, image2=None) -> np.ndarray:
    """Per-pixel Euclidean norm of the channel-wise difference, ``(H, W)`` float64."""
    if isinstance(pair_or_image1, ImagePair):
        a, b = pair_or_image1.image1, pair_or_image1.image2
    else:
        a, b = check_image(pair_or_image1, "image1"), check_image(image2, "image2")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return np.sqrt((d * d).sum(axis=2))


def _check_di(di) -> np.ndarray:
    di = np.asarray(di, dtype=np.float64)
    if di.ndim == 3 and di.shape[2] == 1:
        di = di[:, :, 0]
    if di.ndim != 2:
        raise ValueError(f"difference image must be single-channel, got shape {di.shape}")
    if not np.isfinite(di).all():
        raise ValueError("difference image contains NaN or Inf")
    return di


def otsu_threshold(di, bins: int = OTSU_BINS) -> Optional[float]:
    """Otsu threshold over ``bins`` uniform bins on ``[min, max]``.

    Candidate thresholds are the inner bin edges; the lower class is made of
    bins ``0..k`` and the first edge maximising the between-class variance
    (computed from bin centres) is returned. ``None`` for a constant image.
    """
    di = _check_di(di)
    lo, hi = float(di.min()), float(di.max())
    if hi <= lo:
        return None
    width = (hi - lo) / bins
    idx = np.minimum(((di - lo) / width).astype(np.int64), bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    centers = lo + (np.arange(bins) + 0.5) * width
    n = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    m0 = np.cumsum(hist * centers)[:-1]
    w1 = n - w0
    m1 = (hist * centers).sum() - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (m0 / w0 - m1 / w1) ** 2 / n**2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    # first maximum; splits separated only by empty bins tie exactly in theory,
    # so rounding noise in the cumulative sums must not decide between them
    k = int(np.flatnonzero(between >= between.max() * (1 - 1e-12))[0])
    return lo + (k + 1) * width


def threshold_otsu(di) -> Tuple[Optional[float], np.ndarray]:
    """``(threshold, change map)``; a constant image gives ``(None, all zeros)``."""
    di = _check_di(di)
    t = otsu_threshold(di)
    if t is None:
        return None, np.zeros(di.shape, dtype=np.uint8)
    return t, (di > t).astype(np.uint8)


def threshold_fixed(di, t: float = FIXED_THRESHOLD) -> np.ndarray:
    di = _check_di(di)
    if not np.isfinite(t):
        raise ValueError("threshold must be finite")
    return (di > t).astype(np.uint8)


def kmeans(
    features: np.ndarray,
    n_clusters: int = 2,
    init: Optional[np.ndarray] = None,
    random_state: int = 0,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with k-means++ seeding; returns ``(labels, centers)``.

    Distance ties go to the lower cluster index and an empty cluster keeps
    its previous centre, so identical initial centres are deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(random_state)
    if init is None:
        centers = [x[rng.integers(len(x))]]
        for _ in range(1, n_clusters):
            d2 = np.min([((x - c) ** 2).sum(1) for c in centers], axis=0)
            total = d2.sum()
            pick = rng.integers(len(x)) if total == 0 else rng.choice(len(x), p=d2 / total)
            centers.append(x[pick])
        centers = np.array(centers)
    else:
        centers = np.array(init, dtype=np.float64)
    labels = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d, axis=1)
        new = centers.copy()
        for j in range(n_clusters):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(0)
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    return labels, centers


def block_pca(di: np.ndarray, block_size: int, n_components: int):
    """Mean and top eigenvectors of non-overlapping ``block_size``-square blocks."""
    h, w = di.shape
    hb, wb = h // block_size * block_size, w // block_size * block_size
    blocks = (
        di[:hb, :wb]
        .reshape(hb // block_size, block_size, wb // block_size, block_size)
        .transpose(0, 2, 1, 3)
        .reshape(-1, block_size * block_size)
    )
    mean = blocks.mean(0)
    centered = blocks - mean
    cov = centered.T @ centered / max(len(blocks) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    return mean, vecs[:, order]


def pca_kmeans_cd(
    pair_or_di,
    block_size: int = 4,
    n_components: int = 3,
    random_state: int = 0,
    chunk_rows: int = 256,
) -> np.ndarray:
    """Unsupervised change map by block PCA and 2-means clustering.

    Each pixel is described by its ``block_size``-square neighbourhood in
    the difference image projected on the leading eigenvectors. The cluster
    with the larger mean difference magnitude is labelled change; if only one
    cluster is populated nothing is labelled change.
    """
    if block_size < 2:
        raise ValueError("block_size must be >= 2")
    if not 1 <= n_components <= block_size * block_size:
        raise ValueError("n_components must lie in [1, block_size**2]")
    di = pair_or_di if not isinstance(pair_or_di, ImagePair) else difference_image(pair_or_di)
    di = _check_di(di)
    h, w = di.shape
    if h < block_size or w < block_size:
        raise ValueError(f"raster {h}x{w} is smaller than block_size {block_size}")
    if di.max() - di.min() == 0:
        return np.zeros((h, w), dtype=np.uint8)
    mean, vecs = block_pca(di, block_size, n_components)
    before = block_size // 2
    after = block_size - 1 - before
    padded = np.pad(di, [(before, after), (before, after)], mode="reflect")
    windows = sliding_window_view(padded, (block_size, block_size))
    feats = np.empty((h, w, vecs.shape[1]))
    for r in range(0, h, chunk_rows):
        win = windows[r : r + chunk_rows].reshape(-1, block_size * block_size)
        feats[r : r + chunk_rows] = ((win - mean) @ vecs).reshape(-1, w, vecs.shape[1])
    labels, _ = kmeans(feats.reshape(-1, vecs.shape[1]), 2, random_state=random_state)
    labels = labels.reshape(h, w)
    sizes = np.bincount(labels.ravel(), minlength=2)
    if (sizes == 0).any():
        return np.zeros((h, w), dtype=np.uint8)
    means = [di[labels == j].mean() for j in range(2)]
    change_cluster = int(np.argmax(means))
    return (labels == change_cluster).astype(np.uint8)


class _DifferenceDetector(ClassifierMixin, BaseEstimator):
    """Stateless detector: ``fit`` only validates, ``predict`` maps pairs to change maps."""

    def fit(self, X, y=None):
        check_pairs(X)
        return self

    def predict(self, X):
        return [self._predict_one(p) for p in check_pairs(X)]

    def score(self, X, y=None):
        """Pooled binary change kappa against the pairs' change maps."""
        from .evaluation import evaluate
        from .inference import Prediction

        pairs = check_pairs(X, require=("change",))
        preds = [Prediction(c) for c in self.predict(pairs)]
        return evaluate(preds, pairs).aggregate().cd.metrics().kappa


class OtsuChangeDetector(_DifferenceDetector):
    def _predict_one(self, pair):
        return threshold_otsu(difference_image(pair))[1]


class FixedThresholdChangeDetector(_DifferenceDetector):
    def __init__(self, threshold: float = FIXED_THRESHOLD):
        self.threshold = threshold

    def _predict_one(self, pair):
        return threshold_fixed(difference_image(pair), self.threshold)


class PCAKMeansChangeDetector(_DifferenceDetector):
    def __init__(self, block_size: int = 4, n_components: int = 3, random_state: int = 0):
        self.block_size = block_size
        self.n_components = n_components
        self.random_state = random_state

    def _predict_one(self, pair):
        return pca_kmeans_cd(pair, self.block_size, self.n_components, self.random_state)

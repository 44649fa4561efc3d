"""Difference-image operators and unsupervised pre-classification.

The difference image condenses an image pair into one dissimilarity map in
[0, 1].  Fuzzy c-means with three clusters then splits pixels into
high-confidence unchanged / changed groups plus an uncertain middle band,
giving pseudo-labels for training without ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericError, SelectionError, ShapeError
from .tensor import Rng

UNCHANGED = 0
CHANGED = 1
UNCERTAIN = 2

_CLASS_NAMES = {UNCHANGED: "unchanged", CHANGED: "changed"}


@dataclass
class DifferenceImage:
    """Single-channel dissimilarity map, min-max normalised to [0, 1]."""

    values: np.ndarray
    operator: str


@dataclass
class LabelField:
    """Per-pixel label in {unchanged, changed, uncertain} with confidence."""

    labels: np.ndarray      # int8, values UNCHANGED / CHANGED / UNCERTAIN
    confidence: np.ndarray  # float64 in [0, 1]


def _check_pair(i1: np.ndarray, i2: np.ndarray):
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.ndim != 2 or i2.ndim != 2:
        raise ShapeError("images must be 2-D single-channel arrays")
    if i1.shape != i2.shape:
        raise ShapeError(f"image extents differ: {i1.shape} vs {i2.shape}")
    if i1.size == 0:
        raise ArgumentError("images must be non-empty")
    if (i1 < 0).any() or (i2 < 0).any():
        raise ArgumentError("image intensities must be >= 0")
    return i1, i2


def _minmax_normalize(d: np.ndarray) -> np.ndarray:
    lo = d.min()
    hi = d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def log_ratio(i1: np.ndarray, i2: np.ndarray) -> DifferenceImage:
    """|ln(i2+1) - ln(i1+1)|, min-max normalised; symmetric in the pair.

    The +1 shift keeps the operator defined at zero intensity.
    """
    i1, i2 = _check_pair(i1, i2)
    d = np.abs(np.log1p(i2) - np.log1p(i1))
    return DifferenceImage(_minmax_normalize(d), "log_ratio")


def mean_ratio(i1: np.ndarray, i2: np.ndarray, window: int = 3) -> DifferenceImage:
    """1 - min(mu1, mu2)/max(mu1, mu2) over clipped window means."""
    i1, i2 = _check_pair(i1, i2)
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"window must be odd and >= 1, got {window}")
    radius = window // 2
    mu1 = _clipped_box_mean(i1, radius)
    mu2 = _clipped_box_mean(i2, radius)
    hi = np.maximum(mu1, mu2)
    lo = np.minimum(mu1, mu2)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(hi > 0, 1.0 - lo / np.where(hi > 0, hi, 1.0), 0.0)
    return DifferenceImage(_minmax_normalize(d), "mean_ratio")


def _clipped_box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 neighbourhood, excluding out-of-image pixels."""
    h, w = img.shape
    # summed-area table with a zero border row/column
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    total = (
        sat[r1[:, None], c1[None, :]]
        - sat[r0[:, None], c1[None, :]]
        - sat[r1[:, None], c0[None, :]]
        + sat[r0[:, None], c0[None, :]]
    )
    counts = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    return total / counts


def fcm_preclassify(di: DifferenceImage, c: int = 3, m: float = 2.0,
                    max_iter: int = 100, eps: float = 1e-5,
                    rng: Rng | None = None) -> LabelField:
    """Fuzzy c-means over the scalar difference values.

    Clusters are ordered by ascending centre: lowest = unchanged, middle =
    uncertain, highest = changed.  Confidence is the winning membership.
    When all centres coincide (e.g. a constant difference image) every
    pixel is labelled uncertain.
    """
    if c != 3:
        raise ArgumentError("pre-classification uses exactly 3 clusters")
    if rng is None:
        raise ArgumentError("an Rng is required for centre initialisation")
    values = np.asarray(di.values, dtype=np.float64)
    if values.size == 0:
        raise ArgumentError("difference image is empty")
    x = values.ravel()
    lo, hi = float(x.min()), float(x.max())
    centers = np.sort(lo + (hi - lo) * rng.uniform(c))
    exponent = 2.0 / (m - 1.0)

    memberships = _fcm_memberships(x, centers, exponent)
    prev_obj = _fcm_objective(x, centers, memberships, m)
    for _ in range(max_iter):
        um = memberships ** m
        denom = um.sum(axis=0)
        safe = np.where(denom > 0, denom, 1.0)
        new_centers = np.where(denom > 0, (um * x[:, None]).sum(axis=0) / safe,
                               centers)
        movement = np.abs(new_centers - centers).max()
        centers = new_centers
        memberships = _fcm_memberships(x, centers, exponent)
        obj = _fcm_objective(x, centers, memberships, m)
        if obj > prev_obj * (1.0 + 1e-12) + 1e-15:
            raise NumericError(
                f"clustering objective increased ({prev_obj} -> {obj})"
            )
        prev_obj = obj
        if movement < eps:
            break

    order = np.argsort(centers, kind="stable")
    sorted_centers = centers[order]
    if sorted_centers[-1] - sorted_centers[0] < 1e-12:
        labels = np.full(values.shape, UNCERTAIN, dtype=np.int8)
        return LabelField(labels, np.zeros(values.shape))

    # cluster rank 0 -> unchanged, 1 -> uncertain, 2 -> changed
    rank_of_cluster = np.empty(c, dtype=np.int64)
    rank_of_cluster[order] = np.arange(c)
    winner = memberships.argmax(axis=1)
    rank = rank_of_cluster[winner]
    label_of_rank = np.array([UNCHANGED, UNCERTAIN, CHANGED], dtype=np.int8)
    labels = label_of_rank[rank].reshape(values.shape)
    confidence = memberships[np.arange(x.size), winner].reshape(values.shape)
    return LabelField(labels, confidence)


def _fcm_memberships(x: np.ndarray, centers: np.ndarray,
                     exponent: float) -> np.ndarray:
    d = np.abs(x[:, None] - centers[None, :])
    zero_rows = (d == 0).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = d ** -exponent
        u = inv / inv.sum(axis=1, keepdims=True)
    if zero_rows.any():
        # coincident point and centre: hard membership to the first such centre
        rows = np.nonzero(zero_rows)[0]
        u[rows] = 0.0
        u[rows, d[rows].argmin(axis=1)] = 1.0
    return u


def _fcm_objective(x: np.ndarray, centers: np.ndarray, u: np.ndarray,
                   m: float) -> float:
    d2 = (x[:, None] - centers[None, :]) ** 2
    return float(((u ** m) * d2).sum())


def labels_from_truth(truth: np.ndarray) -> LabelField:
    """Ground-truth labels with full confidence (the truth-sampling mode)."""
    truth = np.asarray(truth)
    if truth.ndim != 2:
        raise ShapeError("truth mask must be 2-D")
    if truth.size and not np.isin(truth, (0, 1)).all():
        raise ArgumentError("truth mask values must be 0 or 1")
    labels = np.where(truth == 1, CHANGED, UNCHANGED).astype(np.int8)
    return LabelField(labels, np.ones(truth.shape))


def select_samples(field: LabelField, fraction: float, rng: Rng,
                   balance: bool = True):
    """Pick training pixels from the non-uncertain population.

    The requested count is floor(fraction * total pixels), truncated to
    availability.  Unbalanced mode samples uniformly; balanced mode takes
    a 50/50 class split, highest confidence first within each class (ties
    broken by a seeded shuffle).  Returns (coords (N, 2), labels (N,)).
    """
    if not 0.0 < fraction <= 1.0:
        raise ArgumentError(f"fraction must be in (0, 1], got {fraction}")
    labels = field.labels
    n_total = labels.size
    n_req = int(fraction * n_total)
    eligible = labels != UNCERTAIN
    coords = np.argwhere(eligible)
    if coords.shape[0] == 0:
        raise SelectionError("no non-uncertain pixels to sample from")

    if not balance:
        order = rng.permutation(coords.shape[0])
        take = min(n_req, coords.shape[0])
        chosen = coords[order[:take]]
    else:
        per_class = {CHANGED: n_req // 2}
        per_class[UNCHANGED] = n_req - per_class[CHANGED]
        chosen_parts = []
        # one shuffle over the eligible pool decides confidence ties
        shuffled = coords[rng.permutation(coords.shape[0])]
        for cls in (UNCHANGED, CHANGED):
            cls_coords = shuffled[labels[shuffled[:, 0], shuffled[:, 1]] == cls]
            if cls_coords.shape[0] == 0:
                raise SelectionError(
                    f"no eligible pixels in class '{_CLASS_NAMES[cls]}'"
                )
            conf = field.confidence[cls_coords[:, 0], cls_coords[:, 1]]
            ranked = cls_coords[np.argsort(-conf, kind="stable")]
            chosen_parts.append(ranked[: per_class[cls]])
        chosen = np.concatenate(chosen_parts, axis=0)

    out_labels = labels[chosen[:, 0], chosen[:, 1]].astype(np.int64)
    return chosen.astype(np.int64), out_labels

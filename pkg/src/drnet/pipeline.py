"""Experiment driver: training loop, full-image prediction, and metrics.

Metrics follow the usual change-detection accounting: FP counts unchanged
pixels reported as changed, FN counts changed pixels reported as
unchanged, OE = FP + FN, and PCC = (1 - OE/Nt) * 100 over Nt pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError, TrainingDivergedError
from .network import MomentumSGD, Network, train_step
from .synth import ImagePair, PatchSet, extract_patches
from .tensor import STREAM_SHUFFLE, Rng, argmax_channel


@dataclass
class MetricsReport:
    """FP/FN/OE/PCC with the defining identities re-checked at construction."""

    fp: int
    fn: int
    oe: int
    nt: int
    pcc: float

    def __post_init__(self):
        if min(self.fp, self.fn, self.nt) < 0 or self.nt == 0:
            raise ArgumentError("counts must be non-negative and Nt positive")
        if self.oe != self.fp + self.fn:
            raise ArgumentError(
                f"inconsistent report: OE {self.oe} != FP {self.fp} + FN {self.fn}"
            )
        expected_pcc = (1.0 - self.oe / self.nt) * 100.0
        if abs(self.pcc - expected_pcc) > 1e-9:
            raise ArgumentError(
                f"inconsistent report: PCC {self.pcc} != {expected_pcc}"
            )

    @classmethod
    def from_counts(cls, fp: int, fn: int, nt: int) -> "MetricsReport":
        oe = fp + fn
        return cls(fp, fn, oe, nt, (1.0 - oe / nt) * 100.0)

    def csv_row(self, dataset: str, variant: str) -> str:
        return f"{dataset},{variant},{self.fp},{self.fn},{self.oe},{format_pcc(self.pcc)}"

    def __str__(self):
        return (
            f"FP={self.fp} FN={self.fn} OE={self.oe} "
            f"PCC={format_pcc(self.pcc)}% (Nt={self.nt})"
        )


def format_pcc(pcc: float) -> str:
    """Two decimals, round half-up (matching the reporting convention)."""
    return f"{np.floor(pcc * 100 + 0.5) / 100:.2f}"


def train(net: Network, patchset: PatchSet, epochs: int, batch_size: int = 128,
          lr: float = 1e-3, momentum: float = 0.9, seed: int = 0):
    """Minibatch momentum-SGD training; returns (net, per-epoch mean losses).

    Shuffling uses a stream derived from the seed, so identical inputs give
    identical final parameters.
    """
    n = patchset.patches.shape[0]
    if n == 0:
        raise ArgumentError("patch set is empty")
    present = np.unique(patchset.labels)
    if not (0 in present and 1 in present):
        raise ArgumentError(
            f"training needs both classes, found only {present.tolist()}"
        )
    if epochs < 0 or batch_size < 1:
        raise ArgumentError("epochs must be >= 0 and batch size >= 1")
    patches = patchset.patches.astype(net.dtype, copy=False)
    labels = patchset.labels
    rng = Rng(seed, STREAM_SHUFFLE)
    optimizer = MomentumSGD(lr=lr, momentum=momentum)
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        step_losses = []
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            try:
                loss = train_step(net, patches[idx], labels[idx], optimizer)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    epoch=epoch,
                    step=step,
                ) from exc
            step_losses.append(loss)
        losses.append(float(np.mean(step_losses)))
    return net, losses


def predict_map(net: Network, pair: ImagePair, batch_size: int = 1024) -> np.ndarray:
    """Classify every pixel of the pair; returns a (H, W) uint8 change mask."""
    p = net.config.patch_size
    h, w = pair.shape
    if h < p or w < p:
        raise ArgumentError(f"image {h}x{w} is smaller than the patch size {p}")
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    out = np.empty(h * w, dtype=np.uint8)
    for start in range(0, coords.shape[0], batch_size):
        chunk = coords[start : start + batch_size]
        patchset = extract_patches(pair, chunk, p)
        logits = net.forward(patchset.patches.astype(net.dtype))
        cls = argmax_channel(logits[:, :, None, None])
        out[start : start + chunk.shape[0]] = cls.astype(np.uint8)
    return out.reshape(h, w)


def evaluate(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """Count FP/FN of a predicted change mask against the ground truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"extent mismatch: {pred.shape} vs {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ArgumentError(f"{name} mask values must be 0 or 1")
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    return MetricsReport.from_counts(fp, fn, truth.size)


@dataclass
class RowCheck:
    """Consistency flags for one reported results row."""

    oe_consistent: bool
    pcc_consistent: bool

    @property
    def ok(self) -> bool:
        return self.oe_consistent and self.pcc_consistent


def validate_table(rows, nt: int) -> list[RowCheck]:
    """Check OE = FP + FN and PCC = (1 - OE/Nt)*100 for published rows.

    The PCC check accepts half a unit in the last printed place (2
    decimals).  Rows are (FP, FN, OE, PCC) tuples.
    """
    if nt <= 0:
        raise ArgumentError(f"Nt must be positive, got {nt}")
    checks = []
    for fp, fn, oe, pcc in rows:
        oe_ok = (fp + fn) == oe
        expected = (1.0 - oe / nt) * 100.0
        pcc_ok = abs(pcc - expected) <= 0.005 + 1e-9
        checks.append(RowCheck(oe_ok, pcc_ok))
    return checks

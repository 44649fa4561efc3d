"""Dense rank-4 tensors, deterministic RNG streams, and elementwise primitives.

Tensors are plain ``numpy.ndarray`` values laid out ``(batch, channel,
height, width)`` row-major.  Double precision is used by the verification
and gradient-check suites, single precision by training; the choice is
made at construction time via ``dtype`` and must be uniform within a run.

Randomness comes from :class:`Rng`, a counter-based splitmix64 generator.
Normal deviates use Box-Muller, gamma deviates Marsaglia-Tsang; both are
pinned so that every experiment is bit-reproducible from one ``--seed``.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_GOLDEN_U64 = np.uint64(_GOLDEN)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# Conventional stream ids so components can vary independently of each other
# while still being driven by a single seed.
STREAM_WEIGHTS = 1
STREAM_DATA = 2
STREAM_SAMPLING = 3
STREAM_SHUFFLE = 4
STREAM_PRECLASS = 5


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic random stream derived from ``(seed, stream_id)``.

    The k-th raw draw is ``mix64(base + k * golden)``, so draws can be
    produced in vectorised blocks without changing the sequence.  A stream
    is single-owner: never share one instance across concurrent tasks.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not isinstance(seed, int) or not isinstance(stream_id, int):
            raise ArgumentError("seed and stream_id must be integers")
        self.seed = seed & _MASK64
        self.stream_id = stream_id & _MASK64
        self._base = _mix64_int(
            _mix64_int(self.seed) + (self.stream_id * _GOLDEN & _MASK64)
        )
        self._counter = 0

    def spawn(self, stream_id: int) -> "Rng":
        """Independent substream of the same seed."""
        return Rng(self.seed, stream_id)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit draws."""
        if n < 0:
            raise ArgumentError("draw count must be >= 0")
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self._base) + idx * _GOLDEN_U64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on the open interval (0, 1)."""
        bits = (self.raw(n) >> np.uint64(11)).astype(np.float64)
        return (bits + 0.5) * (1.0 / (1 << 53))

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` Box-Muller normal deviates (cosine branch only)."""
        if std < 0:
            raise ArgumentError("std must be >= 0")
        if n == 0:
            return np.empty(0)
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mean + std * z

    def gamma(self, shape_param: float, n: int) -> np.ndarray:
        """``n`` gamma(shape, scale=1) deviates via Marsaglia-Tsang, shape >= 1."""
        if shape_param < 1.0:
            raise ArgumentError("gamma shape must be >= 1")
        d = shape_param - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = n - filled
            x = self.normal(m)
            v = (1.0 + c * x) ** 3
            u = self.uniform(m)
            safe_v = np.where(v > 0, v, 1.0)
            ok = (v > 0) & (
                np.log(u) < 0.5 * x * x + d - d * safe_v + d * np.log(safe_v)
            )
            accepted = d * v[ok]
            out[filled : filled + accepted.size] = accepted
            filled += accepted.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of ``range(n)``."""
        return np.argsort(self.raw(n), kind="stable")


def _validate_shape(shape) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ShapeError(f"tensor shape must have 4 extents, got {tuple(shape)}")
    dims = []
    for d in shape:
        if int(d) != d or d < 0:
            raise ShapeError(f"tensor extents must be non-negative integers, got {d}")
        dims.append(int(d))
    total = dims[0] * dims[1] * dims[2] * dims[3]
    if total >= (1 << 62):
        raise ShapeError(f"tensor of shape {tuple(dims)} overflows the index range")
    return tuple(dims)


def zeros(shape, dtype=np.float64) -> np.ndarray:
    """Rank-4 tensor of zeros."""
    return np.zeros(_validate_shape(shape), dtype=dtype)


def ones(shape, dtype=np.float64) -> np.ndarray:
    """Rank-4 tensor of ones."""
    return np.ones(_validate_shape(shape), dtype=dtype)


def rng_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0,
               dtype=np.float64) -> np.ndarray:
    """Rank-4 tensor of i.i.d. normal draws, deterministic given the stream."""
    dims = _validate_shape(shape)
    if std < 0:
        raise ArgumentError("std must be >= 0")
    n = dims[0] * dims[1] * dims[2] * dims[3]
    return rng.normal(n, mean, std).reshape(dims).astype(dtype)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape} (no broadcasting)")


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if x.size and not np.isfinite(x).all():
        raise NumericError(f"{op} produced a non-finite value")
    return x


def ew_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of equal-shape tensors."""
    _check_same_shape(a, b)
    return _check_finite(a + b, "ew_add")


def ew_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of equal-shape tensors."""
    _check_same_shape(a, b)
    return _check_finite(a * b, "ew_mul")


def scale(a: np.ndarray, c: float) -> np.ndarray:
    """Multiply every element by the scalar ``c``."""
    if not np.isfinite(c):
        raise ArgumentError("scale factor must be finite")
    return _check_finite(np.asarray(a) * c, "scale")


def argmax_channel(t: np.ndarray) -> np.ndarray:
    """Per-batch index of the larger of two channel logits; ties go to 0.

    Expects shape (batch, 2, 1, 1).  The tie-break to 0 (unchanged) keeps
    ambiguous pixels out of the reported change map.
    """
    t = np.asarray(t)
    if t.ndim != 4 or t.shape[1] != 2 or t.shape[2] != 1 or t.shape[3] != 1:
        raise ShapeError(
            f"argmax_channel expects shape (batch, 2, 1, 1), got {t.shape}"
        )
    return np.argmax(t[:, :, 0, 0], axis=1)

"""Dense float64 helpers and named, seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Random streams wrap ``numpy.random.Generator`` over the
PCG64 bit generator, keyed by ``(seed, stream_id)`` through ``SeedSequence``
so that every logical actor gets its own reproducible sequence.
"""
from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a float64 row-major matrix, optionally reshaping flat data."""
    m = np.array(data, dtype=np.float64, order="C")
    if rows is not None or cols is not None:
        if rows is None or cols is None or m.size != rows * cols:
            raise ShapeError(f"cannot shape {m.size} values into {rows}x{cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {m.shape}")
    check_finite(m, "matrix")
    return m


def check_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{what} contains {bad} non-finite entries")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    check_finite(out, "matmul result")
    return out


def _stream_key(stream_id: str) -> int:
    return zlib.crc32(stream_id.encode("utf-8"))


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Two streams built from the same pair produce identical draws for the
    same call sequence. Distinct ids hash to distinct ``SeedSequence``
    entropy and are treated as independent.
    """

    def __init__(self, seed: int, stream_id: str = "default"):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        ss = np.random.SeedSequence([self.seed, _stream_key(self.stream_id)])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, suffix: str) -> "RngStream":
        """Independent stream derived from this one's seed; never shares state."""
        return RngStream(self.seed, f"{self.stream_id}/{suffix}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


def uniform(rng: RngStream, lo: float, hi: float) -> float:
    if not lo < hi:
        raise ParameterError(f"uniform needs lo < hi, got [{lo}, {hi})")
    return float(rng.generator.uniform(lo, hi))


def gaussian(rng: RngStream, mean: float, std: float) -> float:
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        return float(mean)
    return float(rng.generator.normal(mean, std))


def shuffle(rng: RngStream, seq: Sequence) -> list:
    """Return a shuffled copy of ``seq``."""
    order = rng.generator.permutation(len(seq))
    return [seq[i] for i in order]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad

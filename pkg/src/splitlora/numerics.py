"""Dense float64 matrices, a portable seeded generator and a finite-difference oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Functions here never modify their inputs.

The generator is SplitMix64 (Steele, Lea & Flood; public domain reference
by Sebastiano Vigna). Because SplitMix64 is counter based, the n-th output
is ``mix(seed + n * 0x9E3779B97F4A7C15)`` and blocks of draws can be
produced with vectorised uint64 arithmetic while staying bit-identical to
the scalar recipe.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def as_matrix(data, *, name: str = "matrix") -> Matrix:
    """Coerce ``data`` to a finite 2-D float64 array (copying if needed)."""
    m = np.array(data, dtype=np.float64, order="C", copy=True)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be 2-D with rows, cols >= 1, got shape {m.shape}")
    check_finite(m, name)
    return m


def zeros(rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ParameterError(f"zeros needs rows, cols >= 1, got {rows}x{cols}")
    return np.zeros((rows, cols), dtype=np.float64)


def frozen(m: Matrix) -> Matrix:
    """Return a read-only view, so accidental in-place writes raise."""
    v = m.view()
    v.flags.writeable = False
    return v


def check_finite(m: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite entries in {what}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a shape check naming both operands."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
                         if a.ndim == 2 and b.ndim == 2 else
                         f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    return a @ b


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    return int(_mix(np.array([z & _MASK64], dtype=np.uint64))[0])


class SeededRng:
    """SplitMix64 stream.

    ``next_u64(n)`` returns the next n outputs. Uniform doubles use the top
    53 bits; normals use the Box-Muller transform on consecutive uniform
    pairs ``(u1, u2)`` as ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= _MASK64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._state = int(seed)

    def derive(self, *keys) -> "SeededRng":
        """Child generator for a named sub-stream, independent of this one's state.

        The child seed is ``mix(seed ^ mix(h))`` where ``h`` is the first
        8 bytes (little-endian) of BLAKE2b over ``"/".join(map(str, keys))``.
        """
        digest = hashlib.blake2b("/".join(map(str, keys)).encode(), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        return SeededRng(_mix_int(self.seed ^ _mix_int(h)))

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        out = _mix(steps + np.uint64(self._state))
        self._state = (self._state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def randbelow(self, n: int) -> int:
        """Integer in [0, n) by the multiply-shift map (bias below 2**-40 for n < 2**24)."""
        if n < 1:
            raise ParameterError(f"randbelow needs n >= 1, got {n}")
        return (int(self.next_u64(1)[0]) * n) >> 64

    def permutation(self, n: int) -> np.ndarray:
        return self.sample_indices(n, n)

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n): the first k slots of a Fisher-Yates pass."""
        if not 0 <= k <= n:
            raise ParameterError(f"cannot draw {k} distinct indices from {n}")
        idx = np.arange(n)
        for i in range(k):
            j = i + self.randbelow(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def log_gamma_variate(self, shape: float) -> float:
        """log of a Gamma(shape, 1) draw (Marsaglia-Tsang, boosted for shape < 1).

        Working in log space keeps tiny-shape draws from underflowing to zero.
        """
        if shape <= 0:
            raise ParameterError(f"gamma shape must be positive, got {shape}")
        boost = 0.0
        if shape < 1.0:
            u = float(self.uniform(1)[0])
            boost = math.log1p(-u) / shape
            shape += 1.0
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = float(self.normal(1)[0])
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = float(self.uniform(1)[0])
            if math.log1p(-u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return math.log(d * v) + boost

    def log_dirichlet(self, concentration: float, k: int) -> np.ndarray:
        """Log-probabilities of a symmetric Dirichlet(concentration) draw over k categories."""
        lg = np.array([self.log_gamma_variate(concentration) for _ in range(k)])
        return lg - (lg.max() + math.log(np.exp(lg - lg.max()).sum()))


def gaussian_init(rows: int, cols: int, sigma: float, rng: SeededRng) -> Matrix:
    """rows x cols matrix of i.i.d. Normal(0, sigma**2) draws, filled row-major."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ParameterError(f"sigma must be finite and >= 0, got {sigma}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"gaussian_init needs rows, cols >= 1, got {rows}x{cols}")
    draws = rng.normal(rows * cols)
    if sigma == 0:
        return zeros(rows, cols)
    return (draws * sigma).reshape(rows, cols)


def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix, eps: float = 1e-5) -> Matrix:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(f(x.copy()))
        x[idx] = orig - eps
        fm = float(f(x.copy()))
        x[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"objective is non-finite near entry {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad

"""Dense numerics used across the package.

Vectors and matrices are plain ``numpy.float64`` arrays. Randomness comes
from :class:`SeededRng`, a counter-based SplitMix64 stream whose output is
defined purely by 64-bit integer arithmetic, so a given seed yields the same
draws on every platform and numpy version.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DimMismatch, NonFiniteEvaluation, NormTooSmall

NORM_EPS = 1e-12

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm; rows are normalized independently for 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise NormTooSmall(f"cannot normalize a vector with norm <= {NORM_EPS}")
    return v / norms


def pairwise_euclidean(A, B) -> np.ndarray:
    A, B = as_matrix(A), as_matrix(B)
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    # Explicit differences (not the |a|^2 - 2ab + |b|^2 expansion) keep
    # self-distances exactly zero and the result exactly symmetric.
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def dot_product_similarity(A, B) -> np.ndarray:
    A, B = as_matrix(A), as_matrix(B)
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    return np.einsum("ik,jk->ij", A, B)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x`` (any shape).

    ``f`` may return a scalar (result has the shape of ``x``) or a 1-D array
    of k values (result has shape ``(k,) + x.shape``), so several objectives
    can share one sweep over the coordinates.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - h
        fm = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"f is not finite near coordinate {i}")
        cols.append((fp - fm) / (2.0 * h))
    if not cols:
        return np.zeros_like(x)
    jac = np.stack(cols, axis=-1)
    return jac.reshape(jac.shape[:-1] + x.shape)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: str) -> int:
    """Deterministically derive a child seed from ``seed`` and a text tag."""
    digest = hashlib.sha256(f"{seed & _MASK64}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` (0-based) is ``splitmix64_mix(seed + (i + 1) * 0x9E3779B97F4A7C15)``
    in wrapping 64-bit arithmetic. Uniforms take the top 53 bits; normals use
    Box-Muller on consecutive uniform pairs.
    """

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` draws from [low, high)."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        if replace:
            return self.integers(k, n)
        if k > n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def spawn(self, tag: str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, tag))

"""Small numerical helpers shared by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Random draws go
through ``numpy.random.Generator`` backed by PCG64, seeded from a single
unsigned 64-bit integer.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MAX_ORDER = 12
NORM_KINDS = ("l1", "l2", "linf")

SeededRng = np.random.Generator


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` (must fit in 64 unsigned bits)."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-sample streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def as_tensor(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def binomial(i: int, j: int) -> int:
    if not (0 <= i <= MAX_ORDER):
        raise ValueError(f"order overflow: i={i} (max {MAX_ORDER})")
    if not (0 <= j <= i):
        raise ValueError(f"binomial index out of range: ({i}, {j})")
    return math.comb(i, j)


def norm(v: np.ndarray, kind: str = "l2") -> float:
    flat = np.asarray(v, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("norm of empty tensor")
    if kind == "l2":
        ss = float(np.dot(flat, flat))
        if 1e-280 < ss < 1e280:
            return math.sqrt(ss)
        # rescale when the squared sum under- or overflows
        big = float(np.max(np.abs(flat)))
        if big == 0.0 or not math.isfinite(big):
            return big
        u = flat / big
        return big * math.sqrt(float(np.dot(u, u)))
    if kind == "l1":
        return float(np.sum(np.abs(flat)))
    if kind == "linf":
        return float(np.max(np.abs(flat)))
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("pearson_r needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pca_2d(points: Sequence[np.ndarray]) -> np.ndarray:
    """Project points onto their top two principal directions.

    Returns an ``(n, 2)`` array. Components are ordered by explained variance and
    each direction is signed so that its largest-magnitude loading is positive.
    The eigenproblem is solved on whichever of the covariance (d x d) or Gram
    (n x n) matrix is smaller.
    """
    X = np.stack([np.asarray(p, dtype=np.float64).ravel() for p in points])
    n, d = X.shape
    if n < 3 or d < 2:
        raise ValueError("pca_2d needs at least 3 points of dimension >= 2")
    Xc = X - X.mean(axis=0)
    if d <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc / (n - 1))
        order = np.argsort(evals)[::-1][:2]
        evals, dirs = evals[order], evecs[:, order]
    else:
        evals, evecs = np.linalg.eigh(Xc @ Xc.T / (n - 1))
        order = np.argsort(evals)[::-1][:2]
        evals, u = evals[order], evecs[:, order]
        dirs = Xc.T @ u
    if evals[1] <= 1e-12 * max(abs(evals[0]), 1e-300):
        raise ValueError("degenerate spectrum")
    dirs = dirs / np.linalg.norm(dirs, axis=0)
    for c in range(2):
        if dirs[np.argmax(np.abs(dirs[:, c])), c] < 0:
            dirs[:, c] = -dirs[:, c]
    return Xc @ dirs

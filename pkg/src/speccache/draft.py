"""Draft predictors that extrapolate cached anchor features to later steps.

Sampling runs from t = T down to 0, so older anchors sit at *larger*
timesteps: the cache stores anchors t, t+N, t+2N, ... with index j = 0 the
newest (smallest t). Finite differences follow that indexing:

    D^i F(t) = sum_j (-1)^(i-j) * C(i, j) * F(t + jN)

The Taylor draft evaluates the expansion of the interpolant through the cached
anchors at t - k. Written in powers of k/N it reads

    F(t-k) ~ F(t) + sum_i D^i F(t) / (i! N^i) * (-1)^i * k (k+N) ... (k+(i-1)N)

The rising product replaces the plain power k^i; both agree for i <= 1, and
only the rising product reproduces polynomials of degree <= m exactly. The
plain-power variant is kept as ``form="power"``.

A cache built with ``uniform=False`` also accepts anchors at arbitrary
earlier timesteps (for instance a step recomputed after a rejected draft).
Prediction then uses Newton divided differences over the actual anchor
times, which coincides with the formula above whenever the spacing is N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import residual_stream
from .numerics import MAX_ORDER, binomial

DRAFT_KINDS = ("taylor", "adams_bashforth", "reuse")


class ColdCache(ValueError):
    pass


@dataclass
class FeatureCache:
    anchor_gap: int
    order: int
    times: list = field(default_factory=list)      # newest first
    feats: list = field(default_factory=list)      # each (L, H), newest first
    uniform: bool = True                           # enforce spacing exactly N

    def __post_init__(self):
        if self.anchor_gap < 1:
            raise ValueError("anchor_gap must be >= 1")
        if not (0 <= self.order <= MAX_ORDER):
            raise ValueError(f"order overflow: {self.order}")

    @property
    def capacity(self) -> int:
        return self.order + 1

    def __len__(self) -> int:
        return len(self.times)

    @property
    def newest(self) -> int | None:
        return self.times[0] if self.times else None

    @property
    def warm(self) -> bool:
        return len(self.times) >= self.capacity

    @property
    def evenly_spaced(self) -> bool:
        return all(a - b == -self.anchor_gap for a, b in zip(self.times, self.times[1:]))

    def clear(self) -> None:
        self.times.clear()
        self.feats.clear()

    def push(self, t: int, features, reset: bool = False) -> "FeatureCache":
        features = np.asarray(features, dtype=np.float64)
        if reset:
            self.clear()
        if self.times:
            if not self.uniform:
                if t >= self.times[0]:
                    raise ValueError(f"anchor at t={t} is not earlier than t={self.times[0]}")
            elif t != self.times[0] - self.anchor_gap:
                raise ValueError(f"broken anchor chain: push at t={t} after t={self.times[0]} "
                                 f"with gap {self.anchor_gap}")
            if features.shape != self.feats[0].shape:
                raise ValueError("feature shape changed within one cache")
        self.times.insert(0, int(t))
        self.feats.insert(0, features)
        del self.times[self.capacity:]
        del self.feats[self.capacity:]
        return self

    def stacked(self, n: int | None = None) -> np.ndarray:
        n = len(self.feats) if n is None else n
        return np.stack(self.feats[:n])


def cache_push(cache: FeatureCache, t: int, features, reset: bool = False) -> FeatureCache:
    return cache.push(t, features, reset)


def _layer(arr, layer):
    return arr if layer is None else arr[..., layer, :]


def finite_difference(cache: FeatureCache, layer: int | None, i: int) -> np.ndarray:
    if not cache.evenly_spaced:
        raise ValueError("finite differences need anchors spaced exactly N apart")
    if i > cache.order:
        raise ValueError(f"difference order {i} exceeds cache order {cache.order}")
    if len(cache) < i + 1:
        raise ColdCache(f"cold cache: order-{i} difference needs {i + 1} anchors, have {len(cache)}")
    out = np.zeros_like(_layer(cache.feats[0], layer))
    for j in range(i + 1):
        out = out + ((-1) ** (i - j) * binomial(i, j)) * _layer(cache.feats[j], layer)
    return out


def taylor_weights(order: int, k: int, N: int, form: str = "newton") -> np.ndarray:
    """Coefficients w_j such that the prediction is sum_j w_j * F(t + jN)."""
    if k < 1:
        raise ValueError("lookahead k must be >= 1")
    coef = np.zeros(order + 1)
    for i in range(order + 1):
        if form == "newton":
            rising = math.prod(k + q * N for q in range(i))
        elif form == "power":
            rising = k**i
        else:
            raise ValueError(f"unknown Taylor form {form!r}")
        coef[i] = (-1) ** i * rising / (math.factorial(i) * N**i)
    w = np.zeros(order + 1)
    for i in range(order + 1):
        for j in range(i + 1):
            w[j] += coef[i] * (-1) ** (i - j) * binomial(i, j)
    return w


def taylor_predict(cache: FeatureCache, layer: int | None, k: int,
                   order: int | None = None, form: str = "newton") -> np.ndarray:
    """Extrapolate to t - k. ``layer=None`` predicts all layers at once.

    ``order`` may lower the expansion order below the cache order (used by
    baselines that start predicting before the cache is full).
    """
    m = cache.order if order is None else order
    if m > cache.order:
        raise ValueError("requested order exceeds cache order")
    if len(cache) < m + 1:
        raise ColdCache(f"cold cache: order {m} needs {m + 1} anchors, have {len(cache)}")
    if m == 0:
        if k < 1:
            raise ValueError("lookahead k must be >= 1")
        return _layer(cache.feats[0], layer).copy()
    if cache.evenly_spaced:
        w = taylor_weights(m, k, cache.anchor_gap, form)
    else:
        w = newton_weights(cache.times[:m + 1], cache.times[0] - k)
    return np.tensordot(w, _layer(cache.stacked(m + 1), layer), axes=1)


def newton_weights(times, target) -> np.ndarray:
    """Weights w_j with sum_j w_j F(times[j]) equal to the Newton interpolant
    through all anchors evaluated at ``target``."""
    n = len(times)
    ts = np.asarray(times, dtype=np.float64)
    # divided-difference table on unit vectors: row i holds f[t_0..t_i] as weights
    table = np.eye(n)
    coefs = [table[0].copy()]
    for i in range(1, n):
        table = (table[:-1] - table[1:]) / (ts[:n - i] - ts[i:])[:, None]
        coefs.append(table[0].copy())
    w = np.zeros(n)
    prod = 1.0
    for i in range(n):
        w += coefs[i] * prod
        prod *= target - ts[i]
    return w


def adams_bashforth_predict(cache: FeatureCache, layer: int | None, k: int) -> np.ndarray:
    """Two-step Adams-Bashforth extrapolation on finite-difference slopes.

    With three anchors: F(t) + k * (1.5 * s0 - 0.5 * s1), where s0, s1 are the
    newest and previous slopes (per unit step). With two anchors: F(t) + k * s0.
    """
    if k < 1:
        raise ValueError("lookahead k must be >= 1")
    if len(cache) < 2:
        raise ColdCache(f"cold cache: Adams-Bashforth needs 2 anchors, have {len(cache)}")
    ts = cache.times
    f0, f1 = _layer(cache.feats[0], layer), _layer(cache.feats[1], layer)
    s0 = (f0 - f1) / (ts[1] - ts[0])
    if len(cache) >= 3:
        s1 = (f1 - _layer(cache.feats[2], layer)) / (ts[2] - ts[1])
        return f0 + k * (1.5 * s0 - 0.5 * s1)
    return f0 + k * s0


@dataclass(frozen=True)
class DraftKind:
    tag: str = "taylor"

    def __post_init__(self):
        if self.tag not in DRAFT_KINDS:
            raise ValueError(f"unknown draft kind {self.tag!r}; expected {DRAFT_KINDS}")

    def min_anchors(self, order: int) -> int:
        if self.tag == "reuse":
            return 1
        if self.tag == "adams_bashforth":
            return max(2, order + 1)
        return order + 1


def predict_features(cache: FeatureCache, kind: DraftKind, k: int,
                     order: int | None = None) -> np.ndarray:
    """All-layer feature prediction, shape (L, H)."""
    if kind.tag == "reuse":
        return taylor_predict(cache, None, k, order=0)
    if kind.tag == "adams_bashforth":
        return adams_bashforth_predict(cache, None, k)
    return taylor_predict(cache, None, k, order=order)


def predict_all_layers(cache: FeatureCache, kind: DraftKind, k: int, model, h0,
                       order: int | None = None):
    """Predicted per-layer branch outputs plus the noise prediction obtained
    by adding them to the fresh input embedding ``h0`` and applying the head."""
    feats = predict_features(cache, kind, k, order)
    return feats, model.head(residual_stream(h0, feats))


def draft_flops(model, kind: DraftKind, n_terms: int) -> int:
    """MACs of one all-layer prediction, the input embedding and the head."""
    per_term = model.n_layers * model.width
    if kind.tag == "reuse":
        combine = 0
    elif kind.tag == "adams_bashforth":
        combine = per_term * min(n_terms, 3)
    else:
        combine = per_term * n_terms if n_terms > 1 else 0
    return combine + model.embed_flops + model.head_flops

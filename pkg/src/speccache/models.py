"""Target models: an exact Gaussian-mixture noise predictor and a small
residual MLP denoiser that exposes its per-block activations."""
from __future__ import annotations

import math
import struct
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .diffusion import DiffusionSchedule

MAGIC = b"SPCA1"


# --------------------------------------------------------------------------
# Gaussian mixture data distribution


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.sigmas, dtype=np.float64)
        if not (len(w) == len(mu) == len(s)):
            raise ValueError("weights, means and sigmas must have one entry per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) >= 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(s <= 0):
            raise ValueError("component std-devs must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigmas", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "sigmas": self.sigmas.tolist()}


def ring_gmm(n_components: int = 8, radius: float = 2.0, sigma: float = 0.2) -> GmmSpec:
    ang = 2 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GmmSpec(np.full(n_components, 1.0 / n_components), means,
                   np.full(n_components, sigma))


def _marginal_terms(spec: GmmSpec, x: np.ndarray, ab: float):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, mixture has {spec.dim}")
    var = ab * spec.sigmas**2 + (1.0 - ab)                      # (K,)
    diff = x[..., None, :] - math.sqrt(ab) * spec.means          # (..., K, d)
    sq = np.sum(diff * diff, axis=-1)                            # (..., K)
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    logp = logw - 0.5 * spec.dim * np.log(2 * np.pi * var) - 0.5 * sq / var
    return var, diff, logp


def gmm_logpdf(spec: GmmSpec, x: np.ndarray, t: int, sched: DiffusionSchedule):
    """log p_t(x) of the noised marginal at step t."""
    _, _, logp = _marginal_terms(spec, x, sched.alpha_bars[t])
    return logsumexp(logp, axis=-1)


def gmm_eps(spec: GmmSpec, x: np.ndarray, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Exact noise prediction -sqrt(1 - abar_t) * grad log p_t(x)."""
    ab = sched.alpha_bars[t]
    var, diff, logp = _marginal_terms(spec, x, ab)
    resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    score = -np.sum(resp[..., None] * diff / var[:, None], axis=-2)
    return -math.sqrt(1.0 - ab) * score


def gmm_sample(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.dim))
    return spec.means[comp] + spec.sigmas[comp, None] * z


# --------------------------------------------------------------------------
# Model protocol shared by both targets


@dataclass
class ModelOutput:
    eps_hat: np.ndarray
    layer_features: np.ndarray     # (L, H) residual-branch outputs of one sample
    flops: int


def residual_stream(h0, branches, upto: int | None = None):
    """Residual-stream value after adding ``branches[:upto]`` to the input
    embedding ``h0`` (all branches by default)."""
    n = len(branches) if upto is None else upto
    h = np.array(h0, dtype=np.float64)
    for f in branches[:n]:
        h = h + f                  # same order as the full pass, so results match bitwise
    return h


class AnalyticGmmModel:
    """Wraps the exact mixture score so the sampling engine can drive it.

    One pseudo-layer: the embedding is x itself, the branch adds eps - x and
    the head is the identity, so the stream ends at the exact noise
    prediction. Re-verifying that layer costs a full evaluation.
    """

    def __init__(self, spec: GmmSpec):
        self.spec = spec
        self.n_layers = 1
        self.width = spec.dim
        self.d = spec.dim
        n_comp = len(spec.weights)
        self.block_flops = 3 * n_comp * spec.dim
        self.flops = self.block_flops
        self.head_flops = 0
        self.embed_flops = 0

    def forward(self, x, t, sched) -> ModelOutput:
        x = np.asarray(x, dtype=np.float64)
        eps = gmm_eps(self.spec, x, t, sched)
        return ModelOutput(eps, (eps - x)[None, :], self.flops)

    def input_embedding(self, x, t, sched):
        return np.asarray(x, dtype=np.float64)

    def branch(self, layer, h, t, sched):
        return gmm_eps(self.spec, h, t, sched) - h

    def block(self, layer, h, t, sched):
        return h + self.branch(layer, h, t, sched)

    def head(self, feature):
        return np.array(feature, dtype=np.float64)


# --------------------------------------------------------------------------
# Layered residual denoiser

PARAM_ORDER = "W_in, b_in, then per block l: W1[l], b1[l], W2[l], b2[l], then W_out, b_out"


def silu(u):
    return u * expit(u)


@lru_cache(maxsize=None)
def _freqs(n: int) -> np.ndarray:
    return np.geomspace(1.0, 8.0, n)


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the normalized time t/T.

    Frequencies span 1..8 rad per unit normalized time so the embedding, and
    hence every cached feature, varies smoothly across adjacent steps.
    """
    s = np.asarray(t, dtype=np.float64) / T
    freqs = _freqs(dim // 2)
    ang = s[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class LayeredDenoiser:
    L: int
    H: int
    d: int
    time_embed_dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    # -- shapes / costs -----------------------------------------------------
    def param_shapes(self) -> list[tuple[str, tuple]]:
        H, d, E, L = self.H, self.d, self.time_embed_dim, self.L
        shapes = [("W_in", (H, d + E)), ("b_in", (H,))]
        for l in range(L):
            shapes += [(f"W1_{l}", (H, H)), (f"b1_{l}", (H,)),
                       (f"W2_{l}", (H, H)), (f"b2_{l}", (H,))]
        shapes += [("W_out", (d, H)), ("b_out", (d,))]
        return shapes

    @property
    def n_layers(self) -> int:
        return self.L

    @property
    def width(self) -> int:
        return self.H

    @property
    def embed_flops(self) -> int:
        return self.H * (self.d + self.time_embed_dim)

    @property
    def block_flops(self) -> int:
        return 2 * self.H * self.H

    @property
    def head_flops(self) -> int:
        return self.d * self.H

    @property
    def flops(self) -> int:
        return model_flops(self)

    def _require_params(self):
        if not self.params:
            raise ValueError("model is uninitialized (no parameters)")

    # -- pieces shared by the full pass and the partial verification pass ---
    def input_embedding(self, x, t, sched: DiffusionSchedule, counter=None):
        self._require_params()
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, model expects {self.d}")
        emb = time_embedding(np.broadcast_to(t, x.shape[:-1]), sched.T, self.time_embed_dim)
        z = np.concatenate([x, emb], axis=-1)
        return _mm(z, self.params["W_in"], counter) + self.params["b_in"]

    def branch(self, layer: int, h, t=None, sched=None, counter=None):
        """Residual-branch output W2 silu(W1 h + b1) + b2 of one block."""
        p = self.params
        u = _mm(h, p[f"W1_{layer}"], counter) + p[f"b1_{layer}"]
        return _mm(silu(u), p[f"W2_{layer}"], counter) + p[f"b2_{layer}"]

    def block(self, layer: int, h, t=None, sched=None, counter=None):
        return h + self.branch(layer, h, t, sched, counter)

    def head(self, feature, counter=None):
        return _mm(feature, self.params["W_out"], counter) + self.params["b_out"]

    def forward(self, x, t, sched) -> ModelOutput:
        return denoiser_forward(self, x, t, sched)

    # -- parameter vector ---------------------------------------------------
    def flat_params(self) -> np.ndarray:
        self._require_params()
        return np.concatenate([self.params[k].ravel() for k, _ in self.param_shapes()])

    def with_flat_params(self, vec: np.ndarray) -> "LayeredDenoiser":
        out, i = {}, 0
        for k, shp in self.param_shapes():
            n = int(np.prod(shp))
            out[k] = np.array(vec[i:i + n], dtype=np.float64).reshape(shp)
            i += n
        if i != len(vec):
            raise ValueError(f"expected {i} parameters, got {len(vec)}")
        return LayeredDenoiser(self.L, self.H, self.d, self.time_embed_dim, out)

    def copy(self) -> "LayeredDenoiser":
        return LayeredDenoiser(self.L, self.H, self.d, self.time_embed_dim,
                               {k: v.copy() for k, v in self.params.items()})


def init_denoiser(L: int = 8, H: int = 64, d: int = 2, time_embed_dim: int = 8,
                  rng: np.random.Generator | None = None, zero: bool = False) -> LayeredDenoiser:
    """He-style init; the second affine of each block is shrunk by 1/sqrt(L)
    so the residual stream stays O(1) at depth."""
    m = LayeredDenoiser(L, H, d, time_embed_dim)
    for k, shp in m.param_shapes():
        if zero or k.startswith("b"):
            m.params[k] = np.zeros(shp)
            continue
        fan_in = shp[1]
        scale = math.sqrt(1.0 / fan_in)
        if k.startswith("W2"):
            scale /= math.sqrt(L)
        m.params[k] = scale * rng.standard_normal(shp)
    return m


def model_flops(model) -> int:
    """Multiply-accumulates of one full forward pass (biases and pointwise ops excluded)."""
    if isinstance(model, LayeredDenoiser):
        return model.embed_flops + model.L * model.block_flops + model.head_flops
    return int(model.flops)


def _mm(a, W, counter=None):
    if counter is not None:
        counter.append(int(W.size))
    return a @ W.T


def denoiser_forward(model: LayeredDenoiser, x, t: int, sched: DiffusionSchedule,
                     instrument: bool = False):
    """Full forward pass. With ``instrument=True`` also returns the MAC count
    of every matrix product actually executed (per sample)."""
    model._require_params()
    counter = [] if instrument else None
    h = model.input_embedding(x, t, sched, counter)
    feats = np.empty(h.shape[:-1] + (model.L,) + h.shape[-1:])
    for l in range(model.L):
        f = model.branch(l, h, counter=counter)
        feats[..., l, :] = f
        h = h + f
    eps = model.head(h, counter)
    out = ModelOutput(eps, feats, model_flops(model))
    if instrument:
        return out, counter
    return out


def estimate_lipschitz(model, sched: DiffusionSchedule, rng: np.random.Generator,
                       n_probes: int = 64, delta: float = 1e-3) -> float:
    """Largest observed ||eps(x + dx) - eps(x)|| / ||dx|| over random probes."""
    worst = 0.0
    for _ in range(n_probes):
        t = int(rng.integers(1, sched.T + 1))
        x = rng.standard_normal(model.d)
        dx = rng.standard_normal(model.d)
        dx *= delta / np.linalg.norm(dx)
        a = model.forward(x, t, sched).eps_hat
        b = model.forward(x + dx, t, sched).eps_hat
        worst = max(worst, float(np.linalg.norm(b - a)) / delta)
    return worst


# --------------------------------------------------------------------------
# binary weight format


def save_weights(model: LayeredDenoiser, path) -> None:
    header = MAGIC + struct.pack("<4i", model.L, model.H, model.d, model.time_embed_dim)
    body = model.flat_params().astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_weights(path) -> LayeredDenoiser:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:5]!r}")
    L, H, d, E = struct.unpack("<4i", raw[5:21])
    vec = np.frombuffer(raw[21:], dtype="<f8").astype(np.float64)
    return LayeredDenoiser(L, H, d, E).with_flat_params(vec)

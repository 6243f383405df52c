"""Denoising-objective training of ``LayeredDenoiser`` with hand-written
backpropagation and Adam."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .diffusion import DiffusionSchedule
from .models import GmmSpec, LayeredDenoiser, gmm_sample, silu, time_embedding
from .numerics import make_rng

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"lr must be a finite non-negative number, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not (math.isfinite(b) and 0.0 <= b < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not (self.adam_eps > 0 and self.steps >= 0 and self.batch >= 1):
            raise ValueError("invalid adam_eps / steps / batch")


@dataclass
class LossCurve:
    losses: list = field(default_factory=list)

    def moving_average(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        c = np.cumsum(np.concatenate([[0.0], x]))
        return (c[window:] - c[:-window]) / window

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["loss"]) for r in rows])


def _forward_cached(model: LayeredDenoiser, x, t, sched):
    p = model.params
    z = np.concatenate([x, time_embedding(t, sched.T, model.time_embed_dim)], axis=-1)
    h = z @ p["W_in"].T + p["b_in"]
    hs, us, acts = [h], [], []
    for l in range(model.L):
        u = h @ p[f"W1_{l}"].T + p[f"b1_{l}"]
        a = silu(u)
        h = h + a @ p[f"W2_{l}"].T + p[f"b2_{l}"]
        us.append(u)
        acts.append(a)
        hs.append(h)
    eps = h @ p["W_out"].T + p["b_out"]
    return eps, (z, hs, us, acts)


def loss_and_grads(model: LayeredDenoiser, x, t, eps_true, sched):
    """Mean squared noise-prediction error over a batch and its gradients."""
    eps, (z, hs, us, acts) = _forward_cached(model, x, t, sched)
    p = model.params
    n = eps.size
    r = eps - eps_true
    loss = float(np.sum(r * r)) / n
    g = {}
    ge = 2.0 * r / n
    g["W_out"] = ge.T @ hs[-1]
    g["b_out"] = ge.sum(axis=0)
    gh = ge @ p["W_out"]
    for l in reversed(range(model.L)):
        g[f"W2_{l}"] = gh.T @ acts[l]
        g[f"b2_{l}"] = gh.sum(axis=0)
        ga = gh @ p[f"W2_{l}"]
        s = expit(us[l])
        gu = ga * (s * (1.0 + us[l] * (1.0 - s)))
        g[f"W1_{l}"] = gu.T @ hs[l]
        g[f"b1_{l}"] = gu.sum(axis=0)
        gh = gh + gu @ p[f"W1_{l}"]
    g["W_in"] = gh.T @ z
    g["b_in"] = gh.sum(axis=0)
    return loss, g


def noised_batch(gmm: GmmSpec, sched: DiffusionSchedule, batch: int, rng):
    x0 = gmm_sample(gmm, batch, rng)
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bars[t][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, t, eps


def denoising_loss(predict, x_t, t, eps_true) -> float:
    """Loss of an arbitrary predictor ``predict(x_t, t) -> eps_hat``."""
    r = predict(x_t, t) - eps_true
    return float(np.mean(r * r))


def train(model: LayeredDenoiser, gmm: GmmSpec, sched: DiffusionSchedule,
          cfg: TrainConfig, log_every: int = 0) -> tuple[LayeredDenoiser, LossCurve]:
    if model.d != gmm.dim:
        raise ValueError(f"model dimension {model.d} != data dimension {gmm.dim}")
    model = model.copy()
    rng = make_rng(cfg.seed)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    curve = LossCurve()
    for it in range(cfg.steps):
        x, t, eps = noised_batch(gmm, sched, cfg.batch, rng)
        loss, grads = loss_and_grads(model, x, t, eps, sched)
        if not math.isfinite(loss):
            raise TrainingDivergence(f"divergence: non-finite loss at iteration {it}")
        curve.losses.append(loss)
        if cfg.lr == 0.0:
            continue
        c1 = 1.0 - cfg.beta1 ** (it + 1)
        c2 = 1.0 - cfg.beta2 ** (it + 1)
        for k, gk in grads.items():
            m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * gk
            m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * gk * gk
            model.params[k] -= cfg.lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + cfg.adam_eps)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.5f", it, loss)
    return model, curve


def grad_check(model: LayeredDenoiser, x, t: int, sched: DiffusionSchedule,
               n_params: int = 64, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative deviation between backprop and central-difference gradients.

    The regression target is a fixed standard-normal draw from ``seed``;
    ``n_params`` coordinates of the flat parameter vector are probed. The
    relative deviation uses a 1e-6 floor in the denominator so coordinates with
    vanishing gradient do not divide by zero.
    """
    rng = make_rng(seed)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tt = np.full(len(x), t)
    target = rng.standard_normal(x.shape)
    _, grads = loss_and_grads(model, x, tt, target, sched)
    flat_grad = np.concatenate([grads[k].ravel() for k, _ in model.param_shapes()])
    theta = model.flat_params()
    idx = rng.choice(len(theta), size=min(n_params, len(theta)), replace=False)

    def f(vec):
        m = model.with_flat_params(vec)
        return loss_and_grads(m, x, tt, target, sched)[0]

    worst = 0.0
    for i in idx:
        up, dn = theta.copy(), theta.copy()
        up[i] += step
        dn[i] -= step
        num = (f(up) - f(dn)) / (2 * step)
        ana = flat_grad[i]
        dev = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, dev)
    return worst

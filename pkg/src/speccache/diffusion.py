"""Noise schedules and reverse-process update rules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise parameters for ``t = 1..T``.

    Arrays have length ``T + 1`` and are indexed by the timestep itself.
    Index 0 holds the clean-data convention: beta 0, alpha 1, alpha_bar 1.
    """

    kind: str
    T: int
    betas: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.shape != (self.T + 1,):
            raise ValueError("betas must have length T + 1")
        if not (np.all(b[1:] > 0.0) and np.all(b[1:] < 1.0)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        b = b.copy()
        b[0] = 0.0
        alphas = 1.0 - b
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        object.__setattr__(self, "sigmas", np.sqrt(b))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}


def cosine_alpha_bar(t: float, T: int, s: float = 0.008) -> float:
    """Squared-cosine cumulative signal level, normalized so that t=0 gives 1."""
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0.0)


def build_schedule(kind: str = "linear", T: int = 50, beta_start: float = 2e-3,
                   beta_end: float = 0.4, cosine_s: float = 0.008,
                   max_beta: float = 0.999) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    betas = np.zeros(T + 1)
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"invalid linear endpoints ({beta_start}, {beta_end})")
        betas[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    elif kind == "cosine":
        for t in range(1, T + 1):
            ratio = cosine_alpha_bar(t, T, cosine_s) / cosine_alpha_bar(t - 1, T, cosine_s)
            betas[t] = min(1.0 - ratio, max_beta)
        beta_start, beta_end = float(betas[1]), float(betas[T])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected {SCHEDULE_KINDS}")
    return DiffusionSchedule(kind, T, betas, float(beta_start), float(beta_end))


def schedule_from_dict(d: dict) -> DiffusionSchedule:
    return build_schedule(d["kind"], int(d["T"]), float(d.get("beta_start", 2e-3)),
                          float(d.get("beta_end", 0.4)))


@dataclass(frozen=True)
class SamplerKind:
    tag: str = "ddim"
    eta: float = 0.0

    def __post_init__(self):
        if self.tag not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.tag!r}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")


def _check_shapes(x_t, eps_hat):
    if np.shape(x_t) != np.shape(eps_hat):
        raise ValueError(f"shape mismatch: {np.shape(x_t)} vs {np.shape(eps_hat)}")


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: DiffusionSchedule,
              rng: np.random.Generator | None) -> np.ndarray:
    """Ancestral step with posterior variance fixed to beta_t.

    Passing ``rng=None`` suppresses the noise term (returns the mean). The
    noise term is always omitted at ``t == 1``.
    """
    _check_shapes(x_t, eps_hat)
    if not (1 <= t <= sched.T):
        raise ValueError(f"t={t} outside 1..{sched.T}")
    a = sched.alphas[t]
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - sched.alpha_bars[t]) * eps_hat) / math.sqrt(a)
    if t == 1 or rng is None:
        return mean
    return mean + sched.sigmas[t] * rng.standard_normal(np.shape(x_t))


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              sched: DiffusionSchedule, eta: float = 0.0,
              rng: np.random.Generator | None = None) -> np.ndarray:
    _check_shapes(x_t, eps_hat)
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be smaller than t={t}")
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if eta == 0.0:
        return math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps_hat
    sig = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p))
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(1.0 - ab_p - sig**2, 0.0)) * eps_hat
    if rng is not None and t_prev > 0:
        out = out + sig * rng.standard_normal(np.shape(x_t))
    return out


def sampler_step(kind: SamplerKind, x_t, eps_hat, t: int, t_prev: int,
                 sched: DiffusionSchedule, rng: np.random.Generator | None):
    if kind.tag == "ddpm":
        if t_prev != t - 1:
            raise ValueError("ddpm steps must be unit steps")
        return ddpm_step(x_t, eps_hat, t, sched, rng)
    return ddim_step(x_t, eps_hat, t, t_prev, sched, kind.eta, rng)

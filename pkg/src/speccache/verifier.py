"""Relative-error measurement, the decaying acceptance threshold, the
single-block verification pass and the sequential accept/reject rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import residual_stream
from .numerics import norm

ERROR_KINDS = ("l1", "l2", "linf", "cosine")


@dataclass
class VerifierConfig:
    tau0: float = 0.4
    decay: float = 0.3
    epsilon: float = 1e-8
    norm_kind: str = "l2"
    verify_layer: int = -1          # negative counts from the last layer
    max_draft_len: int = 4         # N*m + N with the default gap and order
    substitute_recomputed: bool = False

    def __post_init__(self):
        if not (self.tau0 >= 0 and not math.isnan(self.tau0)):
            raise ValueError(f"tau0 must be non-negative, got {self.tau0}")
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.norm_kind not in ERROR_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.max_draft_len < 0:
            raise ValueError("max_draft_len must be >= 0")

    def layer_index(self, n_layers: int) -> int:
        l = self.verify_layer + n_layers if self.verify_layer < 0 else self.verify_layer
        if not (0 <= l < n_layers):
            raise ValueError(f"verify_layer {self.verify_layer} out of range for {n_layers} layers")
        return l


def relative_error(pred, actual, cfg: VerifierConfig) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if cfg.norm_kind == "cosine":
        na, nb = norm(pred, "l2"), norm(actual, "l2")
        if na == 0.0 or nb == 0.0:
            return 1.0
        return 1.0 - float(np.dot(pred.ravel(), actual.ravel())) / (na * nb)
    return norm(pred - actual, cfg.norm_kind) / (norm(actual, cfg.norm_kind) + cfg.epsilon)


def error_flops(width: int) -> int:
    """MACs spent measuring one relative error (two squared norms)."""
    return 2 * width


def threshold_at(cfg: VerifierConfig, t: int, T: int) -> float:
    if not (0 <= t <= T):
        raise ValueError(f"t={t} outside 0..{T}")
    return cfg.tau0 * cfg.decay ** ((T - t) / T)


def partial_verify_pass(model, predicted, cfg: VerifierConfig, t: int, sched=None,
                        x=None, h0=None):
    """Recompute the verify block's branch output from the predicted stream.

    ``predicted`` is the (L, H) stack of predicted branch outputs. The input
    to block l is the fresh input embedding of ``x`` plus the predicted
    branches of blocks 0..l-1. Pass ``h0`` to reuse an embedding that was
    already computed (and charged) by the caller; otherwise it is computed
    here and its cost is included in the returned flops.
    """
    l = cfg.layer_index(model.n_layers)
    if predicted is None or len(predicted) < l:
        raise ValueError(f"missing predicted input for verify layer {l}")
    flops = model.block_flops
    if h0 is None:
        if x is None:
            raise ValueError("verification needs the current state x or its embedding")
        h0 = model.input_embedding(x, t, sched)
        flops += model.embed_flops
    inp = residual_stream(h0, predicted, l)
    return model.branch(l, inp, t, sched), flops


@dataclass
class VerificationOutcome:
    accepted: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)


def sequential_validate(errors, thresholds, steps=None) -> VerificationOutcome:
    """Accept while e_k <= tau_k; the first violation and everything after it
    is rejected. ``steps`` labels the entries (defaults to k = 1..n)."""
    if len(errors) != len(thresholds):
        raise ValueError("errors and thresholds must have equal length")
    steps = list(range(1, len(errors) + 1)) if steps is None else list(steps)
    out = VerificationOutcome(errors=list(errors), thresholds=list(thresholds))
    for idx, (e, tau) in enumerate(zip(errors, thresholds)):
        if e <= tau:
            out.accepted.append(steps[idx])
        else:
            out.rejected = steps[idx:]
            break
    return out

"""Speculative sampling loop, reference baselines and FLOPs ledger."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import DiffusionSchedule, SamplerKind, ddim_step, sampler_step
from .draft import DraftKind, FeatureCache, draft_flops, predict_features, taylor_predict
from .models import AnalyticGmmModel, residual_stream
from .numerics import spawn_rngs
from .verifier import (VerifierConfig, error_flops, partial_verify_pass, relative_error,
                       threshold_at)

SCHEMA_VERSION = 1
BASELINES = ("full", "step_reduction", "fora", "forecast_only")
STEP_KINDS = ("full", "accepted_spec", "rejected_full")


@dataclass
class EngineConfig:
    draft: str = "taylor"
    order: int = 1
    anchor_gap: int = 2
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    sampler: SamplerKind = field(default_factory=SamplerKind)
    seed: int = 0
    warmup: str = "full"            # "full": cold-cache steps run the full model
    grid_refresh: bool = False      # full pass whenever the next chained anchor is due
    reanchor: str = "extend"        # "reset": restart the chain; "extend": keep older anchors
    diagnostic: bool = False
    diag_cap: int = 16
    baseline: str | None = None
    baseline_param: float | None = None

    def __post_init__(self):
        DraftKind(self.draft)
        if self.anchor_gap < 1:
            raise ValueError("anchor_gap must be >= 1")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.draft == "reuse":
            self.order = 0
        if self.draft == "adams_bashforth" and self.order < 1:
            raise ValueError("adams_bashforth needs order >= 1 (at least two anchors)")
        if self.warmup not in ("full", "draft"):
            raise ValueError(f"unknown warmup policy {self.warmup!r}")
        if self.reanchor not in ("reset", "extend"):
            raise ValueError(f"unknown reanchor policy {self.reanchor!r}")

    @property
    def max_draft_len(self) -> int:
        return self.verifier.max_draft_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = asdict(self.sampler)
        d["verifier"] = asdict(self.verifier)
        return d


@dataclass
class StepRecord:
    t: int
    kind: str
    flops: int
    k: int = 0
    e_k: float | None = None
    tau_t: float | None = None
    feature_norm: float | None = None
    layer_errors: list | None = None

    @property
    def accepted(self) -> bool | None:
        if self.e_k is None:
            return None
        return self.kind == "accepted_spec"

    def to_json(self) -> dict:
        return {"t": self.t, "kind": self.kind, "k": self.k, "e_k": self.e_k,
                "tau_t": self.tau_t, "accepted": self.accepted, "flops": self.flops}


@dataclass
class Trajectory:
    times: list
    states: list
    records: list

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    @property
    def feature_norms(self) -> list:
        return [r.feature_norm for r in self.records]


@dataclass
class CostLedger:
    T: int
    C: int
    full_steps: int = 0
    spec_steps: int = 0
    attempts: int = 0
    full_flops: int = 0
    pred_flops: int = 0
    verify_flops: int = 0
    overhead_flops: int = 0

    @property
    def total(self) -> int:
        return self.full_flops + self.pred_flops + self.verify_flops + self.overhead_flops

    @property
    def alpha(self) -> float:
        return self.spec_steps / self.T

    @property
    def gamma(self) -> float:
        """Cost of one verification relative to a full pass."""
        return self.verify_flops / (self.attempts * self.C) if self.attempts else 0.0

    @property
    def C_pred(self) -> float:
        return self.pred_flops / self.attempts if self.attempts else 0.0

    @property
    def C_verify(self) -> float:
        return self.verify_flops / self.attempts if self.attempts else 0.0

    @property
    def gamma_eff(self) -> float:
        """Prediction plus verification cost per accepted step, relative to C.

        Work spent on rejected attempts is spread over the accepted steps."""
        if not self.spec_steps:
            return 0.0
        return (self.pred_flops + self.verify_flops) / (self.spec_steps * self.C)

    @property
    def overhead_ratio(self) -> float:
        return self.overhead_flops / (self.spec_steps * self.C) if self.spec_steps else 0.0

    def reconcile(self, records) -> None:
        s = sum(r.flops for r in records)
        if s != self.total:
            raise AssertionError(f"ledger total {self.total} != summed step records {s}")
        if self.full_steps + self.spec_steps != self.T:
            raise AssertionError("full + speculative steps must cover every step")

    def merged(self, other: "CostLedger") -> "CostLedger":
        if other.C != self.C:
            raise ValueError("cannot merge ledgers with different per-step cost")
        return CostLedger(self.T + other.T, self.C,
                          *[getattr(self, f) + getattr(other, f) for f in
                            ("full_steps", "spec_steps", "attempts", "full_flops",
                             "pred_flops", "verify_flops", "overhead_flops")])

    def to_dict(self) -> dict:
        th, meas, lb = speedup(self)
        return {"T": self.T, "C": self.C, "full_steps": self.full_steps,
                "spec_steps": self.spec_steps, "attempts": self.attempts,
                "full_flops": self.full_flops, "pred_flops": self.pred_flops,
                "verify_flops": self.verify_flops, "overhead_flops": self.overhead_flops,
                "total_flops": self.total, "alpha": self.alpha, "gamma": self.gamma,
                "gamma_eff": self.gamma_eff, "S_theoretical": th, "S_measured": meas,
                "S_lower_bound": lb}


def speedup_formula(alpha: float, gamma: float) -> float:
    return 1.0 / (1.0 - alpha + alpha * gamma)


def speedup_lower_bound(alpha: float, gamma: float, overhead_ratio: float) -> float:
    return 1.0 / (1.0 - alpha * (1.0 - gamma - overhead_ratio))


def speedup(ledger: CostLedger) -> tuple[float, float, float]:
    """(theoretical, measured, lower bound) speedups for a ledger."""
    theo = speedup_formula(ledger.alpha, ledger.gamma_eff)
    meas = ledger.T * ledger.C / ledger.total
    lb = speedup_lower_bound(ledger.alpha, ledger.gamma_eff, ledger.overhead_ratio)
    return theo, meas, lb


# --------------------------------------------------------------------------
# speculative loop


def _as_model(model, gmm):
    if model is None:
        if gmm is None:
            raise ValueError("need a model or a mixture spec")
        return AnalyticGmmModel(gmm)
    return model


def _rel(a, b):
    return float(np.linalg.norm(a - b)) / (float(np.linalg.norm(b)) + 1e-12)


def run_speca(model, gmm, sched: DiffusionSchedule, cfg: EngineConfig,
              rng: np.random.Generator, x_T: np.ndarray | None = None):
    """Sample one trajectory with speculative feature caching.

    Every step either runs the full model or extrapolates all cached layer
    features, recomputes the verify block from the predicted input and accepts
    the draft if the relative error stays under the decaying threshold. A
    rejected step is recomputed in full and becomes the first anchor of a
    fresh cache.
    """
    model = _as_model(model, gmm)
    vcfg = cfg.verifier
    T = sched.T
    kind = DraftKind(cfg.draft)
    need = kind.min_anchors(cfg.order)
    K = vcfg.max_draft_len
    if K > 0 and T < (need - 1) * cfg.anchor_gap + 1:
        raise ValueError(f"infeasible configuration: T={T} too small for warm-up of "
                         f"{need} anchors spaced {cfg.anchor_gap}")
    vl = vcfg.layer_index(model.n_layers) if K > 0 else None
    fl = vl if vl is not None else model.n_layers - 1
    C = model.flops
    width = model.width
    extend = cfg.reanchor == "extend"
    cache = FeatureCache(cfg.anchor_gap, max(cfg.order, need - 1), uniform=not extend)
    ledger = CostLedger(T, C)
    x = rng.standard_normal(model.d) if x_T is None else np.array(x_T, dtype=np.float64)
    times, states, records = [T], [x], []
    run = 0
    n_diag = 0

    def full_pass(t, reason):
        out = model.forward(x, t, sched)
        if cache.times and t == cache.newest - cfg.anchor_gap and reason != "rejected":
            cache.push(t, out.layer_features)
        elif reason == "cold" and cache.times:
            pass                                   # between warm-up anchors
        elif extend and cache.times:
            cache.push(t, out.layer_features)
        else:
            cache.push(t, out.layer_features, reset=True)
        return out

    for t in range(T, 0, -1):
        speculate = False
        reason = "cold"
        if K > 0 and cache.times:
            due = t == cache.newest - cfg.anchor_gap
            if run >= K or (cfg.grid_refresh and due):
                reason = "forced"
            elif len(cache) >= need:
                speculate = True
            elif cfg.warmup == "draft" and not due:
                speculate = len(cache) >= (2 if kind.tag == "adams_bashforth" else 1)
        if speculate:
            k = cache.newest - t
            order = min(cfg.order, len(cache) - 1)
            feats = predict_features(cache, kind, k, order)
            n_terms = order + 1 if kind.tag == "taylor" else len(cache)
            c_pred = draft_flops(model, kind, n_terms)
            h0 = model.input_embedding(x, t, sched)
            actual, c_ver = partial_verify_pass(model, feats, vcfg, t, sched, h0=h0)
            c_over = error_flops(width)
            e = relative_error(feats[vl], actual, vcfg)
            tau = threshold_at(vcfg, t, T)
            ledger.attempts += 1
            ledger.pred_flops += c_pred
            ledger.verify_flops += c_ver
            ledger.overhead_flops += c_over
            spec_cost = c_pred + c_ver + c_over
            if e <= tau:
                if vcfg.substitute_recomputed:
                    feats = feats.copy()
                    feats[vl] = actual
                    for l in range(vl + 1, model.n_layers):
                        feats[l] = model.branch(l, residual_stream(h0, feats, l), t, sched)
                eps = model.head(residual_stream(h0, feats))
                ledger.spec_steps += 1
                run += 1
                rec = StepRecord(t, "accepted_spec", spec_cost, k, e, tau,
                                 feature_norm=float(np.linalg.norm(feats[vl])))
                if cfg.diagnostic and n_diag < cfg.diag_cap:
                    true = model.forward(x, t, sched).layer_features
                    rec.layer_errors = [_rel(feats[l], true[l]) for l in range(model.n_layers)]
                    n_diag += 1
            else:
                out = full_pass(t, "rejected")
                eps = out.eps_hat
                ledger.full_steps += 1
                ledger.full_flops += C
                run = 0
                rec = StepRecord(t, "rejected_full", spec_cost + C, k, e, tau,
                                 feature_norm=float(np.linalg.norm(out.layer_features[fl])))
        else:
            out = full_pass(t, reason)
            eps = out.eps_hat
            ledger.full_steps += 1
            ledger.full_flops += C
            run = 0
            rec = StepRecord(t, "full", C,
                             feature_norm=float(np.linalg.norm(out.layer_features[fl])))
        records.append(rec)
        x = sampler_step(cfg.sampler, x, eps, t, t - 1, sched, rng)
        times.append(t - 1)
        states.append(x)
    ledger.reconcile(records)
    return Trajectory(times, states, records), ledger


# --------------------------------------------------------------------------
# baselines


def _baseline_full_like(model, sched, sampler, rng, x_T, is_full, predictor):
    """Shared skeleton: ``is_full(t)`` decides the step type and
    ``predictor(t)`` supplies (eps, flops) for non-full steps."""
    T = sched.T
    C = model.flops
    ledger = CostLedger(T, C)
    x = rng.standard_normal(model.d) if x_T is None else np.array(x_T, dtype=np.float64)
    times, states, records = [T], [x], []
    for t in range(T, 0, -1):
        if is_full(t):
            out = model.forward(x, t, sched)
            predictor.anchor(t, out)
            eps = out.eps_hat
            ledger.full_steps += 1
            ledger.full_flops += C
            records.append(StepRecord(t, "full", C))
        else:
            eps, cost, k = predictor.predict(x, t, sched)
            ledger.spec_steps += 1
            ledger.attempts += 1
            ledger.pred_flops += cost
            records.append(StepRecord(t, "accepted_spec", cost, k))
        x = sampler_step(sampler, x, eps, t, t - 1, sched, rng)
        times.append(t - 1)
        states.append(x)
    ledger.reconcile(records)
    return Trajectory(times, states, records), ledger


class _NoPredict:
    def anchor(self, t, out):
        pass

    def predict(self, x, t, sched):
        raise AssertionError("full baseline never predicts")


class _Reuse:
    """Fixed-interval reuse: every block's branch output from the last full
    pass is re-added to a fresh input embedding of the current state."""

    def __init__(self, model):
        self.model = model

    def anchor(self, t, out):
        self.t = t
        self.branches = out.layer_features.copy()

    def predict(self, x, t, sched):
        m = self.model
        h = m.input_embedding(x, t, sched)
        for f in self.branches:
            h = h + f
        return m.head(h), m.embed_flops + m.head_flops, self.t - t


class _Forecast:
    """Taylor extrapolation from grid anchors with no verification; before
    enough anchors exist the highest available order is used."""

    def __init__(self, model, order, N):
        self.model = model
        self.cache = FeatureCache(N, order)

    def anchor(self, t, out):
        self.cache.push(t, out.layer_features)

    def predict(self, x, t, sched):
        k = self.cache.newest - t
        order = min(self.cache.order, len(self.cache) - 1)
        feats = taylor_predict(self.cache, None, k, order=order)
        cost = draft_flops(self.model, DraftKind("taylor"), order + 1)
        h0 = self.model.input_embedding(x, t, sched)
        return self.model.head(residual_stream(h0, feats)), cost, k


def _step_reduction(model, sched, fraction, sampler, rng, x_T):
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"step_reduction fraction must lie in (0, 1], got {fraction}")
    T = sched.T
    n = max(1, int(round(T * fraction)))
    grid = np.unique(np.round(np.linspace(T, 0, n + 1)).astype(int))[::-1]
    C = model.flops
    ledger = CostLedger(n, C)
    x = rng.standard_normal(model.d) if x_T is None else np.array(x_T, dtype=np.float64)
    times, states, records = [int(grid[0])], [x], []
    for t, tp in zip(grid[:-1], grid[1:]):
        eps = model.forward(x, int(t), sched).eps_hat
        ledger.full_steps += 1
        ledger.full_flops += C
        records.append(StepRecord(int(t), "full", C))
        if sampler.tag == "ddpm":
            x = ddim_step(x, eps, int(t), int(tp), sched)
        else:
            x = sampler_step(sampler, x, eps, int(t), int(tp), sched, rng)
        times.append(int(tp))
        states.append(x)
    ledger.reconcile(records)
    ledger.T = T
    ledger.spec_steps = T - ledger.full_steps
    return Trajectory(times, states, records), ledger


def run_baseline(kind: str, model, sched: DiffusionSchedule, seed_or_rng, param=None,
                 order: int = 1, gmm=None, sampler: SamplerKind | None = None,
                 x_T: np.ndarray | None = None):
    """Reference samplers: ``full``, ``step_reduction`` (param = kept fraction),
    ``fora`` (param = interval N) and ``forecast_only`` (param = N, with ``order``)."""
    from .numerics import make_rng
    model = _as_model(model, gmm)
    sampler = sampler or SamplerKind()
    rng = make_rng(seed_or_rng) if isinstance(seed_or_rng, (int, np.integer)) else seed_or_rng
    T = sched.T
    if kind == "full":
        return _baseline_full_like(model, sched, sampler, rng, x_T, lambda t: True, _NoPredict())
    if kind == "step_reduction":
        return _step_reduction(model, sched, float(param), sampler, rng, x_T)
    if kind in ("fora", "forecast_only"):
        N = int(param) if param is not None else 0
        if N < 1 or N != param:
            raise ValueError(f"{kind} needs an integer interval N >= 1, got {param}")
        is_full = lambda t: (T - t) % N == 0
        pred = _Reuse(model) if kind == "fora" else _Forecast(model, order, N)
        return _baseline_full_like(model, sched, sampler, rng, x_T, is_full, pred)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


# --------------------------------------------------------------------------
# batches


@dataclass
class BatchResult:
    samples: np.ndarray
    trajectories: list
    ledgers: list

    @property
    def ledger(self) -> CostLedger:
        total = self.ledgers[0]
        for led in self.ledgers[1:]:
            total = total.merged(led)
        return total

    @property
    def full_steps(self) -> np.ndarray:
        return np.array([led.full_steps for led in self.ledgers])

    def allocation_histogram(self) -> dict:
        vals, counts = np.unique(self.full_steps, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def _run_one(args):
    model, gmm, sched, cfg, rng = args
    if cfg.baseline:
        return run_baseline(cfg.baseline, model, sched, rng, cfg.baseline_param,
                            order=cfg.order, gmm=gmm, sampler=cfg.sampler)
    return run_speca(model, gmm, sched, cfg, rng)


def run_batch(model, sched: DiffusionSchedule, cfg: EngineConfig, n_samples: int,
              seed: int | None = None, gmm=None, n_jobs: int = 1) -> BatchResult:
    """Independent runs with one spawned generator per sample, so the result
    does not depend on ``n_jobs``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seed = cfg.seed if seed is None else seed
    jobs = [(model, gmm, sched, cfg, r) for r in spawn_rngs(seed, n_samples)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_run_one, jobs, chunksize=max(1, n_samples // (4 * n_jobs))))
    else:
        results = [_run_one(j) for j in jobs]
    trajs = [r[0] for r in results]
    return BatchResult(np.stack([tr.x0 for tr in trajs]), trajs, [r[1] for r in results])


# --------------------------------------------------------------------------
# serialization


def step_log_lines(traj: Trajectory, sample: int | None = None) -> list[str]:
    out = []
    for r in traj.records:
        d = r.to_json()
        if sample is not None:
            d = {"sample": sample, **d}
        out.append(json.dumps(d, sort_keys=True))
    return out


def run_document(cfg: EngineConfig, ledger: CostLedger, extra: dict | None = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), **ledger.to_dict()}
    if extra:
        doc.update(extra)
    return doc

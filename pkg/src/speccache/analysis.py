"""Sample-quality metrics, paired diagnostics, theorem-consequence checks and
ablation sweeps, with CSV/SVG emission."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .draft import FeatureCache, taylor_predict
from .engine import EngineConfig, Trajectory, run_baseline, run_batch, run_speca, speedup
from .models import GmmSpec, gmm_sample
from .numerics import make_rng, pca_2d, pearson_r, spawn_rngs
from .verifier import threshold_at

MIN_CORR_SAMPLES = 30
AXES = ("tau0", "decay", "verify_layer", "norm_kind", "draft")
DEFAULT_AXIS_VALUES = {
    "tau0": [0.1, 0.3, 0.5, 0.8, 1.0, 1.2],
    "decay": [0.01, 0.03, 0.05, 0.08, 0.1, 0.12, 0.5],
    "verify_layer": [0, "middle", -1],
    "norm_kind": ["l1", "l2", "linf", "cosine"],
    "draft": ["reuse", "adams_bashforth", "taylor"],
}


# --------------------------------------------------------------------------
# metrics


def _mean_pairwise(a, b) -> float:
    # fsum is order independent, which makes the metric exactly symmetric
    return math.fsum(cdist(a, b).ravel()) / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """Brute-force V-statistic 2 E|A-B| - E|A-A'| - E|B-B'|."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy distance needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    ab = _mean_pairwise(a, b)
    aa = _mean_pairwise(a, a)
    bb = _mean_pairwise(b, b)
    # fsum is correctly rounded, so swapping a and b gives the same bits
    return max(0.0, math.fsum((2.0 * ab, -aa, -bb)))


def reference_samples(gmm: GmmSpec, n: int = 4096, seed: int = 12345) -> np.ndarray:
    """Fixed draw from the true mixture used as the quality reference."""
    return gmm_sample(gmm, n, make_rng(seed))


def trajectory_deviation(a: Trajectory, b: Trajectory) -> np.ndarray:
    if list(a.times) != list(b.times):
        raise ValueError("grid mismatch: trajectories use different timesteps")
    return np.array([float(np.linalg.norm(np.asarray(x) - np.asarray(y)))
                     for x, y in zip(a.states, b.states)])


# --------------------------------------------------------------------------
# layer-error correlation


@dataclass
class CorrelationTable:
    r: list                  # per layer; None where the variance is degenerate
    n_samples: int

    def rows(self):
        return [{"layer": l, "r": ("" if v is None else v), "n_samples": self.n_samples}
                for l, v in enumerate(self.r)]


def correlation_table(layer_errors, output_errors) -> CorrelationTable:
    """Per-layer Pearson r between (n, L) layer errors and (n,) output errors."""
    E = np.asarray(layer_errors, dtype=np.float64)
    y = np.asarray(output_errors, dtype=np.float64)
    if E.ndim != 2 or len(E) != len(y):
        raise ValueError("expected (n, L) layer errors and n output errors")
    if len(y) < MIN_CORR_SAMPLES:
        raise ValueError(f"insufficient samples: {len(y)} < {MIN_CORR_SAMPLES}")
    rs = []
    for l in range(E.shape[1]):
        try:
            rs.append(pearson_r(E[:, l], y))
        except ValueError:
            rs.append(None)
    return CorrelationTable(rs, len(y))


def paired_layer_errors(model, sched, cfg: EngineConfig, n_samples: int, seed: int):
    """Per-sample mean probe errors per layer and terminal deviation from the
    full sampler started at the same noise. Samples without probes are dropped."""
    dcfg = replace(cfg, diagnostic=True, baseline=None)
    errs, outs = [], []
    for rng in spawn_rngs(seed, n_samples):
        x_T = rng.standard_normal(model.d)
        spec, _ = run_speca(model, None, sched, dcfg, rng, x_T=x_T)
        full, _ = run_baseline("full", model, sched, rng, x_T=x_T, sampler=cfg.sampler)
        probes = [r.layer_errors for r in spec.records if r.layer_errors is not None]
        if not probes:
            continue
        errs.append(np.mean(probes, axis=0))
        outs.append(float(np.linalg.norm(spec.x0 - full.x0)))
    return np.array(errs), np.array(outs)


def layer_error_correlation(model, sched, cfg: EngineConfig, n_samples: int,
                            seed: int = 0) -> CorrelationTable:
    if n_samples < MIN_CORR_SAMPLES:
        raise ValueError(f"insufficient samples: {n_samples} < {MIN_CORR_SAMPLES}")
    errs, outs = paired_layer_errors(model, sched, cfg, n_samples, seed)
    return correlation_table(errs, outs)


# --------------------------------------------------------------------------
# theorem consequences


@dataclass
class GrowthCheck:
    kind: str
    m: int
    N: int
    k_max: int
    exact: bool
    max_rel_error: float
    slope: float | None
    passed: bool


def _synthetic_feature(kind: str, degree: int, rate: float):
    if kind == "polynomial":
        coefs = np.arange(1, degree + 2, dtype=np.float64)      # 1 + 2t + 3t^2 + ...
        return lambda t: float(np.polyval(coefs[::-1], t))
    if kind == "exponential":
        return lambda t: math.exp(rate * t)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def theorem1_growth_check(kind: str, m: int, N: int = 1, k_max: int = 8,
                          degree: int = 2, rate: float = 1.0 / 50, t0: float = 0.0,
                          exact_tol: float = 1e-9) -> GrowthCheck:
    """Prediction error of an order-m Taylor draft versus lookahead k.

    The scalar trajectory is sampled at anchors t0 + jN and predicted at
    t0 - k for k = 1..k_max. For polynomials of degree <= m the draft must be
    exact; otherwise the slope of log error against log k is fitted and must
    lie in [m + 0.5, m + 1.5]. The exponential is exp(rate * t), with rate 1/T
    by default. Finite-difference extrapolation is exact on polynomials, so
    its error goes like prod_j (k + jN) rather than k^(m+1). Short windows
    with k ~ N therefore fit a lower slope. A long window (k >> N, rate * k << 1)
    recovers the k^(m+1) law.
    """
    if k_max < 4:
        raise ValueError("k_max must be >= 4")
    f = _synthetic_feature(kind, degree, rate)
    cache = FeatureCache(N, m)
    for j in range(m, -1, -1):
        cache.push(t0 + j * N, np.array([f(t0 + j * N)]))
    ks = np.arange(1, k_max + 1)
    rel = np.empty(len(ks))
    for i, k in enumerate(ks):
        truth = f(t0 - k)
        pred = float(taylor_predict(cache, None, int(k))[0])
        rel[i] = abs(pred - truth) / max(abs(truth), 1e-300)
    exact = kind == "polynomial" and degree <= m
    if exact:
        return GrowthCheck(kind, m, N, k_max, True, float(rel.max()), None,
                           bool(rel.max() < exact_tol))
    slope = float(np.polyfit(np.log(ks), np.log(rel), 1)[0])
    return GrowthCheck(kind, m, N, k_max, False, float(rel.max()), slope,
                       bool(m + 0.5 <= slope <= m + 1.5))


def theorem2_bound(sched, t: int, feature_norm: float) -> float:
    return math.sqrt(sched.betas[t] * (1.0 - sched.alpha_bars[t]) / (1.0 + feature_norm**2))


def theorem2_margin(sched, cfg, feature_norms, times=None) -> np.ndarray:
    """Bound minus threshold per step; ``cfg`` is a VerifierConfig. ``times``
    defaults to T, T-1, ..., 1 matching one record per sampler step."""
    times = list(range(sched.T, 0, -1)) if times is None else list(times)
    if len(times) != len(feature_norms):
        raise ValueError("need one feature norm per timestep")
    return np.array([theorem2_bound(sched, t, fn) - threshold_at(cfg, t, sched.T)
                     for t, fn in zip(times, feature_norms)])


def margin_summary(margins) -> dict:
    m = np.asarray(margins, dtype=np.float64)
    return {"min": float(m.min()), "median": float(np.median(m)),
            "fraction_negative": float(np.mean(m < 0))}


# --------------------------------------------------------------------------
# ablations


@dataclass
class AblationCell:
    value: object
    flops: float             # seeds-averaged total flops per sample
    cost_fraction: float     # flops relative to the full sampler
    speedup: float           # seeds-averaged measured S
    energy_distance: float   # seeds-averaged, against the true mixture
    per_seed_ed: list
    config: dict
    seeds: list
    deviation: float = float("nan")   # mean terminal l2 to the full sampler, same noise
    per_seed_dev: list = field(default_factory=list)


@dataclass
class AblationGrid:
    axis: str
    cells: list = field(default_factory=list)

    @property
    def values(self):
        return [c.value for c in self.cells]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.cells], dtype=np.float64)

    def rows(self):
        return [{"axis": self.axis, "value": c.value, "flops": c.flops,
                 "cost_fraction": c.cost_fraction, "S_measured": c.speedup,
                 "energy_distance": c.energy_distance, "deviation": c.deviation,
                 "seeds": " ".join(str(s) for s in c.seeds)} for c in self.cells]


def apply_axis(cfg: EngineConfig, axis: str, value, n_layers: int) -> EngineConfig:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; valid axes: {', '.join(AXES)}")
    if axis == "draft":
        return replace(cfg, draft=value)
    if axis == "verify_layer" and isinstance(value, str):
        named = {"first": 0, "middle": n_layers // 2, "last": n_layers - 1}
        if value not in named:
            raise ValueError(f"verify_layer must be an index or one of {', '.join(named)}")
        value = named[value]
    return replace(cfg, verifier=replace(cfg.verifier, **{axis: value}))


@dataclass
class ConfigStats:
    flops: float
    cost_fraction: float
    speedup: float
    energy_distance: float
    per_seed_ed: list
    deviation: float
    per_seed_dev: list
    results: list


def full_reference(model, sched, cfg: EngineConfig, seeds, n_samples: int, n_jobs: int = 1):
    """Terminal samples of the full sampler per seed; same noise as any run_batch
    call with that seed."""
    fcfg = replace(cfg, baseline="full", baseline_param=None)
    return {s: run_batch(model, sched, fcfg, n_samples, seed=s, n_jobs=n_jobs).samples
            for s in seeds}


def evaluate_config(model, sched, cfg: EngineConfig, seeds, n_samples: int, ref,
                    n_jobs: int = 1, full=None) -> ConfigStats:
    """Seeds-averaged cost and quality of one configuration. When `full` maps
    seed to full-sampler samples, deviation is the mean terminal l2 gap."""
    flops, ss, eds, devs, results = [], [], [], [], []
    for s in seeds:
        br = run_batch(model, sched, cfg, n_samples, seed=s, n_jobs=n_jobs)
        led = br.ledger
        flops.append(led.total / n_samples)
        ss.append(speedup(led)[1])
        eds.append(energy_distance(br.samples, ref))
        if full is not None:
            devs.append(float(np.linalg.norm(br.samples - full[s], axis=1).mean()))
        results.append(br)
    mean_flops = float(np.mean(flops))
    return ConfigStats(mean_flops, mean_flops / (sched.T * model.flops), float(np.mean(ss)),
                       float(np.mean(eds)), eds,
                       float(np.mean(devs)) if devs else float("nan"), devs, results)


def ablation_sweep(axis: str, base: EngineConfig, model, sched, gmm: GmmSpec,
                   values=None, seeds=(0, 1, 2, 3), n_samples: int = 128,
                   ref=None, n_jobs: int = 1, log=None) -> AblationGrid:
    values = DEFAULT_AXIS_VALUES.get(axis) if values is None else list(values)
    if values is None or axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; valid axes: {', '.join(AXES)}")
    ref = reference_samples(gmm) if ref is None else ref
    full = full_reference(model, sched, base, seeds, n_samples, n_jobs)
    grid = AblationGrid(axis)
    for v in values:
        cfg = apply_axis(base, axis, v, model.n_layers)
        st = evaluate_config(model, sched, cfg, seeds, n_samples, ref, n_jobs, full)
        if log is not None:
            for s in seeds:
                log(f"{axis}={v} seed={s}")
        grid.cells.append(AblationCell(v, st.flops, st.cost_fraction, st.speedup,
                                       st.energy_distance, st.per_seed_ed, cfg.to_dict(),
                                       list(seeds), st.deviation, st.per_seed_dev))
    return grid


# --------------------------------------------------------------------------
# emission


def write_csv(path, rows, columns=None) -> None:
    rows = list(rows)
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def pca_trajectories(trajectories: dict) -> list[dict]:
    """Project every state of every labelled trajectory onto the top two
    principal components of the pooled states."""
    labels, pts = [], []
    for name, trajs in trajectories.items():
        for i, tr in enumerate(trajs):
            for t, x in zip(tr.times, tr.states):
                labels.append((name, i, t))
                pts.append(np.ravel(x))
    proj = pca_2d(np.array(pts))
    return [{"method": n, "sample": i, "t": t, "pc1": float(p[0]), "pc2": float(p[1])}
            for (n, i, t), p in zip(labels, proj)]


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lines(series: dict, title: str = "", width: int = 480, height: int = 360) -> str:
    """Minimal SVG line chart; ``series`` maps a label to (xs, ys)."""
    xs = np.concatenate([np.asarray(v[0], dtype=float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], dtype=float) for v in series.values()])
    pad = 40
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    sx = (width - 2 * pad) / ((x1 - x0) or 1.0)
    sy = (height - 2 * pad) / ((y1 - y0) or 1.0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    for i, (name, (xv, yv)) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{pad + (x - x0) * sx:.2f},{height - pad - (y - y0) * sy:.2f}"
                       for x, y in zip(xv, yv))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - 140}" y="{40 + 16 * i}" font-size="12" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_bars(labels, values, title: str = "", width: int = 480, height: int = 360) -> str:
    """Minimal SVG bar chart, one bar per label."""
    values = [float(v) for v in values]
    pad = 40
    top = max(max(values), 1e-300) if values else 1.0
    bw = (width - 2 * pad) / max(len(values), 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = (height - 2 * pad) * max(v, 0.0) / top
        x = pad + i * bw
        out.append(f'<rect x="{x + 1:.2f}" y="{height - pad - h:.2f}" width="{bw - 2:.2f}" '
                   f'height="{h:.2f}" fill="{_COLORS[0]}"/>')
        out.append(f'<text x="{x + bw / 2:.2f}" y="{height - pad + 14}" font-size="10" '
                   f'text-anchor="middle">{lab}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

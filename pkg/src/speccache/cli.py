"""Command-line entry point: ``speccache {train,run,sweep,analyze}``.

Exit codes: 0 success, 1 configuration or missing input, 2 training
divergence, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as A
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config
from .engine import (BASELINES, SCHEMA_VERSION, Trajectory, run_batch, run_document,
                     speedup, step_log_lines)
from .models import AnalyticGmmModel, init_denoiser, load_weights, save_weights
from .numerics import make_rng
from .trainer import TrainingDivergence, train

log = logging.getLogger("speccache")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_RUNTIME = 0, 1, 2, 3
SUMMARY_COLUMNS = ("tag", "alpha", "gamma", "S_theoretical", "S_measured",
                   "total_flops", "energy_distance")
DEFAULT_BASELINE_PARAM = {"full": None, "step_reduction": 0.5, "fora": 3, "forecast_only": 3}


class UsageError(Exception):
    """Bad input detected by the CLI itself (exit 1)."""


# --------------------------------------------------------------------------
# helpers


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.base_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_model(cfg: RunConfig):
    """(model, gmm, schedule) for a config; layered models need trained weights."""
    gmm = cfg.gmm.build()
    sched = cfg.schedule.build()
    if cfg.model.kind == "analytic":
        return AnalyticGmmModel(gmm), gmm, sched
    path = cfg.weights_path()
    if not path.exists():
        raise UsageError(f"weights file {path} not found; run `speccache train` first")
    model = load_weights(path)
    if (model.L, model.H, model.d) != (cfg.model.n_layers, cfg.model.width, gmm.dim):
        raise UsageError(f"weights in {path} do not match the [model] section")
    return model, gmm, sched


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _upsert_summary(path: Path, row: dict) -> None:
    """One row per tag; rerunning a tag replaces its row in place."""
    rows = A.read_csv(path) if path.exists() else []
    row = {k: (repr(v) if isinstance(v, float) else str(v)) for k, v in row.items()}
    for i, r in enumerate(rows):
        if r["tag"] == row["tag"]:
            rows[i] = row
            break
    else:
        rows.append(row)
    A.write_csv(path, rows, list(SUMMARY_COLUMNS))


def _runtime_message(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    where = Path(frames[-1].filename).stem if frames else "cli"
    return f"runtime error in speccache.{where}: {exc}"


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load(args)
    if cfg.model.kind != "layered":
        raise UsageError("only the layered model is trainable")
    gmm = cfg.gmm.build()
    sched = cfg.schedule.build()
    m = cfg.model
    model = init_denoiser(m.n_layers, m.width, gmm.dim, m.time_embed_dim, rng=make_rng(cfg.seed))
    tcfg = cfg.trainer.build(cfg.seed)
    log.info("training %d steps, batch %d", tcfg.steps, tcfg.batch)
    model, curve = train(model, gmm, sched, tcfg, log_every=500)
    path = cfg.weights_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, path)
    out = _out_dir(args, cfg)
    curve.to_csv(out / "loss.csv")
    log.info("wrote %s and %s", path, out / "loss.csv")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    model, gmm, sched = build_model(cfg)
    ecfg = cfg.engine_config()
    tag = args.baseline or cfg.engine.baseline or "speca"
    if tag != "speca":
        if tag not in BASELINES:
            raise UsageError(f"unknown baseline {tag!r}; expected one of {', '.join(BASELINES)}")
        param = cfg.engine.baseline_param
        if param is None or tag != cfg.engine.baseline:
            param = DEFAULT_BASELINE_PARAM[tag]
        ecfg = replace(ecfg, baseline=tag, baseline_param=param)
    n = cfg.engine.n_samples
    out = _out_dir(args, cfg)
    br = run_batch(model, sched, ecfg, n, seed=cfg.seed, n_jobs=cfg.engine.n_jobs)
    led = br.ledger
    ref = A.reference_samples(gmm, cfg.analysis.reference_samples, cfg.analysis.reference_seed)
    ed = A.energy_distance(br.samples, ref)
    hist = br.allocation_histogram()
    th, meas, lb = speedup(led)
    first = br.trajectories[0]
    extra = {"tag": tag, "seed": cfg.seed, "n_samples": n, "energy_distance": ed,
             "run_config": config_to_dict(cfg),
             "allocation_histogram": {str(k): v for k, v in hist.items()},
             "full_steps_variance": float(br.full_steps.var()),
             "feature_norms": first.feature_norms if tag == "speca" else None,
             "step_log": f"steps_{tag}.jsonl"}
    _dump_json(out / f"run_{tag}.json", run_document(ecfg, led, extra))
    with open(out / f"steps_{tag}.jsonl", "w") as fh:
        for i, tr in enumerate(br.trajectories):
            for line in step_log_lines(tr, sample=i):
                fh.write(line + "\n")
    _upsert_summary(out / "summary.csv", {
        "tag": tag, "alpha": led.alpha, "gamma": led.gamma, "S_theoretical": th,
        "S_measured": meas, "total_flops": led.total, "energy_distance": ed})
    A.write_csv(out / f"allocation_{tag}.csv",
                [{"full_steps": k, "count": v} for k, v in hist.items()])
    n_traj = min(cfg.analysis.trajectory_samples, n)
    A.write_csv(out / f"trajectories_{tag}.csv",
                [{"sample": i, "t": t, **{f"x{j}": float(v) for j, v in enumerate(x)}}
                 for i, tr in enumerate(br.trajectories[:n_traj])
                 for t, x in zip(tr.times, tr.states)])
    if tag == "speca" and cfg.engine.diagnostic and cfg.model.kind == "layered":
        errs, outs = A.paired_layer_errors(model, sched, ecfg, cfg.analysis.correlation_samples,
                                           cfg.seed)
        A.write_csv(out / "paired.csv",
                    [{"sample": i, **{f"layer{l}": float(v) for l, v in enumerate(e)},
                      "output_error": float(o)} for i, (e, o) in enumerate(zip(errs, outs))])
    if not args.no_plots:
        ks = sorted(hist)
        (out / f"allocation_{tag}.svg").write_text(A.svg_bars(
            [str(k) for k in ks], [hist[k] for k in ks], title=f"{tag}: full steps per sample"))
    log.info("%s: alpha=%.3f S=%.3f ED=%.5f", tag, led.alpha, meas, ed)
    return EXIT_OK


def parse_axis(spec: str):
    """``name`` or ``name=v1,v2,...``; numeric values are parsed as numbers."""
    name, _, rest = spec.partition("=")
    if name not in A.AXES:
        raise UsageError(f"unknown axis {name!r}; valid axes: {', '.join(A.AXES)}")
    if not rest:
        return name, None
    vals = []
    for tok in rest.split(","):
        tok = tok.strip()
        try:
            vals.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
        except ValueError:
            vals.append(tok)
    return name, vals


def cmd_sweep(args) -> int:
    axis, values = parse_axis(args.axis)
    cfg = _load(args)
    model, gmm, sched = build_model(cfg)
    out = _out_dir(args, cfg)
    seeds = [cfg.seed + i for i in range(cfg.analysis.n_seeds)]
    ref = A.reference_samples(gmm, cfg.analysis.reference_samples, cfg.analysis.reference_seed)
    lines = []
    grid = A.ablation_sweep(axis, cfg.engine_config(), model, sched, gmm, values=values,
                            seeds=seeds, n_samples=cfg.analysis.sweep_samples, ref=ref,
                            n_jobs=cfg.engine.n_jobs, log=lines.append)
    (out / f"sweep_{axis}.log").write_text("".join(l + "\n" for l in lines))
    A.write_csv(out / f"sweep_{axis}.csv", grid.rows())
    if not args.no_plots:
        (out / f"sweep_{axis}.svg").write_text(A.svg_bars(
            [str(v) for v in grid.values], list(grid.column("energy_distance")),
            title=f"energy distance by {axis}"))
    log.info("%s: %d cells, %d runs", axis, len(grid.cells), len(lines))
    return EXIT_OK


def cmd_analyze(args) -> int:
    src = Path(args.dir)
    runs = sorted(src.glob("run_*.json")) if src.is_dir() else []
    if not runs:
        raise UsageError(f"no run artifacts (run_*.json) in {src}")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    docs = {p.stem[4:]: json.loads(p.read_text()) for p in runs}

    paired = src / "paired.csv"
    if paired.exists():
        rows = A.read_csv(paired)
        layers = sorted((k for k in rows[0] if k.startswith("layer")), key=lambda k: int(k[5:]))
        errs = [[float(r[k]) for k in layers] for r in rows]
        outs = [float(r["output_error"]) for r in rows]
        A.write_csv(out / "correlation.csv", A.correlation_table(errs, outs).rows())

    trajs = {}
    for p in sorted(src.glob("trajectories_*.csv")):
        by_sample = {}
        for r in A.read_csv(p):
            xs = [float(r[k]) for k in r if k.startswith("x")]
            by_sample.setdefault(int(r["sample"]), ([], []))
            by_sample[int(r["sample"])][0].append(int(r["t"]))
            by_sample[int(r["sample"])][1].append(np.array(xs))
        trajs[p.stem[len("trajectories_"):]] = [Trajectory(*v, []) for _, v in sorted(by_sample.items())]
    if trajs:
        rows = A.pca_trajectories(trajs)
        A.write_csv(out / "pca.csv", rows)
        if not args.no_plots:
            series = {}
            for r in rows:
                if r["sample"] == 0:
                    s = series.setdefault(r["method"], ([], []))
                    s[0].append(r["pc1"])
                    s[1].append(r["pc2"])
            (out / "pca.svg").write_text(A.svg_lines(series, title="trajectories, first sample"))

    report = {"schema_version": SCHEMA_VERSION, "theorem1": [], "speedup": {}}
    for m in (1, 2, 3):
        for label, kw in (("short", {}), ("long", {"k_max": 128, "rate": 1e-3})):
            g = A.theorem1_growth_check("exponential", m, **kw)
            report["theorem1"].append({"window": label, **g.__dict__})
    for tag, d in docs.items():
        report["speedup"][tag] = {k: d[k] for k in ("alpha", "gamma_eff", "S_theoretical",
                                                    "S_measured", "S_lower_bound")}
        report["speedup"][tag]["lower_bound_holds"] = d["S_measured"] >= d["S_lower_bound"] - 1e-9
    spec = docs.get("speca")
    if spec and spec.get("feature_norms"):
        rc = spec["run_config"]
        cfg = config_from_dict(rc)
        margins = A.theorem2_margin(cfg.schedule.build(), cfg.engine_config().verifier,
                                    spec["feature_norms"])
        report["theorem2"] = {"margins": [float(v) for v in margins], **A.margin_summary(margins)}
    _dump_json(out / "theorem.json", report)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: next to the config)")
    common.add_argument("--no-plots", action="store_true", help="skip SVG output")
    common.add_argument("-v", "--verbose", action="store_true")

    with_cfg = argparse.ArgumentParser(add_help=False, parents=[common])
    with_cfg.add_argument("--config", required=True, help="YAML run configuration")
    with_cfg.add_argument("--seed", type=int, help="override the config seed")

    p = argparse.ArgumentParser(prog="speccache",
                                description="Speculative feature caching for diffusion sampling.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[with_cfg], help="train the layered denoiser")
    r = sub.add_parser("run", parents=[with_cfg], help="sample with SpeCa or a baseline")
    r.add_argument("--baseline", help=f"one of {', '.join(BASELINES)}")
    s = sub.add_parser("sweep", parents=[with_cfg], help="ablation sweep over one axis")
    s.add_argument("--axis", required=True,
                   help=f"NAME or NAME=v1,v2,...; NAME in {', '.join(A.AXES)}")
    a = sub.add_parser("analyze", parents=[common], help="diagnostics from a run directory")
    a.add_argument("dir", help="directory written by `speccache run`")
    return p


COMMANDS = {"train": cmd_train, "run": cmd_run, "sweep": cmd_sweep, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(_runtime_message(exc), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

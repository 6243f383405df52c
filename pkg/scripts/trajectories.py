"""PCA projection of sampling trajectories for SpeCa and the baselines, plus the
per-step deviation of each method from the full sampler."""
from _common import parser, setup

from speccache import analysis as A
from speccache.engine import run_baseline, run_speca
from speccache.numerics import make_rng


def main():
    p = parser(__doc__)
    p.add_argument("--samples", type=int, default=8)
    args = p.parse_args()
    cfg, model, gmm, sched, out = setup(args)
    ecfg = cfg.engine_config()
    trajs = {k: [] for k in ("full", "speca", "fora", "forecast_only")}
    dev_rows = []
    for s in range(args.samples):
        x = make_rng(1000 + s).standard_normal(gmm.dim)
        full, _ = run_baseline("full", model, sched, 0, x_T=x)
        runs = {"full": full,
                "speca": run_speca(model, None, sched, ecfg, make_rng(s), x_T=x)[0],
                "fora": run_baseline("fora", model, sched, 0, 5, x_T=x)[0],
                "forecast_only": run_baseline("forecast_only", model, sched, 0, 5, x_T=x)[0]}
        for k, tr in runs.items():
            trajs[k].append(tr)
            for t, d in zip(tr.times, A.trajectory_deviation(tr, full)):
                dev_rows.append({"method": k, "sample": s, "t": t, "deviation": float(d)})
    rows = A.pca_trajectories(trajs)
    A.write_csv(out / "trajectory_pca.csv", rows)
    A.write_csv(out / "trajectory_deviation.csv", dev_rows)
    series = {}
    for r in rows:
        if r["sample"] == 0:
            series.setdefault(r["method"], ([], []))
            series[r["method"]][0].append(r["pc1"])
            series[r["method"]][1].append(r["pc2"])
    (out / "trajectory_pca.svg").write_text(A.svg_lines(series, title="first sample"))
    mid = sched.T // 2
    for k in trajs:
        vals = [r["deviation"] for r in dev_rows if r["method"] == k and r["t"] == mid]
        print(f"{k:14s} mean deviation at t={mid}: {sum(vals) / len(vals):.4f}")


if __name__ == "__main__":
    main()

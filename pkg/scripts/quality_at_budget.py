"""Energy distance of SpeCa against full sampling and fixed-interval baselines
at a matched FLOPs budget, seeds-averaged."""
import time
from dataclasses import replace

from _common import parser, setup

from speccache import analysis as A


def main():
    p = parser(__doc__, "budget.yaml")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--interval", type=int, default=3, help="N for fora and forecast_only")
    args = p.parse_args()
    cfg, model, gmm, sched, out = setup(args)
    ecfg = cfg.engine_config()
    ref = A.reference_samples(gmm, cfg.analysis.reference_samples, cfg.analysis.reference_seed)
    runs = {"speca": ecfg,
            "full": replace(ecfg, baseline="full"),
            "forecast_only": replace(ecfg, baseline="forecast_only", baseline_param=args.interval),
            "fora": replace(ecfg, baseline="fora", baseline_param=args.interval),
            "step_reduction": replace(ecfg, baseline="step_reduction", baseline_param=1 / 3)}
    rows = []
    for name, c in runs.items():
        t0 = time.time()
        st = A.evaluate_config(model, sched, c, range(args.seeds), args.samples, ref)
        rows.append({"method": name, "cost_fraction": st.cost_fraction, "S_measured": st.speedup,
                     "energy_distance": st.energy_distance,
                     "ed_min": min(st.per_seed_ed), "ed_max": max(st.per_seed_ed)})
        print(f"{name:15s} cost {st.cost_fraction:.3f}  S {st.speedup:.2f}  "
              f"ED {st.energy_distance:.5f}  ({time.time() - t0:.0f}s)", flush=True)
    A.write_csv(out / "quality_at_budget.csv", rows)


if __name__ == "__main__":
    main()

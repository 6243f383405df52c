"""Sweep every ablation axis on the trained testbed and write one CSV per axis.

The decay axis covers both the small-value grid and the 0.5 setting.
"""
import time

from _common import parser, setup

from speccache import analysis as A


def main():
    p = parser(__doc__)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--axes", nargs="*", default=list(A.AXES))
    args = p.parse_args()
    cfg, model, gmm, sched, out = setup(args)
    ref = A.reference_samples(gmm, cfg.analysis.reference_samples, cfg.analysis.reference_seed)
    values = dict(A.DEFAULT_AXIS_VALUES, verify_layer=["first", "middle", "last"])
    for axis in args.axes:
        t0 = time.time()
        grid = A.ablation_sweep(axis, cfg.engine_config(), model, sched, gmm, values=values[axis],
                                seeds=range(args.seeds), n_samples=args.samples, ref=ref)
        A.write_csv(out / f"ablation_{axis}.csv", grid.rows())
        print(f"{axis} ({time.time() - t0:.0f}s)")
        for c in grid.cells:
            print(f"  {str(c.value):16s} cost {c.cost_fraction:.3f}  ED {c.energy_distance:.5f}  "
                  f"deviation {c.deviation:.4f}")


if __name__ == "__main__":
    main()

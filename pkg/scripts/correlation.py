"""Per-layer Pearson correlation between draft error and terminal-sample error."""
from _common import parser, setup

from speccache import analysis as A


def main():
    p = parser(__doc__)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cfg, model, gmm, sched, out = setup(args)
    tab = A.layer_error_correlation(model, sched, cfg.engine_config(), args.samples, seed=args.seed)
    A.write_csv(out / "layer_correlation.csv", tab.rows())
    for row in tab.rows():
        print(f"layer {row['layer']}: r = {row['r']}")


if __name__ == "__main__":
    main()

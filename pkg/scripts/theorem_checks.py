"""Error-growth exponents of the Taylor draft and threshold margins of a run."""
import json

import numpy as np

from _common import parser, setup

from speccache import analysis as A
from speccache.engine import run_speca
from speccache.numerics import make_rng


def main():
    args = parser(__doc__).parse_args()
    cfg, model, gmm, sched, out = setup(args)
    report = {"growth": []}
    print("window  m  slope   target")
    for m in (1, 2, 3):
        for label, kw in (("short", {}), ("long", {"k_max": 128, "rate": 1e-3})):
            g = A.theorem1_growth_check("exponential", m, **kw)
            report["growth"].append({"window": label, **g.__dict__})
            print(f"{label:6s}  {m}  {g.slope:.3f}   [{m + 0.5}, {m + 1.5}]")
    ecfg = cfg.engine_config()
    tr, _ = run_speca(model, None, sched, ecfg, make_rng(cfg.seed))
    margins = A.theorem2_margin(sched, ecfg.verifier, tr.feature_norms)
    report["margins"] = A.margin_summary(margins)
    print("threshold margins:", {k: round(v, 4) for k, v in report["margins"].items()})
    (out / "theorem_checks.json").write_text(json.dumps(report, indent=2, default=float) + "\n")
    np.savetxt(out / "margins.txt", margins)


if __name__ == "__main__":
    main()

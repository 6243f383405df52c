"""Shared setup for the experiment scripts."""
import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from speccache.cli import build_model  # noqa: E402
from speccache.config import load_config  # noqa: E402


def parser(doc: str, default_config: str = "default.yaml") -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--config", default=str(ROOT / "configs" / default_config))
    p.add_argument("--out", default=str(ROOT / "runs"))
    return p


def setup(args):
    """(config, model, gmm, schedule, output dir) for parsed args."""
    cfg = load_config(args.config)
    model, gmm, sched = build_model(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, model, gmm, sched, out

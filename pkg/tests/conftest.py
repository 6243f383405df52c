from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from speccache.config import RunConfig
from speccache.diffusion import build_schedule
from speccache.models import init_denoiser, load_weights, ring_gmm, save_weights
from speccache.numerics import make_rng
from speccache.trainer import LossCurve, train

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def gmm():
    return ring_gmm()


@pytest.fixture
def small_model():
    return init_denoiser(L=3, H=8, d=2, time_embed_dim=4, rng=make_rng(7))


@pytest.fixture(scope="session")
def default_model():
    """Default architecture with random weights (untrained)."""
    return init_denoiser(rng=make_rng(11))


@pytest.fixture(scope="session")
def trained(request, sched, gmm):
    """Default testbed trained with the default config and seed 0.

    Cached in the pytest cache directory; the first session pays for training.
    """
    cfg = RunConfig(seed=0)
    cache = Path(request.config.cache.mkdir("speccache"))
    wpath, lpath = cache / "weights.bin", cache / "loss.csv"
    if not (wpath.exists() and lpath.exists()):
        m = cfg.model
        model = init_denoiser(m.n_layers, m.width, gmm.dim, m.time_embed_dim,
                              rng=make_rng(cfg.seed))
        model, curve = train(model, gmm, sched, cfg.trainer.build(cfg.seed))
        save_weights(model, wpath)
        curve.to_csv(lpath)
    return load_weights(wpath), LossCurve.from_csv(lpath), wpath


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """record(n, ok, detail): a criterion passes only if every record for it is ok."""
    def record(n, ok, detail):
        _CRITERIA.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(p[0] for p in parts)
        detail = "; ".join(("" if p[0] else "[fail] ") + p[1] for p in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

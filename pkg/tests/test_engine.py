import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speccache.diffusion import SamplerKind, build_schedule
from speccache.engine import (CostLedger, EngineConfig, run_baseline, run_batch, run_document,
                              run_speca, speedup, speedup_formula, speedup_lower_bound,
                              step_log_lines, SCHEMA_VERSION)
from speccache.models import init_denoiser
from speccache.numerics import make_rng
from speccache.verifier import VerifierConfig


def cfg_with(**v):
    return EngineConfig(verifier=VerifierConfig(**v))


def x_T(seed=0):
    return make_rng(seed).standard_normal(2)


def test_total_rejection_matches_full(sched, default_model):
    for seed in range(3):
        spec, led = run_speca(default_model, None, sched, cfg_with(tau0=0.0), make_rng(seed),
                              x_T=x_T(seed))
        full, _ = run_baseline("full", default_model, sched, make_rng(seed), x_T=x_T(seed))
        assert np.linalg.norm(spec.x0 - full.x0) < 1e-6
        assert led.alpha == 0.0 and led.attempts > 0


def test_no_speculation_is_full(sched, default_model):
    spec, led = run_speca(default_model, None, sched, cfg_with(max_draft_len=0), make_rng(1),
                          x_T=x_T())
    full, fled = run_baseline("full", default_model, sched, make_rng(1), x_T=x_T())
    assert np.array_equal(spec.x0, full.x0)
    assert led.alpha == 0.0 and led.total == fled.total == sched.T * default_model.flops


@pytest.mark.parametrize("N", [1, 2, 3, 5])
@pytest.mark.parametrize("reanchor", ["reset", "extend"])
def test_accept_all_reuse_matches_fora(sched, default_model, N, reanchor):
    cfg = EngineConfig(draft="reuse", anchor_gap=N, reanchor=reanchor,
                       verifier=VerifierConfig(tau0=1e300, max_draft_len=N - 1))
    spec, led = run_speca(default_model, None, sched, cfg, make_rng(2), x_T=x_T(2))
    fora, _ = run_baseline("fora", default_model, sched, make_rng(2), N, x_T=x_T(2))
    assert np.linalg.norm(spec.x0 - fora.x0) < 1e-8
    assert led.full_steps == len([t for t in range(sched.T, 0, -1) if (sched.T - t) % N == 0])


def test_full_baseline_cost(sched, default_model):
    _, led = run_baseline("full", default_model, sched, 0)
    assert led.total == sched.T * default_model.flops
    assert speedup(led)[:2] == (1.0, 1.0)


def test_fora_interval_one_is_full(sched, default_model):
    a, _ = run_baseline("fora", default_model, sched, 4, 1)
    b, _ = run_baseline("full", default_model, sched, 4)
    assert np.array_equal(a.x0, b.x0)


def test_step_reduction_counts(sched, default_model):
    tr, led = run_baseline("step_reduction", default_model, sched, 0, 0.5)
    assert led.full_steps == 25 and led.total == 25 * default_model.flops
    assert tr.times[0] == sched.T and tr.times[-1] == 0
    _, led2 = run_baseline("step_reduction", default_model, sched, 0, 0.5,
                           sampler=SamplerKind("ddpm"))
    assert led2.full_steps == 25


@pytest.mark.parametrize("kind,param", [("step_reduction", 0.0), ("step_reduction", 1.5),
                                        ("fora", 0), ("fora", 2.5), ("forecast_only", None),
                                        ("teacache", 3)])
def test_invalid_baselines(sched, default_model, kind, param):
    with pytest.raises(ValueError):
        run_baseline(kind, default_model, sched, 0, param)


def test_forecast_only_runs(sched, default_model):
    tr, led = run_baseline("forecast_only", default_model, sched, 0, 3, order=2)
    assert led.full_steps == 17
    assert len(tr.records) == sched.T


def test_speedup_examples():
    assert speedup_formula(0.0, 0.3) == 1.0
    assert speedup_formula(1.0, 0.05) == pytest.approx(20.0)
    assert round(speedup_formula(0.85, 0.05), 3) == 5.195
    assert speedup_lower_bound(0.85, 0.05, 0.0) == pytest.approx(speedup_formula(0.85, 0.05))


configs = st.builds(
    lambda draft, m, N, K, tau0, decay, reanchor, warmup, layer: EngineConfig(
        draft=draft, order=max(m, 1) if draft == "adams_bashforth" else m, anchor_gap=N,
        reanchor=reanchor, warmup=warmup,
        verifier=VerifierConfig(tau0=tau0, decay=decay, max_draft_len=K, verify_layer=layer)),
    st.sampled_from(["taylor", "reuse", "adams_bashforth"]), st.integers(0, 3),
    st.integers(1, 4), st.integers(0, 10), st.floats(0.0, 3.0), st.floats(0.01, 0.9),
    st.sampled_from(["reset", "extend"]), st.sampled_from(["full", "draft"]),
    st.sampled_from([0, 1, -1]))


@settings(max_examples=25)
@given(configs, st.integers(0, 1000))
def test_ledger_properties(cfg, seed):
    sched = build_schedule("linear", 20)
    model = init_denoiser(3, 16, rng=make_rng(5))
    tr, led = run_speca(model, None, sched, cfg, make_rng(seed))
    # the run reconciles, covers every step once and respects the caps
    assert led.full_steps + led.spec_steps == sched.T
    assert sum(r.flops for r in tr.records) == led.total
    assert tr.times == list(range(sched.T, -1, -1))
    assert len(tr.records) == sched.T
    run = 0
    for r in tr.records:
        run = run + 1 if r.kind == "accepted_spec" else 0
        assert run <= cfg.max_draft_len
        if r.kind == "accepted_spec":
            assert r.e_k <= r.tau_t
        if r.kind == "rejected_full":
            assert r.e_k > r.tau_t
    th, meas, lb = speedup(led)
    if led.alpha == 0:
        # nothing accepted: wasted verification work cannot be amortized
        assert meas <= 1.0 and (meas < 1.0) == (led.attempts > 0)
        return
    assert meas >= lb - 1e-9
    # exact cost identity once per-attempt overhead is included
    g = led.gamma_eff + led.overhead_ratio
    assert meas == pytest.approx(1.0 / (1.0 - led.alpha + led.alpha * g), rel=1e-12)
    if led.alpha * led.overhead_ratio / (1 - led.alpha + led.alpha * led.gamma_eff) < 0.01:
        assert th == pytest.approx(meas, rel=0.01)


def test_warmup_anchor_spacing(sched, default_model):
    cfg = EngineConfig(order=2, anchor_gap=3, verifier=VerifierConfig(tau0=10.0, max_draft_len=6))
    tr, _ = run_speca(default_model, None, sched, cfg, make_rng(0))
    first_attempt = next(r.t for r in tr.records if r.e_k is not None)
    assert first_attempt == sched.T - 2 * 3 - 1
    assert all(r.kind == "full" for r in tr.records if r.t > first_attempt)


def test_infeasible_warmup(default_model):
    short = build_schedule("linear", 4)
    with pytest.raises(ValueError, match="infeasible"):
        run_speca(default_model, None, short, EngineConfig(order=2, anchor_gap=2),
                  make_rng(0))


@pytest.mark.parametrize("kw", [{"anchor_gap": 0}, {"order": -1}, {"warmup": "lazy"},
                                {"reanchor": "keep"}, {"draft": "learned"},
                                {"draft": "adams_bashforth", "order": 0}])
def test_engine_config_validation(kw):
    with pytest.raises(ValueError):
        EngineConfig(**kw)
    assert EngineConfig(draft="reuse", order=3).order == 0


def test_substitute_and_diagnostic_modes(sched, default_model):
    cfg = EngineConfig(diagnostic=True, diag_cap=3,
                       verifier=VerifierConfig(tau0=5.0, substitute_recomputed=True))
    tr, led = run_speca(default_model, None, sched, cfg, make_rng(0))
    probes = [r.layer_errors for r in tr.records if r.layer_errors is not None]
    assert 0 < len(probes) <= 3 and all(len(p) == 8 for p in probes)
    assert led.alpha > 0


def test_analytic_target(sched, gmm):
    tr, led = run_speca(None, gmm, sched, EngineConfig(), make_rng(0))
    assert led.C == 3 * 8 * 2
    with pytest.raises(ValueError):
        run_speca(None, None, sched, EngineConfig(), make_rng(0))


def test_determinism(sched, default_model):
    a = run_batch(default_model, sched, EngineConfig(), 6, seed=3)
    b = run_batch(default_model, sched, EngineConfig(), 6, seed=3)
    assert np.array_equal(a.samples, b.samples)
    assert [l.to_dict() for l in a.ledgers] == [l.to_dict() for l in b.ledgers]


def test_parallel_batch_matches_sequential(sched, default_model):
    a = run_batch(default_model, sched, EngineConfig(), 4, seed=8)
    b = run_batch(default_model, sched, EngineConfig(), 4, seed=8, n_jobs=2)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert [l.to_dict() for l in a.ledgers] == [l.to_dict() for l in b.ledgers]


def test_total_rejection_histogram(sched, default_model):
    br = run_batch(default_model, sched, cfg_with(tau0=0.0), 5, seed=0)
    assert br.allocation_histogram() == {sched.T: 5}
    with pytest.raises(ValueError):
        run_batch(default_model, sched, EngineConfig(), 0)


def test_ledger_merge_and_reconcile():
    a = CostLedger(10, 100, full_steps=10, full_flops=1000)
    b = CostLedger(10, 100, full_steps=4, spec_steps=6, attempts=6, full_flops=400,
                   pred_flops=60, verify_flops=120)
    m = a.merged(b)
    assert (m.T, m.total, m.spec_steps) == (20, 1580, 6)
    with pytest.raises(ValueError):
        a.merged(CostLedger(10, 99))
    with pytest.raises(AssertionError):
        a.reconcile([])


def test_serialization(sched, default_model):
    tr, led = run_speca(default_model, None, sched, EngineConfig(), make_rng(0))
    lines = step_log_lines(tr, sample=2)
    assert len(lines) == sched.T
    rec = json.loads(lines[-1])
    assert set(rec) == {"sample", "t", "kind", "k", "e_k", "tau_t", "accepted", "flops"}
    doc = run_document(EngineConfig(), led, {"tag": "speca"})
    assert doc["schema_version"] == SCHEMA_VERSION
    again = json.loads(json.dumps(doc))
    assert again == doc
    for key in ("alpha", "gamma", "S_theoretical", "S_measured", "total_flops"):
        assert key in doc

"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line, echoed in the pytest terminal summary.
The experiment-level checks share one session fixture that runs the default
chest configuration for five seeds.
"""

import math
import time

import numpy as np
import pytest

import oracles
from conftest import record
from progrecal import harness
from progrecal import tensor as T
from progrecal.gradcheck import standard_suite
from progrecal.losses import (
    bhattacharyya_posterior_loss,
    coral_loss,
    cross_entropy,
    kl_posterior_loss,
    mmd_loss,
)
from progrecal.metrics import binary_suite, confusion_matrix, multiclass_suite, roc_auc
from progrecal.snapshot import contrastive_loss
from progrecal.temporal import TemporalConfig, TemporalEncoder

SEEDS = (0, 1, 2, 3, 4)
LOSSES = ("mmd", "coral", "kl", "bhattacharyya")


def test_gradient_suite():
    start = time.perf_counter()
    errors = standard_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    detail = f"{len(errors)} cases, max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s"
    assert record("gradient suite < 1e-4 within 60 s", ok, detail)


def test_causality_and_receptive_field():
    enc = TemporalEncoder(TemporalConfig(), seed=0)
    L = 24
    rng = np.random.default_rng(0)
    p = rng.uniform(0.5, 1.5, size=(1, enc.config.feature_dim, L))
    base = enc.tcn_forward(p, bypass_attention=True).features.data
    causal, reach = True, []
    for t in range(L):
        q = p.copy()
        q[..., t] += 1.0
        out = enc.tcn_forward(q, bypass_attention=True).features.data
        causal &= not np.any(out[..., :t] != base[..., :t])
        if np.any(out[..., L - 1] != base[..., L - 1]):
            reach.append(t)
    field = L - reach[0]
    ok = causal and field == 15 and enc.config.receptive_field == 15
    assert record("causal convolutions, receptive field 15", ok, f"causal={causal}, measured field={field}")


def test_loss_identities():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(16, 8))
    P = rng.dirichlet(np.ones(5), size=12)
    z = np.tile(rng.normal(size=(1, 6)), (4, 1))
    values = {
        "mmd(X,X)": (mmd_loss(X, X).item(), 0.0, 0.0),
        "coral(X,X)": (coral_loss(X, X).item(), 0.0, 0.0),
        "kl(P,P)": (kl_posterior_loss(P, P).item(), 0.0, 0.0),
        "bhattacharyya(P,P)": (bhattacharyya_posterior_loss(P, P).item(), 0.0, 0.0),
        "nt_xent identical D=2": (contrastive_loss(z, tau=0.5).item(), math.log(3), 1e-9),
        "ce uniform binary": (cross_entropy(np.zeros((7, 2)), rng.integers(0, 2, 7)).item(), math.log(2), 1e-9),
    }
    bad = {k: v for k, (v, ref, tol) in values.items() if abs(v - ref) > tol}
    detail = "all exact" if not bad else ", ".join(f"{k}={v!r}" for k, v in bad.items())
    assert record("loss identities", not bad, detail)


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(7)
    count_mismatch, auc_err, rate_err = 0, 0.0, 0.0
    for _ in range(200):
        n = int(rng.integers(2, 50))
        k = int(rng.integers(2, 6))
        true = rng.integers(0, k, size=n)
        pred = rng.integers(0, k, size=n)
        count_mismatch += confusion_matrix(pred, true, k).tolist() != oracles.counts(pred.tolist(), true.tolist(), k)
        got = multiclass_suite(pred, true, n_classes=k)
        ref = {
            "micro_f1": oracles.micro_f1(pred.tolist(), true.tolist(), k),
            "balanced_accuracy": oracles.balanced_accuracy(pred.tolist(), true.tolist(), k),
            "kappa": oracles.kappa(pred.tolist(), true.tolist(), k),
        }
        for key, value in ref.items():
            if (value is None) != (got[key] is None):
                count_mismatch += 1
            elif value is not None:
                rate_err = max(rate_err, abs(got[key] - value))
        tb, pb = (true % 2).tolist(), (pred % 2).tolist()
        sens, spec, f1 = oracles.binary_rates(pb, tb)
        binary = binary_suite(pb, tb)
        count_mismatch += (binary["sensitivity"], binary["specificity"]) != (sens, spec)
        if f1 is not None:
            rate_err = max(rate_err, abs(binary["f1"] - f1))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(size=n), 1)
        auc_err = max(auc_err, abs(roc_auc(scores, labels) - oracles.auc_pairs(scores, labels)))
    ok = count_mismatch == 0 and auc_err <= 1e-12 and rate_err <= 1e-12
    detail = f"count mismatches={count_mismatch}, max AUC err={auc_err:.1e}, max F1/BA/kappa err={rate_err:.1e}"
    assert record("metrics match oracles on 200 instances", ok, detail)


@pytest.fixture(scope="session")
def seed_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    start = time.perf_counter()
    runs = {s: harness.run_full_pipeline(harness.default_config("chest", seed=s), out, losses=LOSSES) for s in SEEDS}
    return out, runs, time.perf_counter() - start


def _mean(runs, variant):
    return float(np.mean([r["metrics"][variant]["auc"] for r in runs.values()]))


@pytest.mark.slow
def test_alignment_improves_over_baseline(seed_runs):
    _, runs, elapsed = seed_runs
    n = harness.default_config("chest").data.n_patients
    recal, base = _mean(runs, "recal"), _mean(runs, "baseline")
    ok = recal >= base + 0.03 and n >= 200 and elapsed < 15 * 60
    detail = f"mmd {recal:.4f} vs baseline {base:.4f} (delta {recal - base:+.4f}), n={n}, {elapsed:.0f}s"
    assert record("mmd AUC >= baseline + 0.03 over 5 seeds", ok, detail)


@pytest.mark.slow
def test_mmd_ranks_first_among_losses(seed_runs):
    _, runs, _ = seed_runs
    means = {loss: _mean(runs, "recal" if loss == "mmd" else f"recal_{loss}") for loss in LOSSES}
    ok = means["mmd"] >= means["kl"] - 0.01 and means["mmd"] >= means["bhattacharyya"] - 0.01
    detail = ", ".join(f"{k} {v:.4f}" for k, v in means.items())
    assert record("mmd >= kl and bhattacharyya (ties within 0.01)", ok, detail)


@pytest.mark.slow
def test_matched_pair_distance_ordering(seed_runs):
    _, runs, _ = seed_runs
    d = {k: float(np.mean([r["matched_pairs"][k] for r in runs.values()])) for k in ("d_matched", "d_same_class", "d_cross_class")}
    ok = d["d_cross_class"] > d["d_same_class"] > d["d_matched"]
    detail = f"cross {d['d_cross_class']:.4f}, same {d['d_same_class']:.4f}, matched {d['d_matched']:.4f}"
    assert record("d_cross > d_same > d_matched", ok, detail)


@pytest.mark.slow
def test_results_are_deterministic(seed_runs, tmp_path):
    out, _, _ = seed_runs
    cfg = harness.default_config("chest", seed=SEEDS[0])
    harness.run_full_pipeline(cfg, tmp_path, losses=LOSSES)
    rid = harness.run_id(cfg)
    a = (out / "runs" / rid / "results.json").read_bytes()
    b = (tmp_path / "runs" / rid / "results.json").read_bytes()
    assert record("identical config and seed give identical results.json", a == b, f"{len(a)} bytes, equal={a == b}")

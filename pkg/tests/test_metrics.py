import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from progrecal.metrics import (
    UndefinedMetricError,
    binary_suite,
    cohen_kappa,
    confusion_matrix,
    evaluate_binary,
    evaluate_ordinal,
    multiclass_suite,
    ovo_auc,
    roc_auc,
)


def test_auc_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_and_ties():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_binary_suite_balanced_confusion():
    # confusion [[1, 1], [1, 1]]
    out = binary_suite([0, 1, 0, 1], [0, 0, 1, 1])
    assert out == {"sensitivity": 0.5, "specificity": 0.5, "f1": 0.5}
    assert cohen_kappa([0, 1, 0, 1], [0, 0, 1, 1], 2) == 0.0


def test_binary_suite_perfect_and_inverted():
    labels = [0, 1, 1, 0, 1]
    assert binary_suite(labels, labels) == {"sensitivity": 1.0, "specificity": 1.0, "f1": 1.0}
    inv = [1 - y for y in labels]
    a = binary_suite(inv, labels)
    b = binary_suite(labels, inv)
    assert a["sensitivity"] == b["specificity"] == 0.0


def test_undefined_rates_are_none():
    out = binary_suite([0, 0], [0, 0])
    assert out["sensitivity"] is None and out["f1"] is None and out["specificity"] == 1.0


def test_multiclass_perfect():
    g = [0, 1, 2, 3, 4, 2]
    out = multiclass_suite(g, g)
    assert out["micro_f1"] == out["balanced_accuracy"] == out["kappa"] == 1.0


def test_kappa_uniform_random_near_zero(rng):
    true = np.repeat(np.arange(5), 2000)
    pred = rng.integers(0, 5, size=true.size)
    assert abs(cohen_kappa(pred, true, 5)) < 0.05


def test_ovo_auc_restricts_to_two_grades():
    scores = np.array([[0, 0.9, 0.1, 0, 0], [0, 0.2, 0.8, 0, 0], [0.9, 0, 0, 0.1, 0]])
    assert ovo_auc(scores, [1, 2, 0], 1, 2) == 1.0
    assert ovo_auc(scores, [1, 1, 0], 1, 2) is None


def test_missing_class_auc_is_none():
    out = multiclass_suite([1, 1], [1, 1], scores=np.full((2, 5), 0.2))
    assert out["ovo_auc_1_2"] is None and out["ova_auc"] is None


def test_auc_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, size=n) / 5.0  # plenty of ties
        assert abs(roc_auc(scores, labels) - oracles.auc_pairs(scores, labels)) <= 1e-12


def test_count_metrics_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(2, 6))
        true = rng.integers(0, k, size=n).tolist()
        pred = rng.integers(0, k, size=n).tolist()
        assert confusion_matrix(pred, true, k).tolist() == oracles.counts(pred, true, k)
        ref, got_kappa = oracles.kappa(pred, true, k), cohen_kappa(pred, true, k)
        if ref is None:
            assert got_kappa is None
        else:
            assert got_kappa == pytest.approx(ref, abs=1e-12)
        assert multiclass_suite(pred, true, n_classes=k)["balanced_accuracy"] == pytest.approx(oracles.balanced_accuracy(pred, true, k), abs=1e-12)
        assert multiclass_suite(pred, true, n_classes=k)["micro_f1"] == pytest.approx(oracles.micro_f1(pred, true, k), abs=1e-12)
        tb, pb = [t % 2 for t in true], [p % 2 for p in pred]
        sens, spec, f1 = oracles.binary_rates(pb, tb)
        got = binary_suite(pb, tb)
        assert got["sensitivity"] == sens and got["specificity"] == spec
        if f1 is not None:
            assert got["f1"] == pytest.approx(f1, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=30, unique=True), st.randoms(use_true_random=False))
def test_auc_transform_invariance_and_complement(scores, rnd):
    labels = [rnd.randint(0, 1) for _ in scores]
    labels[0], labels[1] = 0, 1
    s = np.array(scores) / 10.0  # grid values keep the transform strictly increasing in floating point
    base = roc_auc(s, labels)
    assert roc_auc(np.exp(s / 50.0) * 3.0 + 1.0, labels) == pytest.approx(base, abs=1e-12)
    assert base + roc_auc(-s, labels) == pytest.approx(1.0, abs=1e-12)


def test_eval_report_json_and_csv(rng):
    labels = np.array([0, 1, 0, 1, 1, 0])
    report = evaluate_binary(rng.uniform(size=6), labels, config={"seed": 3})
    d = json.loads(report.to_json())
    assert set(d) == {"metrics", "confusion", "class_counts", "config"}
    assert set(d["metrics"]) == {"auc", "accuracy", "sensitivity", "specificity", "f1"}
    assert sum(map(sum, d["confusion"])) == 6 and d["class_counts"] == [3, 3]
    row = report.csv_row(["auc", "f1"]).strip().split(",")
    assert len(row) == 2
    for v in d["metrics"].values():
        assert v is None or 0.0 <= v <= 1.0


def test_ordinal_report_keys(rng):
    true = np.array([0, 1, 2, 3, 4, 1, 2])
    scores = rng.dirichlet(np.ones(5), size=7)
    report = evaluate_ordinal(scores.argmax(axis=1), true, scores)
    assert {"micro_f1", "balanced_accuracy", "kappa", "ova_auc", "ovo_auc_1_2", "ovo_auc_2_3"} <= set(report.metrics)
    assert -1.0 <= report.metrics["kappa"] <= 1.0

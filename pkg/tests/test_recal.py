import math

import numpy as np
import pytest

from progrecal.errors import ConfigurationError, ContractError
from progrecal.gradcheck import grad_check
from progrecal.recal import (
    RecalConfig,
    RecalModel,
    composed_loss,
    finetune,
    matched_pair_distances,
    predict,
)


@pytest.fixture
def problem(rng):
    X = rng.normal(size=(40, 12))
    y = (X[:, 0] + 0.3 * rng.normal(size=40) > 0).astype(int)
    bank = rng.normal(1.0, 1.0, size=(30, 12))
    return X, y, bank


def cfg(**kw):
    return RecalConfig(**{"hidden": 8, "epochs": 5, "batch_size": 8, "bank_batch": 10, **kw})


def test_zero_lambda_matches_plain_supervised(problem):
    X, y, bank = problem
    with_bank = finetune(X, y, bank, cfg(lam=0.0), seed=3, trace=True)
    without = finetune(X, y, None, cfg(lam=0.0), seed=3, trace=True)
    assert len(with_bank.param_trace) == len(without.param_trace) > 0
    for a, b in zip(with_bank.param_trace, without.param_trace):
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


def test_mmd_component_decreases(problem):
    X, y, bank = problem
    res = finetune(X, y, bank, cfg(lam=0.5, epochs=20), seed=0)
    hist = res.state.history
    assert hist[-1]["mmd_loss"] < hist[0]["mmd_loss"]
    assert all(row["mmd_loss"] >= 0 for row in hist)
    assert [row["epoch"] for row in hist] == list(range(21))


def test_rerun_is_bit_identical(problem):
    X, y, bank = problem
    a = finetune(X, y, bank, cfg(), seed=4)
    b = finetune(X, y, bank, cfg(), seed=4)
    assert a.state.to_csv() == b.state.to_csv()
    for name, arr in a.model.state_dict().items():
        np.testing.assert_array_equal(arr, b.model.state_dict()[name])


def test_history_csv_columns(problem):
    X, y, bank = problem
    text = finetune(X, y, bank, cfg(epochs=2), seed=0).state.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,pred_loss,mmd_loss,total"
    assert len(lines) == 4


def test_positive_lambda_needs_bank(problem):
    X, y, _ = problem
    with pytest.raises(ConfigurationError):
        finetune(X, y, np.zeros((0, 12)), cfg(lam=0.5))
    with pytest.raises(ConfigurationError):
        finetune(X, y, None, cfg(lam=0.5))


def test_zero_init_predicts_half():
    out = predict(RecalModel(12, 8, 2, seed=None), np.ones((3, 12)))
    np.testing.assert_array_equal(out["probs"], 0.5)


def test_probabilities_sum_to_one(problem):
    X, y, bank = problem
    res = finetune(X, y, bank, cfg(), seed=0)
    np.testing.assert_allclose(predict(res.model, X)["probs"].sum(axis=1), 1.0)
    knee = finetune(X, np.arange(40) % 5, bank, cfg(task="knee"), seed=0)
    np.testing.assert_allclose(predict(knee.model, X, "knee")["probs"].sum(axis=1), 1.0)


def test_knee_decode_all_confident():
    model = RecalModel(4, 3, 4, seed=None)
    model.fc2.bias.data[:] = math.log(0.9 / 0.1)
    out = predict(model, np.zeros((2, 4)), "knee")
    np.testing.assert_array_equal(out["pred"], [4, 4])


def test_width_mismatch(problem):
    with pytest.raises(ContractError):
        predict(RecalModel(12, 8, 2, seed=0), np.ones((2, 5)))


@pytest.mark.parametrize("task, out, labels", [("chest", 2, [0, 1, 1, 0, 1]), ("knee", 4, [0, 4, 2, 1, 3])])
@pytest.mark.parametrize("loss", ["mmd", "coral", "kl", "bhattacharyya"])
def test_composed_loss_gradient(task, out, labels, loss, rng):
    model = RecalModel(6, 5, out, seed=1)
    X, bank = rng.normal(size=(5, 6)), rng.normal(size=(7, 6))

    def f(_):
        return composed_loss(model, X, labels, bank, 0.5, loss, task)[0]

    for p in model.parameters():
        assert grad_check(f, p) < 1e-4


def test_matched_pair_distances_identical():
    Z = np.arange(12.0).reshape(4, 3)
    d = matched_pair_distances(Z, Z, [0, 0, 1, 1], [0, 0, 1, 1])
    assert d["d_matched"] == 0.0


def test_matched_pair_distances_hand_example():
    S = np.array([[0.0], [10.0], [1.0]])
    Tm = np.array([[0.5], [10.0], [3.0]])
    d = matched_pair_distances(S, Tm, [0, 1, 0], [0, 1, 0])
    assert d["d_matched"] == pytest.approx((0.5 + 0 + 2) / 3)
    assert d["d_same_class"] == pytest.approx((3.0 + 0.5) / 2)
    assert d["d_cross_class"] == pytest.approx((10 + 9.5 + 7 + 9) / 4)

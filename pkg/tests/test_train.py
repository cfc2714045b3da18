import math

import numpy as np
import pytest
from sklearn.base import clone

from fewbit import load_model, save_model
from fewbit.estimators import FewBitVideoQA, StoredBitsQA
from fewbit.train import (REPORT_COLUMNS, TrainConfig, bit_sweep, make_data, random_guess, results_report,
                          spearman, train_floats_baseline, train_on_bits, train_q_only, train_r_only, train_task,
                          train_task_plus_r, transfer_matrix)

CFG = TrainConfig(seed=0, n_bits=4, epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def data():
    return make_data(0, n_train=200, n_eval=100)


@pytest.fixture(scope="module")
def task_run(data):
    return train_task(CFG, data, "motion")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="both")
    with pytest.raises(ValueError):
        TrainConfig(n_bits=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert CFG.replace(seed=5).seed == 5 and CFG.seed == 0
    assert CFG.estimator().get_params()["n_bits"] == 4


def test_make_data_splits_disjoint(data):
    assert len(data.train) == 200 and len(data.eval) == 100
    assert set(data.train.ids).isdisjoint(data.eval.ids)
    X, y, q = data.arrays("shape", "eval")
    assert X.shape == (100, 8, 16, 16) and set(q) == {0}


def test_train_task_row_and_history(task_run):
    row = task_run.row()
    assert tuple(row) == REPORT_COLUMNS
    assert row["objective"] == "task" and row["n_bits"] == 4
    assert 0 <= row["accuracy"] <= 1
    losses = [h["loss"] for h in task_run.history]
    assert len(losses) == 2 and losses[-1] < losses[0]


def test_train_task_deterministic(data, task_run):
    again = train_task(CFG, data, "motion")
    assert again.accuracy == task_run.accuracy
    for a, b in zip(task_run.model.featcomp_.parameters(), again.model.featcomp_.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_train_task_requires_task_objective(data):
    with pytest.raises(ValueError):
        train_task(CFG.replace(objective="r_only"), data, "motion")


@pytest.mark.parametrize("task, expected", [("motion", 0.2), ("shape", 0.25), ("all", 0.225)])
def test_random_guess(task, expected):
    assert random_guess(task) == pytest.approx(expected)


def test_q_only_balanced_is_chance(data):
    res = train_q_only(CFG, data, "motion")
    assert res.accuracy == pytest.approx(0.2, abs=0.03)
    assert res.model.extractor_ is None and res.model.featcomp_ is None


def test_q_only_skewed_learns_majority():
    rng = np.random.default_rng(0)
    n = 2000
    y = np.full(n, 5)
    y[: n // 5] = rng.integers(4, 9, size=n // 5)
    y[: n // 5][y[: n // 5] == 5] = 6
    assert np.mean(y == 5) == pytest.approx(0.8)
    X = np.zeros((n, 8, 16, 16), dtype=np.float32)
    q = np.ones(n, dtype=int)
    est = FewBitVideoQA(n_bits=None, q_only=True, epochs=3).fit(X, y, q)
    assert est.score(X, y, q) == pytest.approx(0.80, abs=0.02)


def test_floats_baseline_has_no_bottleneck(data):
    res = train_floats_baseline(CFG, data, "motion")
    assert res.n_bits is None and res.model.featcomp_ is None
    assert res.model.transform is not None


def test_zero_weight_task_plus_r_matches_task(data, task_run):
    res = train_task_plus_r(CFG.replace(recon_weight=0.0), data, "motion")
    assert abs(res.accuracy - task_run.accuracy) <= 0.05


def test_r_only_reconstruction_improves(data):
    res = train_r_only(CFG, data, "motion")
    recon = [h["recon_loss"] for h in res.model.recon_history_]
    assert recon[-1] < recon[0]
    assert res.model.backbone_ is not None


def test_transfer_on_stored_bits(data, task_run):
    bits_tr = task_run.model.transform(data.train.frames)
    bits_ev = task_run.model.transform(data.eval.frames)
    assert bits_tr.shape == (200, 4) and bits_tr.dtype == np.uint8
    res = train_on_bits(bits_tr, bits_ev, data, "shape", CFG, "motion")
    assert res.objective == "transfer:motion" and res.n_bits == 4
    assert isinstance(res.model, StoredBitsQA)


def test_transfer_needs_only_stored_bits(data, task_run):
    from fewbit.train import transfer_eval

    via_model = transfer_eval(task_run.model, "motion", CFG, data, "motion")
    bits_tr = task_run.model.transform(data.train.frames)
    bits_ev = task_run.model.transform(data.eval.frames)
    # source model gone: only the stored codes remain
    via_bits = train_on_bits(bits_tr.copy(), bits_ev.copy(), data, "motion", CFG, "motion")
    assert via_bits.accuracy == via_model.accuracy


def test_transfer_matrix_layout(data, task_run):
    matrix, rep = transfer_matrix(CFG, data, ("motion", "shape"), sources={"motion": task_run.model})
    assert set(matrix) == {"motion", "shape"} and set(matrix["motion"]) == {"motion", "shape"}
    assert len(rep) == 4 and rep.columns[-1] == "source"


def test_bit_sweep_rows_and_parallel_equivalence(data):
    cfg = CFG.replace(epochs=1)
    serial = bit_sweep(cfg, data, "motion", levels=(1, 4), seeds=(0,))
    assert [r["name"] for r in serial.rows] == [1, 4, "floats", "q_only", "random"]
    assert len(serial.report()) == 2 + 2 + 1
    assert serial.mean("random") == 0.2
    assert not serial.failures
    parallel = bit_sweep(cfg, data, "motion", levels=(1, 4), seeds=(0,), jobs=2)
    assert parallel.report() == serial.report()
    with pytest.raises(KeyError):
        serial.mean(7)


def test_spearman():
    assert spearman([1, 2, 3], [0.1, 0.5, 0.9]) == pytest.approx(1.0)
    assert math.isnan(spearman([1, 2, 3], [0.5, 0.5, 0.5]))


def test_results_report(task_run):
    rep = results_report([task_run], {"note": "x"})
    assert rep.rows[0]["task"] == "motion" and rep.meta == {"note": "x"}


# -- estimator surface -------------------------------------------------------------------

def test_clone_and_params():
    est = FewBitVideoQA(n_bits=3, epochs=1)
    assert clone(est).get_params() == est.get_params()


def test_estimator_errors(data):
    X, y, q = data.arrays("motion")
    with pytest.raises(ValueError):
        FewBitVideoQA(n_bits=None, objective="r_only").fit(X, y, q)
    with pytest.raises(ValueError):
        FewBitVideoQA(epochs=1).fit(X[:, :4], y, q)
    with pytest.raises(ValueError):
        FewBitVideoQA(epochs=1).fit(X, np.full(len(y), 42), q)


def test_save_load_round_trip(tmp_path, data, task_run):
    path = tmp_path / "m.fcmp"
    save_model(task_run.model, path)
    back = load_model(path)
    X, y, q = data.arrays("motion", "eval")
    np.testing.assert_array_equal(back.predict(X, q), task_run.model.predict(X, q))
    np.testing.assert_array_equal(back.transform(X), task_run.model.transform(X))


def test_float64_precision_runs(data):
    X, y, q = data.arrays("motion")
    est = FewBitVideoQA(n_bits=2, epochs=1, precision="float64").fit(X[:40], y[:40], q[:40])
    assert est.decision_function(X[:2], q[:2]).dtype == np.float64

from dataclasses import replace

import numpy as np
import pytest

from cpr import training
from cpr.data import Trajectory, make_batch
from cpr.simulator import SimSpec, simulate
from cpr.training import (AdamState, TrainConfig, TrainingDiverged, adam_step, bootstrap_eval, build_model, fit,
                          grid_search, split_patients, train_model, validation_loss)


def small(n=60, seed=0):
    return simulate(SimSpec("heterogeneous", N=n, T=8, seed=seed))


def test_split_counts_and_disjoint():
    trajs = small(100)
    tr, va, te = split_patients(trajs, (0.7, 0.15, 0.15), 0)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    ids = [{t.id for t in part} for part in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set.union(*ids) == {t.id for t in trajs}


def test_split_deterministic():
    trajs = small(100)
    a = split_patients(trajs, seed=3)
    b = split_patients(trajs, seed=3)
    c = split_patients(trajs, seed=4)
    assert [[t.id for t in p] for p in a] == [[t.id for t in p] for p in b]
    assert [t.id for t in a[0]] != [t.id for t in c[0]]


def test_split_all_train():
    tr, va, te = split_patients(small(10), (1.0, 0.0, 0.0))
    assert len(tr) == 10 and va == [] and te == []


def test_split_errors():
    with pytest.raises(ValueError):
        split_patients(small(3), (0.7, 0.15, 0.15))
    with pytest.raises(ValueError):
        split_patients(small(10), (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_patients([], (1.0, 0.0, 0.0))


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([[1.0, -2.0]])}
    new, _ = adam_step(p, {"w": np.zeros((1, 2))}, AdamState(), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([[1.0, -2.0, 0.5]])}
    g = {"w": np.array([[3.0, -0.01, 250.0]])}
    new, _ = adam_step(p, g, AdamState(), 1e-3)
    np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-5)


def test_adam_minimizes_quadratic():
    p, state = {"x": np.array([[5.0]])}, AdamState()
    for _ in range(100):
        p, state = adam_step(p, {"x": 2 * p["x"]}, state, 0.1)
    assert abs(p["x"][0, 0]) < 0.5


def test_adam_rejects_nonfinite():
    p = {"x": np.array([[1.0]])}
    for bad in (np.nan, np.inf):
        with pytest.raises(FloatingPointError):
            adam_step(p, {"x": np.array([[bad]])}, AdamState(), 0.1)


def test_fit_deterministic():
    trajs = small()
    cfg = TrainConfig(hidden_dim=4, max_epochs=3, batch_size=16, learning_rate=1e-2)
    m1, r1 = train_model(trajs[:40], trajs[40:], cfg)
    m2, r2 = train_model(trajs[:40], trajs[40:], cfg)
    assert r1.val_loss == r2.val_loss
    for k in m1.params:
        assert m1.params[k].tobytes() == m2.params[k].tobytes()


@pytest.mark.parametrize("kind", ["cpr", "cpr-global", "blackbox"])
def test_first_epoch_improves(kind):
    trajs = small(80)
    cfg = TrainConfig(model=kind, hidden_dim=8, max_epochs=1, batch_size=8, learning_rate=1e-2)
    model = build_model(cfg, 1)
    before = validation_loss(model, trajs[:60])
    res = fit(model, trajs[:60], trajs[60:], cfg)
    assert res.train_loss[0] < before
    assert res.epochs_run == 1


def test_early_stopping_on_shuffled_labels():
    rng = np.random.default_rng(0)
    trajs = [Trajectory(str(i), rng.uniform(-2, 2, (6, 1)), rng.integers(0, 2, 6)) for i in range(60)]
    cfg = TrainConfig(hidden_dim=16, max_epochs=300, patience=5, batch_size=16, learning_rate=1e-2)
    model, res = train_model(trajs[:40], trajs[40:], cfg)
    assert res.epochs_run < 300
    assert res.epochs_run == res.best_epoch + cfg.patience
    assert res.best_epoch == int(np.argmin(res.val_loss)) + 1
    # model holds the best weights
    assert validation_loss(model, trajs[40:]) == pytest.approx(min(res.val_loss), abs=1e-12)


def test_epochs_bounded():
    trajs = small(30)
    cfg = TrainConfig(hidden_dim=4, max_epochs=4, patience=100, batch_size=8, learning_rate=1e-3)
    _, res = train_model(trajs[:20], trajs[20:], cfg)
    assert res.epochs_run <= 4 and len(list(res.curve_rows())) == res.epochs_run


def test_divergence_reports_last_finite_epoch(monkeypatch):
    trajs = small(20)
    real = training.gradients
    calls = {"n": 0}

    def flaky(model, batch, lam):
        calls["n"] += 1
        loss, g = real(model, batch, lam)
        return (float("nan") if calls["n"] == 3 else loss), g

    monkeypatch.setattr(training, "gradients", flaky)
    cfg = TrainConfig(hidden_dim=4, max_epochs=10, batch_size=100)
    with pytest.raises(TrainingDiverged) as err:
        train_model(trajs[:15], trajs[15:], cfg)
    assert err.value.epoch == 3 and err.value.last_finite_epoch == 2


def test_grid_single_cell():
    trajs = small(30)
    base = TrainConfig(hidden_dim=4, max_epochs=2, batch_size=16)
    res = grid_search(trajs[:20], trajs[20:], {"hidden_dim": [8]}, base)
    assert res.best == replace(base, hidden_dim=8)
    assert len(res.table) == 1


def test_grid_tie_break(monkeypatch):
    class Stub:
        best_val_loss = 0.5

    monkeypatch.setattr(training, "train_model", lambda tr, va, cfg: (build_model(cfg, 1), Stub()))
    monkeypatch.setattr(training, "evaluate", lambda model, trajs: {"auroc": 0.5})
    trajs = small(10)
    res = grid_search(trajs, trajs, {"hidden_dim": [64, 16, 32], "lam": [1e-1, 1e-3]})
    assert (res.best.hidden_dim, res.best.lam) == (16, 1e-3)


def test_bootstrap_identical_seeds_zero_stderr():
    trajs = small(40)
    cfg = TrainConfig(hidden_dim=4, max_epochs=2, batch_size=16)
    doc = bootstrap_eval(trajs, cfg, runs=2, seeds=[7, 7]).to_dict()
    for entry in doc.values():
        if entry["mean"] is not None:
            assert entry["stderr"] == 0.0


def test_bootstrap_mean_within_runs():
    trajs = small(40)
    cfg = TrainConfig(hidden_dim=4, max_epochs=2, batch_size=16)
    rep = bootstrap_eval(trajs, cfg, runs=3)
    for name, vals in rep.runs.items():
        vals = [v for v in vals if v is not None]
        assert min(vals) - 1e-12 <= np.mean(vals) <= max(vals) + 1e-12
        assert rep.to_dict()[name]["n_runs"] == 3
    with pytest.raises(ValueError):
        bootstrap_eval(trajs, cfg, runs=1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model="gbm")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    assert TrainConfig().lr == 5e-4 and TrainConfig(model="blackbox").lr == 1e-4
    assert TrainConfig(learning_rate=0.02).lr == 0.02


def test_loss_batch_weights():
    trajs = small(5)
    b = make_batch(trajs[:3])
    np.testing.assert_allclose(b.weight.sum(), 1.0)


def test_bootstrap_auroc_stable_on_heterogeneous():
    trajs = simulate(SimSpec("heterogeneous", seed=0))
    cfg = TrainConfig(hidden_dim=8, max_epochs=5, learning_rate=1e-2)
    doc = bootstrap_eval(trajs, cfg, runs=10).to_dict()
    assert doc["auroc"]["n_runs"] == 10
    assert doc["auroc"]["stderr"] < 0.05

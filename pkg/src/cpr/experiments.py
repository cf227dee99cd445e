"""End-to-end simulation studies: heterogeneous, homogeneous and threshold MDPs."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from cpr.data import make_batch
from cpr.metrics import evaluate
from cpr.simulator import SimSpec, holdout_split, simulate
from cpr.training import TrainConfig, split_patients, train_model

log = logging.getLogger(__name__)

# fraction of the non-held-out trajectories used for early stopping / selection
VAL_FRAC = 0.15

SIM_GRID = {"hidden_dim": (16, 32, 64), "learning_rate": (1e-3, 3e-3, 1e-2)}


def select_and_train(train, val, base: TrainConfig, grid: dict):
    """Train every grid cell and keep the model with the lowest validation loss."""
    best = None
    keys = list(grid)
    cells = [dict()]
    for k in keys:
        cells = [{**c, k: v} for c in cells for v in grid[k]]
    for cell in cells:
        cfg = replace(base, **cell)
        model, res = train_model(train, val, cfg)
        log.info("%s %s: val %.5f", cfg.model, cell, res.best_val_loss)
        key = (res.best_val_loss, cfg.hidden_dim, cfg.lam)
        if best is None or key < best[0]:
            best = (key, model, cfg, res)
    return best[1], best[2], best[3]


def simulation_splits(spec: SimSpec):
    trajs = simulate(spec)
    kept, test = holdout_split(trajs, spec.holdout_frac, spec.seed)
    train, val, _ = split_patients(kept, (1 - VAL_FRAC, VAL_FRAC, 0.0), spec.seed)
    return train, val, test


def heterogeneous_study(seed: int, grid=None, base: TrainConfig | None = None, spec: SimSpec | None = None,
                        models=("cpr", "blackbox")) -> dict:
    """Held-out recovery metrics for CPR and the black-box gradient baseline."""
    spec = replace(spec or SimSpec("heterogeneous"), seed=seed)
    base = base or TrainConfig(patience=100, max_epochs=1000)
    grid = SIM_GRID if grid is None else grid
    train, val, test = simulation_splits(spec)
    out = {}
    for kind in models:
        model, cfg, _ = select_and_train(train, val, replace(base, model=kind, seed=seed), grid)
        out[kind] = {**evaluate(model, test), "config": cfg.to_dict()}
    return out


def homogeneous_study(seed: int, grid=None, base: TrainConfig | None = None, spec: SimSpec | None = None) -> dict:
    """CPR estimates of ``w`` and ``b`` against truth on held-out trajectories."""
    spec = replace(spec or SimSpec("homogeneous"), seed=seed)
    base = base or TrainConfig(patience=30, max_epochs=500, batch_size=64)
    grid = {"learning_rate": (3e-3,)} if grid is None else grid
    train, val, test = simulation_splits(spec)
    model, cfg, _ = select_and_train(train, val, replace(base, model="cpr", seed=seed), grid)
    theta = model.coefficients(make_batch(test))
    est_w, est_b = theta[:, :, 0], theta[:, :, 1]
    true_w = np.stack([t.truth["theta"][:, 0] for t in test])
    central = np.abs(true_w) <= 2.0
    return {
        "w_mae_central": float(np.mean(np.abs(est_w - true_w)[central])),
        "b_mean_t5": float(est_b[:, 5].mean()),
        "b_by_t": est_b.mean(axis=0).tolist(),
        "true_b_by_t": [float(b) for b in test[0].truth["intercept"]],
        "config": cfg.to_dict(),
        "metrics": evaluate(model, test),
    }


def threshold_study(seed: int, grid=None, base: TrainConfig | None = None, spec: SimSpec | None = None) -> dict:
    """Where the fitted policies cross 0.5, split by the previous observation."""
    spec = replace(spec or SimSpec("threshold"), seed=seed)
    base = base or TrainConfig(patience=30, max_epochs=500, lam=1e-4)
    grid = {"learning_rate": (3e-3,)} if grid is None else grid
    train, val, test = simulation_splits(spec)
    model, cfg, _ = select_and_train(train, val, replace(base, model="cpr", seed=seed), grid)
    batch = make_batch(test)
    theta = model.coefficients(batch)
    coef, icpt = theta[:, 1:, 0], theta[:, 1:, 1]
    prev = batch.obs[:, :-1, 0]
    grid_x = np.linspace(0, 1, 2001)
    out = {"config": cfg.to_dict(), "metrics": evaluate(model, test)}
    for name, sel in (("low", prev < 0.5), ("high", prev >= 0.5)):
        c, b = coef[sel], icpt[sel]
        curve = 1 / (1 + np.exp(-(np.outer(c, grid_x) + b[:, None])))
        mean_curve = curve.mean(axis=0)
        out[name] = {
            "crossing": crossing_point(grid_x, mean_curve),
            "median_policy_crossing": float(np.median(-b / c)),
            "increasing": bool(mean_curve[-1] > mean_curve[0]),
        }
    return out


def crossing_point(x, y, level: float = 0.5) -> float:
    """Linearly interpolated first crossing of ``level``; NaN if none."""
    s = np.sign(y - level)
    idx = np.nonzero(np.diff(s))[0]
    if idx.size == 0:
        return float("nan")
    i = idx[0]
    return float(x[i] + (level - y[i]) * (x[i + 1] - x[i]) / (y[i + 1] - y[i]))

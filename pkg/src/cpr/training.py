"""Adam, early stopping, patient-level splits, grid search and bootstrap runs."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cpr import autodiff as ad
from cpr.baselines import BlackBoxModel
from cpr.data import make_batch
from cpr.encoders import load_checkpoint, save_checkpoint
from cpr.metrics import EvalReport, evaluate
from cpr.policy import CPRGlobalModel, CPRModel
from cpr.simulator import named_rng

log = logging.getLogger(__name__)

MODEL_KINDS = ("cpr", "cpr-global", "blackbox")
DEFAULT_LR = {"cpr": 5e-4, "cpr-global": 5e-4, "blackbox": 1e-4}
HIDDEN_GRID = (16, 32, 64)
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class TrainConfig:
    model: str = "cpr"
    cell: str = "rnn"
    hidden_dim: int = 32
    lam: float = 1e-4
    alpha: float = 0.5
    learning_rate: float | None = None
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    split: tuple = (0.70, 0.15, 0.15)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.model]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def build_model(config: TrainConfig, obs_dim: int, static_dim: int = 0):
    rng = named_rng(config.seed, "init")
    if config.model == "cpr":
        return CPRModel(obs_dim, config.hidden_dim, config.cell, static_dim, rng=rng)
    if config.model == "cpr-global":
        return CPRGlobalModel(obs_dim, config.hidden_dim, config.cell, static_dim, config.alpha, rng=rng)
    return BlackBoxModel(obs_dim, config.hidden_dim, config.cell, static_dim, rng=rng)


def model_from_config(cfg: dict):
    kinds = {"cpr": CPRModel, "cpr-global": CPRGlobalModel, "blackbox": BlackBoxModel}
    args = dict(cfg)
    cls = kinds[args.pop("kind")]
    return cls(**args)


def save_model(model, path, meta: dict | None = None):
    save_checkpoint(path, model.params, {"model": model.config(), **(meta or {})})


def load_model(path):
    tensors, meta = load_checkpoint(path)
    model = model_from_config(meta["model"])
    missing = set(model.params) ^ set(tensors)
    if missing:
        raise ValueError(f"{path}: tensor names do not match the model ({sorted(missing)})")
    for name, arr in tensors.items():
        if model.params[name].shape != arr.shape:
            raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name][...] = arr
    return model, meta


def split_patients(trajs, fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Shuffle patients and cut into train/val/test by the given fractions.

    Counts are ``floor`` of each fraction with leftovers assigned to the
    largest remainders, so 100 patients at (0.7, 0.15, 0.15) give 70/15/15.
    """
    n = len(trajs)
    if n == 0:
        raise ValueError("no trajectories to split")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or abs(fr.sum() - 1) > 1e-9 or fr.min() < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if np.any((fr > 0) & (counts == 0)):
        raise ValueError(f"{n} patients are too few for non-empty splits at {tuple(fractions)}")
    order = named_rng(seed, "split").permutation(n)
    cuts = np.cumsum(counts)[:-1]
    return tuple([trajs[i] for i in part] for part in np.split(order, cuts))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, state)``."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out, state


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}; last finite epoch {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


@dataclass
class FitResult:
    params: dict
    train_loss: list
    val_loss: list
    epochs_run: int
    best_epoch: int

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def curve_rows(self):
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), 1):
            yield i, tr, va


def gradients(model, batch, lam: float):
    """``(loss, grads)`` for one batch at the model's current weights."""
    P = {k: ad.Value(v) for k, v in model.params.items()}
    loss = model.loss(batch, lam, P)
    ad.backward(loss)
    return loss.item(), {k: P[k].grad for k in P}


def validation_loss(model, trajs, chunk: int = 512) -> float:
    """Unpenalized nested-mean cross-entropy, so runs with different lambdas compare."""
    total, n = 0.0, 0
    for i in range(0, len(trajs), chunk):
        part = trajs[i:i + chunk]
        total += model.loss(make_batch(part), 0.0).item() * len(part)
        n += len(part)
    return total / n


def _set_params(model, new: dict):
    for k, v in new.items():
        model.params[k][...] = v


def fit(model, train, val, config: TrainConfig) -> FitResult:
    """Minibatch Adam with early stopping on validation cross-entropy.

    The model is left holding the best-epoch weights.
    """
    if not train:
        raise ValueError("empty training set")
    state = AdamState()
    best = math.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch, since_best = 0, 0
    train_curve, val_curve = [], []
    for epoch in range(1, config.max_epochs + 1):
        order = named_rng(config.seed, f"batch-{epoch}").permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = make_batch([train[i] for i in idx])
            loss, grads = gradients(model, batch, config.lam)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, epoch - 1)
            new, state = adam_step(model.params, grads, state, config.lr)
            _set_params(model, new)
            total += loss * len(idx)
        vloss = validation_loss(model, val) if val else total / len(train)
        if not math.isfinite(vloss):
            raise TrainingDiverged(epoch, epoch - 1)
        train_curve.append(total / len(train))
        val_curve.append(vloss)
        if vloss < best:
            best, best_epoch, since_best = vloss, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    _set_params(model, best_params)
    log.info("fit %s: %d epochs, best val %.5f at epoch %d", config.model, len(val_curve), best, best_epoch)
    return FitResult(best_params, train_curve, val_curve, len(val_curve), best_epoch)


def train_model(train, val, config: TrainConfig):
    model = build_model(config, train[0].obs_dim, train[0].static_dim)
    return model, fit(model, train, val, config)


@dataclass
class GridResult:
    best: TrainConfig
    report: EvalReport
    table: list  # (config, mean validation loss)


def expand_grid(base: TrainConfig, grids: dict) -> list[TrainConfig]:
    if not grids:
        return [base]
    keys = list(grids)
    for k in keys:
        if not hasattr(base, k):
            raise ValueError(f"unknown grid key {k!r}")
        if not grids[k]:
            raise ValueError(f"empty grid for {k!r}")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grids[k] for k in keys))]


def grid_search(train, val, grids: dict, base: TrainConfig | None = None, seeds=(0,)) -> GridResult:
    """Exhaustive search on validation loss; ties prefer smaller hidden size, then smaller lambda."""
    base = base or TrainConfig()
    table = []
    for cfg in expand_grid(base, grids):
        losses = []
        for s in seeds:
            _, res = train_model(train, val, replace(cfg, seed=s))
            losses.append(res.best_val_loss)
        table.append((cfg, float(np.mean(losses))))
    best_cfg, _ = min(table, key=lambda row: (row[1], row[0].hidden_dim, row[0].lam))
    report = EvalReport()
    for s in seeds:
        model, _ = train_model(train, val, replace(best_cfg, seed=s))
        report.merge(evaluate(model, val))
    return GridResult(best_cfg, report, table)


def bootstrap_eval(trajs, config: TrainConfig, runs: int = 10, seeds=None) -> EvalReport:
    """Re-split, retrain and test ``runs`` times; report mean and standard error per metric."""
    if runs < 2:
        raise ValueError("bootstrap needs at least two runs")
    seeds = list(seeds) if seeds is not None else [config.seed + r for r in range(runs)]
    if len(seeds) != runs:
        raise ValueError("need one seed per run")
    report = EvalReport()
    for s in seeds:
        cfg = replace(config, seed=s)
        train, val, test = split_patients(trajs, cfg.split, s)
        model, _ = train_model(train, val, cfg)
        report.merge(evaluate(model, test))
    return report

"""Comparator policies: recurrent black boxes and logistic regressions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpr import autodiff as ad
from cpr.data import Batch, Trajectory, make_batch
from cpr.encoders import Encoder, EncoderConfig, EncoderState
from cpr.policy import PolicyParams, predict


class BlackBoxModel:
    """Recurrent classifier fed ``[x_t, a_{t-1}]`` with ``a_0 = 0``.

    The trunk state after step ``t`` goes through a one-hidden-layer head to a
    scalar logit for ``a_t``.
    """

    kind = "blackbox"

    def __init__(self, obs_dim: int, hidden_dim: int = 32, cell: str = "rnn", static_dim: int = 0, rng=None):
        self.obs_dim = obs_dim
        cfg = EncoderConfig(cell, hidden_dim, obs_dim, static_dim, out_dim=1, in_dim=obs_dim + 1)
        self.encoder = Encoder(cfg, rng, prefix="rnn")

    @property
    def params(self) -> dict:
        return self.encoder.params

    def config(self) -> dict:
        c = self.encoder.config
        return {"kind": self.kind, "obs_dim": c.obs_dim, "hidden_dim": c.hidden_dim, "cell": c.cell,
                "static_dim": c.static_dim}

    def step_logit(self, state: EncoderState, x, a_prev, P=None):
        """Advance the trunk on ``[x, a_prev]``; return ``(new_state, logit)``."""
        P = self.encoder.bind(P)
        inp = ad.concat([ad.const(x), ad.const(a_prev)], axis=1)
        new = self.encoder.step(state, inp, P)
        return new, self.encoder.emit_params(new, P)

    def forward(self, batch: Batch, P=None):
        enc = self.encoder
        P = enc.bind(P)
        state = enc.init_state(batch.static, batch.size, P)
        a_prev = np.zeros((batch.size, 1))
        states, logits = [], []
        for t in range(batch.horizon):
            states.append(state)
            state, logit = self.step_logit(state, batch.obs[:, t], a_prev, P)
            logits.append(logit)
            a_prev = batch.actions[:, t, None]
        return states, logits

    def loss(self, batch: Batch, lam: float = 0.0, P=None) -> ad.Value:
        # lam is accepted for a uniform training interface; black boxes are unpenalized
        _, logits = self.forward(batch, P)
        probs = ad.sigmoid(ad.concat(logits, axis=1))
        return ad.sum(ad.mul(ad.bce(probs, ad.const(batch.actions)), ad.const(batch.weight)))

    def predict_batch(self, batch: Batch) -> np.ndarray:
        _, logits = self.forward(batch)
        return ad._sigmoid(np.concatenate([z.data for z in logits], axis=1))

    def coefficients(self, batch: Batch, mode: str = "logit") -> np.ndarray:
        """Input gradients at every step, ``(B, T, d)``; see :func:`extract_coeffs`."""
        states, _ = self.forward(batch)
        a_prev = np.zeros((batch.size, 1))
        out = np.zeros((batch.size, batch.horizon, self.obs_dim))
        for t in range(batch.horizon):
            out[:, t] = _input_gradient(self, states[t], batch.obs[:, t], a_prev, mode)
            a_prev = batch.actions[:, t, None]
        return out


def blackbox_forward(model: BlackBoxModel, traj: Trajectory) -> np.ndarray:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return model.predict_batch(make_batch([traj]))[0]


def _input_gradient(model, state: EncoderState, x, a_prev, mode: str) -> np.ndarray:
    if mode not in ("logit", "prob"):
        raise ValueError(f"mode must be 'logit' or 'prob', got {mode!r}")
    frozen = EncoderState(ad.const(state.hidden.data),
                          None if state.cell is None else ad.const(state.cell.data))
    xv = ad.Value(np.atleast_2d(x))
    _, logit = model.step_logit(frozen, xv, np.atleast_2d(a_prev))
    out = ad.sigmoid(logit) if mode == "prob" else logit
    # rows are independent, so the gradient of the sum is the per-row gradient
    ad.backward(ad.sum(out))
    return xv.grad


def extract_coeffs(model: BlackBoxModel, traj: Trajectory, t: int, mode: str = "logit") -> np.ndarray:
    """Gradient of step ``t``'s logit (1-based) w.r.t. ``x_t`` with history state frozen."""
    if not 1 <= t <= len(traj):
        raise ValueError(f"t={t} outside 1..{len(traj)}")
    batch = make_batch([traj])
    states, _ = model.forward(batch)
    a_prev = np.zeros((1, 1)) if t == 1 else batch.actions[:, t - 2, None]
    return _input_gradient(model, states[t - 1], batch.obs[:, t - 1], a_prev, mode)[0]


def _nll_and_grad(w, X1, y, l2):
    z = X1 @ w
    p = ad._sigmoid(z)
    pc = np.clip(p, ad.EPS, 1 - ad.EPS)
    nll = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc)) + 0.5 * l2 * (w[:-1] @ w[:-1])
    g = X1.T @ (p - y) / len(y)
    g[:-1] += l2 * w[:-1]
    return nll, g


def fit_logreg(X, y, l2: float = 0.0, tol: float = 1e-8, max_iter: int = 5000) -> PolicyParams:
    """Full-batch gradient descent with backtracking line search."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X1 = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(X1.shape[1])
    f, g = _nll_and_grad(w, X1, y, l2)
    step = 1.0
    for _ in range(max_iter):
        gg = g @ g
        if np.sqrt(gg) < tol:
            break
        while True:
            w_new = w - step * g
            f_new, g_new = _nll_and_grad(w_new, X1, y, l2)
            if f_new <= f - 0.5 * step * gg or step < 1e-12:
                break
            step *= 0.5
        w, f, g = w_new, f_new, g_new
        step *= 2.0
    return PolicyParams(w[:-1].copy(), float(w[-1]))


def pooled_xy(trajs):
    X = np.concatenate([t.obs for t in trajs])
    y = np.concatenate([t.actions for t in trajs])
    return X, y


class PooledLogReg:
    kind = "logreg"

    def __init__(self, params: PolicyParams):
        self.policy = params

    def predict_proba(self, trajs) -> list[np.ndarray]:
        out = []
        for tr in trajs:
            z = tr.obs @ self.policy.coef + self.policy.intercept
            out.append(ad._sigmoid(z))
        return out

    def coefficient_array(self, traj) -> np.ndarray:
        return np.tile(self.policy.to_vector(), (len(traj), 1))


def fit_pooled_logreg(trajs, l2: float = 0.0) -> PolicyParams:
    X, y = pooled_xy(trajs)
    if len(y) == 0:
        raise ValueError("no observations")
    if y.min() == y.max():
        raise ValueError("logistic regression needs both action classes")
    return fit_logreg(X, y, l2=l2)


def exact_discretizer(t: int, x) -> tuple:
    """Key on the exact observation values; suited to categorical features."""
    return tuple(float(v) for v in np.ravel(x))


class BinDiscretizer:
    """Map each feature to the index of its bin under fixed ``edges``."""

    def __init__(self, edges):
        self.edges = [np.asarray(e, dtype=np.float64) for e in edges]

    def __call__(self, t: int, x) -> tuple:
        x = np.ravel(x)
        return tuple(int(np.digitize(v, e)) for v, e in zip(x, self.edges))


@dataclass
class ConditionSpecificModel:
    """One logistic policy per ``(t, discretized context)``; unseen keys use the pooled fit."""

    pooled: PolicyParams
    per_key: dict = field(default_factory=dict)
    discretizer: object = exact_discretizer
    kind: str = "condition-specific"

    def key(self, t: int, x) -> tuple:
        return (t, self.discretizer(t, x))

    def params_for(self, t: int, x) -> PolicyParams:
        return self.per_key.get(self.key(t, x), self.pooled)

    def predict_proba(self, trajs) -> list[np.ndarray]:
        return [np.array([predict(self.params_for(t, tr.obs[t]), tr.obs[t]) for t in range(len(tr))])
                for tr in trajs]


def fit_condition_specific(trajs, discretizer=exact_discretizer, l2: float = 0.0) -> ConditionSpecificModel:
    """Fit a logistic policy per key; keys with a single action class keep the pooled fit."""
    pooled = fit_pooled_logreg(trajs, l2=l2)
    groups: dict = {}
    for tr in trajs:
        for t in range(len(tr)):
            key = (t, discretizer(t, tr.obs[t]))
            xs, ys = groups.setdefault(key, ([], []))
            xs.append(tr.obs[t])
            ys.append(tr.actions[t])
    model = ConditionSpecificModel(pooled, {}, discretizer)
    if len(groups) == 1:
        (key,) = groups
        model.per_key[key] = pooled
        return model
    for key, (xs, ys) in groups.items():
        ys = np.array(ys)
        if ys.min() == ys.max():
            continue
        model.per_key[key] = fit_logreg(np.array(xs), ys, l2=l2)
    return model

"""Context-specific logistic policies (CPR) and the telescoping global variant.

A CPR model emits ``theta_t = [coef_1..coef_d, intercept]`` from the encoder
state after consuming steps ``1..t-1`` and predicts
``P(a_t = 1) = sigmoid(<coef, x_t> + intercept)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from cpr import autodiff as ad
from cpr.data import Batch, Trajectory, make_batch
from cpr.encoders import Encoder, EncoderConfig

ALPHA_GRID = (0.1, 0.3, 0.5, 0.9)


@dataclass
class PolicyParams:
    coef: np.ndarray
    intercept: float

    @classmethod
    def from_vector(cls, theta) -> "PolicyParams":
        theta = np.asarray(theta, dtype=np.float64).ravel()
        return cls(theta[:-1].copy(), float(theta[-1]))

    def to_vector(self) -> np.ndarray:
        return np.append(self.coef, self.intercept)


def predict(params: PolicyParams, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    coef = np.asarray(params.coef, dtype=np.float64).ravel()
    if x.shape != coef.shape:
        raise ValueError(f"observation has {x.size} features, policy expects {coef.size}")
    z = float(coef @ x) + params.intercept
    return float(ad._sigmoid(np.array(z)))


def _linear_logit(theta: ad.Value, x, d: int) -> ad.Value:
    """Row-wise ``<theta[:, :d], x> + theta[:, d]`` as a ``(B, 1)`` Value."""
    return ad.add(ad.sum(ad.mul(ad.columns(theta, 0, d), ad.const(x)), axis=1), ad.columns(theta, d, d + 1))


def _history_input(batch: Batch, t: int) -> np.ndarray:
    return np.concatenate([batch.obs[:, t], batch.actions[:, t, None]], axis=1)


class CPRModel:
    """Context encoder ``g`` plus a logistic observation-to-action map."""

    kind = "cpr"

    def __init__(self, obs_dim: int, hidden_dim: int = 32, cell: str = "rnn", static_dim: int = 0, rng=None):
        self.obs_dim = obs_dim
        self.encoder = Encoder(EncoderConfig(cell, hidden_dim, obs_dim, static_dim), rng, prefix="g")

    @property
    def params(self) -> dict:
        return self.encoder.params

    def config(self) -> dict:
        c = self.encoder.config
        return {"kind": self.kind, "obs_dim": c.obs_dim, "hidden_dim": c.hidden_dim, "cell": c.cell,
                "static_dim": c.static_dim}

    def forward(self, batch: Batch, P=None):
        """Return ``(thetas, logits)``: lists over t of ``(B, d+1)`` and ``(B, 1)`` Values."""
        enc, d = self.encoder, self.obs_dim
        P = enc.bind(P)
        state = enc.init_state(batch.static, batch.size, P)
        thetas, logits = [], []
        for t in range(batch.horizon):
            theta = enc.emit_params(state, P)
            thetas.append(theta)
            logits.append(_linear_logit(theta, batch.obs[:, t], d))
            if t + 1 < batch.horizon:
                state = enc.step(state, _history_input(batch, t), P)
        return thetas, logits

    def loss(self, batch: Batch, lam: float = 0.0, P=None) -> ad.Value:
        thetas, logits = self.forward(batch, P)
        return cpr_objective(thetas, logits, batch, lam, self.obs_dim)

    def predict_batch(self, batch: Batch) -> np.ndarray:
        _, logits = self.forward(batch)
        return ad._sigmoid(np.concatenate([z.data for z in logits], axis=1))

    def coefficients(self, batch: Batch) -> np.ndarray:
        """``(B, T, d+1)`` array of emitted ``theta_t`` (last column intercept)."""
        thetas, _ = self.forward(batch)
        return np.stack([th.data for th in thetas], axis=1)


def cpr_objective(thetas, logits, batch: Batch, lam: float, d: int) -> ad.Value:
    """Nested-mean BCE plus ``lam`` times the nested mean of ``||coef_t||_1``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    probs = ad.sigmoid(ad.concat(logits, axis=1))
    nll = ad.sum(ad.mul(ad.bce(probs, ad.const(batch.actions)), ad.const(batch.weight)))
    if lam == 0 or not thetas:
        return nll
    coefs = ad.concat([ad.columns(th, 0, d) for th in thetas], axis=1)
    w = np.repeat(batch.weight, d, axis=1)
    return ad.add(nll, ad.mul(ad.sum(ad.mul(ad.absolute(coefs), ad.const(w))), lam))


def cpr_loss(model, trajs, lam: float = 0.0) -> float:
    """Objective value for a list of trajectories (or a prepared batch)."""
    batch = trajs if isinstance(trajs, Batch) else make_batch(list(trajs))
    return model.loss(batch, lam).item()


def cpr_forward(model: CPRModel, traj: Trajectory) -> list[tuple[PolicyParams, float]]:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    batch = make_batch([traj])
    theta = model.coefficients(batch)[0]
    probs = model.predict_batch(batch)[0]
    return [(PolicyParams.from_vector(theta[t]), float(probs[t])) for t in range(len(traj))]


@dataclass
class GlobalBiasState:
    mu: float
    alpha: float
    beta_prev: np.ndarray | None  # effects of [x_{t-1}, a_{t-1}]; None at t = 1


@dataclass
class GlobalTrace:
    """Everything needed to re-expand one trajectory's global log-odds."""

    obs: np.ndarray  # (T, d)
    actions: np.ndarray  # (T,)
    theta: np.ndarray  # (T, d+1)
    beta: np.ndarray  # (T, d+1); beta[s] weights [x_s, a_s] in later biases
    mu: np.ndarray  # (T,)
    logodds: np.ndarray  # (T,)
    alpha: float

    def steps(self):
        probs = ad._sigmoid(self.logodds)
        for t in range(len(self.logodds)):
            beta_prev = self.beta[t - 1].copy() if t > 0 else None
            yield float(self.logodds[t]), float(probs[t]), GlobalBiasState(float(self.mu[t]), self.alpha, beta_prev)


def _check_alpha(alpha):
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


def _global_pass(theta_enc: Encoder, beta_enc: Encoder, alpha: float, batch: Batch, P=None):
    _check_alpha(alpha)
    d = batch.obs.shape[2]
    Pt, Pb = theta_enc.bind(P), beta_enc.bind(P)
    st = theta_enc.init_state(batch.static, batch.size, Pt)
    sb = beta_enc.init_state(batch.static, batch.size, Pb)
    mu = ad.const(np.zeros((batch.size, 1)))
    thetas, betas, mus, logits = [], [], [], []
    for t in range(batch.horizon):
        theta = theta_enc.emit_params(st, Pt)
        beta = beta_enc.emit_params(sb, Pb)
        logit = ad.add(_linear_logit(theta, batch.obs[:, t], d), mu)
        thetas.append(theta)
        betas.append(beta)
        mus.append(mu)
        logits.append(logit)
        if t + 1 < batch.horizon:
            inp = _history_input(batch, t)
            update = ad.sum(ad.mul(beta, ad.const(inp)), axis=1)
            mu = ad.add(ad.mul(update, alpha), ad.mul(mu, 1.0 - alpha))
            st = theta_enc.step(st, inp, Pt)
            sb = beta_enc.step(sb, inp, Pb)
    return thetas, betas, mus, logits


def global_forward(theta_encoder: Encoder, beta_encoder: Encoder, alpha: float, traj: Trajectory):
    """Per-step ``(log-odds, probability, GlobalBiasState)`` for one trajectory."""
    return list(global_trace(theta_encoder, beta_encoder, alpha, traj).steps())


def global_trace(theta_encoder: Encoder, beta_encoder: Encoder, alpha: float, traj: Trajectory) -> GlobalTrace:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    batch = make_batch([traj])
    thetas, betas, mus, logits = _global_pass(theta_encoder, beta_encoder, alpha, batch)
    return GlobalTrace(
        obs=traj.obs.copy(),
        actions=traj.actions.copy(),
        theta=np.concatenate([th.data for th in thetas]),
        beta=np.concatenate([b.data for b in betas]),
        mu=np.array([float(m.data[0, 0]) for m in mus]),
        logodds=np.array([float(z.data[0, 0]) for z in logits]),
        alpha=alpha,
    )


@dataclass
class Contribution:
    target: int  # step whose log-odds this term belongs to (1-based)
    source: int  # step whose observation/action carries the effect (1-based)
    feature: str
    value: float


def explain_global(trace: GlobalTrace, feature_names=None) -> list[Contribution]:
    """Expand every step's log-odds into per-feature linear terms.

    The term from ``m`` steps back carries weight ``alpha * (1 - alpha)**(m-1)``.
    """
    T, d = trace.obs.shape
    names = list(feature_names) if feature_names else [f"x{j}" for j in range(d)]
    a = trace.alpha
    out = []
    for t in range(T):
        for j in range(d):
            out.append(Contribution(t + 1, t + 1, names[j], trace.theta[t, j] * trace.obs[t, j]))
        out.append(Contribution(t + 1, t + 1, "intercept", trace.theta[t, d]))
        for m in range(1, t + 1):
            s = t - m
            w = a * (1.0 - a) ** (m - 1)
            for j in range(d):
                out.append(Contribution(t + 1, s + 1, names[j], w * trace.beta[s, j] * trace.obs[s, j]))
            out.append(Contribution(t + 1, s + 1, "action", w * trace.beta[s, d] * trace.actions[s]))
    return out


def explanation_totals(contribs: list[Contribution], horizon: int) -> np.ndarray:
    totals = np.zeros(horizon)
    for c in contribs:
        totals[c.target - 1] += c.value
    return totals


class CPRGlobalModel:
    """CPR with the telescoping bias; theta and beta come from separate trunks."""

    kind = "cpr-global"

    def __init__(self, obs_dim: int, hidden_dim: int = 32, cell: str = "rnn", static_dim: int = 0,
                 alpha: float = 0.5, rng=None):
        _check_alpha(alpha)
        rng = np.random.default_rng(rng)
        self.obs_dim = obs_dim
        self.alpha = alpha
        self.theta_encoder = Encoder(EncoderConfig(cell, hidden_dim, obs_dim, static_dim), rng, prefix="g")
        self.beta_encoder = Encoder(EncoderConfig(cell, hidden_dim, obs_dim, static_dim), rng, prefix="h")

    @property
    def params(self) -> dict:
        return {**self.theta_encoder.params, **self.beta_encoder.params}

    def config(self) -> dict:
        c = self.theta_encoder.config
        return {"kind": self.kind, "obs_dim": c.obs_dim, "hidden_dim": c.hidden_dim, "cell": c.cell,
                "static_dim": c.static_dim, "alpha": self.alpha}

    def loss(self, batch: Batch, lam: float = 0.0, P=None) -> ad.Value:
        thetas, _, _, logits = _global_pass(self.theta_encoder, self.beta_encoder, self.alpha, batch, P)
        return cpr_objective(thetas, logits, batch, lam, self.obs_dim)

    def predict_batch(self, batch: Batch) -> np.ndarray:
        *_, logits = _global_pass(self.theta_encoder, self.beta_encoder, self.alpha, batch)
        return ad._sigmoid(np.concatenate([z.data for z in logits], axis=1))

    def coefficients(self, batch: Batch) -> np.ndarray:
        thetas, *_ = _global_pass(self.theta_encoder, self.beta_encoder, self.alpha, batch)
        return np.stack([th.data for th in thetas], axis=1)

    def trace(self, traj: Trajectory) -> GlobalTrace:
        return global_trace(self.theta_encoder, self.beta_encoder, self.alpha, traj)


def coefficient_rows(model, trajs: list[Trajectory], feature_names=None):
    """Yield ``(trajectory_id, t, feature, coefficient)`` with 1-based ``t``.

    Each trajectory runs alone so values match :func:`cpr_forward` bitwise
    (batched matmuls may round differently).
    """
    d = trajs[0].obs_dim
    names = list(feature_names) if feature_names else [f"x{j}" for j in range(d)]
    for tr in trajs:
        theta = model.coefficients(make_batch([tr]))[0]
        for t in range(len(tr)):
            for j in range(theta.shape[1]):
                name = names[j] if j < d else "intercept"
                yield tr.id, t + 1, name, float(theta[t, j])


def write_coefficients_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "t", "feature_name", "coefficient"])
        for tid, t, name, value in rows:
            w.writerow([tid, t, name, repr(value)])


def write_contributions_csv(path, explained: dict):
    """``explained`` maps trajectory id to its list of :class:`Contribution`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "t", "source_t", "feature_name", "contribution"])
        for tid, contribs in explained.items():
            for c in contribs:
                w.writerow([tid, c.target, c.source, c.feature, repr(float(c.value))])

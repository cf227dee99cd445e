"""Synthetic decision processes with known per-step logistic policies.

Three families:

* ``heterogeneous``: ``x_t ~ U[-2, 2]``, coefficient
  ``theta_t = x_{t-tau} * (2 a_{t-tau} - 1) + t / T + eps_theta`` with the lag
  term dropped for ``t <= tau``; ``P(a_t = 1) = 1 / (1 + exp(-theta_t x_t + eps_a))``.
  Steps run ``t = 1..T``.
* ``homogeneous``: ``x_t ~ U[-1, 1]``, ``P(a_t = 1) = sigmoid(4 x_{t-1} x_t + (t - 5) / 4)``
  with ``x_{-1} = 0`` and ``t = 0..T-1``.
* ``threshold``: ``x_t ~ U[0, 1]``, act iff ``x_t < 0.5``, reversed when
  ``x_{t-1} >= 0.5`` (``x_{-1} = 0``).  Deterministic actions.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from cpr.data import Trajectory

FAMILIES = ("heterogeneous", "homogeneous", "threshold")

_DEFAULTS = {
    "heterogeneous": {"N": 200, "T": 15},
    "homogeneous": {"N": 2000, "T": 9},
    "threshold": {"N": 2000, "T": 9},
}


@dataclass(frozen=True)
class SimSpec:
    family: str = "heterogeneous"
    N: int | None = None
    T: int | None = None
    tau: int = 4
    sigma_a: float = 0.0
    sigma_theta: float = 0.0
    seed: int = 0
    holdout_frac: float = 0.15

    def resolved(self) -> "SimSpec":
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        d = _DEFAULTS[self.family]
        return replace(self, N=self.N if self.N is not None else d["N"], T=self.T if self.T is not None else d["T"])


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named random sub-stream of ``seed``."""
    return np.random.default_rng([zlib.crc32(name.encode()), int(seed)])


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def heterogeneous_theta(x_lag, a_lag, t: int, T: int, eps_theta: float = 0.0) -> float:
    """True coefficient at 1-based step ``t``; pass ``x_lag=None`` while ``t <= tau``."""
    lag = 0.0 if x_lag is None else x_lag * (2 * a_lag - 1)
    return lag + t / T + eps_theta


def heterogeneous_prob(theta: float, x: float, eps_a: float = 0.0) -> float:
    return 1.0 / (1.0 + np.exp(-theta * x + eps_a))


def homogeneous_params(x_prev: float, t: int) -> tuple[float, float]:
    """``(w, b)`` of the homogeneous policy at 0-based step ``t``."""
    return 4.0 * x_prev, (t - 5) / 4.0


def threshold_action(x_prev: float, x: float) -> int:
    base = 1 if x < 0.5 else 0
    return 1 - base if x_prev >= 0.5 else base


def simulate_heterogeneous(spec: SimSpec) -> list[Trajectory]:
    spec = spec.resolved()
    N, T, tau = spec.N, spec.T, spec.tau
    if T <= tau:
        raise ValueError(f"T={T} must exceed tau={tau}")
    rng = named_rng(spec.seed, "sim")
    out = []
    for i in range(N):
        x = rng.uniform(-2, 2, size=T)
        eps_theta = rng.normal(0, spec.sigma_theta, size=T) if spec.sigma_theta > 0 else np.zeros(T)
        eps_a = rng.normal(0, spec.sigma_a, size=T) if spec.sigma_a > 0 else np.zeros(T)
        u = rng.uniform(size=T)
        a = np.zeros(T)
        theta = np.zeros(T)
        p = np.zeros(T)
        for s in range(T):
            t = s + 1
            if t > tau:
                theta[s] = heterogeneous_theta(x[s - tau], a[s - tau], t, T, eps_theta[s])
            else:
                theta[s] = heterogeneous_theta(None, None, t, T, eps_theta[s])
            p[s] = heterogeneous_prob(theta[s], x[s], eps_a[s])
            a[s] = float(u[s] < p[s])
        truth = {"theta": theta[:, None], "p": p, "eps_a": eps_a}
        out.append(Trajectory(f"het-{i}", x[:, None], a, truth=truth))
    return out


def simulate_homogeneous(spec: SimSpec) -> list[Trajectory]:
    spec = spec.resolved()
    N, T = spec.N, spec.T
    rng = named_rng(spec.seed, "sim")
    out = []
    for i in range(N):
        x = rng.uniform(-1, 1, size=T)
        u = rng.uniform(size=T)
        w = np.zeros(T)
        b = np.zeros(T)
        for t in range(T):
            w[t], b[t] = homogeneous_params(x[t - 1] if t > 0 else 0.0, t)
        p = sigmoid(w * x + b)
        a = (u < p).astype(float)
        out.append(Trajectory(f"hom-{i}", x[:, None], a, truth={"theta": w[:, None], "intercept": b, "p": p}))
    return out


def simulate_threshold(spec: SimSpec) -> list[Trajectory]:
    spec = spec.resolved()
    N, T = spec.N, spec.T
    rng = named_rng(spec.seed, "sim")
    out = []
    for i in range(N):
        x = rng.uniform(0, 1, size=T)
        a = np.array([threshold_action(x[t - 1] if t > 0 else 0.0, x[t]) for t in range(T)], dtype=float)
        truth = {"theta": np.zeros((T, 0)), "p": a.copy()}
        out.append(Trajectory(f"thr-{i}", x[:, None], a, truth=truth))
    return out


def simulate(spec: SimSpec) -> list[Trajectory]:
    fn = {"heterogeneous": simulate_heterogeneous, "homogeneous": simulate_homogeneous,
          "threshold": simulate_threshold}
    spec = spec.resolved()
    return fn[spec.family](spec)


def holdout_split(trajs: list[Trajectory], frac: float, seed: int):
    """Trajectory-level ``(kept, held_out)`` split with ``round(frac * N)`` held out."""
    n_hold = int(round(frac * len(trajs)))
    order = named_rng(seed, "holdout").permutation(len(trajs))
    hold = set(order[:n_hold].tolist())
    kept = [t for i, t in enumerate(trajs) if i not in hold]
    held = [t for i, t in enumerate(trajs) if i in hold]
    return kept, held

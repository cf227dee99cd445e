"""Recurrent history encoders with a one-hidden-layer emission head.

An encoder owns a flat ``params`` dict of float64 arrays.  All methods take an
optional ``P`` dict of bound :class:`~cpr.autodiff.Value` objects (see
:meth:`Encoder.bind`) so the same code serves inference and training.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from cpr import autodiff as ad

CHECKPOINT_FORMAT = "cpr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    cell: str = "rnn"
    hidden_dim: int = 32
    obs_dim: int = 1
    static_dim: int = 0
    out_dim: int | None = None
    # size of each per-step input; CPR feeds [x, a] so this is obs_dim + 1
    in_dim: int | None = None

    def __post_init__(self):
        self.cell = self.cell.lower()
        if self.cell not in ("rnn", "lstm"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.hidden_dim < 1 or self.obs_dim < 1 or self.static_dim < 0:
            raise ValueError("dimensions must be positive")
        if self.out_dim is None:
            self.out_dim = self.obs_dim + 1
        if self.in_dim is None:
            self.in_dim = self.obs_dim + 1


@dataclass
class EncoderState:
    hidden: ad.Value
    cell: ad.Value | None = None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    def __init__(self, config: EncoderConfig, rng=None, prefix: str = "g"):
        self.config = config
        self.prefix = prefix
        rng = np.random.default_rng(rng)
        k, n_in, out = config.hidden_dim, config.in_dim, config.out_dim
        gates = 4 * k if config.cell == "lstm" else k
        shapes = {
            "W_in": (n_in, gates, k),
            "W_h": (k, gates, k),
            "b": (1, gates, k),
            "W1": (k, k, k),
            "b1": (1, k, k),
            "W2": (k, out, k),
            "b2": (1, out, k),
        }
        if config.static_dim:
            shapes["W_s"] = (config.static_dim, k, config.static_dim)
            shapes["b_s"] = (1, k, config.static_dim)
        self.params = {}
        for name, (rows, cols, fan_in) in shapes.items():
            self.params[self.key(name)] = _uniform(rng, fan_in, (rows, cols))

    def key(self, name: str) -> str:
        return f"{self.prefix}.{name}"

    def bind(self, P=None):
        if P is not None:
            return P
        return {k: ad.const(v) for k, v in self.params.items()}

    def _p(self, P, name):
        return P[self.key(name)]

    def init_state(self, static_ctx=None, batch: int = 1, P=None) -> EncoderState:
        """Zero state, or ``tanh(static @ W_s + b_s)`` when static context is configured."""
        cfg = self.config
        P = self.bind(P)
        k = cfg.hidden_dim
        if cfg.static_dim == 0:
            if static_ctx is not None and np.size(static_ctx) > 0:
                raise ValueError("static context given to an encoder without static inputs")
            hidden = ad.const(np.zeros((batch, k)))
        else:
            if static_ctx is None:
                raise ValueError(f"encoder expects static context of length {cfg.static_dim}")
            s = np.atleast_2d(np.asarray(static_ctx, dtype=np.float64))
            if s.shape[1] != cfg.static_dim:
                raise ValueError(f"static context length {s.shape[1]} != {cfg.static_dim}")
            hidden = ad.tanh(ad.add(ad.matmul(ad.const(s), self._p(P, "W_s")), self._p(P, "b_s")))
        cell = ad.const(np.zeros(hidden.shape)) if cfg.cell == "lstm" else None
        return EncoderState(hidden, cell)

    def step(self, state: EncoderState, inp, P=None) -> EncoderState:
        """Consume one ``(B, in_dim)`` input, e.g. ``[x_prev, a_prev]``."""
        P = self.bind(P)
        inp = ad.const(inp)
        if inp.data.ndim == 1:
            inp = ad.const(inp.data[None, :])
        if inp.shape[-1] != self.config.in_dim:
            raise ValueError(f"step input width {inp.shape[-1]} != {self.config.in_dim}")
        if np.isnan(inp.data).any():
            raise ValueError("NaN in encoder input")
        z = ad.add(
            ad.add(ad.matmul(inp, self._p(P, "W_in")), ad.matmul(state.hidden, self._p(P, "W_h"))),
            self._p(P, "b"),
        )
        if self.config.cell == "rnn":
            return EncoderState(ad.tanh(z))
        k = self.config.hidden_dim
        i = ad.sigmoid(ad.columns(z, 0, k))
        f = ad.sigmoid(ad.columns(z, k, 2 * k))
        g = ad.tanh(ad.columns(z, 2 * k, 3 * k))
        o = ad.sigmoid(ad.columns(z, 3 * k, 4 * k))
        c = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        return EncoderState(ad.mul(o, ad.tanh(c)), c)

    def emit_params(self, state: EncoderState, P=None) -> ad.Value:
        P = self.bind(P)
        hid = ad.tanh(ad.add(ad.matmul(state.hidden, self._p(P, "W1")), self._p(P, "b1")))
        return ad.add(ad.matmul(hid, self._p(P, "W2")), self._p(P, "b2"))

    def initial_params(self, static_ctx=None) -> np.ndarray:
        """Emission before any history step, as a plain array."""
        batch = 1 if static_ctx is None else np.atleast_2d(static_ctx).shape[0]
        return self.emit_params(self.init_state(static_ctx, batch=batch)).data


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write named tensors as JSON; floats use repr so load is bitwise exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(np.shape(arr)), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in tensors.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    tensors = {
        t["name"]: np.array(t["values"], dtype=np.float64).reshape(t["shape"]) for t in doc["tensors"]
    }
    return tensors, doc["meta"]


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)

"""Trajectory records, padded batches, and the JSONL wire format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


# scalar per-step truth fields carried through the wire format when present
OPTIONAL_TRUTH = ("intercept", "eps_a")


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    """One agent's observations ``(T, d)`` and binary actions ``(T,)``.

    ``truth`` is only set for simulated data: ``theta`` is ``(T, d)``,
    ``p`` is ``(T,)`` and ``intercept`` is ``(T,)`` when the generating
    policy has one.
    """

    id: str
    obs: np.ndarray
    actions: np.ndarray
    static: np.ndarray | None = None
    truth: dict | None = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim == 1:
            self.obs = self.obs[:, None]
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.static is not None:
            self.static = np.asarray(self.static, dtype=np.float64)
        validate(self)

    def __len__(self):
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def static_dim(self) -> int:
        return 0 if self.static is None else len(self.static)


def validate(traj: Trajectory):
    if traj.obs.ndim != 2:
        raise DatasetError(f"trajectory {traj.id}: obs must be a list of equal-length rows")
    if traj.actions.ndim != 1 or len(traj.actions) != len(traj.obs):
        raise DatasetError(
            f"trajectory {traj.id}: {len(traj.actions)} actions for {len(traj.obs)} observations"
        )
    if len(traj.actions) == 0:
        raise DatasetError(f"trajectory {traj.id}: empty")
    if not np.all((traj.actions == 0) | (traj.actions == 1)):
        raise DatasetError(f"trajectory {traj.id}: actions must be 0/1")
    if not np.all(np.isfinite(traj.obs)):
        raise DatasetError(f"trajectory {traj.id}: non-finite observation")


@dataclass
class Batch:
    """Trajectories padded to a common length.

    ``weight[i, t]`` is ``1 / (T_i * B)`` on real steps and 0 on padding, so a
    weighted sum over steps gives the mean over patients of per-patient means.
    """

    obs: np.ndarray  # (B, T, d)
    actions: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T)
    weight: np.ndarray  # (B, T)
    static: np.ndarray | None  # (B, s)
    lengths: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]


def make_batch(trajs: list[Trajectory]) -> Batch:
    if not trajs:
        raise DatasetError("no trajectories")
    d = trajs[0].obs_dim
    B, T = len(trajs), max(len(t) for t in trajs)
    obs = np.zeros((B, T, d))
    actions = np.zeros((B, T))
    mask = np.zeros((B, T))
    lengths = np.array([len(t) for t in trajs])
    for i, tr in enumerate(trajs):
        n = len(tr)
        obs[i, :n] = tr.obs
        actions[i, :n] = tr.actions
        mask[i, :n] = 1.0
    weight = mask / lengths[:, None] / B
    static = None
    if trajs[0].static is not None:
        static = np.stack([t.static for t in trajs])
    return Batch(obs, actions, mask, weight, static, lengths, [t.id for t in trajs])


def check_consistent(trajs: list[Trajectory]):
    if not trajs:
        raise DatasetError("no trajectories")
    d0, s0 = trajs[0].obs_dim, trajs[0].static_dim
    for t in trajs[1:]:
        if t.obs_dim != d0:
            raise DatasetError(f"trajectory {t.id}: obs dim {t.obs_dim} != {d0}")
        if t.static_dim != s0:
            raise DatasetError(f"trajectory {t.id}: static dim {t.static_dim} != {s0}")


def to_record(traj: Trajectory) -> dict:
    rec = {
        "id": traj.id,
        "obs": traj.obs.tolist(),
        "actions": [int(a) for a in traj.actions],
    }
    if traj.static is not None:
        rec["static"] = traj.static.tolist()
    if traj.truth is not None:
        steps = []
        for t in range(len(traj)):
            theta = traj.truth.get("theta")
            step = {"theta": [] if theta is None else np.asarray(theta[t]).tolist(), "p": float(traj.truth["p"][t])}
            for key in OPTIONAL_TRUTH:
                if key in traj.truth:
                    step[key] = float(traj.truth[key][t])
            steps.append(step)
        rec["truth"] = steps
    return rec


def from_record(rec: dict) -> Trajectory:
    for key in ("id", "obs", "actions"):
        if key not in rec:
            raise DatasetError(f"record missing {key!r}")
    obs = rec["obs"]
    if len({len(row) for row in obs}) > 1:
        raise DatasetError(f"trajectory {rec['id']}: ragged obs rows")
    truth = None
    if rec.get("truth") is not None:
        steps = rec["truth"]
        if len(steps) != len(rec["actions"]):
            raise DatasetError(f"trajectory {rec['id']}: truth length mismatch")
        truth = {
            "theta": np.array([s["theta"] for s in steps], dtype=np.float64).reshape(len(steps), -1),
            "p": np.array([s["p"] for s in steps], dtype=np.float64),
        }
        for key in OPTIONAL_TRUTH:
            if all(key in s for s in steps):
                truth[key] = np.array([s[key] for s in steps], dtype=np.float64)
    return Trajectory(str(rec["id"]), obs, rec["actions"], rec.get("static"), truth)


def save_dataset(trajs: list[Trajectory], path):
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(to_record(t)) + "\n")


def load_dataset(path) -> list[Trajectory]:
    trajs = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed JSON ({e.msg})") from None
            try:
                trajs.append(from_record(rec))
            except (DatasetError, TypeError, ValueError) as e:
                raise DatasetError(f"line {lineno}: {e}") from None
    if not trajs:
        raise DatasetError("no trajectories")
    check_consistent(trajs)
    return trajs

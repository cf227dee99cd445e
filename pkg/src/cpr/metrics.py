"""Action-matching and parameter-recovery metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate; tied pairs count one half."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s)  # midranks for ties
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum of (R_i - R_{i-1}) * P_i over distinct thresholds."""
    s, y = _scored(scores, labels)
    n_pos = y.sum()
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def brier(scores, labels) -> float:
    s, y = _scored(scores, labels)
    if s.size and (s.min() < 0 or s.max() > 1):
        raise MetricError("Brier score needs probabilities in [0, 1]")
    return float(np.mean((s - y) ** 2))


def cross_entropy(scores, labels, eps: float = 1e-7) -> float:
    s, y = _scored(scores, labels)
    s = np.clip(s, eps, 1 - eps)
    return float(-np.mean(y * np.log(s) + (1 - y) * np.log1p(-s)))


def pearson(estimated, truth) -> float:
    x = np.asarray(estimated, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise MetricError("pearson needs two vectors of equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise MetricError("pearson undefined for zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


@dataclass
class EvalReport:
    """Named metrics, each with per-run values; serialized as mean/stderr/n_runs."""

    runs: dict = field(default_factory=dict)

    def add(self, name: str, value):
        self.runs.setdefault(name, []).append(value)

    def merge(self, values: dict):
        for k, v in values.items():
            self.add(k, v)

    def mean(self, name: str) -> float | None:
        vals = [v for v in self.runs[name] if v is not None]
        return float(np.mean(vals)) if vals else None

    def stderr(self, name: str) -> float | None:
        vals = [v for v in self.runs[name] if v is not None]
        if len(vals) < 2:
            return None
        return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))

    def to_dict(self) -> dict:
        return {k: {"mean": self.mean(k), "stderr": self.stderr(k), "n_runs": len(v)} for k, v in self.runs.items()}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def predicted_probs(model, trajs) -> list[np.ndarray]:
    """Per-trajectory action probabilities for any model in this package."""
    if hasattr(model, "predict_batch"):
        from cpr.data import make_batch

        out = []
        for i in range(0, len(trajs), 256):
            chunk = trajs[i:i + 256]
            probs = model.predict_batch(make_batch(chunk))
            out.extend(probs[b, :len(tr)] for b, tr in enumerate(chunk))
        return out
    return model.predict_proba(trajs)


def estimated_coefficients(model, trajs) -> list[np.ndarray]:
    """Per-trajectory ``(T, d)`` coefficient estimates (intercepts dropped)."""
    from cpr.data import make_batch

    out = []
    for i in range(0, len(trajs), 256):
        chunk = trajs[i:i + 256]
        coefs = model.coefficients(make_batch(chunk))
        d = chunk[0].obs_dim
        out.extend(coefs[b, :len(tr), :d] for b, tr in enumerate(chunk))
    return out


def action_metrics(model, trajs) -> dict:
    probs = np.concatenate(predicted_probs(model, trajs))
    labels = np.concatenate([t.actions for t in trajs])
    out = {"brier": brier(probs, labels), "cross_entropy": cross_entropy(probs, labels)}
    for name, fn in (("auroc", auroc), ("auprc", auprc)):
        try:
            out[name] = fn(probs, labels)
        except MetricError:
            out[name] = None
    return out


def _safe_pearson(a, b):
    try:
        return pearson(a, b)
    except MetricError:
        return None


def recovery_metrics(model, trajs) -> dict:
    """Pooled Pearson correlations of estimated vs. true probabilities and coefficients.

    A value is ``None`` when undefined (zero variance in either vector).
    """
    if any(t.truth is None for t in trajs):
        raise MetricError("recovery metrics need trajectories with ground truth")
    probs = np.concatenate(predicted_probs(model, trajs))
    true_p = np.concatenate([t.truth["p"] for t in trajs])
    out = {"pearson_prob": _safe_pearson(probs, true_p)}
    true_theta = [t.truth["theta"] for t in trajs]
    if hasattr(model, "coefficients") and all(th.size for th in true_theta):
        est = np.concatenate([c.ravel() for c in estimated_coefficients(model, trajs)])
        out["pearson_coef"] = _safe_pearson(est, np.concatenate([th.ravel() for th in true_theta]))
    return out


def recovery_report(model, trajs) -> EvalReport:
    report = EvalReport()
    report.merge(recovery_metrics(model, trajs))
    return report


def evaluate(model, trajs) -> dict:
    out = action_metrics(model, trajs)
    if all(t.truth is not None for t in trajs):
        out.update(recovery_metrics(model, trajs))
    return out

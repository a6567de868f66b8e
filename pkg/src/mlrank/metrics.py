"""Rank correlations and example-based F1 for multi-label rankings.

All three correlations are built on the same pair classification: every
unordered class pair is concordant, discordant, tied in the truth only,
tied in the scores only, or tied in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .core import LabelRanking


class UndefinedCorrelation(ValueError):
    """The correlation has a zero denominator (e.g. everything tied)."""


class PairCounts(NamedTuple):
    C: int
    D: int
    T_truth: int
    T_score: int
    T_both: int


def _as_ranks(truth) -> np.ndarray:
    if isinstance(truth, LabelRanking):
        return truth.as_array()
    return np.asarray(truth)


def pair_counts_batch(truth, scores) -> np.ndarray:
    """``(n, 5)`` int array of (C, D, T_truth, T_score, T_both) per row."""
    a = np.atleast_2d(np.asarray(truth, dtype=float))
    b = np.atleast_2d(np.asarray(scores, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"truth {a.shape} and scores {b.shape} differ in shape")
    if a.shape[1] < 2:
        raise ValueError("need at least 2 classes to form a pair")
    u, v = np.triu_indices(a.shape[1], 1)
    sa = np.sign(a[:, u] - a[:, v])
    sb = np.sign(b[:, u] - b[:, v])
    prod = sa * sb
    return np.stack(
        [
            (prod > 0).sum(1),
            (prod < 0).sum(1),
            ((sa == 0) & (sb != 0)).sum(1),
            ((sa != 0) & (sb == 0)).sum(1),
            ((sa == 0) & (sb == 0)).sum(1),
        ],
        axis=1,
    ).astype(np.int64)


def pair_counts(truth, scores) -> PairCounts:
    return PairCounts(*(int(x) for x in pair_counts_batch(_as_ranks(truth), scores)[0]))


def _tau_b_from_counts(c: np.ndarray) -> np.ndarray:
    C, D, Tt, Ts = (c[:, k].astype(float) for k in range(4))
    den = np.sqrt((C + D + Ts) * (C + D + Tt))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (C - D) / np.where(den > 0, den, 1.0), np.nan)


def _gamma_from_counts(c: np.ndarray) -> np.ndarray:
    C, D = c[:, 0].astype(float), c[:, 1].astype(float)
    den = C + D
    return np.where(den > 0, (C - D) / np.where(den > 0, den, 1.0), np.nan)


def doubled_midranks(x) -> np.ndarray:
    """Twice the fractional (mid) ranks along the last axis, as integers.

    Doubling keeps tied averages integral: for element j,
    ``2 * #{k: x_k < x_j} + #{k: x_k == x_j} + 1``.
    """
    x = np.asarray(x, dtype=float)
    less = (x[..., None, :] < x[..., :, None]).sum(-1)
    equal = (x[..., None, :] == x[..., :, None]).sum(-1)
    return 2 * less + equal + 1


def spearman_batch(truth, scores) -> np.ndarray:
    a = doubled_midranks(np.atleast_2d(truth)).astype(np.int64)
    b = doubled_midranks(np.atleast_2d(scores)).astype(np.int64)
    n = a.shape[1]
    sab = n * (a * b).sum(1) - a.sum(1) * b.sum(1)
    saa = n * (a * a).sum(1) - a.sum(1) ** 2
    sbb = n * (b * b).sum(1) - b.sum(1) ** 2
    den = saa.astype(float) * sbb.astype(float)
    return np.where(den > 0, sab / np.sqrt(np.where(den > 0, den, 1.0)), np.nan)


def kendall_tau_b(truth, scores) -> float:
    value = _tau_b_from_counts(pair_counts_batch(_as_ranks(truth), scores))[0]
    if math.isnan(value):
        raise UndefinedCorrelation("tau-b undefined: one side is completely tied")
    return float(value)


def spearman_rho(truth, scores) -> float:
    value = spearman_batch(_as_ranks(truth), scores)[0]
    if math.isnan(value):
        raise UndefinedCorrelation("Spearman rho undefined: zero rank variance")
    return float(value)


def gk_gamma(truth, scores) -> float:
    value = _gamma_from_counts(pair_counts_batch(_as_ranks(truth), scores))[0]
    if math.isnan(value):
        raise UndefinedCorrelation("gamma undefined: no untied pairs")
    return float(value)


def example_f1(truth_positives, predicted_positives) -> float:
    """Per-instance F1; two empty sets count as a perfect match."""
    t, p = set(truth_positives), set(predicted_positives)
    if not t and not p:
        return 1.0
    return 2.0 * len(t & p) / (len(t) + len(p))


def f1_batch(truth_pos: np.ndarray, pred_pos: np.ndarray) -> np.ndarray:
    t = np.asarray(truth_pos, dtype=bool)
    p = np.asarray(pred_pos, dtype=bool)
    inter = (t & p).sum(1)
    den = t.sum(1) + p.sum(1)
    return np.where(den > 0, 2.0 * inter / np.where(den > 0, den, 1), 1.0)


@dataclass
class MetricReport:
    """Dataset-level metrics, scaled by 100."""

    tau_b: float
    spearman_rho: float
    gamma: float
    f1: float
    n_instances: int
    per_instance: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    n_undefined: dict[str, int] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {"tau_b": self.tau_b, "spearman_rho": self.spearman_rho, "gamma": self.gamma, "f1": self.f1}


class Predictor(Protocol):
    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


def collapse_negatives(scores: np.ndarray, pred_pos: np.ndarray) -> np.ndarray:
    """Tie every predicted-negative label at the bottom of the ranking."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    floor = scores.min(axis=1, keepdims=True) - 1.0
    return np.where(np.asarray(pred_pos, dtype=bool), scores, floor)


def _nanmean100(x: np.ndarray) -> float:
    ok = ~np.isnan(x)
    return float(100.0 * x[ok].mean()) if ok.any() else float("nan")


def report_from_predictions(ranks, scores, pred_pos, collapse=True) -> MetricReport:
    """Score a batch of predictions over all K labels per instance.

    With ``collapse`` the predicted negatives are tied below every
    predicted positive, so the ranking compared against the truth is the
    model's full multi-label ranking (bipartition plus order).
    """
    ranks = np.atleast_2d(np.asarray(ranks))
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    pred_pos = np.atleast_2d(np.asarray(pred_pos, dtype=bool))
    if ranks.shape != scores.shape or ranks.shape != pred_pos.shape:
        raise ValueError(f"shape mismatch: truth {ranks.shape}, scores {scores.shape}")
    if ranks.shape[0] == 0:
        raise ValueError("cannot evaluate an empty dataset")
    eff = collapse_negatives(scores, pred_pos) if collapse else scores
    counts = pair_counts_batch(ranks, eff)
    per = {
        "tau_b": _tau_b_from_counts(counts),
        "spearman_rho": spearman_batch(ranks, eff),
        "gamma": _gamma_from_counts(counts),
        "f1": f1_batch(ranks > 0, pred_pos),
    }
    return MetricReport(
        tau_b=_nanmean100(per["tau_b"]),
        spearman_rho=_nanmean100(per["spearman_rho"]),
        gamma=_nanmean100(per["gamma"]),
        f1=_nanmean100(per["f1"]),
        n_instances=int(ranks.shape[0]),
        per_instance=per,
        n_undefined={k: int(np.isnan(v).sum()) for k, v in per.items()},
    )


def evaluate(model: Predictor, dataset, collapse=True) -> MetricReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if hasattr(model, "predict_dataset"):
        scores, pred_pos = model.predict_dataset(dataset)
    else:
        scores, pred_pos = model.predict(dataset.flat_features())
    if scores.shape != dataset.ranks.shape:
        raise ValueError(f"model predicts {scores.shape[1]} classes, dataset has K={dataset.K}")
    return report_from_predictions(dataset.ranks, scores, pred_pos, collapse=collapse)


def positive_pair_tau_b(ranks, scores) -> np.ndarray:
    """tau-b restricted to the truly positive classes of each instance.

    NaN where fewer than two positives exist or the positives are all tied.
    """
    ranks = np.atleast_2d(np.asarray(ranks))
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    out = np.full(ranks.shape[0], np.nan)
    for i in range(ranks.shape[0]):
        pos = np.flatnonzero(ranks[i] > 0)
        if pos.size >= 2:
            out[i] = _tau_b_from_counts(pair_counts_batch(ranks[i, pos], scores[i, pos]))[0]
    return out

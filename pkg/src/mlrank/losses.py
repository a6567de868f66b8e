"""Training objectives: UniMLR, LSEP and calibrated RPC, weak and strong.

Each objective comes in two layers. The ``*_batch`` functions take rank
arrays of shape ``(n, K)`` plus head outputs, and return the batch-mean
loss, the per-instance losses and the gradient of the batch mean with
respect to the head outputs. The per-instance functions (``unimlr_loss``
and friends) wrap them for a single ``LabelRanking``.

Per-instance losses are sums over classes and pairs; only the batch is
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelRanking, PairMode, pair_matrix
from .gaussmath import inv_mills, log_ndtr


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GaussianPrediction:
    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mu.shape != var.shape or mu.ndim != 1:
            raise ShapeMismatch(f"mu {mu.shape} and var {var.shape} must be equal-length vectors")
        if np.any(var <= 0):
            raise ValueError("predicted variances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def K(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class ScorePrediction:
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("scores must be a finite vector")
        object.__setattr__(self, "scores", s)

    @property
    def K(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class LossResult:
    """Loss value and gradient, laid out like the head output.

    For Gaussian heads the gradient is ``[d/dmu..., d/dvar...]`` (length 2K).
    """

    value: float
    grad: np.ndarray


def _ranks2d(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    return r[None, :] if r.ndim == 1 else r


def _check_k(ranks: np.ndarray, *arrays: np.ndarray):
    for a in arrays:
        if a.shape != ranks.shape:
            raise ShapeMismatch(f"head output shape {a.shape} does not match labels {ranks.shape}")


# ---------------------------------------------------------------------------
# UniMLR


def unimlr_batch(mu, var, ranks, mode=PairMode.STRONG):
    """Gaussian significance loss over a batch.

    Returns ``(mean_loss, per_instance, dmu, dvar)`` where the gradients are
    of the batch mean.
    """
    ranks = _ranks2d(ranks)
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    var = np.atleast_2d(np.asarray(var, dtype=float))
    _check_k(ranks, mu, var)
    if np.any(var <= 0):
        raise ValueError("predicted variances must be positive")
    n = ranks.shape[0]
    sigma = np.sqrt(var)

    # classification part: positives want s >= 0, negatives s < 0
    sign = np.where(ranks > 0, 1.0, -1.0)
    t = sign * mu / sigma
    per = -log_ndtr(t).sum(axis=1)
    ratio = inv_mills(t)
    dmu = -sign * ratio / sigma
    dsigma = t * ratio / sigma

    # ranking part over the bucket-order pairs
    dvar = dsigma / (2.0 * sigma)
    ii, uu, vv = np.nonzero(pair_matrix(ranks, mode))
    if ii.size:
        sd = np.sqrt(var[ii, uu] + var[ii, vv])
        td = (mu[ii, uu] - mu[ii, vv]) / sd
        per += np.bincount(ii, weights=-log_ndtr(td), minlength=n)
        r = inv_mills(td)
        g_mu = -r / sd
        g_var = td * r / sd / (2.0 * sd)
        np.add.at(dmu, (ii, uu), g_mu)
        np.add.at(dmu, (ii, vv), -g_mu)
        np.add.at(dvar, (ii, uu), g_var)
        np.add.at(dvar, (ii, vv), g_var)
    return float(per.mean()), per, dmu / n, dvar / n


def unimlr_loss(pred: GaussianPrediction, truth: LabelRanking, mode=PairMode.STRONG) -> LossResult:
    if pred.K != truth.K:
        raise ShapeMismatch(f"prediction has K={pred.K}, labels have K={truth.K}")
    value, _, dmu, dvar = unimlr_batch(pred.mu[None], pred.var[None], truth.as_array(), mode)
    return LossResult(value, np.concatenate([dmu[0], dvar[0]]))


# ---------------------------------------------------------------------------
# LSEP


def lsep_batch(scores, ranks, mode=PairMode.STRONG):
    """``log(1 + sum_{(u,v)} exp(s_v - s_u))`` per instance."""
    ranks = _ranks2d(ranks)
    s = np.asarray(scores, dtype=float)
    s = s[None] if s.ndim == 1 else s
    _check_k(ranks, s)
    n = ranks.shape[0]
    ii, uu, vv = np.nonzero(pair_matrix(ranks, mode))
    per = np.zeros(n)
    grad = np.zeros_like(s)
    if ii.size:
        e = s[ii, vv] - s[ii, uu]
        m = np.zeros(n)
        np.maximum.at(m, ii, e)
        acc = np.bincount(ii, weights=np.exp(e - m[ii]), minlength=n)
        per = m + np.log(np.exp(-m) + acc)
        w = np.exp(e - per[ii])
        np.add.at(grad, (ii, vv), w)
        np.add.at(grad, (ii, uu), -w)
    return float(per.mean()), per, grad / n


def lsep_loss(pred: ScorePrediction, truth: LabelRanking, mode=PairMode.STRONG) -> LossResult:
    if pred.K != truth.K:
        raise ShapeMismatch(f"prediction has K={pred.K}, labels have K={truth.K}")
    value, _, grad = lsep_batch(pred.scores[None], truth.as_array(), mode)
    return LossResult(value, grad[0])


# ---------------------------------------------------------------------------
# Calibrated RPC


def crpc_pairs(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Class ids ``(u, v)``, u < v, of the K(K-1)/2 pair heads in head order."""
    return np.triu_indices(K, 1)


def n_crpc_heads(K: int) -> int:
    return K * (K - 1) // 2 + K


def crpc_targets(truth, mode=PairMode.STRONG) -> tuple[np.ndarray, np.ndarray]:
    """Binary head targets and a mask of heads that carry a target.

    Pair heads come first (lexicographic ``u < v``; target 1 means u beats v),
    followed by K calibration heads (label vs. the virtual label).
    Works on a single ranking or an ``(n, K)`` rank array.
    """
    ranks = truth.as_array() if isinstance(truth, LabelRanking) else np.asarray(truth)
    single = ranks.ndim == 1
    ranks = _ranks2d(ranks)
    K = ranks.shape[1]
    u, v = crpc_pairs(K)
    M = pair_matrix(ranks, mode)
    above = M[:, u, v]
    below = M[:, v, u]
    targets = np.concatenate([above.astype(float), (ranks > 0).astype(float)], axis=1)
    present = np.concatenate([above | below, np.ones_like(ranks, dtype=bool)], axis=1)
    if single:
        return targets[0], present[0]
    return targets, present


def crpc_batch(logits, ranks, mode=PairMode.STRONG):
    """Summed logistic loss over the heads that have a target."""
    ranks = _ranks2d(ranks)
    z = np.asarray(logits, dtype=float)
    z = z[None] if z.ndim == 1 else z
    K = ranks.shape[1]
    if z.shape != (ranks.shape[0], n_crpc_heads(K)):
        raise ShapeMismatch(f"expected {n_crpc_heads(K)} heads for K={K}, got shape {z.shape}")
    n = ranks.shape[0]
    t, present = crpc_targets(ranks, mode)
    bce = np.logaddexp(0.0, z) - t * z
    per = np.where(present, bce, 0.0).sum(axis=1)
    grad = np.where(present, _sigmoid(z) - t, 0.0)
    return float(per.mean()), per, grad / n


def crpc_loss(logits, truth: LabelRanking, mode=PairMode.STRONG) -> LossResult:
    value, _, grad = crpc_batch(np.asarray(logits, dtype=float)[None], truth.as_array(), mode)
    return LossResult(value, grad[0])


def crpc_aggregate(pair_probs, calib_probs) -> tuple[np.ndarray, np.ndarray]:
    """Soft Borda count over the pair heads plus the calibration heads.

    Returns ``(scores, virtual_votes)``: ``scores[..., j]`` sums j's win
    probabilities against every other label and against the virtual label;
    the virtual label collects ``sum_j (1 - calib_j)``. Labels scoring above
    the virtual label's count are predicted positive. Accepts a single
    instance or a leading batch axis.
    """
    p = np.asarray(pair_probs, dtype=float)
    c = np.asarray(calib_probs, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any((c < 0) | (c > 1)):
        raise ValueError("vote probabilities must lie in [0, 1]")
    K = c.shape[-1]
    if p.shape[-1] != K * (K - 1) // 2:
        raise ShapeMismatch(f"expected {K * (K - 1) // 2} pair probabilities for K={K}, got {p.shape[-1]}")
    u, v = crpc_pairs(K)
    scores = c.copy()
    for h in range(u.size):
        scores[..., u[h]] += p[..., h]
        scores[..., v[h]] += 1.0 - p[..., h]
    virtual = (1.0 - c).sum(axis=-1)
    return scores, virtual


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid

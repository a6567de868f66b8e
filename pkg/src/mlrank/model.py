"""Numpy MLP with hand-written backprop, method heads and the training loop.

Head layouts (columns of the network output):

* ``unimlr``: ``[mu_1..mu_K, v_1..v_K]`` with ``sigma = softplus(v) + floor``
  and predicted variance ``sigma**2``.
* ``lsep``: ``K`` raw scores.
* ``crpc``: ``K(K-1)/2`` pair logits (lexicographic ``u < v``) followed by
  ``K`` calibration logits.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import PairMode
from .datagen.rmnist import image_features
from .losses import crpc_aggregate, crpc_batch, lsep_batch, n_crpc_heads, sigmoid, unimlr_batch
from .metrics import _tau_b_from_counts, collapse_negatives, pair_counts_batch

log = logging.getLogger(__name__)


class Method(enum.Enum):
    UNIMLR = "unimlr"
    LSEP = "lsep"
    CRPC = "crpc"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected unimlr, lsep or crpc") from None


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""


class StaleCache(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "unimlr"
    mode: str = "strong"
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    var_floor: float = 1e-3
    val_fraction: float = 0.1
    # average-pool factor applied to image datasets before the first layer
    pool: int = 1

    def __post_init__(self):
        self.method = Method.parse(self.method).value
        self.mode = PairMode.parse(self.mode).value
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h <= 0 for h in self.hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden}")
        if self.lr < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning rate must be >= 0, batch size and epochs positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        if self.pool < 1:
            raise ValueError(f"pool must be >= 1, got {self.pool}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def out_dim(method, K: int) -> int:
    method = Method.parse(method)
    if method is Method.UNIMLR:
        return 2 * K
    if method is Method.LSEP:
        return K
    return n_crpc_heads(K)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    method: str
    mode: str
    K: int
    input_dim: int
    hidden: tuple[int, ...]
    var_floor: float = 1e-3
    seed: int = 0
    # LSEP decision threshold, tuned on validation after training
    threshold: float = 0.0
    pool: int = 1

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, out_dim(self.method, self.K)]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, features)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def init(config: TrainConfig, input_dim: int, K: int) -> MlpParams:
    if input_dim <= 0 or K <= 0:
        raise ValueError(f"invalid dimensions input_dim={input_dim}, K={K}")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    sizes = [input_dim, *config.hidden, out_dim(config.method, K)]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    # output layer: smaller fan-in scale, no ReLU follows it
    weights[-1] *= math.sqrt(1.0 / 6.0)
    if Method.parse(config.method) is Method.UNIMLR:
        biases[-1][K:] = _inv_softplus(1.0 - config.var_floor)
    return MlpParams(
        weights=weights,
        biases=biases,
        method=config.method,
        mode=config.mode,
        K=K,
        input_dim=input_dim,
        hidden=config.hidden,
        var_floor=config.var_floor,
        seed=config.seed,
        pool=config.pool,
    )


@dataclass
class Cache:
    params_id: int
    activations: list[np.ndarray]
    out: np.ndarray


def forward(params: MlpParams, X: np.ndarray):
    """Returns ``(heads, cache)``.

    ``heads`` is ``(mu, var)`` for UniMLR and the raw output otherwise.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"expected features of shape (n, {params.input_dim}), got {X.shape}")
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    out = acts[-1]
    cache = Cache(id(params), acts, out)
    if Method.parse(params.method) is Method.UNIMLR:
        K = params.K
        sigma = _softplus(out[:, K:]) + params.var_floor
        return (out[:, :K], sigma * sigma), cache
    return out, cache


def head_grad(params: MlpParams, cache: Cache, grad_heads) -> np.ndarray:
    """Map a gradient on the heads to a gradient on the raw network output."""
    if Method.parse(params.method) is Method.UNIMLR:
        dmu, dvar = grad_heads
        v = cache.out[:, params.K :]
        sigma = _softplus(v) + params.var_floor
        return np.concatenate([dmu, dvar * 2.0 * sigma * sigmoid(v)], axis=1)
    return np.asarray(grad_heads, dtype=float)


def backward(params: MlpParams, cache: Cache, grad_heads) -> list[np.ndarray]:
    """Parameter gradients ``[dW0, db0, dW1, db1, ...]``."""
    if cache.params_id != id(params) or len(cache.activations) != len(params.weights) + 1:
        raise StaleCache("cache was not produced by a forward pass of these parameters")
    g = head_grad(params, cache, grad_heads)
    grads: list[np.ndarray] = []
    for k in range(len(params.weights) - 1, -1, -1):
        h_in = cache.activations[k]
        grads.append(g.sum(axis=0))
        grads.append(h_in.T @ g)
        if k > 0:
            g = (g @ params.weights[k].T) * (cache.activations[k] > 0)
    grads.reverse()
    return grads


def loss_and_grad(params: MlpParams, X, ranks, mode=None, with_grad=True):
    """Batch-mean loss of the configured method, its per-instance values and parameter gradients."""
    mode = PairMode.parse(mode or params.mode)
    heads, cache = forward(params, X)
    method = Method.parse(params.method)
    if method is Method.UNIMLR:
        value, per, dmu, dvar = unimlr_batch(heads[0], heads[1], ranks, mode)
        gh = (dmu, dvar)
    elif method is Method.LSEP:
        value, per, gh = lsep_batch(heads, ranks, mode)
    else:
        value, per, gh = crpc_batch(heads, ranks, mode)
    grads = backward(params, cache, gh) if with_grad else None
    return value, per, grads


class Adam:
    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_tau_b: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        for e, (a, b, c) in enumerate(zip(self.train_loss, self.val_loss, self.val_tau_b)):
            yield {"epoch": e + 1, "train_loss": a, "val_loss": b, "val_tau_b": c}


def _raw_predict(params: MlpParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and predicted positives before any threshold tuning."""
    heads, _ = forward(params, X)
    method = Method.parse(params.method)
    if method is Method.UNIMLR:
        mu = heads[0]
        return mu, mu >= 0.0
    if method is Method.LSEP:
        return heads, heads > params.threshold
    P = heads.shape[1] - params.K
    probs = sigmoid(heads)
    scores, virtual = crpc_aggregate(probs[:, :P], probs[:, P:])
    return scores, scores > virtual[:, None]


def predict(params: MlpParams, X) -> tuple[np.ndarray, np.ndarray]:
    """``(scores, positives)`` for a batch of feature vectors.

    UniMLR ranks by mu and calls ``mu >= 0`` positive; LSEP thresholds its
    scores at the tuned threshold; CRPC uses the soft Borda count and the
    virtual label's vote.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return _raw_predict(params, X)


def tune_threshold(scores: np.ndarray, truth_pos: np.ndarray) -> tuple[float, float]:
    """Global threshold maximising mean example-based F1 for ``score > threshold``.

    Candidates are ``-inf`` and every distinct score. Sweeping the sorted
    scores updates one instance's F1 at a time. Ties in F1 go to the
    larger threshold. Returns ``(threshold, f1)``.
    """
    scores = np.asarray(scores, dtype=float)
    truth_pos = np.asarray(truth_pos, dtype=bool)
    n = scores.shape[0]
    n_true = truth_pos.sum(1)
    tp = np.zeros(n, dtype=np.int64)
    npred = np.zeros(n, dtype=np.int64)

    def f1_of(i):
        den = n_true[i] + npred[i]
        return 1.0 if den == 0 else 2.0 * tp[i] / den

    f1 = np.array([f1_of(i) for i in range(n)])
    total = f1.sum()
    flat = scores.ravel()
    rows = np.repeat(np.arange(n), scores.shape[1])
    hits = truth_pos.ravel()
    order = np.argsort(-flat, kind="stable")
    # threshold = max score -> nothing predicted positive
    best_total, best_thr = total, float(flat[order[0]]) if flat.size else 0.0
    k = 0
    while k < order.size:
        s = flat[order[k]]
        # admit every entry equal to s: threshold drops to the next lower value
        while k < order.size and flat[order[k]] == s:
            i = rows[order[k]]
            total -= f1[i]
            npred[i] += 1
            tp[i] += hits[order[k]]
            f1[i] = f1_of(i)
            total += f1[i]
            k += 1
        thr = float(flat[order[k]]) if k < order.size else -math.inf
        if total > best_total + 1e-12:
            best_total, best_thr = total, thr
    return best_thr, best_total / n


def _val_metrics(params: MlpParams, X, ranks, mode):
    value, _, _ = loss_and_grad(params, X, ranks, mode, with_grad=False)
    scores, pos = _raw_predict(params, X)
    tau = _tau_b_from_counts(pair_counts_batch(ranks, collapse_negatives(scores, pos)))
    ok = ~np.isnan(tau)
    return value, float(tau[ok].mean()) if ok.any() else float("nan")


def train(config: TrainConfig, dataset) -> tuple[MlpParams, TrainHistory]:
    """Minimise the configured loss with Adam; returns the best-validation parameters."""
    X = prepare_features(dataset, config.pool)
    ranks = dataset.ranks
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    seq = np.random.SeedSequence([config.seed, 1])
    split_rng, shuffle_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    perm = split_rng.permutation(n)
    n_val = int(round(config.val_fraction * n))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if config.batch_size > tr_idx.size:
        raise ValueError(f"batch size {config.batch_size} exceeds training set size {tr_idx.size}")
    Xtr, Rtr = X[tr_idx], ranks[tr_idx]
    Xva, Rva = (X[val_idx], ranks[val_idx]) if n_val else (Xtr, Rtr)

    params = init(config, X.shape[1], dataset.K)
    opt = Adam(params.arrays(), config.lr, config.beta1, config.beta2, config.adam_eps)
    mode = PairMode.parse(config.mode)
    history = TrainHistory()
    best, best_val = params.copy(), _val_metrics(params, Xva, Rva, mode)[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(tr_idx.size)
        losses = []
        for start in range(0, order.size - config.batch_size + 1, config.batch_size):
            b = order[start : start + config.batch_size]
            value, _, grads = loss_and_grad(params, Xtr[b], Rtr[b], mode)
            if not math.isfinite(value):
                raise NumericAbort(
                    f"non-finite loss {value} at epoch {epoch + 1}, step {start // config.batch_size}"
                    f" (method={config.method}, mode={config.mode}, lr={config.lr})"
                )
            opt.step(grads)
            losses.append(value)
        val_loss, val_tau = _val_metrics(params, Xva, Rva, mode)
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val_loss)
        history.val_tau_b.append(val_tau)
        if val_loss < best_val:
            best, best_val, history.best_epoch = params.copy(), val_loss, epoch + 1
        log.debug("epoch %d train %.4f val %.4f tau_b %.4f", epoch + 1, history.train_loss[-1], val_loss, val_tau)
    if Method.parse(config.method) is Method.LSEP:
        scores, _ = _raw_predict(best, Xva)
        best.threshold, _ = tune_threshold(scores, Rva > 0)
    return best, history


@dataclass
class TrainedModel:
    """Predictor wrapper so experiment code can treat models uniformly."""

    params: MlpParams

    def predict(self, features):
        return predict(self.params, features)

    def predict_dataset(self, dataset):
        X = prepare_features(dataset, self.params.pool)
        if X.shape[1] != self.params.input_dim:
            raise ValueError(f"model expects {self.params.input_dim} input features, dataset provides {X.shape[1]}")
        if dataset.K != self.params.K:
            raise ValueError(f"model predicts K={self.params.K} classes, dataset has K={dataset.K}")
        return predict(self.params, X)


def prepare_features(dataset, pool: int = 1) -> np.ndarray:
    """Model inputs: image datasets are pooled and scaled to [0, 1], vectors pass through."""
    if dataset.features.ndim == 3:
        return image_features(dataset.features, pool)
    return dataset.flat_features()


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MLRKCKPT"
FORMAT_VERSION = 1


def _arch_record(params: MlpParams) -> dict:
    return {
        "method": params.method,
        "mode": params.mode,
        "K": params.K,
        "input_dim": params.input_dim,
        "hidden": list(params.hidden),
        "var_floor": params.var_floor,
        "seed": params.seed,
        "threshold": params.threshold,
        "pool": params.pool,
    }


def save_checkpoint(params: MlpParams, path) -> None:
    header = json.dumps(_arch_record(params), sort_keys=True).encode()
    body = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<Q", len(body) // 8))
        f.write(body)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", raw, off)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += 6
        arch = json.loads(raw[off : off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if off + 8 * count != len(raw):
        raise CheckpointError(f"{path}: payload length mismatch")
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(float)
    sizes = [arch["input_dim"], *arch["hidden"], out_dim(arch["method"], arch["K"])]
    weights, biases, k = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[k : k + a * b].reshape(a, b))
        k += a * b
        biases.append(flat[k : k + b].copy())
        k += b
    if k != count:
        raise CheckpointError(f"{path}: architecture expects {k} values, file has {count}")
    return MlpParams(
        weights=[w.copy() for w in weights],
        biases=biases,
        method=arch["method"],
        mode=arch["mode"],
        K=arch["K"],
        input_dim=arch["input_dim"],
        hidden=tuple(arch["hidden"]),
        var_floor=arch["var_floor"],
        seed=arch["seed"],
        threshold=arch["threshold"],
        pool=arch.get("pool", 1),
    )


def params_digest(params: MlpParams) -> str:
    return hashlib.sha256(params.flat().astype("<f8").tobytes()).hexdigest()

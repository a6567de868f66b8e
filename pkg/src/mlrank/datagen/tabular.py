"""Tabular multi-label ranking data with a known significance oracle.

Two processes are available:

``render`` (default)
    A vector analogue of composing digits on a canvas. Which classes are
    present is decided by a latent gate ``g_j = w_j . z + b_j`` with
    ``z ~ N(0, I_d)``; every present class draws a significance
    ``s_j ~ U(sig_low, sig_high)``. The observed features superimpose one
    presence template ``a_j`` and one significance template ``b_j`` per
    present class::

        x = sum_j y_j * (a_j + (s_j - sig_center) * b_j) + noise * eps

    Presence and significance are independent, as digit identity and digit
    scale are in the image datasets. ``sig_center`` defaults to the middle of
    the range, so the significance offset has zero mean and does not leak
    into the presence signal; a narrower range only shrinks the differences
    the model has to resolve.

``gated``
    Features are the latent ``z`` itself, the gate decides presence and the
    gate value is also the significance: ranks follow ``g_j`` among the
    positives.

``linear+tanh`` squashes the features (render) or the gate (gated)
through ``tanh``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np

from ..data import Dataset


@dataclass(frozen=True)
class TabularConfig:
    d: int = 16
    K: int = 10
    N: int = 20000
    process: str = "linear"
    coupling: str = "render"
    weight_scale: float = 1.0
    # gate offset; -0.524 gives P(positive) = 0.3, i.e. about 3 positives of 10
    bias_offset: float = -0.524
    noise: float = 0.05
    sig_low: float = 1.0
    sig_high: float = 3.0
    # None: midpoint of [sig_low, sig_high]
    sig_center: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d <= 0 or self.K <= 0 or self.N < 0:
            raise ValueError("d, K must be positive and N nonnegative")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.process not in ("linear", "linear+tanh"):
            raise ValueError(f"unknown process {self.process!r}")
        if self.coupling not in ("render", "gated"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.sig_high < self.sig_low:
            raise ValueError("empty significance range")

    @property
    def center(self) -> float:
        return 0.5 * (self.sig_low + self.sig_high) if self.sig_center is None else self.sig_center

    def to_dict(self) -> dict:
        return asdict(self)


def ranks_from_significance(sig: np.ndarray) -> np.ndarray:
    """Ranks 1..m for the finite entries (most significant gets m), 0 elsewhere.

    Equal significances are broken by class index, lower index ranking higher.
    Works row-wise on ``(n, K)`` arrays.
    """
    sig = np.atleast_2d(np.asarray(sig, dtype=float))
    ranks = np.zeros(sig.shape, dtype=np.int64)
    for i, row in enumerate(sig):
        pos = np.flatnonzero(~np.isnan(row))
        # lexsort: last key is primary -> descending significance, then index
        order = pos[np.lexsort((pos, -row[pos]))]
        ranks[i, order] = np.arange(pos.size, 0, -1)
    return ranks


class TabularWorld:
    """Fixed generative parameters (gates and templates) for one config seed."""

    def __init__(self, config: TabularConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
        d, K = config.d, config.K
        self.W = rng.normal(0.0, config.weight_scale / np.sqrt(d), size=(K, d))
        self.b = np.full(K, config.bias_offset)
        # 2K template directions taken from a random orthogonal matrix: an
        # orthonormal set when 2K <= d, otherwise a low-coherence tight frame
        n_t = 2 * K
        q, _ = np.linalg.qr(rng.normal(size=(max(n_t, d), max(n_t, d))))
        frame = q[:n_t, :d]
        frame /= np.linalg.norm(frame, axis=1, keepdims=True)
        a, bt = frame[:K].copy(), frame[K:].copy()
        # significance template orthogonal to its own presence template
        bt -= (bt * a).sum(1, keepdims=True) * a
        bt /= np.linalg.norm(bt, axis=1, keepdims=True)
        self.A, self.B = a, bt

    def gate(self, z: np.ndarray) -> np.ndarray:
        g = z @ self.W.T + self.b
        return np.tanh(g) if self.config.process == "linear+tanh" and self.config.coupling == "gated" else g

    def render(self, present: np.ndarray, sig: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Features for given presence masks ``(n, K)``, significances and unit noise ``(n, d)``."""
        c = self.config
        coef = np.where(present, np.nan_to_num(sig, nan=c.center) - c.center, 0.0)
        x = present.astype(float) @ self.A + coef @ self.B + c.noise * eps
        return np.tanh(x) if c.process == "linear+tanh" else x


def gen_tabular(config: TabularConfig, world: TabularWorld | None = None) -> Dataset:
    world = world or TabularWorld(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))
    n, d, K = config.N, config.d, config.K
    z = rng.normal(size=(n, d))
    g = world.gate(z)
    present = g > 0
    if config.coupling == "gated":
        g = g + config.noise * rng.normal(size=g.shape)
        present = g > 0
        sig = np.where(present, g, np.nan)
        feats = z
    else:
        u = rng.uniform(config.sig_low, config.sig_high, size=(n, K))
        eps = rng.normal(size=(n, d))
        sig = np.where(present, u, np.nan)
        feats = world.render(present, sig, eps)
    return Dataset(
        features=feats,
        ranks=ranks_from_significance(sig),
        significance=sig,
        meta={"generator": "tabular", "config": config.to_dict()},
    )


def gated_ranking(x, W, b, squash: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Ranks and significances of the gated process for explicit inputs.

    ``g = W @ x + b`` (optionally ``tanh``-squashed); classes with ``g > 0``
    are positive and ranked by ``g``.
    """
    g = np.asarray(W, dtype=float) @ np.asarray(x, dtype=float) + np.asarray(b, dtype=float)
    if squash:
        g = np.tanh(g)
    sig = np.where(g > 0, g, np.nan)
    return ranks_from_significance(sig)[0], sig

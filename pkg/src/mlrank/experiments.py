"""Experiment runners: significance sweeps, calibration, variance, extraction, tables.

Runners build probe datasets through a *backend* (the tabular generator by
default, Ranked MNIST optionally), score them with any predictor and return
plain arrays and dataclasses; ``write_csv`` and ``write_json`` turn those
into files. Every runner is a deterministic function of its arguments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import Dataset
from .datagen.rmnist import N_CLASSES, GlyphBank, RankedMnistConfig, compose, image_features
from .datagen.tabular import TabularConfig, TabularWorld, gen_tabular, ranks_from_significance
from .gaussmath import DegenerateFit, GaussianParam, fit_gaussian
from .metrics import (
    MetricReport,
    _tau_b_from_counts,
    pair_counts_batch,
    positive_pair_tau_b,
    report_from_predictions,
)
from .model import TrainConfig, TrainedModel, train

# Rank-scores for the default tabular benchmark (about 3 positives of 10).
DEFAULT_TABULAR = TabularConfig()
# Table benchmark: positive rate 0.55, about 5.5 positives of 10 like 1..10 digit images.
TABLE_TABULAR = TabularConfig(bias_offset=0.126)
METHODS = ("crpc", "lsep", "unimlr")
MODES = ("weak", "strong")


class UntrainedModel(ValueError):
    pass


# ---------------------------------------------------------------------------
# predictors and backends


class OracleModel:
    """Scores every probe with its ground truth (significance or rank).

    Negatives score below every positive and the predicted positives are
    the true positives, so any runner fed this model sees a perfect
    predictor.
    """

    def __init__(self, source: str = "significance", negate: bool = False):
        if source not in ("significance", "ranks"):
            raise ValueError(f"unknown oracle source {source!r}")
        self.source, self.negate = source, negate

    def predict_dataset(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        pos = ds.ranks > 0
        if self.source == "ranks":
            scores = ds.ranks.astype(float)
        else:
            finite = ds.significance[pos]
            floor = (finite.min() if finite.size else 0.0) - 1.0
            scores = np.where(pos, ds.significance, floor)
        return (-scores if self.negate else scores), pos


class ShuffledModel:
    """Negative control: a predictor whose outputs ignore the input."""

    def __init__(self, K: int, seed: int = 0):
        self.K, self.seed = K, seed

    def predict(self, features):
        n = np.asarray(features).shape[0]
        s = np.random.default_rng(self.seed).normal(size=(n, self.K))
        return s, s >= 0


def score(model, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    if model is None:
        raise UntrainedModel("no model given")
    if hasattr(model, "predict_dataset"):
        return model.predict_dataset(ds)
    return model.predict(ds.flat_features())


class TabularBackend:
    """Renders probe instances with the generator that produced the training data."""

    def __init__(self, config: TabularConfig = DEFAULT_TABULAR):
        if config.coupling != "render":
            raise ValueError("probe rendering needs the 'render' coupling")
        self.config = config
        self.world = TabularWorld(config)
        self.K = config.K

    def render(self, present: np.ndarray, sig: np.ndarray, nuisance_seeds: Sequence[int]) -> Dataset:
        """Rows sharing a nuisance seed share their feature noise."""
        eps = np.stack([np.random.default_rng([int(s), 303]).normal(size=self.config.d) for s in nuisance_seeds])
        sig = np.where(present, sig, np.nan)
        return Dataset(self.world.render(present, sig, eps), ranks_from_significance(sig), sig)


class RmnistBackend:
    """Probe images from a Ranked MNIST configuration, pooled to vectors."""

    def __init__(self, config: RankedMnistConfig, images, labels, pool: int = 4):
        self.config, self.pool = config, pool
        self.bank = GlyphBank(images, labels)
        self.K = N_CLASSES

    def render(self, present: np.ndarray, sig: np.ndarray, nuisance_seeds: Sequence[int]) -> Dataset:
        c = self.config
        imgs = np.zeros((present.shape[0], c.canvas, c.canvas), dtype=np.uint8)
        for i, seed in enumerate(nuisance_seeds):
            rng = np.random.default_rng([int(seed), 404])
            classes = np.flatnonzero(present[i])
            glyphs = [self.bank.draw(k, rng) for k in classes]
            vals = sig[i, classes]
            ones = np.ones(classes.size)
            scales, bright = (vals, ones) if c.label_factor == "scale" else (ones, vals)
            imgs[i], _ = compose(glyphs, scales, bright, c.canvas, c.glyph_size, rng, c.max_attempts, c.max_layouts)
        sig = np.where(present, sig, np.nan)
        return Dataset(image_features(imgs, self.pool), ranks_from_significance(sig), sig)


# ---------------------------------------------------------------------------
# adjusting significance


@dataclass(frozen=True)
class SequenceSpec:
    n_sequences: int = 50
    length: int = 50
    s_low: float = 1.0
    s_middle: float = 2.0
    s_high: float = 3.0

    def __post_init__(self):
        if not self.s_low < self.s_middle < self.s_high:
            raise ValueError("need s_low < s_middle < s_high")
        if self.length < 2 or self.n_sequences < 1:
            raise ValueError("sequences need length >= 2 and at least one sequence")


@dataclass
class AdjustResult:
    # (length, 3) mean scores for the low, middle and high roles
    table: np.ndarray
    slopes: dict[str, float]
    crossed: bool
    true_table: np.ndarray

    def rows(self):
        for p, (lo, mid, hi) in enumerate(self.table):
            yield {"position": p + 1, "low": lo, "middle": mid, "high": hi}


ROLES = ("low", "middle", "high")


def sequence_probes(spec: SequenceSpec, backend, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """All sequence frames, sequence-major, plus the ``(n_seq, 3)`` role classes."""
    rng = np.random.default_rng([seed, 505])
    K = backend.K
    roles = np.stack([rng.choice(K, 3, replace=False) for _ in range(spec.n_sequences)])
    frac = np.linspace(0.0, 1.0, spec.length)
    traj = np.stack(
        [
            spec.s_low + frac * (spec.s_high - spec.s_low),
            np.full(spec.length, spec.s_middle),
            spec.s_high - frac * (spec.s_high - spec.s_low),
        ],
        axis=1,
    )
    n = spec.n_sequences * spec.length
    present = np.zeros((n, K), dtype=bool)
    sig = np.full((n, K), np.nan)
    seeds = []
    for i in range(spec.n_sequences):
        nuisance = int(rng.integers(2**31))
        for p in range(spec.length):
            row = i * spec.length + p
            present[row, roles[i]] = True
            sig[row, roles[i]] = traj[p]
            seeds.append(nuisance)
    return backend.render(present, sig, seeds), roles


def run_adjusting(model, spec: SequenceSpec = SequenceSpec(), backend=None, seed: int = 0) -> AdjustResult:
    backend = backend or TabularBackend()
    ds, roles = sequence_probes(spec, backend, seed)
    scores, _ = score(model, ds)
    L = spec.length
    idx = np.arange(spec.n_sequences)[:, None] * L + np.arange(L)[None, :]
    table = np.stack([scores[idx, roles[:, [k]]].mean(axis=0) for k in range(3)], axis=1)
    true_table = np.stack([ds.significance[idx, roles[:, [k]]].mean(axis=0) for k in range(3)], axis=1)
    x = np.arange(L, dtype=float)
    slopes = {r: float(np.polyfit(x, table[:, k], 1)[0]) for k, r in enumerate(ROLES)}
    d0 = table[0, 2] - table[0, 0]
    d1 = table[-1, 2] - table[-1, 0]
    return AdjustResult(table, slopes, bool(d0 * d1 < 0), true_table)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationSpec:
    levels: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5)
    set_size: int = 50

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("significance levels must be strictly increasing")

    @property
    def n_positive(self) -> int:
        return len(self.levels)


@dataclass
class CalibrationResult:
    """Per-level Gaussian fits. A zero-spread level keeps its ML mean but has no fit."""

    levels: tuple[float, ...]
    fits: dict[float, GaussianParam | None]
    samples: dict[float, np.ndarray]
    errors: dict[float, str] = field(default_factory=dict)

    @property
    def means(self) -> list[float]:
        return [float(self.samples[l].mean()) if self.samples[l].size else math.nan for l in self.levels]

    @property
    def sigmas(self) -> list[float]:
        return [float(self.samples[l].std()) if self.samples[l].size else math.nan for l in self.levels]

    @property
    def monotone(self) -> bool:
        m = self.means
        return all(math.isfinite(v) for v in m) and all(b > a for a, b in zip(m, m[1:]))

    def rows(self):
        for l, m, sd in zip(self.levels, self.means, self.sigmas):
            yield {"level": l, "mean": m, "sigma": sd, "n": self.samples[l].size, "error": self.errors.get(l, "")}


def calibration_probes(spec: CalibrationSpec, backend, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Probe set where each instance carries one positive per level; returns the level->class map."""
    rng = np.random.default_rng([seed, 606])
    K = backend.K
    if spec.n_positive > K:
        raise ValueError(f"{spec.n_positive} levels need at least that many classes, K={K}")
    present = np.zeros((spec.set_size, K), dtype=bool)
    sig = np.full((spec.set_size, K), np.nan)
    assign = np.zeros((spec.set_size, spec.n_positive), dtype=np.int64)
    for i in range(spec.set_size):
        classes = rng.choice(K, spec.n_positive, replace=False)
        assign[i] = classes
        present[i, classes] = True
        sig[i, classes] = spec.levels
    seeds = rng.integers(2**31, size=spec.set_size)
    return backend.render(present, sig, seeds), assign


def run_calibration(model, spec: CalibrationSpec = CalibrationSpec(), backend=None, seed: int = 0) -> CalibrationResult:
    backend = backend or TabularBackend()
    ds, assign = calibration_probes(spec, backend, seed)
    scores, _ = score(model, ds)
    rows = np.arange(spec.set_size)
    fits, samples, errors = {}, {}, {}
    for k, level in enumerate(spec.levels):
        s = scores[rows, assign[:, k]]
        samples[level] = s
        try:
            fits[level] = fit_gaussian(s)
        except DegenerateFit as exc:
            fits[level], errors[level] = None, str(exc)
    return CalibrationResult(tuple(spec.levels), fits, samples, errors)


# ---------------------------------------------------------------------------
# training helpers shared by the remaining runners


def significance_spearman(scores: np.ndarray, ds: Dataset) -> np.ndarray:
    """Per-class Spearman rho between scores and true significance over the class's positive instances."""
    from scipy.stats import spearmanr

    out = np.full(ds.K, np.nan)
    for j in range(ds.K):
        m = ds.ranks[:, j] > 0
        if m.sum() >= 3 and np.ptp(ds.significance[m, j]) > 0 and np.ptp(scores[m, j]) > 0:
            out[j] = spearmanr(scores[m, j], ds.significance[m, j])[0]
    return out


def positive_significance_tau_b(scores: np.ndarray, ds: Dataset) -> np.ndarray:
    """tau-b of scores against true significance over each instance's positives (NaN if undefined)."""
    sig = np.where(ds.ranks > 0, ds.significance, np.nan)
    out = np.full(len(ds), np.nan)
    for i in range(len(ds)):
        pos = np.flatnonzero(ds.ranks[i] > 0)
        if pos.size >= 2:
            counts = pair_counts_batch(sig[i, pos][None], scores[i, pos][None])
            out[i] = _tau_b_from_counts(counts)[0]
    return out


@dataclass
class RunResult:
    method: str
    mode: str
    seed: int
    report: MetricReport
    model: TrainedModel = field(repr=False)
    # mean tau-b over each instance's true positives, x100
    positive_pair_tau_b: float = math.nan
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "seed": self.seed,
            **self.report.as_row(),
            "pos_pair_tau_b": self.positive_pair_tau_b,
            "n_instances": self.report.n_instances,
            "undefined_tau_b": self.report.n_undefined.get("tau_b", 0),
        }


def train_and_evaluate(config: TrainConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    params, history = train(config, train_ds)
    model = TrainedModel(params)
    scores, pos = score(model, test_ds)
    report = report_from_predictions(test_ds.ranks, scores, pos)
    pp = positive_pair_tau_b(test_ds.ranks, scores)
    return RunResult(
        config.method,
        config.mode,
        config.seed,
        report,
        model,
        100.0 * float(np.nanmean(pp)) if np.isfinite(pp).any() else math.nan,
        {"history": history},
    )


# ---------------------------------------------------------------------------
# variance experiment


@dataclass
class VarianceResult:
    narrow: RunResult
    wide: RunResult
    narrow_range: tuple[float, float]
    wide_range: tuple[float, float]
    # positive-pair tau-b against true significances; NaN count when undefined
    narrow_sig_tau_b: float = math.nan
    narrow_sig_undefined: int = 0

    def rows(self):
        for name, r, rng in (("narrow", self.narrow, self.narrow_range), ("wide", self.wide, self.wide_range)):
            yield {"variant": name, "sig_low": rng[0], "sig_high": rng[1], **r.row()}


def run_variance(
    train_config: TrainConfig = TrainConfig(),
    data: TabularConfig = DEFAULT_TABULAR,
    narrow: tuple[float, float] = (1.0, 1.5),
    wide: tuple[float, float] = (1.0, 3.0),
    test_fraction: float = 0.2,
) -> VarianceResult:
    results = {}
    for name, (lo, hi) in (("narrow", narrow), ("wide", wide)):
        ds = gen_tabular(replace(data, sig_low=lo, sig_high=hi))
        tr, te = ds.split(test_fraction, data.seed)
        results[name] = (train_and_evaluate(train_config, tr, te), te)
    nr, nte = results["narrow"]
    sig_tau = positive_significance_tau_b(score(nr.model, nte)[0], nte)
    ok = np.isfinite(sig_tau)
    return VarianceResult(
        nr,
        results["wide"][0],
        tuple(narrow),
        tuple(wide),
        float(sig_tau[ok].mean()) if ok.any() else math.nan,
        int((~ok & ((nte.ranks > 0).sum(1) >= 2)).sum()),
    )


# ---------------------------------------------------------------------------
# extracted significance


@dataclass
class ExtractResult:
    class_id: int
    order: np.ndarray  # all candidate instance ids, ascending predicted score
    checkpoint_ids: np.ndarray
    checkpoint_scores: np.ndarray
    checkpoint_significance: np.ndarray

    def rows(self):
        for k, (i, s, t) in enumerate(zip(self.checkpoint_ids, self.checkpoint_scores, self.checkpoint_significance)):
            yield {"checkpoint": k + 1, "instance": int(i), "score": float(s), "significance": float(t)}


def run_extracted(model, test: Dataset, class_id: int, checkpoints: int = 10, positives_only: bool = True) -> ExtractResult:
    """Sort instances by the predicted score of one class and pick equidistant checkpoints."""
    if not 0 <= class_id < test.K:
        raise ValueError(f"class id {class_id} out of range for K={test.K}")
    candidates = np.flatnonzero(test.ranks[:, class_id] > 0) if positives_only else np.arange(len(test))
    if candidates.size < checkpoints:
        raise ValueError(f"only {candidates.size} candidate instances for {checkpoints} checkpoints")
    scores, _ = score(model, test.subset(candidates))
    s = scores[:, class_id]
    local = np.argsort(s, kind="stable")
    picks = local[np.round(np.linspace(0, candidates.size - 1, checkpoints)).astype(int)]
    return ExtractResult(
        class_id,
        candidates[local],
        candidates[picks],
        s[picks],
        test.significance[candidates[picks], class_id],
    )


# ---------------------------------------------------------------------------
# method comparison table


@dataclass
class TableResult:
    runs: list[RunResult]

    def cell(self, method: str, mode: str, metric: str = "tau_b") -> np.ndarray:
        return np.array([r.row()[metric] for r in self.runs if r.method == method and r.mode == mode])

    def summary_rows(self):
        metrics = ("tau_b", "spearman_rho", "gamma", "f1", "pos_pair_tau_b")
        for method in METHODS:
            for mode in MODES:
                sel = [r for r in self.runs if r.method == method and r.mode == mode]
                if not sel:
                    continue
                row = {"method": method, "mode": mode, "n_seeds": len(sel)}
                for m in metrics:
                    vals = np.array([r.row()[m] for r in sel])
                    row[f"{m}_mean"] = float(vals.mean())
                    row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                yield row

    def run_rows(self):
        return [r.row() for r in self.runs]


def run_table(
    seeds: Sequence[int] = (0,),
    data: TabularConfig = TABLE_TABULAR,
    base: TrainConfig = TrainConfig(),
    methods: Sequence[str] = METHODS,
    modes: Sequence[str] = MODES,
    test_fraction: float = 0.2,
    dataset: Dataset | None = None,
    split_seed: int | None = None,
) -> TableResult:
    """Train every method/mode on one shared split for each training seed."""
    ds = dataset if dataset is not None else gen_tabular(data)
    tr, te = ds.split(test_fraction, data.seed if split_seed is None else split_seed)
    runs = []
    for seed in seeds:
        for method in methods:
            for mode in modes:
                cfg = replace(base, method=method, mode=mode, seed=int(seed))
                runs.append(train_and_evaluate(cfg, tr, te))
    return TableResult(runs)


# ---------------------------------------------------------------------------
# output


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def write_csv(rows, path) -> Path:
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    return str(o)


def run_metadata(kind: str, config: dict, seed) -> dict:
    return {"experiment": kind, "config": config, "config_hash": config_hash(config), "seed": seed, "version": __version__}

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained-model criteria (5 to 9) share models through module fixtures.
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""

import itertools
import struct
import time

import mpmath
import numpy as np
import pytest

from acceptance_log import criterion, verdict
from mlrank.cli import MANIFEST, main
from mlrank.datagen.idx import IdxFormatError, parse_idx, surrogate_mnist, write_idx
from mlrank.datagen.io import read_dataset, write_dataset
from mlrank.datagen.rmnist import RankedMnistConfig, compose_ranked_mnist
from mlrank.datagen.tabular import gen_tabular
from mlrank.experiments import (
    DEFAULT_TABULAR,
    TABLE_TABULAR,
    run_adjusting,
    run_calibration,
    run_table,
    run_variance,
    significance_spearman,
    train_and_evaluate,
)
from mlrank.gaussmath import GaussianParam, log_q, log_q_array, q_positive
from mlrank.losses import GaussianPrediction, unimlr_loss
from mlrank.core import LabelRanking
from mlrank.metrics import _gamma_from_counts, _tau_b_from_counts, pair_counts_batch, spearman_batch
from mlrank.model import TrainConfig, init, loss_and_grad
from oracles import (
    any_box_overlap,
    brute_gamma,
    brute_spearman,
    brute_tau_b,
    fd_param_grads,
    max_rel_error,
    ranks_by_sorting,
    unimlr_termwise,
)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


# ---------------------------------------------------------------------------
# shared trained models on the default tabular benchmark


@pytest.fixture(scope="module")
def default_split():
    t0 = time.perf_counter()
    train, test = gen_tabular(DEFAULT_TABULAR).split(0.2, DEFAULT_TABULAR.seed)
    return train, test, time.perf_counter() - t0


class Runs:
    def __init__(self, train, test):
        self.train, self.test = train, test
        self.cache, self.seconds = {}, {}

    def get(self, mode="strong", seed=0):
        key = (mode, seed)
        if key not in self.cache:
            t0 = time.perf_counter()
            self.cache[key] = train_and_evaluate(TrainConfig(mode=mode, seed=seed), self.train, self.test)
            self.seconds[key] = time.perf_counter() - t0
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(default_split):
    return Runs(*default_split[:2])


# ---------------------------------------------------------------------------


@criterion(1, "Gaussian kernel exactness")
def test_criterion_01_gaussian_kernel():
    ts = np.linspace(-30.0, 30.0, 601)
    sigmas = (1e-3, 1.0, 1e3)
    mus = np.concatenate([ts * s for s in sigmas])
    sig = np.repeat(sigmas, ts.size)

    t0 = time.perf_counter()
    logs = np.array([log_q(GaussianParam(m, s)) for m, s in zip(mus, sig)])
    qs = np.array([q_positive(GaussianParam(m, s)) for m, s in zip(mus, sig)])
    vec = log_q_array(mus, sig)
    elapsed = time.perf_counter() - t0

    worst_log = worst_q = 0.0
    for m, s, lq, q, lv in zip(mus, sig, logs, qs, vec):
        t = mpmath.mpf(m) / mpmath.mpf(s)
        cdf = mpmath.ncdf(t)
        # log1p of the upper tail keeps the reference exact where the CDF rounds to 1
        ref = mpmath.log(cdf) if t <= 0 else mpmath.log1p(-mpmath.ncdf(-t))
        worst_log = max(worst_log, float(abs((lq - ref) / ref)), float(abs((lv - ref) / ref)))
        worst_q = max(worst_q, float(abs((q - cdf) / cdf)))
    finite = np.isfinite(logs).all() and np.isfinite(qs).all() and np.isfinite(vec).all()
    ok = worst_log <= 1e-9 and worst_q <= 1e-9 and finite and elapsed < 1.0
    detail = f"log_q max rel err {worst_log:.2e}, q_positive max rel err {worst_q:.2e} (<=1e-9), "
    detail += f"finite={finite}, {elapsed:.3f}s (<1s)"
    verdict(1, "Gaussian kernel exactness", ok, detail)


@criterion(2, "gradient suite")
def test_criterion_02_gradients():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    combos = list(itertools.product(("unimlr", "lsep", "crpc"), ("weak", "strong")))
    for i in range(100):
        # redraw until every ReLU pre-activation is clear of its kink by more than the stencil reach
        while True:
            K, d, n = int(rng.integers(2, 7)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
            X = rng.normal(size=(n, d))
            ranks = rng.integers(0, 4, size=(n, K))
            nets = [init(TrainConfig(method=m, mode=mode, hidden=(4,), seed=i), d, K) for m, mode in combos]
            if min(np.abs(X @ p.weights[0] + p.biases[0]).min() for p in nets) > 0.02:
                break
        for p in nets:
            _, _, grads = loss_and_grad(p, X, ranks, p.mode)
            fd = fd_param_grads(p, X, ranks, p.mode, h=1e-4, order=4)
            worst = max(worst, max_rel_error(grads, fd))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    verdict(2, "gradient suite", ok, f"{count} checks, max rel err {worst:.2e} (<1e-4), {elapsed:.1f}s (<30s)")


@criterion(3, "loss-likelihood equivalence")
def test_criterion_03_likelihood():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(1000):
        K = int(rng.integers(1, 9))
        mu = rng.normal(scale=2.0, size=K)
        var = np.exp(rng.uniform(-3, 2, size=K))
        ranks = rng.integers(0, 4, size=K)
        mode = "strong" if rng.random() < 0.5 else "weak"
        got = unimlr_loss(GaussianPrediction(mu, var), LabelRanking(ranks.tolist()), mode).value
        worst = max(worst, abs(got - unimlr_termwise(mu.tolist(), var.tolist(), ranks.tolist(), mode)))
    verdict(3, "loss-likelihood equivalence", worst <= 1e-10, f"1000 instances, max abs diff {worst:.2e} (<=1e-10)")


@criterion(4, "metric oracle equivalence")
def test_criterion_04_metrics():
    t0 = time.perf_counter()
    checked, mismatches, worst_rho = 0, [], 0.0
    for K in range(2, 6):
        truths = np.array(list(itertools.product(range(4), repeat=K)), dtype=float)
        perms = np.array(list(itertools.permutations(range(K))), dtype=float)
        T = np.repeat(truths, len(perms), axis=0)
        S = np.tile(perms, (len(truths), 1))
        counts = pair_counts_batch(T, S)
        tau, gam, rho = _tau_b_from_counts(counts), _gamma_from_counts(counts), spearman_batch(T, S)
        for t, s, a, g, r in zip(T.tolist(), S.tolist(), tau, gam, rho):
            bt, bg, br = brute_tau_b(t, s), brute_gamma(t, s), brute_spearman(t, s)
            same_nan = np.isnan(a) == np.isnan(bt) and np.isnan(g) == np.isnan(bg) and np.isnan(r) == np.isnan(br)
            exact = same_nan and (np.isnan(a) or a == bt) and (np.isnan(g) or g == bg)
            if not np.isnan(r) and not np.isnan(br):
                worst_rho = max(worst_rho, abs(r - br))
            if not exact:
                mismatches.append((t, s))
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = not mismatches and worst_rho <= 1e-12 and elapsed < 60.0
    detail = f"{checked} pairs, tau_b/gamma mismatches {len(mismatches)}, rho max diff {worst_rho:.1e}, {elapsed:.1f}s"
    verdict(4, "metric oracle equivalence", ok, detail)


@criterion(5, "proportionality")
def test_criterion_05_proportionality(default_split, runs):
    strong, weak = runs.get("strong"), runs.get("weak")
    elapsed = default_split[2] + runs.seconds[("strong", 0)] + runs.seconds[("weak", 0)]
    scores = strong.model.predict(runs.test.flat_features())[0]
    rho = float(np.nanmean(significance_spearman(scores, runs.test)))
    gap = (strong.positive_pair_tau_b - weak.positive_pair_tau_b) / 100.0
    ok = rho >= 0.9 and gap >= 0.2 and elapsed < 600
    detail = f"per-class rho {rho:.4f} (>=0.9), pos-pair tau_b S-W {gap:.3f} (>=0.2), {elapsed:.0f}s (<600s)"
    verdict(5, "proportionality", ok, detail)


@criterion(6, "table ordering")
def test_criterion_06_table():
    t0 = time.perf_counter()
    table = run_table(seeds=(0, 1, 2), data=TABLE_TABULAR)
    elapsed = time.perf_counter() - t0
    m = {(meth, mode): float(np.mean(table.cell(meth, mode))) for meth in ("unimlr", "lsep", "crpc") for mode in ("weak", "strong")}
    close = abs(m["unimlr", "strong"] - m["lsep", "strong"]) <= 3.0
    above = m["unimlr", "strong"] > m["crpc", "strong"] and m["lsep", "strong"] > m["crpc", "strong"]
    gaps = {meth: m[meth, "strong"] - m[meth, "weak"] for meth in ("unimlr", "lsep", "crpc")}
    ok = close and above and min(gaps.values()) >= 15.0 and elapsed < 2700
    cells = ", ".join(f"{a}-{b[0].upper()} {v:.2f}" for (a, b), v in m.items())
    gap_s = ", ".join(f"{k} {v:.2f}" for k, v in gaps.items())
    detail = f"tau_b x100: {cells}; |U-L| S {abs(m['unimlr', 'strong'] - m['lsep', 'strong']):.2f} (<=3); "
    detail += f"both > CRPC-S: {above}; S-W gaps {gap_s} (>=15); {elapsed:.0f}s (<2700s)"
    verdict(6, "table ordering", ok, detail)


@criterion(7, "calibration ordering")
def test_criterion_07_calibration(runs):
    means = {}
    for seed in (0, 1, 2):
        means[seed] = run_calibration(runs.get("strong", seed).model, seed=seed).means
    ok = all(bool(np.all(np.diff(v) > 0)) for v in means.values())
    detail = "; ".join(f"seed {s}: " + " < ".join(f"{x:.3f}" for x in v) for s, v in means.items())
    verdict(7, "calibration ordering", ok, detail)


@criterion(8, "adjusting trajectories")
def test_criterion_08_adjusting(runs):
    res = run_adjusting(runs.get("strong").model)
    s = res.slopes
    ratio = abs(s["middle"]) / abs(s["high"])
    ok = res.crossed and ratio <= 0.1
    detail = f"crossed={res.crossed}, slopes low {s['low']:.4f} middle {s['middle']:.4f} high {s['high']:.4f}, "
    detail += f"|middle|/|high| {ratio:.3f} (<=0.1)"
    verdict(8, "adjusting trajectories", ok, detail)


@criterion(9, "variance experiment")
def test_criterion_09_variance():
    res = run_variance()
    diff = abs(res.narrow.report.tau_b - res.wide.report.tau_b)
    detail = f"narrow {res.narrow.report.tau_b:.2f}, wide {res.wide.report.tau_b:.2f}, |diff| {diff:.2f} (<=5)"
    verdict(9, "variance experiment", diff <= 5.0, detail)


MALFORMED_IDX = [
    bytes([1, 0, 8, 1]) + struct.pack(">I", 2) + b"ab",
    bytes([0, 0, 0x0A, 1]) + struct.pack(">I", 2) + b"ab",
    bytes([0, 0, 8, 0]),
    bytes([0, 0, 8, 3]) + struct.pack(">I", 2),
    bytes([0, 0, 8, 2]) + struct.pack(">2I", 2, 2) + b"abc",
]


@criterion(10, "data pipeline")
def test_criterion_10_data_pipeline(tmp_path):
    rng = np.random.default_rng(10)
    fixture = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    blob = write_idx(fixture)
    back = parse_idx(blob)
    idx_ok = back.dtype == fixture.dtype and np.array_equal(back, fixture) and write_idx(back) == blob
    rejected = 0
    for bad in MALFORMED_IDX:
        try:
            parse_idx(bad)
        except IdxFormatError:
            rejected += 1

    images, labels = surrogate_mnist()
    t0 = time.perf_counter()
    ds = compose_ranked_mnist(RankedMnistConfig.mini(N=1000), images, labels)
    elapsed = time.perf_counter() - t0
    overlaps = sum(any_box_overlap(b) for b in ds.boxes)
    label = ds.factors["scale"]
    inconsistent = sum(list(ds.ranks[i]) != ranks_by_sorting(list(label[i])) for i in range(len(ds)))

    write_dataset(ds, tmp_path / "ds")
    rt = read_dataset(tmp_path / "ds")
    fields = (
        rt.features.dtype == ds.features.dtype
        and np.array_equal(rt.features, ds.features)
        and np.array_equal(rt.ranks, ds.ranks)
        and np.array_equal(rt.significance, ds.significance, equal_nan=True)
        and rt.factors.keys() == ds.factors.keys()
        and all(np.array_equal(rt.factors[k], ds.factors[k], equal_nan=True) for k in ds.factors)
        and np.array_equal(rt.boxes, ds.boxes)
        and rt.meta == ds.meta
    )
    ok = idx_ok and rejected == 5 and fields and elapsed < 60 and overlaps == 0 and inconsistent == 0
    detail = f"IDX round trip {idx_ok}, malformed rejected {rejected}/5, dataset round trip {fields}, "
    detail += f"1000 images in {elapsed:.1f}s (<60s), overlaps {overlaps}, rank mismatches {inconsistent}"
    verdict(10, "data pipeline", ok, detail)


def _outputs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != MANIFEST}


@criterion(11, "determinism")
def test_criterion_11_determinism(tmp_path):
    fast = ["--hidden", "8", "--epochs", "2"]
    data, ckpt = tmp_path / "gen" / "dataset", tmp_path / "train" / "checkpoint.ckpt"
    commands = {
        "gen": ["gen", "tabular", "--n", "800", "--seed", "3"],
        "gen_rmnist": ["gen", "rmnist", "--surrogate", "--n", "30", "--seed", "3"],
        "train": ["train", "--data", str(data), *fast, "--seed", "1"],
        "train_crpc": ["train", "--data", str(data), *fast, "--method", "crpc"],
        "eval": ["eval", "--data", str(data), "--checkpoint", str(ckpt)],
        "adjust": ["experiment", "adjust", "--data", str(data), "--checkpoint", str(ckpt), "--sequences", "5"],
        "calibrate": ["experiment", "calibrate", "--data", str(data), "--checkpoint", str(ckpt)],
        "extract": ["experiment", "extract", "--data", str(data), "--checkpoint", str(ckpt), "--class-id", "1"],
        "variance": ["experiment", "variance", "--n", "600", *fast],
        "table": ["experiment", "table", "--n", "600", *fast, "--seeds", "2"],
    }
    differing = []
    for name, argv in commands.items():
        first = tmp_path / name
        assert main([*argv, "--out", str(first)]) == 0, name
        again = tmp_path / f"{name}_replay"
        assert main(["replay", str(first / MANIFEST), "--out", str(again)]) == 0, name
        a, b = _outputs(first), _outputs(again)
        if not a or a != b:
            differing.append(name)
    ok = not differing
    detail = f"{len(commands)} commands replayed from their manifests, differing outputs: {differing or 'none'}"
    verdict(11, "determinism", ok, detail)

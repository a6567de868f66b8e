"""Command-line entry point: ``mlrank <command> ...``.

Every command resolves its configuration (flags > ``--config`` JSON file >
built-in defaults), writes ``run_manifest.json`` into ``--out`` and only
then does its work. ``mlrank replay <manifest>`` re-runs a manifest.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs, shape mismatches), 4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import experiments as ex
from .datagen.idx import MNIST_ENV, IdxFormatError, load_mnist, surrogate_mnist
from .datagen.io import DatasetFormatError, read_dataset, write_dataset
from .datagen.rmnist import LayoutError, RankedMnistConfig, compose_ranked_mnist
from .datagen.tabular import TabularConfig, gen_tabular
from .metrics import report_from_predictions
from .model import CheckpointError, NumericAbort, TrainConfig, TrainedModel, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mlrank")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
METRIC_COLUMNS = ("tau_b", "spearman_rho", "gamma", "f1")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _words(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON file of option defaults (keys are option names with underscores)")
    p.add_argument("--seed", type=int, default=0)


def _tabular_opts(p):
    d = TabularConfig()
    p.add_argument("--k", type=int, default=d.K)
    p.add_argument("--d", type=int, default=d.d)
    p.add_argument("--n", type=int, default=d.N)
    p.add_argument("--process", choices=("linear", "linear+tanh"), default=d.process)
    p.add_argument("--coupling", choices=("render", "gated"), default=d.coupling)
    p.add_argument("--weight-scale", type=float, default=d.weight_scale)
    p.add_argument("--bias-offset", type=float, default=d.bias_offset)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--sig-low", type=float, default=d.sig_low)
    p.add_argument("--sig-high", type=float, default=d.sig_high)
    p.add_argument("--sig-center", type=float, default=d.sig_center)
    p.add_argument("--data-seed", type=int, default=None, help="generator seed (defaults to --seed)")


def _train_opts(p):
    d = TrainConfig()
    p.add_argument("--method", choices=("unimlr", "lsep", "crpc"), default=d.method)
    p.add_argument("--mode", choices=("weak", "strong"), default=d.mode)
    p.add_argument("--hidden", type=_ints, default=d.hidden, help="comma-separated hidden widths")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--var-floor", type=float, default=d.var_floor)
    p.add_argument("--pool", type=int, default=d.pool, help="average-pool factor for image datasets")


def _split_opts(p):
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)


def _model_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", action="store_true", help="score with the ground truth instead of a model")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="mlrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = {}

    gen = sub.add_parser("gen", help="generate a dataset").add_subparsers(dest="kind", required=True)
    p = gen.add_parser("tabular", help="synthetic vectors with known significances")
    _common(p)
    _tabular_opts(p)
    leaves["gen.tabular"] = p
    p = gen.add_parser("rmnist", help="Ranked MNIST images")
    _common(p)
    d = RankedMnistConfig()
    p.add_argument("--factor", choices=("scale", "brightness", "mixed-scale", "mixed-brightness"), default=d.factor)
    p.add_argument("--canvas", type=int, default=d.canvas)
    p.add_argument("--scale-min", type=float, default=d.scale_min)
    p.add_argument("--scale-max", type=float, default=d.scale_max)
    p.add_argument("--brightness-min", type=float, default=d.brightness_min)
    p.add_argument("--brightness-max", type=float, default=d.brightness_max)
    p.add_argument("--digits-min", type=int, default=d.digits_min)
    p.add_argument("--digits-max", type=int, default=d.digits_max)
    p.add_argument("--n", type=int, default=d.N)
    p.add_argument("--base-size", type=int, default=None)
    p.add_argument("--mnist-dir", default=None, help=f"MNIST IDX directory (default ${MNIST_ENV})")
    p.add_argument("--surrogate", action="store_true", help="use scikit-learn's 8x8 digits when no MNIST is available")
    leaves["gen.rmnist"] = p

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    _train_opts(p)
    _split_opts(p)
    leaves["train"] = p

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the oracle) on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    _model_source(p)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--no-collapse", action="store_true", help="rank predicted negatives by raw score")
    _split_opts(p)
    leaves["eval"] = p

    exp = sub.add_parser("experiment", help="run an experiment").add_subparsers(dest="kind", required=True)
    p = exp.add_parser("adjust", help="significance trajectories along sequences")
    _common(p)
    p.add_argument("--data", required=True, help="dataset whose generator renders the probes")
    _model_source(p)
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--sequences", type=int, default=50)
    p.add_argument("--s-low", type=float, default=1.0)
    p.add_argument("--s-middle", type=float, default=2.0)
    p.add_argument("--s-high", type=float, default=3.0)
    p.add_argument("--mnist-dir", default=None)
    p.add_argument("--surrogate", action="store_true")
    leaves["experiment.adjust"] = p
    p = exp.add_parser("calibrate", help="fitted score distributions per significance level")
    _common(p)
    p.add_argument("--data", required=True)
    _model_source(p)
    p.add_argument("--levels", type=_floats, default=(1.0, 1.5, 2.0, 2.5))
    p.add_argument("--set-size", type=int, default=50)
    p.add_argument("--mnist-dir", default=None)
    p.add_argument("--surrogate", action="store_true")
    leaves["experiment.calibrate"] = p
    p = exp.add_parser("extract", help="instances sorted by one class score")
    _common(p)
    p.add_argument("--data", required=True)
    _model_source(p)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--checkpoints", type=int, default=10)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--all-instances", action="store_true", help="include instances where the class is negative")
    _split_opts(p)
    leaves["experiment.extract"] = p
    p = exp.add_parser("variance", help="narrow vs wide significance range")
    _common(p)
    _tabular_opts(p)
    _train_opts(p)
    p.add_argument("--narrow", type=_floats, default=(1.0, 1.5))
    p.add_argument("--wide", type=_floats, default=(1.0, 3.0))
    p.add_argument("--test-fraction", type=float, default=0.2)
    leaves["experiment.variance"] = p
    p = exp.add_parser("table", help="all methods and modes over several seeds")
    _common(p)
    _tabular_opts(p)
    p.set_defaults(bias_offset=ex.TABLE_TABULAR.bias_offset)
    _train_opts(p)
    p.add_argument("--data", default=None, help="use this dataset instead of generating a tabular one")
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds, starting at --seed")
    p.add_argument("--methods", type=_words, default=ex.METHODS)
    p.add_argument("--modes", type=_words, default=ex.MODES)
    _split_opts(p)
    leaves["experiment.table"] = p

    p = sub.add_parser("report", help="merge CSV outputs into one table")
    _common(p)
    p.add_argument("inputs", nargs="+", help="CSV files or run directories")
    leaves["report"] = p

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write into this directory instead of the recorded one")
    leaves["replay"] = p
    return parser, leaves


def _leaf_key(args) -> str:
    kind = getattr(args, "kind", None)
    return f"{args.command}.{kind}" if kind else args.command


def resolve(argv) -> argparse.Namespace:
    """Parse ``argv`` applying config-file defaults below explicit flags."""
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        known = set(vars(args))
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown option(s) {', '.join(unknown)}")
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: nested values are not allowed ({', '.join(nested)})")
        leaves[_leaf_key(args)].set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(args) -> dict:
    out = {}
    for key in ("data", "checkpoint"):
        p = getattr(args, key, None)
        if not p:
            continue
        p = Path(p)
        target = p / "manifest.json" if p.is_dir() else p
        if target.exists():
            out[key] = {"path": str(p), "sha256": sha256_file(target)}
    for p in getattr(args, "inputs", None) or ():
        if Path(p).is_file():
            out[str(p)] = {"path": str(p), "sha256": sha256_file(p)}
    return out


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(args, out: Path) -> dict:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    manifest = {
        "command": _leaf_key(args).replace(".", " "),
        "config": config,
        "seed": args.seed,
        "inputs": _input_hashes(args),
        "out": str(out),
        "version": __version__,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _tabular_config(args, **overrides) -> TabularConfig:
    cfg = TabularConfig(
        d=args.d,
        K=args.k,
        N=args.n,
        process=args.process,
        coupling=args.coupling,
        weight_scale=args.weight_scale,
        bias_offset=args.bias_offset,
        noise=args.noise,
        sig_low=args.sig_low,
        sig_high=args.sig_high,
        sig_center=args.sig_center,
        seed=args.seed if args.data_seed is None else args.data_seed,
    )
    return replace(cfg, **overrides)


def _train_config(args, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        method=args.method,
        mode=args.mode,
        hidden=tuple(args.hidden),
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        var_floor=args.var_floor,
        val_fraction=args.val_fraction,
        pool=args.pool,
    )
    return replace(cfg, **overrides)


def _load_data(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing dataset file: {exc}") from None


def _mnist(args):
    directory = getattr(args, "mnist_dir", None) or os.environ.get(MNIST_ENV)
    if directory:
        return load_mnist(directory)
    if getattr(args, "surrogate", False):
        return surrogate_mnist()
    raise DataError(f"no MNIST directory: pass --mnist-dir, set ${MNIST_ENV}, or use --surrogate")


def _split(ds, args):
    if args.split == "all":
        return ds
    train_part, test_part = ds.split(args.test_fraction, args.split_seed)
    return test_part if args.split == "test" else train_part


def _model(args):
    if args.oracle:
        return ex.OracleModel("significance")
    return TrainedModel(load_checkpoint(args.checkpoint))


def _backend(ds, args):
    gen = ds.meta.get("generator")
    cfg = ds.meta.get("config", {})
    if gen == "tabular":
        return ex.TabularBackend(TabularConfig(**cfg))
    if gen == "rmnist":
        images, labels = _mnist(args)
        pool = load_checkpoint(args.checkpoint).pool if args.checkpoint else 1
        return ex.RmnistBackend(RankedMnistConfig(**cfg), images, labels, pool)
    raise DataError(f"dataset generator {gen!r} cannot render probe instances")


def _metric_row(report) -> dict:
    row = {k: v for k, v in report.as_row().items()}
    row["n_instances"] = report.n_instances
    for k in METRIC_COLUMNS:
        row[f"undefined_{k}"] = report.n_undefined.get(k, 0)
    return row


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, out: Path) -> list[Path]:
    if args.kind == "tabular":
        ds = gen_tabular(_tabular_config(args))
    else:
        cfg = RankedMnistConfig(
            canvas=args.canvas,
            factor=args.factor,
            scale_min=args.scale_min,
            scale_max=args.scale_max,
            brightness_min=args.brightness_min,
            brightness_max=args.brightness_max,
            digits_min=args.digits_min,
            digits_max=args.digits_max,
            N=args.n,
            base_size=args.base_size,
            seed=args.seed,
        )
        images, labels = _mnist(args)
        ds = compose_ranked_mnist(cfg, images, labels)
    write_dataset(ds, out / "dataset")
    return [out / "dataset"]


def cmd_train(args, out: Path) -> list[Path]:
    ds = _load_data(args.data)
    train_part, _ = ds.split(args.test_fraction, args.split_seed)
    params, history = train(_train_config(args), train_part)
    save_checkpoint(params, out / "checkpoint.ckpt")
    ex.write_csv(history.rows(), out / "history.csv")
    return [out / "checkpoint.ckpt", out / "history.csv"]


def cmd_eval(args, out: Path) -> list[Path]:
    ds = _split(_load_data(args.data), args)
    model = ex.OracleModel("ranks") if args.oracle else _model(args)
    try:
        scores, pos = ex.score(model, ds)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = report_from_predictions(ds.ranks, scores, pos, collapse=not args.no_collapse)
    row = {"split": args.split, **_metric_row(report)}
    return [ex.write_csv([row], out / "metrics.csv")]


def cmd_experiment(args, out: Path) -> list[Path]:
    kind = args.kind
    if kind in ("adjust", "calibrate", "extract"):
        ds = _load_data(args.data)
        model = _model(args)
    if kind == "adjust":
        spec = ex.SequenceSpec(args.sequences, args.length, args.s_low, args.s_middle, args.s_high)
        res = ex.run_adjusting(model, spec, _backend(ds, args), args.seed)
        files = [ex.write_csv(res.rows(), out / "trajectory.csv")]
        summary = {"slopes": res.slopes, "crossed": res.crossed}
    elif kind == "calibrate":
        spec = ex.CalibrationSpec(tuple(args.levels), args.set_size)
        res = ex.run_calibration(model, spec, _backend(ds, args), args.seed)
        files = [ex.write_csv(res.rows(), out / "calibration.csv")]
        summary = {"means": res.means, "monotone": res.monotone}
    elif kind == "extract":
        try:
            res = ex.run_extracted(model, _split(ds, args), args.class_id, args.checkpoints, not args.all_instances)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        files = [ex.write_csv(res.rows(), out / "extract.csv")]
        summary = {"class_id": res.class_id, "n_candidates": int(res.order.size)}
    elif kind == "variance":
        res = ex.run_variance(
            _train_config(args), _tabular_config(args), tuple(args.narrow), tuple(args.wide), args.test_fraction
        )
        files = [ex.write_csv(res.rows(), out / "variance.csv")]
        summary = {
            "narrow_tau_b": res.narrow.report.tau_b,
            "wide_tau_b": res.wide.report.tau_b,
            "narrow_significance_tau_b": res.narrow_sig_tau_b,
            "narrow_significance_undefined": res.narrow_sig_undefined,
        }
    else:
        ds = _load_data(args.data) if args.data else None
        seeds = [args.seed + i for i in range(args.seeds)]
        res = ex.run_table(
            seeds,
            _tabular_config(args),
            _train_config(args),
            args.methods,
            args.modes,
            args.test_fraction,
            dataset=ds,
            split_seed=args.split_seed,
        )
        files = [
            ex.write_csv(res.run_rows(), out / "table_runs.csv"),
            ex.write_csv(res.summary_rows(), out / "table.csv"),
        ]
        summary = {"n_runs": len(res.runs)}
    files.append(ex.write_json(summary, out / "summary.json"))
    return files


def cmd_report(args, out: Path) -> list[Path]:
    rows, fields = [], []
    for item in args.inputs:
        p = Path(item)
        paths = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        if not paths or not all(q.exists() for q in paths):
            raise DataError(f"no CSV output found at {item}")
        for q in paths:
            with open(q, newline="") as f:
                for r in csv.DictReader(f):
                    row = {"source": str(q), **r}
                    rows.append(row)
                    fields += [k for k in row if k not in fields]
    rows = [{k: r.get(k, "") for k in fields} for r in rows]
    path = ex.write_csv(rows, out / "report.csv")
    (out / "report.txt").write_text(render_text_table(rows, fields))
    return [path, out / "report.txt"]


def render_text_table(rows, fields) -> str:
    def fmt(v):
        try:
            x = float(v)
        except (TypeError, ValueError):
            return str(v)
        return str(v) if float(x).is_integer() and "." not in str(v) else f"{x:.2f}"

    cells = [list(fields)] + [[fmt(r[k]) for k in fields] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(fields))]
    lines = ["  ".join(c[i].ljust(widths[i]) for i in range(len(fields))).rstrip() for c in cells]
    return "\n".join(lines) + "\n"


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "experiment": cmd_experiment, "report": cmd_report}


def run(args) -> list[Path]:
    out = Path(args.out)
    write_manifest(args, out)
    return COMMANDS[args.command](args, out)


def replay(manifest_path, out=None) -> list[Path]:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        config = dict(manifest["config"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read run manifest {manifest_path}: {exc}") from None
    if out is not None:
        config["out"] = str(out)
    config["config"] = None
    return run(argparse.Namespace(verbose=False, **config))


def main(argv=None) -> int:
    try:
        args = resolve(argv)
    except ConfigError as exc:
        print(f"mlrank: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        files = replay(args.manifest, args.out) if args.command == "replay" else run(args)
    except NumericAbort as exc:
        print(f"mlrank: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetFormatError, IdxFormatError, CheckpointError, LayoutError, FileNotFoundError) as exc:
        print(f"mlrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"mlrank: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import math
from dataclasses import replace

import numpy as np
import pytest

from mlrank.datagen.idx import surrogate_mnist
from mlrank.datagen.rmnist import RankedMnistConfig
from mlrank.datagen.tabular import TabularConfig, gen_tabular
from mlrank.experiments import (
    CalibrationSpec,
    OracleModel,
    RmnistBackend,
    SequenceSpec,
    ShuffledModel,
    TabularBackend,
    UntrainedModel,
    run_adjusting,
    run_calibration,
    run_extracted,
    run_table,
    run_variance,
    write_csv,
)
from mlrank.metrics import evaluate
from mlrank.model import TrainConfig

SMALL_TRAIN = TrainConfig(hidden=(16,), epochs=2)
SMALL_DATA = TabularConfig(N=800)


def test_oracle_trajectories_are_linear():
    spec = SequenceSpec(n_sequences=5, length=11)
    res = run_adjusting(OracleModel(), spec)
    np.testing.assert_allclose(res.table[:, 0], np.linspace(1, 3, 11))
    np.testing.assert_allclose(res.table[:, 1], 2.0)
    np.testing.assert_allclose(res.table[:, 2], np.linspace(3, 1, 11))
    assert res.slopes["low"] == pytest.approx(0.2) and res.slopes["high"] == pytest.approx(-0.2)
    assert res.slopes["middle"] == pytest.approx(0.0, abs=1e-12)
    assert res.crossed


def test_sequence_frames_share_nuisance():
    spec = SequenceSpec(n_sequences=2, length=5)
    backend = TabularBackend(replace(TabularConfig(), noise=1.0))
    from mlrank.experiments import sequence_probes

    ds, roles = sequence_probes(spec, backend)
    # within one sequence the features move only along the significance templates
    diff = ds.features[1] - ds.features[0]
    step = 0.5 * (backend.world.B[roles[0, 0]] - backend.world.B[roles[0, 2]])
    np.testing.assert_allclose(diff, step, atol=1e-12)


def test_oracle_calibration_means_at_levels():
    res = run_calibration(OracleModel(), CalibrationSpec())
    assert res.means == [1.0, 1.5, 2.0, 2.5]
    assert res.monotone
    # zero spread: no Gaussian fit, reported per level
    assert all(f is None for f in res.fits.values()) and len(res.errors) == 4


def test_shuffled_model_calibration_not_monotone():
    res = run_calibration(ShuffledModel(K=10, seed=0), CalibrationSpec())
    assert not res.monotone


def test_calibration_needs_enough_classes():
    with pytest.raises(ValueError):
        run_calibration(OracleModel(), CalibrationSpec(levels=(1.0, 2.0, 3.0)), TabularBackend(TabularConfig(K=2)))
    with pytest.raises(ValueError):
        CalibrationSpec(levels=(2.0, 1.0))


def test_untrained_model_rejected():
    with pytest.raises(UntrainedModel):
        run_adjusting(None, SequenceSpec(n_sequences=1, length=2))


def test_extract_with_oracle():
    ds = gen_tabular(SMALL_DATA)
    res = run_extracted(OracleModel(), ds, class_id=4, checkpoints=10)
    assert np.all(np.diff(res.checkpoint_significance) >= 0)
    n = int((ds.ranks[:, 4] > 0).sum())
    full = run_extracted(OracleModel(), ds, class_id=4, checkpoints=n)
    assert list(full.checkpoint_ids) == list(full.order)
    assert np.all(np.diff(full.checkpoint_significance) >= 0)
    with pytest.raises(ValueError):
        run_extracted(OracleModel(), ds, class_id=10)


def test_oracle_evaluation_is_perfect():
    ds = gen_tabular(SMALL_DATA)
    rep = evaluate(OracleModel("ranks"), ds)
    assert (rep.tau_b, rep.spearman_rho, rep.gamma, rep.f1) == (100.0, 100.0, 100.0, 100.0)


def test_table_single_seed_matches_multi_seed_row():
    kw = dict(data=SMALL_DATA, base=SMALL_TRAIN, methods=("lsep", "unimlr"), modes=("strong",))
    one = run_table(seeds=(1,), **kw)
    two = run_table(seeds=(0, 1), **kw)
    rows = [r for r in two.run_rows() if r["seed"] == 1]
    assert one.run_rows() == rows
    summary = list(two.summary_rows())
    assert len(summary) == 2 and all(r["n_seeds"] == 2 for r in summary)


def test_zero_width_range_reports_undefined_positive_ranking():
    res = run_variance(SMALL_TRAIN, SMALL_DATA, narrow=(2.0, 2.0))
    assert math.isnan(res.narrow_sig_tau_b)
    assert res.narrow_sig_undefined > 0


def test_csv_writes_are_deterministic(tmp_path):
    rows = [{"a": np.float64(0.1), "b": 2, "c": "x"}, {"a": 1 / 3, "b": np.int64(3), "c": "y"}]
    write_csv(rows, tmp_path / "a.csv")
    write_csv(rows, tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text.splitlines() == ["a,b,c", "0.1,2,x", "0.3333333333333333,3,y"]


def test_image_backend_probes():
    images, labels = surrogate_mnist(per_class=10)
    backend = RmnistBackend(RankedMnistConfig.mini(), images, labels, pool=4)
    res = run_adjusting(OracleModel(), SequenceSpec(n_sequences=2, length=4), backend)
    np.testing.assert_allclose(res.table[:, 0], np.linspace(1, 3, 4))
    assert res.true_table.shape == (4, 3)


def test_weak_unaffected_by_range_narrowing():
    res = run_variance(TrainConfig(mode="weak"))
    assert abs(res.narrow.report.tau_b - res.wide.report.tau_b) <= 3.0

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import confusion_matrix, f1_score

from cgdl.data import SplitSpec, generate_synthetic, make_outliers, split
from cgdl.detector import OpenSetDetector
from cgdl.errors import ConfigError
from cgdl.evaluation import (
    VARIANTS,
    AblationSpec,
    confusion_counts,
    evaluate,
    export_latents,
    macro_f1,
    openness,
    openness_for,
    per_class_f1,
    read_latents,
    resolve_variant,
    run_ablation,
    write_ablation,
)
from cgdl.ladder import LadderConfig, LadderModel, infer
from cgdl.trainer import TrainConfig, train


def test_openness_values():
    assert openness(5, 5, 5) == 0.0
    assert openness(15, 30, 15) == pytest.approx(1 - math.sqrt(30 / 45))
    assert openness_for(4, 2) == pytest.approx(1 - math.sqrt(8 / 10))
    with pytest.raises(ValueError):
        openness(0, 1, 1)
    with pytest.raises(ValueError):
        openness(10, 2, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 30))
def test_openness_monotone_in_unknowns(k, u, extra):
    assert 0.0 <= openness_for(k, u) < 1.0
    assert openness_for(k, u + extra) >= openness_for(k, u)


labels_strategy = st.integers(2, 5).flatmap(
    lambda k: st.tuples(
        st.just(k),
        st.lists(st.tuples(st.integers(0, k), st.integers(0, k)), min_size=1, max_size=60),
    )
)


@settings(max_examples=200, deadline=None)
@given(labels_strategy)
def test_macro_f1_matches_sklearn(data):
    k, pairs = data
    truth, pred = np.array(pairs).T
    counts = confusion_counts(truth, pred, k)
    np.testing.assert_array_equal(counts, confusion_matrix(truth, pred, labels=range(k + 1)))
    want = f1_score(truth, pred, labels=range(k + 1), average="macro", zero_division=0)
    assert macro_f1(counts) == pytest.approx(want, abs=1e-12)
    want_known = f1_score(truth, pred, labels=range(k), average="macro", zero_division=0)
    assert macro_f1(counts, range(k)) == pytest.approx(want_known, abs=1e-12)


def test_per_class_f1_naive():
    counts = np.array([[3, 1, 0], [0, 2, 2], [1, 0, 0]])
    f1 = per_class_f1(counts)
    # class 0: p=3/4 r=3/4; class 1: p=2/3 r=1/2; class 2: tp=0
    np.testing.assert_allclose(f1, [0.75, 2 * (2 / 3) * 0.5 / (2 / 3 + 0.5), 0.0])
    with pytest.raises(ValueError):
        macro_f1(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        confusion_counts([0, 3], [0, 0], 2)


def test_variant_table():
    assert set(VARIANTS) == {"I", "II", "III", "IV", "V", "VI", "VII"}
    assert resolve_variant("cgdl") is VARIANTS["VII"]
    assert resolve_variant("vi") is VARIANTS["VI"]
    assert VARIANTS["V"].profile == VARIANTS["VI"].profile == VARIANTS["VII"].profile
    assert VARIANTS["I"].profile != VARIANTS["II"].profile
    with pytest.raises(ConfigError, match="valid names"):
        resolve_variant("VIII")


@pytest.fixture(scope="module")
def trained():
    pool = generate_synthetic(4, 60, image_side=8, seed=0)
    tr, te, un = split(pool, SplitSpec([0, 1, 2], [3], seed=0, test_fraction=0.25))
    model = LadderModel.init(LadderConfig(64, (32, 16), 3, latent_dim=4), seed=0)
    train(model, tr, TrainConfig(epochs=40, learning_rate=0.002, batch_size=16))
    det = OpenSetDetector.calibrate(model, tr.flat(), tr.labels)
    return model, det, tr, te, un


def test_evaluate_report(trained):
    model, det, tr, te, un = trained
    noise = make_outliers("uniform_noise", tr, 40, seed=0)
    rep = evaluate(model, det, te, [un, noise])
    assert rep.macro_f1_classes == 4
    assert rep.num_known_samples == len(te) and rep.num_unknown_samples == len(un) + 40
    assert rep.openness == pytest.approx(openness_for(3, 2))
    counts = np.array(rep.confusion)
    assert counts.sum() == len(te) + len(un) + 40
    assert rep.macro_f1 == pytest.approx(macro_f1(counts))
    pred = det.predict(model, noise.flat())
    assert rep.unknown_rejection_rate == pytest.approx(
        (np.sum(det.predict(model, un.flat()) == 3) + np.sum(pred == 3)) / (len(un) + 40))
    assert json.loads(json.dumps(rep.to_dict()))["detector"] == "cgd_and_re"


def test_evaluate_without_unknowns(trained):
    model, det, _, te, _ = trained
    rep = evaluate(model, det, te, [])
    assert rep.macro_f1_classes == 3 and rep.openness == 0.0
    assert rep.unknown_rejection_rate is None
    assert np.all(np.array(rep.confusion)[3] == 0)


def test_latents_roundtrip(trained, tmp_path):
    model, _, _, te, _ = trained
    path = export_latents(model, te, tmp_path / "z.csv")
    ids, labels, z = read_latents(path)
    np.testing.assert_array_equal(ids, np.arange(len(te)))
    np.testing.assert_array_equal(labels, te.labels)
    # repr floats survive the text round trip bit for bit
    np.testing.assert_array_equal(z, infer(model, te.flat())["z"])
    with open(path) as fh:
        assert next(csv.reader(fh)) == ["sample_id", "label", "z_1", "z_2", "z_3", "z_4"]


def test_small_ablation_grid(tmp_path):
    spec = AblationSpec(pool_classes=5, num_known=3, per_class=30, unknown_per_class=10, image_side=8,
                        layer_dims=(16, 8), latent_dim=4, epochs=20, learning_rate=0.005, batch_size=16)
    res = run_ablation(spec, ["I", "IV", "VII"], [1, 2], seeds=[0, 1])
    assert len(res.cells) == 3 * 2 * 2
    assert all(c.macro_f1 is not None for c in res.cells)
    row = res.row("VII", 2)
    vals = [c.macro_f1 for c in res.cells if c.variant == "VII" and c.unknown_classes == 2]
    assert row.mean_f1 == pytest.approx(np.mean(vals)) and row.std_f1 == pytest.approx(np.std(vals))
    assert row.openness == pytest.approx(openness_for(3, 2))
    again = run_ablation(spec, ["I", "IV", "VII"], [1, 2], seeds=[0, 1])
    assert [c.macro_f1 for c in again.cells] == [c.macro_f1 for c in res.cells]
    paths = write_ablation(res, tmp_path, {"k": 1})
    with open(paths["table"]) as fh:
        assert len(list(csv.DictReader(fh))) == 6
    assert json.loads(paths["summary"].read_text())["config"] == {"k": 1}


def test_ablation_reports_impossible_levels():
    spec = AblationSpec(pool_classes=4, num_known=3, per_class=20, image_side=8,
                        layer_dims=(16, 8), latent_dim=4, epochs=20, learning_rate=0.005, batch_size=16)
    res = run_ablation(spec, ["VII"], [1, 3], seeds=[0])
    assert res.row("VII", 3).failed == 1 and res.row("VII", 3).mean_f1 is None
    assert res.row("VII", 1).runs == 1


def test_ablation_records_failed_training_cells():
    # one epoch leaves a class with no correct predictions, so calibration fails
    spec = AblationSpec(pool_classes=4, num_known=3, per_class=20, image_side=8,
                        layer_dims=(8,), latent_dim=2, epochs=1)
    res = run_ablation(spec, ["VII"], [1], seeds=[0])
    cell = res.cells[0]
    assert cell.macro_f1 is None and "CalibrationError" in cell.error
    assert res.row("VII", 1).failed == 1

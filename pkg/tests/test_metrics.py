import numpy as np
import pytest

import oracles
from prgcn.metrics import EvalRecord, add_metric, adds_metric, auc, evaluate, success_rate
from prgcn.pose import Pose

SQUARE = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
Z90 = Pose(np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]), np.zeros(3))


def test_identical_poses_score_zero():
    p = Pose.random(np.random.default_rng(0))
    assert add_metric(p, p, SQUARE) == 0.0
    assert adds_metric(p, p, SQUARE) == 0.0


def test_add_translation_offset():
    rng = np.random.default_rng(1)
    gt = Pose.random(rng)
    delta = np.array([0.003, -0.004, 0.0])
    pred = Pose(gt.rotation, gt.translation + delta)
    assert add_metric(gt, pred, rng.normal(size=(30, 3))) == pytest.approx(0.005, abs=1e-15)


def test_symmetric_square():
    gt = Pose.random(np.random.default_rng(2))
    pred = gt.compose(Z90)
    assert adds_metric(gt, pred, SQUARE) < 1e-12
    assert add_metric(gt, pred, SQUARE) > 0.1


def test_metrics_match_oracles():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = Pose.random(rng), Pose.random(rng)
        model = rng.normal(size=(15, 3)) * 0.05
        args = (a.matrix, a.translation, b.matrix, b.translation, model)
        assert abs(add_metric(a, b, model) - oracles.add(*args)) <= 1e-12
        assert abs(adds_metric(a, b, model) - oracles.adds(*args)) <= 1e-12


def test_auc_examples():
    assert auc([0.0, 0.0]) == 100.0
    assert auc([0.05, 0.2], 0.1) == pytest.approx(25.0, abs=0.1)
    assert auc([0.2, 0.3], 0.1) == 0.0


def test_auc_matches_oracle():
    errors = np.random.default_rng(4).uniform(0, 0.12, size=40)
    assert auc(errors, 0.1) == pytest.approx(oracles.auc(errors, 0.1), abs=1e-9)


def test_success_rate_examples():
    assert success_rate([0.0, 0.0], 0.5) == 100.0
    assert success_rate([0.01, 0.03], 0.02) == 50.0
    assert success_rate([0.0, 0.1], 0.0) == 0.0


def test_report_mean_row_and_bypass():
    rng = np.random.default_rng(5)
    records = []
    for i in range(9):
        gt = Pose.random(rng)
        pred = gt if i % 3 == 0 else Pose(gt.rotation, gt.translation + rng.normal(size=3) * 0.01)
        records.append(EvalRecord(["a", "b", "c"][i % 3], gt, pred, rng.normal(size=(20, 3)) * 0.05))
    report = evaluate(records)
    rows = np.array([o.values() for o in report.objects])
    np.testing.assert_allclose(report.mean.values(), rows.mean(axis=0), atol=1e-9)
    assert "MEAN" in report.to_text()
    assert report.to_csv().splitlines()[-1].startswith("MEAN")
    perfect = evaluate([EvalRecord("a", r.gt, r.gt, r.model) for r in records])
    assert perfect.mean.add == perfect.mean.adds == 0.0
    assert perfect.mean.auc == 100.0


def test_asymmetric_objects_use_add():
    gt = Pose.random(np.random.default_rng(6))
    rec = EvalRecord("sq", gt, gt.compose(Z90), SQUARE * 0.05, symmetric=False)
    assert evaluate([rec]).objects[0].auc < 100.0
    rec.symmetric = True
    assert evaluate([rec]).objects[0].auc == 100.0


def test_adds_not_above_add_when_poses_nearly_agree():
    # every nearest neighbor is the corresponding point, so both metrics see the same distances
    rng = np.random.default_rng(11)
    for _ in range(200):
        gt = Pose.random(rng)
        pred = Pose(gt.rotation, gt.translation + rng.normal(size=3) * 0.3)
        model = rng.normal(size=(int(rng.integers(1, 30)), 3)) * 0.05
        assert adds_metric(gt, pred, model) <= add_metric(gt, pred, model)

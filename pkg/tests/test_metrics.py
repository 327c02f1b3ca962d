from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import add_loop, add_s_loop
from roitrack.metrics import (AR_ERRORS, IOU_THRESHOLDS, TOP_K, Detection, ModelPoints, Pose, add,
                              add_recall, add_s, add_surrogate_error, average_recall, category_ap,
                              mean_ap, model_diameter, recall_curve, recall_tables)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng, scale=1.0):
    return Pose(random_rotation(rng), scale * rng.standard_normal(3))


def test_threshold_ladder():
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95
    np.testing.assert_allclose(np.diff(IOU_THRESHOLDS), 0.05, atol=1e-12)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(2 * np.eye(3), np.zeros(3))


def test_model_points_validation():
    with pytest.raises(ValueError):
        ModelPoints(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ModelPoints(np.eye(3), diameter=5.0)
    assert ModelPoints(np.eye(3)).diameter == pytest.approx(math.sqrt(2))


def test_diameter_hull_path(rng):
    pts = rng.standard_normal((300, 3))
    diff = pts[:, None] - pts[None]
    assert model_diameter(pts) == pytest.approx(np.sqrt((diff**2).sum(-1)).max(), abs=1e-12)
    # a planar cloud makes the hull degenerate; the brute-force path still answers
    flat = pts.copy()
    flat[:, 2] = 0.0
    diff = flat[:, None] - flat[None]
    assert model_diameter(flat) == pytest.approx(np.sqrt((diff**2).sum(-1)).max(), abs=1e-12)


def test_identical_poses():
    rng = np.random.default_rng(0)
    p, m = random_pose(rng), ModelPoints(rng.standard_normal((30, 3)))
    assert add(p, p, m) == 0.0
    assert add_s(p, p, m) == 0.0


def test_pure_translation_exact():
    pts = np.array([[0, 0, 0], [1, 2, 3], [-4, 0, 2], [5, 5, -1]], float)
    m = ModelPoints(pts)
    gt = Pose(np.eye(3), [1.0, 2.0, 3.0])
    est = Pose(np.eye(3), [4.0, 6.0, 3.0])
    assert add(est, gt, m) == 5.0


def test_symmetric_ring():
    k = 12
    ang = 2 * np.pi * np.arange(k) / k
    m = ModelPoints(np.stack([np.cos(ang), np.sin(ang), np.zeros(k)], 1))
    c, s = math.cos(2 * np.pi / k), math.sin(2 * np.pi / k)
    step = Pose([[c, -s, 0], [s, c, 0], [0, 0, 1]], np.zeros(3))
    ident = Pose(np.eye(3), np.zeros(3))
    assert add_s(step, ident, m) < 1e-12
    assert add(step, ident, m) == pytest.approx(2 * math.sin(np.pi / k), abs=1e-12)


def test_loop_oracles_100_cases():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = ModelPoints(rng.standard_normal((int(rng.integers(2, 40)), 3)))
        est, gt = random_pose(rng), random_pose(rng)
        args = (est.rotation.tolist(), est.translation.tolist(), gt.rotation.tolist(), gt.translation.tolist(),
                m.points.tolist())
        assert abs(add(est, gt, m) - add_loop(*args)) < 1e-10
        assert abs(add_s(est, gt, m) - add_s_loop(*args)) < 1e-10


@given(st.integers(0, 10**6))
def test_add_s_bounded_by_add(seed):
    rng = np.random.default_rng(seed)
    m = ModelPoints(rng.standard_normal((int(rng.integers(1, 30)), 3)))
    est, gt = random_pose(rng), random_pose(rng)
    assert add_s(est, gt, m) <= add(est, gt, m) + 1e-12


@given(st.integers(0, 10**6))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = ModelPoints(rng.standard_normal((20, 3)))
    est, gt, a = random_pose(rng), random_pose(rng), random_pose(rng)

    def compose(p):
        return Pose(a.rotation @ p.rotation, a.rotation @ p.translation + a.translation)

    assert add(compose(est), compose(gt), m) == pytest.approx(add(est, gt, m), abs=1e-9)
    assert add_s(compose(est), compose(gt), m) == pytest.approx(add_s(est, gt, m), abs=1e-9)


def test_add_recall():
    assert add_recall([0.0, 0.05, 0.1, 0.3], 0.1, 1.0) == 0.5
    assert add_recall([0.0], 0.1, 1.0) == 1.0
    with pytest.raises(ValueError):
        add_recall([], 0.1, 1.0)
    with pytest.raises(ValueError):
        add_recall([0.1], 0.0, 1.0)


def test_surrogate_error_normalized(rng):
    m = ModelPoints(rng.standard_normal((10, 3)))
    est, gt = random_pose(rng), random_pose(rng)
    assert add_surrogate_error(est, gt, m) == add(est, gt, m) / m.diameter


# ------------------------------------------------------------------------ mAP

def test_three_detection_fixture():
    dets = [Detection("mug", 0.9, 0.9), Detection("mug", 0.8, 0.6), Detection("mug", 0.7, 0.0)]
    # 0.9 clears 9 thresholds, 0.6 clears 3, the false positive none: 12 / 30
    assert category_ap(dets) == 0.4
    report = mean_ap(dets)
    assert report.per_category == {("default", "mug"): 0.4}
    assert report.overall == 0.4


def test_visibility_filter():
    dets = [Detection("a", 0.9, 1.0), Detection("a", 0.5, 0.0, visibility=0.05)]
    assert mean_ap(dets).overall == 1.0
    assert mean_ap(dets + [Detection("a", 0.4, 0.0, visibility=0.1)]).overall == 0.5


def test_filtered_category_excluded(caplog):
    dets = [Detection("a", 0.9, 1.0), Detection("b", 0.9, 0.0, visibility=0.0)]
    report = mean_ap(dets)
    assert ("default", "b") not in report.per_category
    assert report.overall == 1.0
    assert "no detections" in caplog.text


def test_everything_filtered():
    with pytest.raises(ValueError):
        mean_ap([Detection("a", 0.9, 1.0, visibility=0.0)])


def test_top_k_per_image():
    good = [Detection("a", 1.0 - i * 1e-3, 1.0) for i in range(TOP_K)]
    worse = [Detection("a", 0.01, 0.0) for _ in range(5)]
    assert mean_ap(worse + good).overall == 1.0
    other = [Detection("a", 0.01, 0.0, image_id="1")]
    assert mean_ap(good + other).overall == pytest.approx(100 / 101, abs=1e-15)


def test_dataset_averaging():
    dets = [Detection("a", 0.9, 1.0, dataset="x"), Detection("b", 0.9, 0.0, dataset="x"),
            Detection("a", 0.9, 1.0, dataset="y")]
    report = mean_ap(dets)
    assert report.per_dataset == {"x": 0.5, "y": 1.0}
    assert report.overall == 0.75


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("a", 0.5, 1.5)
    with pytest.raises(ValueError):
        Detection("a", 0.5, 0.5, visibility=-0.1)


# ------------------------------------------------------------------------- AR

def test_average_recall_hand_case():
    tables = {"d1": {"vsd": [0.2, 0.4], "mssd": [0.6], "mspd": [0.9, 0.9]},
              "d2": {"vsd": [0.3], "mssd": [0.6], "mspd": [0.9]}}
    ar_d, ar_c = average_recall(tables)
    assert ar_d["d1"] == pytest.approx((0.3 + 0.6 + 0.9) / 3, abs=1e-15)
    assert ar_d["d2"] == pytest.approx(0.6, abs=1e-15)
    assert ar_c == pytest.approx(0.6, abs=1e-15)


def test_average_recall_missing_error():
    with pytest.raises(ValueError):
        average_recall({"d": {"vsd": [1.0], "mssd": [1.0]}})
    with pytest.raises(ValueError):
        average_recall({})


def test_recall_curve():
    assert recall_curve([0.1, 0.2, 0.3, 0.4], [0.15, 0.35, 1.0]) == [0.25, 0.75, 1.0]
    with pytest.raises(ValueError):
        recall_curve([], [0.1])


def test_recall_tables_pluggable(rng):
    m = ModelPoints(rng.standard_normal((10, 3)))
    p = random_pose(rng)
    pairs = [(p, p, m)] * 3
    fns = {e: add_surrogate_error for e in AR_ERRORS}
    tables = recall_tables(pairs, fns, {e: [0.05, 0.5] for e in AR_ERRORS})
    assert tables == {e: [1.0, 1.0] for e in AR_ERRORS}
    assert average_recall({"d": tables})[1] == 1.0

"""Metric protocol: IoU examples, success predicate against brute force,
matching conservation, zero-division sentinels, sweep monotonicity."""

import numpy as np
import pytest

from advreal import metrics
from advreal.detect import Detection
from advreal.errors import DomainError
from advreal.metrics import (
    EvalReport,
    attack_success,
    evaluate_detections,
    iou,
    occlude_patch_center,
    sweep,
)
from advreal.scene import BoundingBox


def det(x0, y0, x1, y1, conf, label=1):
    return Detection(BoundingBox(x0, y0, x1, y1), conf, label)


# -- iou -----------------------------------------------------------------------


def test_iou_identity():
    b = BoundingBox(3, 4, 10, 20)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0


def test_iou_hand_computed():
    a = BoundingBox(0, 0, 2, 2)
    b = BoundingBox(1, 0, 3, 2)
    assert iou(a, b) == pytest.approx(1.0 / 3.0)


def test_iou_symmetric_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        vals = rng.uniform(0, 100, 8)
        a = BoundingBox(min(vals[0], vals[1]), min(vals[2], vals[3]),
                        max(vals[0], vals[1]) + 1, max(vals[2], vals[3]) + 1)
        b = BoundingBox(min(vals[4], vals[5]), min(vals[6], vals[7]),
                        max(vals[4], vals[5]) + 1, max(vals[6], vals[7]) + 1)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a), abs=1e-15)


# -- attack_success ----------------------------------------------------------------


def test_empty_detections_success():
    assert attack_success([], BoundingBox(0, 0, 10, 10))


def test_qualified_detection_blocks_success():
    gt = BoundingBox(0, 0, 100, 200)
    assert not attack_success([det(0, 0, 90, 180, 0.6)], gt)


def test_success_predicate_matches_brute_force():
    rng = np.random.default_rng(1)
    gt = BoundingBox(100, 100, 220, 380)
    for _ in range(100):
        dets = []
        for _ in range(rng.integers(0, 8)):
            c = rng.uniform(50, 350, 2)
            s = rng.uniform(30, 200, 2)
            dets.append(det(c[0] - s[0] / 2, c[1] - s[1] / 2,
                            c[0] + s[0] / 2, c[1] + s[1] / 2,
                            rng.uniform(0, 1), int(rng.integers(1, 3))))
        got = attack_success(dets, gt, 0.5, 0.5)
        exists = any(
            d.label == 1 and d.confidence >= 0.5 and iou(d.box, gt) >= 0.5 for d in dets
        )
        assert got == (not exists)


def test_threshold_validation():
    with pytest.raises(DomainError):
        attack_success([], BoundingBox(0, 0, 1, 1), iou_thres=0.0)


# -- evaluate ------------------------------------------------------------------------


def test_all_undetected_gives_full_asr_zero_recall():
    gt = BoundingBox(10, 10, 60, 110)
    report = evaluate_detections([([], [gt]), ([], [gt])])
    assert report.asr == 1.0
    assert report.recall == 0.0
    assert "recall_zero_division" in report.flags or report.counts[0] == 0


def test_single_perfect_detection():
    gt = BoundingBox(10, 10, 60, 110)
    report = evaluate_detections([([det(10, 10, 60, 110, 0.9)], [gt])])
    assert report.precision == 1.0
    assert report.recall == 1.0
    assert report.f1 == 1.0
    assert report.avg_confidence == pytest.approx(0.9)
    assert report.asr == 0.0


def test_matching_conservation():
    rng = np.random.default_rng(2)
    for _ in range(50):
        per_sample = []
        n_gt_total = 0
        n_strong_total = 0
        for _ in range(rng.integers(1, 5)):
            gts = []
            for _ in range(rng.integers(0, 3)):
                c = rng.uniform(60, 350, 2)
                s = rng.uniform(40, 150, 2)
                gts.append(BoundingBox(c[0] - s[0] / 2, c[1] - s[1] / 2,
                                       c[0] + s[0] / 2, c[1] + s[1] / 2))
            dets = []
            for _ in range(rng.integers(0, 6)):
                c = rng.uniform(60, 350, 2)
                s = rng.uniform(40, 150, 2)
                dets.append(det(c[0] - s[0] / 2, c[1] - s[1] / 2,
                                c[0] + s[0] / 2, c[1] + s[1] / 2, rng.uniform(0, 1)))
            n_gt_total += len(gts)
            n_strong_total += sum(d.confidence >= 0.5 for d in dets)
            per_sample.append((dets, gts))
        report = evaluate_detections(per_sample, 0.5, 0.5)
        tp, fp, fn, successes, total = report.counts
        assert tp + fn == n_gt_total
        assert tp + fp == n_strong_total
        assert successes <= total == len(per_sample)


def test_empty_corpus_rejected():
    with pytest.raises(DomainError):
        evaluate_detections([])


def test_f1_harmonic_mean():
    gt = BoundingBox(10, 10, 60, 110)
    per_sample = [
        ([det(10, 10, 60, 110, 0.9), det(200, 200, 250, 300, 0.8)], [gt]),
        ([], [gt]),
    ]
    report = evaluate_detections(per_sample)
    p, r = report.precision, report.recall
    assert report.f1 == pytest.approx(2 * p * r / (p + r))


def test_report_json_round_trip(tmp_path):
    report = evaluate_detections([([det(0, 0, 10, 10, 0.7)], [BoundingBox(0, 0, 10, 10)])])
    path = tmp_path / "r.json"
    report.to_json(path)
    import json

    data = json.loads(path.read_text())
    assert data["asr"] == report.asr
    assert data["counts"]["tp"] == report.counts[0]


# -- sweep ----------------------------------------------------------------------------


class _FixedDetector:
    def __init__(self, mapping):
        self.mapping = mapping
        self.calls = 0

    def detect(self, image):
        self.calls += 1
        return self.mapping[image.tobytes()]


def _sweep_fixture(rng, n=12):
    samples = []
    mapping = {}
    for i in range(n):
        img = np.full((4, 4, 3), i / n)
        gt = BoundingBox(100, 100, 200, 300)
        dets = []
        for _ in range(rng.integers(0, 4)):
            jitter = rng.uniform(-60, 60, 2)
            dets.append(det(100 + jitter[0], 100 + jitter[1],
                            200 + jitter[0], 300 + jitter[1], rng.uniform(0.05, 1.0)))
        mapping[img.tobytes()] = dets
        samples.append((img, [gt]))
    return samples, _FixedDetector(mapping)


def test_single_cell_sweep_equals_evaluate():
    rng = np.random.default_rng(3)
    samples, detector = _sweep_fixture(rng)
    reports = sweep(samples, detector, [0.5], [0.5])
    direct = metrics.evaluate_corpus(samples, detector, 0.5, 0.5)
    assert len(reports) == 1
    assert reports[0].to_dict() == direct.to_dict()


def test_sweep_asr_monotone_in_both_thresholds():
    rng = np.random.default_rng(4)
    samples, detector = _sweep_fixture(rng, n=24)
    iou_grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    conf_grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    reports = sweep(samples, detector, iou_grid, conf_grid)
    table = {}
    for r in reports:
        table[r.thresholds] = r.asr
    for it in iou_grid:
        for a, b in zip(conf_grid, conf_grid[1:]):
            assert table[(it, a)] <= table[(it, b)] + 1e-12
    for ct in conf_grid:
        for a, b in zip(iou_grid, iou_grid[1:]):
            assert table[(a, ct)] <= table[(b, ct)] + 1e-12
    # detections ran once per sample, not once per cell
    assert detector.calls == len(samples)


def test_sweep_csv_format(tmp_path):
    rng = np.random.default_rng(5)
    samples, detector = _sweep_fixture(rng)
    reports = sweep(samples, detector, [0.1, 0.3, 0.5, 0.7, 0.9], [0.5])
    path = tmp_path / "sweep.csv"
    metrics.sweep_to_csv(reports, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("iou_thres,conf_thres,asr")
    assert len(lines) == 1 + 5
    ious = sorted({float(line.split(",")[0]) for line in lines[1:]})
    assert ious == [0.1, 0.3, 0.5, 0.7, 0.9]


def test_sweep_grid_validation():
    rng = np.random.default_rng(6)
    samples, detector = _sweep_fixture(rng)
    with pytest.raises(DomainError):
        sweep(samples, detector, [], [0.5])


# -- occlusion helpers -------------------------------------------------------------------


def test_occlusion_square_exact_100_at_center():
    tex = np.full((300, 300, 3), 0.9)
    occluded, live = occlude_patch_center(tex)
    assert (~live).sum() == 100 * 100
    assert (occluded[100:200, 100:200] == 0.5).all()
    assert (occluded[:100] == 0.9).all()


def test_occluding_gray_patch_is_identity():
    tex = np.full((300, 300, 3), 0.5)
    occluded, _ = occlude_patch_center(tex)
    assert np.array_equal(occluded, tex)


def test_occlusion_scales_with_warning_for_other_sizes():
    tex = np.full((150, 150, 3), 0.8)
    occluded, live = occlude_patch_center(tex)
    assert (~live).sum() == 50 * 50

"""Tests des métriques par tissu, contre des oracles par force brute"""
import csv

import numpy as np
import pytest

from app.core.errors import ShapeError
from app.data.images import ALL_TISSUES, LabelMap, Tissue
from app.intelligence.metrics import (
    REPORT_FIELDS, ClassMetrics, MetricsReport, aggregate_reports, boundary, confusion, dice,
    evaluate_pairs, hd95, per_class_report, sensitivity, specificity, write_aggregate_csv,
    write_boxplot_csv, write_report_csv
)

NO_IMAT = ALL_TISSUES - {int(Tissue.IMAT)}


def random_pairs(count, rng, max_size=32):
    for _ in range(count):
        h, w = rng.integers(4, max_size + 1, size=2)
        yield rng.random((h, w)) < rng.uniform(0.1, 0.9), rng.random((h, w)) < rng.uniform(0.1, 0.9)


def random_blobs(rng, size=32):
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.integers(0, size, size=2)
        mask |= np.hypot(yy - cy, xx - cx) <= rng.uniform(1.0, 8.0)
    return mask


def oracle_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        tp += p and g
        fp += p and not g
        fn += g and not p
        tn += not p and not g
    return tp, fp, fn, tn


def oracle_boundary(mask):
    h, w = mask.shape
    points = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            neighbours = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not mask[a, b] for a, b in neighbours):
                points.append((i, j))
    return np.array(points, dtype=np.float64)


def oracle_distances(pred, gt, spacing=(1.0, 1.0)):
    a = oracle_boundary(pred) * spacing
    b = oracle_boundary(gt) * spacing
    pairwise = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)])


class TestOverlapMetrics:

    def test_identical_masks(self):
        mask = np.array([[1, 0], [1, 1]], dtype=bool)
        assert dice(mask, mask) == 1.0
        assert sensitivity(mask, mask) == specificity(mask, mask) == 1.0

    def test_half_overlap(self):
        pred = np.zeros((2, 2), dtype=bool)
        gt = np.zeros((2, 2), dtype=bool)
        pred[0, 0] = pred[0, 1] = True
        gt[0, 1] = gt[1, 1] = True
        assert dice(pred, gt) == 0.5

    def test_empty_masks(self):
        empty = np.zeros((3, 3), dtype=bool)
        assert dice(empty, empty) == 1.0
        assert sensitivity(empty, empty) is None
        assert specificity(np.ones((3, 3)), np.ones((3, 3))) is None

    def test_all_positive_prediction(self):
        gt = np.eye(3, dtype=bool)
        assert sensitivity(np.ones((3, 3)), gt) == 1.0
        assert specificity(np.ones((3, 3)), gt) == 0.0

    def test_disjoint_masks(self):
        assert dice(np.eye(2, dtype=bool), ~np.eye(2, dtype=bool)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_counting_oracle(self, rng):
        for pred, gt in random_pairs(100, rng):
            tp, fp, fn, tn = oracle_counts(pred, gt)
            assert confusion(pred, gt) == (tp, fp, fn, tn)
            assert dice(pred, gt) == (1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
            assert sensitivity(pred, gt) == (None if tp + fn == 0 else tp / (tp + fn))
            assert specificity(pred, gt) == (None if tn + fp == 0 else tn / (tn + fp))
            assert dice(pred, gt) == dice(gt, pred)


class TestHd95:

    def test_identical_masks(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 1:7] = True
        assert hd95(mask, mask) == 0.0

    def test_three_four_five(self):
        pred = np.zeros((5, 5), dtype=bool)
        gt = np.zeros((5, 5), dtype=bool)
        pred[0, 0] = True
        gt[3, 4] = True
        assert hd95(pred, gt) == pytest.approx(5.0)

    def test_spacing_scales_distances(self):
        pred = np.zeros((5, 5), dtype=bool)
        gt = np.zeros((5, 5), dtype=bool)
        pred[0, 0] = True
        gt[3, 0] = True
        assert hd95(pred, gt, spacing=(2.0, 1.0)) == pytest.approx(6.0)

    def test_empty_mask_is_undefined(self):
        mask = np.ones((3, 3), dtype=bool)
        assert hd95(mask, np.zeros((3, 3), dtype=bool)) is None

    def test_boundary_matches_oracle(self, rng):
        for _ in range(20):
            mask = random_blobs(rng)
            expected = {tuple(p) for p in oracle_boundary(mask).astype(int).tolist()}
            assert {tuple(p) for p in np.argwhere(boundary(mask)).tolist()} == expected

    def test_distance_oracle(self, rng):
        for _ in range(50):
            pred, gt = random_blobs(rng), random_blobs(rng)
            distances = oracle_distances(pred, gt)
            value = hd95(pred, gt)
            assert value == pytest.approx(np.percentile(distances, 95), abs=1e-9)
            assert value <= distances.max() + 1e-12
            assert value == pytest.approx(hd95(gt, pred), abs=1e-9)

    def test_reproducible(self, rng):
        pred, gt = random_blobs(rng), random_blobs(rng)
        assert hd95(pred, gt) == hd95(pred, gt)


class TestPerClassReport:

    def test_perfect_prediction(self):
        classes = np.arange(36).reshape(6, 6) % 6
        labels = LabelMap(classes)
        report = per_class_report(labels, labels, model='oracle')
        assert [r.tissue for r in report.rows] == list(range(6))
        assert all(r.dice == 1.0 and r.hd95_mm == 0.0 for r in report.rows)
        assert report.mean_dice() == 1.0

    def test_unannotated_class_gives_empty_row(self):
        gt = LabelMap(np.array([[1, 2], [0, 1]]), NO_IMAT)
        pred = LabelMap(np.array([[3, 2], [0, 1]]))
        report = per_class_report(pred, gt, classes=[1, 3])
        row = report.row(Tissue.IMAT)
        assert (row.dice, row.sensitivity, row.specificity, row.hd95_mm) == (None, None, None, None)
        assert report.row(Tissue.MUSCLE).dice == pytest.approx(2 / 3)

    def test_composition_oracle(self, rng):
        pred = LabelMap(rng.integers(0, 6, (16, 16)))
        gt = LabelMap(rng.integers(0, 6, (16, 16)))
        report = per_class_report(pred, gt)
        for tissue in Tissue:
            p, g = pred.mask(tissue), gt.mask(tissue)
            row = report.row(tissue)
            assert row.dice == dice(p, g)
            assert row.sensitivity == sensitivity(p, g)
            assert row.specificity == specificity(p, g)
            assert row.hd95_mm == hd95(p, g)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            per_class_report(LabelMap(np.zeros((2, 2))), LabelMap(np.zeros((3, 2))))

    def test_missing_row(self):
        report = per_class_report(LabelMap(np.zeros((2, 2))), LabelMap(np.zeros((2, 2))), classes=[0])
        with pytest.raises(KeyError):
            report.row(Tissue.BONE)


class TestAggregation:

    def test_pooled_pairs(self):
        gt = LabelMap(np.array([[1, 1], [2, 2]]))
        wrong = LabelMap(np.array([[1, 2], [2, 2]]))
        report = evaluate_pairs([(gt, gt), (wrong, gt)], classes=[1, 2])
        assert report.row(Tissue.MUSCLE).dice == pytest.approx(2 * 3 / (3 + 4))
        assert report.row(Tissue.MUSCLE).hd95_mm is not None

    def test_identical_reports_have_zero_spread(self):
        rows = [ClassMetrics(1, 0.9, 0.8, 0.99, 1.5), ClassMetrics(3)]
        reports = [MetricsReport(list(rows), fold=f) for f in range(3)]
        aggregate = aggregate_reports(reports)
        assert aggregate[1]['dice'] == pytest.approx((0.9, 0.0))
        assert aggregate[3]['dice'] == (None, None)

    def test_none_values_are_excluded(self):
        reports = [MetricsReport([ClassMetrics(1, dice=0.5)]), MetricsReport([ClassMetrics(1, dice=None)]),
                   MetricsReport([ClassMetrics(1, dice=0.7)])]
        mean, std = aggregate_reports(reports)[1]['dice']
        assert mean == pytest.approx(0.6)
        assert std == pytest.approx(0.1)

    def test_mean_hd95_skips_background_and_none(self):
        report = MetricsReport([ClassMetrics(0, hd95_mm=10.0), ClassMetrics(1, hd95_mm=1.0),
                                ClassMetrics(2, hd95_mm=3.0), ClassMetrics(3)])
        assert report.mean_hd95 == pytest.approx(2.0)


class TestReportFiles:

    @pytest.fixture
    def reports(self):
        return [MetricsReport([ClassMetrics(1, 1.0, 1.0, 1.0, 0.0), ClassMetrics(3)],
                              model='tiramisu-tiny-regular', fold=f, seed=0, subject=f"S00{f}")
                for f in range(2)]

    def test_report_csv(self, tmp_path, reports):
        path = write_report_csv(tmp_path / 'metrics.csv', reports)
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        assert path.read_text(encoding='utf-8').splitlines()[0] == ','.join(REPORT_FIELDS)
        assert len(rows) == 4
        assert rows[0]['class'] == 'muscle' and rows[0]['dice'] == '1.000000'
        assert rows[1]['class'] == 'imat' and rows[1]['hd95_mm'] == ''

    def test_aggregate_csv(self, tmp_path, reports):
        path = write_aggregate_csv(tmp_path / 'aggregate.csv', reports, model='m')
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 4
        assert rows[0]['std'] == '0.000000' and rows[0]['n_folds'] == '2'

    def test_boxplot_csv(self, tmp_path, reports):
        path = write_boxplot_csv(tmp_path / 'per_subject.csv', reports)
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 2 * 4
        assert {r['subject'] for r in rows} == {'S000', 'S001'}

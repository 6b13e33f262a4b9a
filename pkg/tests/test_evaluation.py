"""Tests for metrics aggregation and CSV/SVG export."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from stbcid.dataset import FRAME_LEN, FrameSet
from stbcid.errors import ParameterError, ShapeError
from stbcid.evaluation import (
    AccuracyCurve,
    LossCurve,
    accuracy_vs_snr,
    confusion_matrix,
    read_accuracy_csv,
    read_confusion_csv,
    read_loss_csv,
    render_accuracy_svg,
    render_confusion_svg,
    render_loss_svg,
    write_accuracy_csv,
    write_confusion_csv,
    write_loss_csv,
)

SM, AL = 0, 1


def _frames(schemes, snrs):
    n = len(schemes)
    return FrameSet(
        frames=np.zeros((n, 2, FRAME_LEN), np.float32),
        schemes=np.array(schemes, np.uint8),
        snrs_db=np.array(snrs, np.float64),
    )


class TestConfusionMatrix:
    def test_all_correct(self):
        cm = confusion_matrix([SM, AL, SM], [SM, AL, SM])
        np.testing.assert_array_equal(cm, [[2, 0], [0, 1]])

    def test_one_error(self):
        cm = confusion_matrix([AL, AL], [SM, AL])
        np.testing.assert_array_equal(cm, [[0, 1], [0, 1]])

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            confusion_matrix([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            confusion_matrix([SM], [SM, AL])


class TestAccuracyVsSnr:
    def test_perfect_classifier(self):
        frames = _frames([SM, AL] * 10, [0.0] * 10 + [10.0] * 10)
        truth = iter(frames.schemes.tolist())
        curve, confusions = accuracy_vs_snr(lambda f: next(truth), frames)
        assert all(acc == 1.0 for _, acc, _ in curve.points)
        assert set(confusions) == {0.0, 10.0}

    def test_constant_sm_classifier_on_balanced_data(self):
        frames = _frames([SM, AL] * 10, [5.0] * 20)
        curve, _ = accuracy_vs_snr(lambda f: SM, frames)
        assert curve.points == ((5.0, 0.5, 20),)

    def test_accuracy_equals_trace_over_total(self):
        rng = np.random.default_rng(0)
        schemes = rng.integers(0, 2, 40)
        frames = _frames(schemes, [3.0] * 40)
        preds = rng.integers(0, 2, 40)
        curve, confusions = accuracy_vs_snr(lambda a: preds, frames, vectorized=True)
        cm = confusions[3.0]
        assert curve.points[0][1] == pytest.approx(np.trace(cm) / cm.sum())
        assert cm.sum() == 40

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            accuracy_vs_snr(lambda f: SM, _frames([], []))


class TestCsvRoundTrips:
    def test_accuracy_csv(self, tmp_path):
        curve = AccuracyCurve(points=((-5.0, 0.5, 100), (0.0, 0.75, 100), (5.0, 1.0, 100)))
        path = tmp_path / "acc.csv"
        write_accuracy_csv(curve, path)
        assert len(path.read_text().splitlines()) == 4
        assert read_accuracy_csv(path) == curve

    def test_confusion_csv(self, tmp_path):
        cm = np.array([[48, 2], [5, 45]])
        path = tmp_path / "cm.csv"
        write_confusion_csv(cm, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "true,pred,count"
        assert len(lines) == 5
        back, snr = read_confusion_csv(path)
        np.testing.assert_array_equal(back, cm)
        assert snr is None

    def test_confusion_csv_with_snr(self, tmp_path):
        cm = np.array([[10, 0], [0, 10]])
        path = tmp_path / "cm.csv"
        write_confusion_csv(cm, path, snr_db=-5.0)
        back, snr = read_confusion_csv(path)
        np.testing.assert_array_equal(back, cm)
        assert snr == -5.0

    def test_loss_csv(self, tmp_path):
        curve = LossCurve(train_loss=(0.7, 0.5, 0.4), val_loss=(0.71, 0.52, 0.45))
        path = tmp_path / "loss.csv"
        write_loss_csv(curve, path)
        assert read_loss_csv(path) == curve


class TestSvg:
    def test_accuracy_svg_structure(self, tmp_path):
        curve = AccuracyCurve(points=((-10.0, 0.5, 50), (0.0, 0.9, 50), (10.0, 1.0, 50)))
        path = tmp_path / "acc.svg"
        render_accuracy_svg(curve, path)
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 1

    def test_loss_svg_two_series_and_tick_span(self, tmp_path):
        n = 30
        curve = LossCurve(
            train_loss=tuple(0.7 * 0.9**i for i in range(n)),
            val_loss=tuple(0.75 * 0.92**i for i in range(n)),
        )
        path = tmp_path / "loss.svg"
        render_loss_svg(curve, path)
        root = ET.parse(path).getroot()
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 2
        labels = [t.text for t in root.findall(".//{http://www.w3.org/2000/svg}text")]
        assert "1" in labels and "30" in labels

    def test_confusion_svg_diagonal_labels(self, tmp_path):
        path = tmp_path / "cm.svg"
        render_confusion_svg(np.array([[100, 0], [0, 100]]), path)
        root = ET.parse(path).getroot()
        labels = [t.text for t in root.findall(".//{http://www.w3.org/2000/svg}text")]
        assert labels.count("100") == 2
        assert "SM" in labels and "AL" in labels

    def test_empty_curve_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            render_accuracy_svg(AccuracyCurve(points=()), tmp_path / "x.svg")

    def test_curve_validation(self):
        with pytest.raises(ParameterError):
            AccuracyCurve(points=((0.0, 0.5, 10), (0.0, 0.6, 10)))
        with pytest.raises(ParameterError):
            AccuracyCurve(points=((0.0, 1.5, 10),))

import csv

import numpy as np
import pytest
from PIL import Image

from duoseg import evaluation as E

import oracles


def test_dsc_examples():
    y = np.array([[1, 0], [1, 1]])
    assert E.dsc(y, y) == 1.0
    assert E.dsc(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == 0.5
    assert E.dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        E.dsc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_mae_examples():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert E.mae(y, y) == 0.0
    assert E.mae(np.full((2, 2), 0.5), y) == 0.5
    assert E.mae(np.array([0.9, 0.2]), np.array([1.0, 0.0])) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ValueError):
        E.mae(np.zeros(2), np.zeros(3))


def test_dsc_matches_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.uniform(size=(5, 5)) > rng.uniform()
        y = rng.uniform(size=(5, 5)) > rng.uniform()
        assert abs(E.dsc(p, y) - oracles.dsc_sets(p.tolist(), y.tolist())) < 1e-9
        assert E.dsc(p, y) == E.dsc(y, p)
        assert 0 <= E.dsc(p, y) <= 1


def test_mae_range():
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = E.mae(rng.uniform(size=(4, 4)), rng.integers(0, 2, (4, 4)))
        assert 0 <= v <= 1


def test_flipping_correct_pixel_never_increases_dsc():
    rng = np.random.default_rng(2)
    for _ in range(200):
        y = rng.integers(0, 2, (5, 5))
        p = rng.integers(0, 2, (5, 5))
        correct = np.argwhere(p == y)
        if not len(correct):
            continue
        i, j = correct[rng.integers(len(correct))]
        q = p.copy()
        q[i, j] = 1 - q[i, j]
        assert E.dsc(q, y) <= E.dsc(p, y)


def test_evaluate_predictions_thresholds_and_averages():
    targets = [np.array([[1.0, 0.0]]), np.zeros((1, 2))]
    probs = [np.array([[0.9, 0.2]]), np.array([[0.4, 0.1]])]
    dsc_pct, mae = E.evaluate_predictions(probs, targets)
    assert dsc_pct == 100.0
    assert mae == pytest.approx((0.15 + 0.25) / 2)


def test_export_confidence_map_mid_gray(tmp_path):
    path = E.export_confidence_map(lambda m: np.full_like(m, 0.5), np.zeros((8, 6)), tmp_path / "c.png")
    arr = np.asarray(Image.open(path))
    assert arr.shape == (8, 6) and arr.dtype == np.uint8
    assert np.all(arr == 128)


def test_export_confidence_map_checkerboard(tmp_path):
    board = (np.indices((6, 6)).sum(0) % 2).astype(float)
    path = E.export_confidence_map(lambda m: board, np.zeros((6, 6)), tmp_path / "c.png")
    np.testing.assert_array_equal(np.asarray(Image.open(path)), (board * 255).astype(np.uint8))


def _report(method, fractions, test_hash="abc"):
    recs = [E.MetricRecord(method, f, 80.0 + 10 * f, 0.1 - 0.05 * f, 20, 0) for f in fractions]
    return E.MetricsReport(test_hash=test_hash, records=recs)


def test_render_comparison_layout(tmp_path):
    fr = [0.05, 0.2, 0.5]
    reports = [_report(m, fr) for m in ("duo_segnet", "mean_teacher", "pseudo_label")]
    paths = E.render_comparison(reports, tmp_path)
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method"] + [f"dsc@{p}" for p in ("5%", "20%", "50%")] + [f"mae@{p}" for p in ("5%", "20%", "50%")]
    assert len(rows) == 4
    body = [r[1:] for r in rows[1:]]
    assert sum(1 for r in body for c in r[:3] if c) == 9
    assert sum(1 for r in body for c in r[3:] if c) == 9
    md = (tmp_path / "comparison.md").read_text().strip().splitlines()
    assert len(md) == 2 + 3
    assert str(tmp_path / "comparison.md") in map(str, paths)


def test_render_single_method(tmp_path):
    E.render_comparison([_report("duo_segnet", [0.05])], tmp_path)
    md = (tmp_path / "comparison.md").read_text().strip().splitlines()
    assert len(md) == 3 and md[2].startswith("| duo_segnet |")


def test_render_rejects_mixed_test_sets(tmp_path):
    with pytest.raises(E.ComparisonError):
        E.render_comparison([_report("a", [0.05], "h1"), _report("b", [0.05], "h2")], tmp_path)


def test_render_panels(tmp_path):
    img = np.random.default_rng(0).uniform(size=(1, 8, 8))
    mask = np.zeros((8, 8))
    preds = {"duo_segnet": np.full((8, 8), 0.7), "supervised_only": np.zeros((8, 8))}
    paths = E.render_comparison([_report("duo_segnet", [0.05])], tmp_path, panels={"00007": (img, mask, preds)})
    panel = tmp_path / "panel_test_00007.png"
    assert str(panel) in map(str, paths)
    arr = np.asarray(Image.open(panel))
    assert arr.shape == (8, 4 * 8 + 3 * 2)


def test_report_roundtrip():
    r = _report("duo_segnet", [0.05, 0.2])
    assert E.MetricsReport.from_dict(r.to_dict()) == r

"""Segmentation metrics, confidence-map export and comparison tables."""
import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

THRESHOLD = 0.5


class ComparisonError(ValueError):
    pass


@dataclass
class MetricRecord:
    method: str
    label_fraction: float
    dsc_percent: float
    mae: float
    n_test: int
    seed: int


@dataclass
class MetricsReport:
    test_hash: str
    records: list = field(default_factory=list)
    history: list = field(default_factory=list)
    # per-sample Dice, then averaged over the test set
    dsc_reduction: str = "per-sample-mean"

    def to_dict(self):
        return {
            "test_hash": self.test_hash,
            "dsc_reduction": self.dsc_reduction,
            "records": [asdict(r) for r in self.records],
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            test_hash=d["test_hash"],
            records=[MetricRecord(**r) for r in d["records"]],
            history=list(d.get("history", [])),
            dsc_reduction=d.get("dsc_reduction", "per-sample-mean"),
        )


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def binarize(prob):
    return (np.asarray(prob) >= THRESHOLD).astype(np.float64)


def dsc(pred_mask, target):
    """Dice coefficient of two binary masks; two empty masks score 1.0."""
    p, t = _pair(pred_mask, target)
    p, t = p.astype(bool), t.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def mae(pred_prob, target):
    p, t = _pair(pred_prob, target)
    return float(np.abs(p.astype(np.float64) - t.astype(np.float64)).mean())


def evaluate_predictions(probs, targets):
    """Dataset DSC (x100) and MAE, each a mean of per-sample values."""
    if len(probs) != len(targets):
        raise ValueError(f"{len(probs)} predictions for {len(targets)} targets")
    dscs = [dsc(binarize(p), t) for p, t in zip(probs, targets)]
    maes = [mae(p, t) for p, t in zip(probs, targets)]
    # math.fsum keeps the reduction independent of summation order
    return 100.0 * math.fsum(dscs) / len(dscs), math.fsum(maes) / len(maes)


def to_uint8(values):
    """Scale [0, 1] to 0..255 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def export_confidence_map(critic, pred_prob, path):
    """Write critic(pred_prob) as an 8-bit grayscale PNG.

    ``critic`` is any callable mapping an H x W map to an H x W confidence
    map (array or tensor).
    """
    conf = critic(pred_prob)
    if hasattr(conf, "detach"):
        conf = conf.detach().cpu().numpy()
    conf = np.asarray(conf).reshape(np.shape(pred_prob))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(conf), mode="L").save(path)
    return path


def _fmt_fraction(f):
    return f"{100 * f:g}%"


def comparison_table(reports):
    hashes = {r.test_hash for r in reports}
    if len(hashes) > 1:
        raise ComparisonError(f"reports were evaluated on different test sets: {sorted(hashes)}")
    records = [rec for r in reports for rec in r.records]
    methods = list(dict.fromkeys(rec.method for rec in records))
    fractions = sorted({rec.label_fraction for rec in records})
    cells = {}
    for rec in records:
        cells.setdefault((rec.method, rec.label_fraction), []).append(rec)
    rows = []
    for m in methods:
        row = {"method": m}
        for f in fractions:
            recs = cells.get((m, f), [])
            if recs:
                row[f"dsc@{_fmt_fraction(f)}"] = sum(r.dsc_percent for r in recs) / len(recs)
                row[f"mae@{_fmt_fraction(f)}"] = sum(r.mae for r in recs) / len(recs)
            else:
                row[f"dsc@{_fmt_fraction(f)}"] = None
                row[f"mae@{_fmt_fraction(f)}"] = None
        rows.append(row)
    return methods, fractions, rows


def _cell(v, digits):
    return "-" if v is None else f"{v:.{digits}f}"


def render_comparison(reports, out_dir, panels=None):
    """Write comparison.csv / comparison.md and optional qualitative panels.

    ``panels`` maps a sample id to ``(image, mask, {method: prob_map})``.
    Returns the list of written paths.
    """
    methods, fractions, rows = comparison_table(reports)
    os.makedirs(out_dir, exist_ok=True)
    cols = [f"dsc@{_fmt_fraction(f)}" for f in fractions] + [
        f"mae@{_fmt_fraction(f)}" for f in fractions
    ]
    csv_path = os.path.join(out_dir, "comparison.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + cols)
        for row in rows:
            w.writerow([row["method"]] + ["" if row[c] is None else f"{row[c]:.4f}" for c in cols])

    md_path = os.path.join(out_dir, "comparison.md")
    fr = [_fmt_fraction(f) for f in fractions]
    lines = [
        "| Method | " + " | ".join(f"DSC {f}" for f in fr) + " | " + " | ".join(f"MAE {f}" for f in fr) + " |",
        "|---" * (1 + 2 * len(fr)) + "|",
    ]
    for row in rows:
        dscs = [_cell(row[f"dsc@{f}"], 2) for f in fr]
        maes = [_cell(row[f"mae@{f}"], 4) for f in fr]
        lines.append(f"| {row['method']} | " + " | ".join(dscs + maes) + " |")
    with open(md_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    written = [csv_path, md_path]
    for sample_id, (image, mask, preds) in (panels or {}).items():
        written.append(render_panel(image, mask, preds, os.path.join(out_dir, f"panel_test_{sample_id}.png")))
    return written


def render_panel(image, mask, preds, path):
    """Side-by-side strip: input | GT | one column per method."""
    image = np.asarray(image)
    img = image[0] if image.ndim == 3 and image.shape[0] == 1 else image
    if img.ndim == 3:
        img = img.mean(axis=0)
    tiles = [img, np.asarray(mask)] + [binarize(preds[m]) for m in sorted(preds)]
    h, w = tiles[0].shape
    gap = 2
    strip = np.full((h, len(tiles) * (w + gap) - gap), 255, dtype=np.uint8)
    for i, t in enumerate(tiles):
        strip[:, i * (w + gap): i * (w + gap) + w] = to_uint8(t)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(strip, mode="L").save(path)
    return path

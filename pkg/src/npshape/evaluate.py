"""Confusion matrices, per-class precision/recall/F1, comparison reports,
and class-colored bounding-box overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ValidationError

# Fixed overlay palette (RGB); unknown classes get deterministic fallbacks.
CLASS_PALETTE = {
    "cube": (70, 110, 240),
    "pyramid": (80, 200, 90),
    "triangle": (0, 190, 255),
    "truncated_triangle": (230, 60, 60),
    "circle": (150, 230, 90),
    "dot": (250, 200, 40),
    "blob": (180, 80, 220),
}

# Rows whose printed F1 strays this far from 2PR/(P+R) get flagged, never
# silently corrected.
HARMONIC_FLAG_TOLERANCE = 0.02


@dataclass
class ConfusionMatrix:
    class_map: list
    counts: np.ndarray  # K x K ints, rows = true, cols = predicted

    def __post_init__(self):
        k = len(self.class_map)
        if self.counts.shape != (k, k):
            raise ValidationError(f"counts must be {k}x{k}")
        if (self.counts < 0).any():
            raise ValidationError("negative confusion counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetric:
    recall: float
    precision: float
    f1: float
    support: int
    zero_division: list = field(default_factory=list)


@dataclass
class EvalReport:
    method: str
    per_class: dict            # class -> ClassMetric
    macro_recall: float
    macro_precision: float
    macro_f1: float
    dataset: str = ""
    confusion: ConfusionMatrix | None = None


def confusion(y_true, y_pred, class_map=None) -> ConfusionMatrix:
    y_true = [str(v) for v in y_true]
    y_pred = [str(v) for v in y_pred]
    if len(y_true) != len(y_pred):
        raise ValidationError(
            f"{len(y_true)} true labels vs {len(y_pred)} predictions")
    if class_map is None:
        class_map = sorted(set(y_true) | set(y_pred))
    index = {c: i for i, c in enumerate(class_map)}
    unknown = (set(y_true) | set(y_pred)) - set(class_map)
    if unknown:
        raise ValidationError(f"labels {sorted(unknown)} not in class map")
    counts = np.zeros((len(class_map), len(class_map)), dtype=int)
    for t, p in zip(y_true, y_pred):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(list(class_map), counts)


def harmonic_f1(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def precision_recall_f1(cm: ConfusionMatrix) -> dict:
    """Per-class metrics; zero denominators yield 0 with an explicit flag."""
    out = {}
    for i, cls in enumerate(cm.class_map):
        tp = int(cm.counts[i, i])
        fn = int(cm.counts[i, :].sum()) - tp
        fp = int(cm.counts[:, i].sum()) - tp
        flags = []
        if tp + fn == 0:
            recall = 0.0
            flags.append("no_true_samples")
        else:
            recall = tp / (tp + fn)
        if tp + fp == 0:
            precision = 0.0
            flags.append("no_predictions")
        else:
            precision = tp / (tp + fp)
        out[cls] = ClassMetric(recall=recall, precision=precision,
                               f1=harmonic_f1(precision, recall),
                               support=tp + fn, zero_division=flags)
    return out


def macro_average(per_class: dict):
    """Unweighted means over classes: (recall, precision, f1)."""
    if not per_class:
        raise ValidationError("no classes to average")
    ms = list(per_class.values())
    n = len(ms)
    return (sum(m.recall for m in ms) / n,
            sum(m.precision for m in ms) / n,
            sum(m.f1 for m in ms) / n)


def macro_f1_score(y_true, y_pred, class_map=None) -> float:
    return macro_average(precision_recall_f1(confusion(y_true, y_pred, class_map)))[2]


def evaluate_predictions(y_true, y_pred, method: str = "", dataset: str = "",
                         class_map=None) -> EvalReport:
    cm = confusion(y_true, y_pred, class_map)
    per_class = precision_recall_f1(cm)
    r, p, f1 = macro_average(per_class)
    return EvalReport(method=method, per_class=per_class, macro_recall=r,
                      macro_precision=p, macro_f1=f1, dataset=dataset,
                      confusion=cm)


# ---------------------------------------------------------------------------
# external comparison rows (static published numbers, ingested from file)

def check_baseline_row(row: dict) -> dict:
    """Attach the harmonic-identity flag; printed values are never altered."""
    row = dict(row)
    hm = harmonic_f1(row["precision"], row["recall"])
    row["f1_from_pr"] = hm
    row["harmonic_inconsistent"] = abs(hm - row["f1"]) > HARMONIC_FLAG_TOLERANCE
    return row


def load_baseline_rows(path) -> list:
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: not valid JSON: {e}")
    if not isinstance(rows, list):
        raise FileFormatError(f"{path}: expected a list of rows")
    required = {"dataset", "class", "method", "recall", "precision", "f1"}
    for row in rows:
        missing = required - set(row)
        if missing:
            raise FileFormatError(f"{path}: row missing fields {sorted(missing)}")
    return [check_baseline_row(r) for r in rows]


def baseline_method_averages(rows) -> dict:
    """Macro average of the printed per-class values, per method."""
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    out = {}
    for method, rs in by_method.items():
        n = len(rs)
        out[method] = (sum(r["recall"] for r in rs) / n,
                       sum(r["precision"] for r in rs) / n,
                       sum(r["f1"] for r in rs) / n)
    return out


# ---------------------------------------------------------------------------
# rendering

def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_report(reports, baseline_rows=None):
    """Comparison table as (markdown, dict); numbers rounded to 2 decimals.

    One row per (dataset, class, method), computed reports first and then
    ingested baseline rows; average rows per method close the table. Rows
    failing the harmonic-mean identity carry a flag column marker.
    """
    rows = []
    for rep in reports:
        for cls in sorted(rep.per_class):
            m = rep.per_class[cls]
            rows.append({"dataset": rep.dataset, "class": cls, "method": rep.method,
                         "recall": round(m.recall, 2), "precision": round(m.precision, 2),
                         "f1": round(m.f1, 2), "flags": list(m.zero_division)})
    for row in baseline_rows or []:
        flags = ["harmonic_inconsistent"] if row.get("harmonic_inconsistent") else []
        rows.append({"dataset": str(row["dataset"]), "class": row["class"],
                     "method": row["method"], "recall": round(row["recall"], 2),
                     "precision": round(row["precision"], 2),
                     "f1": round(row["f1"], 2), "flags": flags})

    averages = []
    for rep in reports:
        averages.append({"method": rep.method,
                         "recall": round(rep.macro_recall, 2),
                         "precision": round(rep.macro_precision, 2),
                         "f1": round(rep.macro_f1, 2)})
    if baseline_rows:
        for method, (r, p, f1) in baseline_method_averages(baseline_rows).items():
            averages.append({"method": method, "recall": round(r, 2),
                             "precision": round(p, 2), "f1": round(f1, 2)})

    lines = ["| Dataset | Class | Method | Recall | Precision | F1 | Flags |",
             "|---|---|---|---|---|---|---|"]
    for row in rows:
        lines.append("| {dataset} | {cls} | {method} | {r} | {p} | {f} | {flags} |".format(
            dataset=row["dataset"], cls=row["class"], method=row["method"],
            r=_fmt(row["recall"]), p=_fmt(row["precision"]), f=_fmt(row["f1"]),
            flags=",".join(row["flags"])))
    for avg in averages:
        lines.append("| | Average | {method} | {r} | {p} | {f} | |".format(
            method=avg["method"], r=_fmt(avg["recall"]),
            p=_fmt(avg["precision"]), f=_fmt(avg["f1"])))
    markdown = "\n".join(lines) + "\n"
    return markdown, {"rows": rows, "averages": averages}


def fallback_color(index: int):
    # golden-angle hue walk, fixed saturation/value
    import colorsys
    h = (index * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255))


def render_overlay(image, boxes, palette=None, stroke: int = 2) -> np.ndarray:
    """Draw class-colored bounding boxes on a copy of `image`.

    `boxes` is a sequence of (bbox, class_label); strokes are `stroke` px
    wide, drawn inward from the box edge, later entries painted on top in
    input order. Returns an RGB uint8 raster.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        canvas = np.stack([img] * 3, axis=-1).astype(np.uint8)
    else:
        canvas = img.astype(np.uint8).copy()
    palette = dict(palette or CLASS_PALETTE)
    extra = sorted({cls for _, cls in boxes if cls not in palette})
    for i, cls in enumerate(extra):
        palette[cls] = fallback_color(i)
    h, w = canvas.shape[:2]
    for box, cls in boxes:
        color = np.array(palette[cls], dtype=np.uint8)
        r0, c0, r1, c1 = box.astuple() if hasattr(box, "astuple") else box
        r0, c0 = max(0, r0), max(0, c0)
        r1, c1 = min(h - 1, r1), min(w - 1, c1)
        s = min(stroke, (r1 - r0 + 2) // 2, (c1 - c0 + 2) // 2)
        canvas[r0:r0 + s, c0:c1 + 1] = color
        canvas[r1 - s + 1:r1 + 1, c0:c1 + 1] = color
        canvas[r0:r1 + 1, c0:c0 + s] = color
        canvas[r0:r1 + 1, c1 - s + 1:c1 + 1] = color
    return canvas

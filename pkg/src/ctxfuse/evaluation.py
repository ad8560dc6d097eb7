"""Matching predictions to ground truth and building the evaluation artifacts."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from ._validation import check_probability
from .core import Dataset, DetectionRecord, ImageRecord, ValidationError, write_json
from .stats import SceneClusterKey

BACKGROUND = "__background__"


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truth: tuple[int, ...]


def _box_key(box):
    return (box.x, box.y, box.w, box.h)


def match(predictions: Sequence[DetectionRecord], truth: ImageRecord,
          iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching, ignoring labels.

    Predictions are visited by descending score (ties: ascending box
    coordinates, then input position); each takes the unmatched ground-truth
    box with the highest IoU at or above ``iou_threshold``.
    """
    check_probability(iou_threshold, "iou_threshold")
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i].score, _box_key(predictions[i].box), i))
    gt_order = sorted(range(len(truth.objects)), key=lambda g: (_box_key(truth.objects[g].box), g))
    taken = set()
    pairs = []
    for pi in order:
        box = predictions[pi].box
        best, best_iou = None, -1.0
        for gi in gt_order:
            if gi in taken:
                continue
            iou = box.iou(truth.objects[gi].box)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            taken.add(best)
            pairs.append((pi, best, best_iou))
    matched_preds = {p for p, _, _ in pairs}
    pairs.sort()
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(i for i in range(len(predictions)) if i not in matched_preds),
        unmatched_ground_truth=tuple(g for g in range(len(truth.objects)) if g not in taken),
    )


@dataclass(frozen=True)
class ClassStats:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Per-class and total precision/recall plus the confusion matrix.

    ``confusion[i, j]`` counts boxes of true class ``labels[i]`` predicted as
    ``labels[j]``; the last label is the background pseudo-class (row: a
    prediction that matched nothing, column: a ground truth nobody matched).
    """

    labels: tuple[str, ...]
    per_class: dict
    total_precision: float
    total_recall: float
    tp: int
    fp: int
    fn: int
    confusion: np.ndarray
    groups: tuple = ()
    iou_threshold: float = 0.5
    pr_curve: tuple = field(default=())

    @property
    def objects(self) -> tuple[str, ...]:
        return self.labels[:-1]

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "total": {"precision": self.total_precision, "recall": self.total_recall,
                      "tp": self.tp, "fp": self.fp, "fn": self.fn},
            "per_class": {
                o: {"precision": s.precision, "recall": s.recall, "tp": s.tp, "fp": s.fp, "fn": s.fn}
                for o, s in self.per_class.items()
            },
            "confusion": {"labels": list(self.labels), "matrix": self.confusion.tolist()},
            "groups": [{"scene": s, "objects": list(m)} for s, m in self.groups],
            "pr_curve": [{"threshold": p.threshold, "precision": p.precision, "recall": p.recall}
                         for p in self.pr_curve],
        }


def _frac(num, den):
    return num / den if den else 0.0


def score(matched, object_classes: Sequence[str], cluster_key: SceneClusterKey | None = None,
          iou_threshold: float = 0.5) -> EvalReport:
    """Tally per-class counts from ``(truth, predictions, MatchResult)`` triples.

    A matched pair with equal labels is a true positive. A matched pair with
    different labels is a false positive for the predicted class and a false
    negative for the true class. Unmatched predictions are false positives,
    unmatched ground truths false negatives.
    """
    order = list(cluster_key.order()) if cluster_key is not None else list(object_classes)
    if sorted(order) != sorted(object_classes):
        raise ValidationError("cluster key does not cover the object classes")
    labels = order + [BACKGROUND]
    index = {lab: i for i, lab in enumerate(labels)}
    bg = index[BACKGROUND]
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    tp, fp, fn = defaultdict(int), defaultdict(int), defaultdict(int)
    for truth, preds, result in matched:
        for pi, gi, _ in result.pairs:
            t, p = truth.objects[gi].label, preds[pi].label
            conf[index[t], index[p]] += 1
            if t == p:
                tp[t] += 1
            else:
                fp[p] += 1
                fn[t] += 1
        for pi in result.unmatched_predictions:
            p = preds[pi].label
            if p not in index or p == BACKGROUND:
                raise ValidationError(f"prediction label {p!r} is not an object class")
            conf[bg, index[p]] += 1
            fp[p] += 1
        for gi in result.unmatched_ground_truth:
            t = truth.objects[gi].label
            conf[index[t], bg] += 1
            fn[t] += 1
    per_class = {}
    for o in object_classes:
        per_class[o] = ClassStats(_frac(tp[o], tp[o] + fp[o]), _frac(tp[o], tp[o] + fn[o]),
                                  tp[o], fp[o], fn[o])
    TP, FP, FN = sum(tp.values()), sum(fp.values()), sum(fn.values())
    if cluster_key is not None:
        groups = tuple((s, tuple(m)) for s, m in cluster_key.groups())
    else:
        groups = ((None, tuple(object_classes)),)
    conf.setflags(write=False)
    return EvalReport(tuple(labels), per_class, _frac(TP, TP + FP), _frac(TP, TP + FN),
                      TP, FP, FN, conf, groups, iou_threshold)


def _group_predictions(dataset: Dataset, predictions):
    by_image = defaultdict(list)
    for rec in predictions:
        if rec.image_id not in dataset:
            raise ValidationError(f"prediction for image {rec.image_id!r} outside the evaluated split")
        by_image[rec.image_id].append(rec)
    return by_image


def match_all(dataset: Dataset, predictions, iou_threshold: float = 0.5, split: str | None = "test"):
    subset = dataset.select(split)
    by_image = _group_predictions(subset, predictions)
    out = []
    for img in subset.images:
        preds = by_image.get(img.image_id, [])
        out.append((img, preds, match(preds, img, iou_threshold)))
    return out


def pr_curve(dataset: Dataset, predictions, thresholds: Sequence[float], iou_threshold: float = 0.5,
             split: str | None = "test") -> list[PRPoint]:
    """Precision/recall after discarding predictions scoring below each threshold."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValidationError("threshold list is empty")
    predictions = list(predictions)
    points = []
    for t in thresholds:
        kept = [r for r in predictions if r.score >= t]
        rep = score(match_all(dataset, kept, iou_threshold, split), dataset.object_classes,
                    iou_threshold=iou_threshold)
        points.append(PRPoint(float(t), rep.total_precision, rep.total_recall))
    return points


def threshold_grid(n: int = 20) -> list[float]:
    """``n`` evenly spaced thresholds from 1 down to 0 inclusive."""
    if n < 2:
        raise ValidationError("threshold grid needs at least 2 points")
    return [round(1 - i / (n - 1), 12) for i in range(n)]


def evaluate(dataset: Dataset, predictions, iou_threshold: float = 0.5, split: str | None = "test",
             cluster_key: SceneClusterKey | None = None, thresholds=None) -> EvalReport:
    predictions = list(predictions)
    rep = score(match_all(dataset, predictions, iou_threshold, split), dataset.object_classes,
                cluster_key, iou_threshold)
    if thresholds is not None:
        curve = pr_curve(dataset, predictions, thresholds, iou_threshold, split)
        rep = replace(rep, pr_curve=tuple(curve))
    return rep


# -- rendering ------------------------------------------------------------------

# viridis anchor colors, dark purple -> yellow
_RAMP = ((0x44, 0x01, 0x54), (0x3b, 0x52, 0x8b), (0x21, 0x91, 0x8c), (0x5e, 0xc9, 0x62),
         (0xfd, 0xe7, 0x25))


def ramp_color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    pos = t * (len(_RAMP) - 1)
    i = min(int(pos), len(_RAMP) - 2)
    f = pos - i
    rgb = (round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1]))
    return "#%02x%02x%02x" % tuple(rgb)


def cell_color(count: int, max_count: int) -> str:
    """Log-scale color; zero is black, the largest count is yellow."""
    if count == 0 or max_count == 0:
        return "#000000"
    return ramp_color(math.log1p(count) / math.log1p(max_count))


def confusion_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *report.labels])
    for lab, row in zip(report.labels, report.confusion):
        writer.writerow([lab, *row.tolist()])
    return buf.getvalue()


def confusion_to_svg(report: EvalReport, cell: int = 24) -> str:
    labels = report.labels
    k = len(labels)
    margin = 8 + 7 * max(len(lab) for lab in labels)
    size = margin + k * cell + 8
    max_count = int(report.confusion.max()) if report.confusion.size else 0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="11">',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    for i, lab in enumerate(labels):
        y = margin + i * cell + cell // 2 + 4
        x = margin + i * cell + cell // 2
        out.append(f'<text x="{margin - 4}" y="{y}" text-anchor="end">{escape(lab)}</text>')
        out.append(f'<text x="{x}" y="{margin - 4}" text-anchor="start" '
                   f'transform="rotate(-90 {x} {margin - 4})">{escape(lab)}</text>')
    for i in range(k):
        for j in range(k):
            c = int(report.confusion[i, j])
            out.append(f'<rect x="{margin + j * cell}" y="{margin + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="{cell_color(c, max_count)}"><title>'
                       f'{escape(labels[i])} / {escape(labels[j])}: {c}</title></rect>')
    # separators between scene groups, and before the background row/column
    edge, offsets = 0, []
    for _, members in report.groups:
        edge += len(members)
        offsets.append(edge)
    end = margin + k * cell
    for off in offsets:
        p = margin + off * cell
        out.append(f'<line x1="{margin}" y1="{p}" x2="{end}" y2="{p}" stroke="#ffffff" stroke-width="2"/>')
        out.append(f'<line x1="{p}" y1="{margin}" x2="{p}" y2="{end}" stroke="#ffffff" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_confusion(report: EvalReport, path) -> None:
    """Write ``<path>.csv`` (raw counts) and ``<path>.svg`` (log-scale heatmap)."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".svg", ".csv") else path
    base.with_suffix(".csv").write_text(confusion_to_csv(report), encoding="utf-8")
    base.with_suffix(".svg").write_text(confusion_to_svg(report), encoding="utf-8")


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["object", "precision", "recall", "tp", "fp", "fn"])
    for o, s in report.per_class.items():
        writer.writerow([o, f"{s.precision:.6f}", f"{s.recall:.6f}", s.tp, s.fp, s.fn])
    writer.writerow(["Total", f"{report.total_precision:.6f}", f"{report.total_recall:.6f}",
                     report.tp, report.fp, report.fn])
    return buf.getvalue()


def pr_curve_to_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "precision", "recall"])
    for p in points:
        writer.writerow([f"{p.threshold:.6f}", f"{p.precision:.6f}", f"{p.recall:.6f}"])
    return buf.getvalue()


def _pct(x):
    return f"{100 * x:.1f}%"


def format_table(reports: dict, objects: Sequence[str] | None = None) -> str:
    """Side-by-side Pr./Re. columns per method, with a Total row."""
    names = list(reports)
    if objects is None:
        objects = list(next(iter(reports.values())).per_class)
    width = max([len(o) for o in objects] + [len("Object")])
    head1 = "Object".ljust(width) + "".join(f"  {n:^15}" for n in names)
    head2 = "-".ljust(width) + "".join(f"  {'Pr.':>7} {'Re.':>7}" for _ in names)
    rows = [head1, head2]
    for o in objects:
        cells = "".join(f"  {_pct(r.per_class[o].precision):>7} {_pct(r.per_class[o].recall):>7}"
                        for r in reports.values())
        rows.append(o.ljust(width) + cells)
    cells = "".join(f"  {_pct(r.total_precision):>7} {_pct(r.total_recall):>7}" for r in reports.values())
    rows.append("Total".ljust(width) + cells)
    return "\n".join(rows) + "\n"


def format_markdown(reports: dict, objects: Sequence[str] | None = None) -> str:
    names = list(reports)
    if objects is None:
        objects = list(next(iter(reports.values())).per_class)
    lines = ["| Object | " + " | ".join(f"{n} Pr. | {n} Re." for n in names) + " |",
             "|---|" + "---|---|" * len(names)]
    for o in objects:
        cells = " | ".join(f"{_pct(r.per_class[o].precision)} | {_pct(r.per_class[o].recall)}"
                           for r in reports.values())
        lines.append(f"| {o} | {cells} |")
    cells = " | ".join(f"**{_pct(r.total_precision)}** | **{_pct(r.total_recall)}**"
                       for r in reports.values())
    lines.append(f"| Total | {cells} |")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> None:
    """``report.json``, ``report.csv``, ``confusion.{csv,svg}``, ``pr_curve.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report.to_dict(), out / "report.json")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    render_confusion(report, out / "confusion.svg")
    (out / "pr_curve.csv").write_text(pr_curve_to_csv(report.pr_curve), encoding="utf-8")

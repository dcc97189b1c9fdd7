"""Detection evaluation: IoU matching, precision/recall, all-point AP and mAP.

Conventions:

* detections are matched per (image, class) in descending confidence, ties
  broken by ingest order; each takes the still-unmatched ground truth of
  highest IoU at or above the threshold (lowest index on IoU ties);
* ``0/0`` precision or recall is reported as 0;
* AP integrates the monotone precision envelope exactly over recall steps,
  with P/R points taken at every distinct confidence;
* classes without ground truth are left out of the mAP average.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EvaluationError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DataError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box


@dataclass
class PRCurve:
    class_id: int
    iou_threshold: float
    recall: list[float] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    confidence: list[float] = field(default_factory=list)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _match_from_ious(ious: np.ndarray, order: np.ndarray, iou_thresh: float) -> np.ndarray:
    """TP flags (in ``order``'s positions) for one (image, class) group."""
    tp = np.zeros(ious.shape[0], dtype=bool)
    if ious.shape[1] == 0:
        return tp
    taken = np.zeros(ious.shape[1], dtype=bool)
    for d in order:
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand))  # first index wins ties
        if cand[g] >= iou_thresh:
            taken[g] = True
            tp[d] = True
    return tp


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float) -> tuple[list[bool], int]:
    """Greedy one-to-one matching within a single (image, class) group.

    Returns per-detection TP flags in the input order and the FN count.
    """
    order = np.argsort([-d.score for d in dets], kind="stable")
    ious = iou_matrix([d.box.as_tuple() for d in dets], [g.box.as_tuple() for g in gts])
    tp = _match_from_ious(ious, order, iou_thresh)
    return tp.tolist(), len(gts) - int(tp.sum())


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    return p, r


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int,
                      class_id: int = -1, iou_threshold: float = 0.5) -> tuple[float | None, PRCurve]:
    """All-point AP from scored, labelled detections; ``None`` when there is no ground truth."""
    curve = PRCurve(class_id, iou_threshold)
    if n_gt == 0:
        return None, curve
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if scores.size == 0:
        return 0.0, curve
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], is_tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    # one P/R point per distinct confidence, at the last detection holding it
    last = np.r_[np.nonzero(s[1:] != s[:-1])[0], s.size - 1]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    ap = float(np.sum(steps * envelope))
    curve.recall = recall.tolist()
    curve.precision = precision.tolist()
    curve.confidence = s[last].tolist()
    return ap, curve


@dataclass
class ClassMetrics:
    class_id: int
    n_gt: int
    n_det: int
    precision: float
    recall: float
    ap50: float | None
    ap5095: float | None


@dataclass
class MAPResult:
    map50: float
    map5095: float
    per_class: list[ClassMetrics]
    maps: dict[float, float]
    curves: dict[int, PRCurve]
    precision: float = 0.0
    recall: float = 0.0


def _group(dets: Iterable[Detection], gts: Iterable[GroundTruth]):
    dgroups: dict[tuple[str, int], list[int]] = defaultdict(list)
    ggroups: dict[tuple[str, int], list[int]] = defaultdict(list)
    dets, gts = list(dets), list(gts)
    for i, d in enumerate(dets):
        dgroups[(d.image_id, d.class_id)].append(i)
    for i, g in enumerate(gts):
        ggroups[(g.image_id, g.class_id)].append(i)
    return dets, gts, dgroups, ggroups


def mean_ap(dets: Iterable[Detection], gts: Iterable[GroundTruth], num_classes: int,
            iou_thresholds: Sequence[float] = IOU_THRESHOLDS, pr_conf: float = 0.25) -> MAPResult:
    """mAP at each IoU threshold plus the per-class table.

    ``pr_conf`` is the confidence cut used for the single-point P and R
    columns (matched at IoU 0.5).
    """
    dets, gts, dgroups, ggroups = _group(dets, gts)
    for d in dets:
        if not 0 <= d.class_id < num_classes:
            raise DataError(f"detection class {d.class_id} outside [0, {num_classes})")
    for g in gts:
        if not 0 <= g.class_id < num_classes:
            raise DataError(f"ground-truth class {g.class_id} outside [0, {num_classes})")
    n_gt = np.bincount(np.array([g.class_id for g in gts], dtype=np.int64), minlength=num_classes)
    if n_gt.sum() == 0:
        raise EvaluationError("no ground truth for any class")
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)

    # IoU matrices per group, reused for every threshold
    groups = []
    for key, didx in dgroups.items():
        gidx = ggroups.get(key, [])
        didx = np.asarray(didx)
        ious = iou_matrix([dets[i].box.as_tuple() for i in didx], [gts[j].box.as_tuple() for j in gidx])
        order = np.argsort(-scores[didx], kind="stable")
        groups.append((key[1], didx, ious, order))

    thresholds = [float(t) for t in iou_thresholds]
    if 0.5 not in thresholds:
        thresholds = [0.5] + thresholds
    ap_table: dict[float, list[float | None]] = {}
    curves: dict[int, PRCurve] = {}
    labels50 = np.zeros(len(dets), dtype=bool)
    for t in thresholds:
        labels = np.zeros(len(dets), dtype=bool)
        for _, didx, ious, order in groups:
            labels[didx] = _match_from_ious(ious, order, t)
        if t == 0.5:
            labels50 = labels
        row = []
        for c in range(num_classes):
            sel = classes == c
            ap, curve = average_precision(scores[sel], labels[sel], int(n_gt[c]), c, t)
            row.append(ap)
            if t == 0.5:
                curves[c] = curve
        ap_table[t] = row

    def _mean(row):
        vals = [a for a in row if a is not None]
        return float(np.mean(vals))

    maps = {t: _mean(ap_table[t]) for t in thresholds}
    sweep = [float(t) for t in iou_thresholds]
    map5095 = float(np.mean([maps[t] for t in sweep]))
    per_class = []
    tp_all = fp_all = 0
    for c in range(num_classes):
        sel = (classes == c) & (scores >= pr_conf)
        tp = int(labels50[sel].sum())
        fp = int(sel.sum()) - tp
        tp_all, fp_all = tp_all + tp, fp_all + fp
        p, r = precision_recall(tp, fp, int(n_gt[c]) - tp)
        a5095 = None if n_gt[c] == 0 else float(np.mean([ap_table[t][c] for t in sweep]))
        per_class.append(ClassMetrics(c, int(n_gt[c]), int((classes == c).sum()), p, r, ap_table[0.5][c], a5095))
    p_all, r_all = precision_recall(tp_all, fp_all, int(n_gt.sum()) - tp_all)
    return MAPResult(maps[0.5], map5095, per_class, maps, curves, p_all, r_all)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

DET_HEADER = ["image_id", "class_id", "x1", "y1", "x2", "y2", "score"]


def write_detections_csv(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DET_HEADER)
        for d in dets:
            w.writerow([d.image_id, d.class_id, *(f"{v:.6f}" for v in d.box.as_tuple()), f"{d.score:.8f}"])


def read_detections_csv(path: str | Path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DET_HEADER:
            raise DataError(f"{path}: expected header {','.join(DET_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
                out.append(Detection(row["image_id"], int(row["class_id"]), box, float(row["score"])))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_metrics_csv(path: str | Path, result: MAPResult, class_names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "n_gt", "n_det", "precision", "recall", "ap50", "ap5095"])
        for m in result.per_class:
            name = class_names[m.class_id] if class_names else str(m.class_id)
            w.writerow([name, m.n_gt, m.n_det, _fmt(m.precision), _fmt(m.recall), _fmt(m.ap50), _fmt(m.ap5095)])
        w.writerow(["all", sum(m.n_gt for m in result.per_class), sum(m.n_det for m in result.per_class),
                    _fmt(result.precision), _fmt(result.recall), _fmt(result.map50), _fmt(result.map5095)])


def write_pr_csv(path: str | Path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision", "confidence"])
        for r, p, c in zip(curve.recall, curve.precision, curve.confidence):
            w.writerow([f"{r:.6f}", f"{p:.6f}", f"{c:.6f}"])

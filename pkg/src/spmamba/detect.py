"""Target assignment, training loss, box decoding and NMS for the anchor-free head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError
from .metrics import Box, Detection, iou_matrix
from .model import RawPrediction
from .tensor import Tensor, _sigmoid_np, _softplus_np

LOSS_WEIGHTS = (5.0, 1.0, 1.0)  # box, objectness, class
BOX_REF_CELLS = 4.0  # a level "fits" boxes about this many cells across


@dataclass
class LevelTargets:
    pos: np.ndarray  # (N, h, w) bool
    boxes: np.ndarray  # (N, h, w, 4) xyxy pixels
    cls: np.ndarray  # (N, h, w) int


def validate_targets(targets: Sequence[np.ndarray], num_classes: int) -> list[np.ndarray]:
    out = []
    for t in targets:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
        if t.size:
            if np.any(t[:, 1:] < 0) or np.any(t[:, 1:] > 1) or np.any(t[:, 3:] <= 0):
                raise DataError("targets must be normalised cx, cy, w, h in [0, 1] with positive size")
            x1, x2 = t[:, 1] - t[:, 3] / 2, t[:, 1] + t[:, 3] / 2
            y1, y2 = t[:, 2] - t[:, 4] / 2, t[:, 2] + t[:, 4] / 2
            tol = 1e-6
            if np.any(x1 < -tol) or np.any(y1 < -tol) or np.any(x2 > 1 + tol) or np.any(y2 > 1 + tol):
                raise DataError("target box extends outside the image")
            if np.any(t[:, 0] < 0) or np.any(t[:, 0] >= num_classes) or np.any(t[:, 0] != np.round(t[:, 0])):
                raise DataError(f"target class ids must be integers in [0, {num_classes})")
        out.append(t)
    return out


def pick_level(size_px: np.ndarray, strides: Sequence[int]) -> np.ndarray:
    """Level whose stride best matches the box size, by nearest log2 distance."""
    ref = np.log2(BOX_REF_CELLS * np.asarray(strides, dtype=np.float64))
    d = np.abs(np.log2(np.maximum(size_px, 1e-9))[:, None] - ref[None, :])
    return np.argmin(d, axis=1)


def assign_targets(targets: Sequence[np.ndarray], image_size: tuple[int, int], grid_shapes,
                   strides: Sequence[int]) -> list[LevelTargets]:
    """Centre-inside assignment; the cell holding a box's centre is always positive.

    Where boxes overlap, a cell belongs to the smallest box covering it.
    """
    H, W = image_size
    n = len(targets)
    out = [LevelTargets(np.zeros((n, h, w), bool), np.zeros((n, h, w, 4)), np.zeros((n, h, w), np.int64))
           for h, w in grid_shapes]
    for b, t in enumerate(targets):
        if t.size == 0:
            continue
        xyxy = np.stack([(t[:, 1] - t[:, 3] / 2) * W, (t[:, 2] - t[:, 4] / 2) * H,
                         (t[:, 1] + t[:, 3] / 2) * W, (t[:, 2] + t[:, 4] / 2) * H], axis=1)
        area = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
        levels = pick_level(np.sqrt(area), strides)
        for g in np.argsort(-area, kind="stable"):  # larger first so smaller ones overwrite
            lt, s = out[levels[g]], strides[levels[g]]
            h, w = lt.pos.shape[1:]
            cy = (np.arange(h) + 0.5) * s
            cx = (np.arange(w) + 0.5) * s
            inside = ((cx[None, :] > xyxy[g, 0]) & (cx[None, :] < xyxy[g, 2])
                      & (cy[:, None] > xyxy[g, 1]) & (cy[:, None] < xyxy[g, 3]))
            ci = min(int(t[g, 2] * H // s), h - 1)
            cj = min(int(t[g, 1] * W // s), w - 1)
            inside[ci, cj] = True
            lt.pos[b][inside] = True
            lt.boxes[b][inside] = xyxy[g]
            lt.cls[b][inside] = int(t[g, 0])
    return out


def _cell_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return cx, cy


def compute_loss(pred: RawPrediction, targets: Sequence[np.ndarray],
                 weights: tuple[float, float, float] = LOSS_WEIGHTS) -> tuple[Tensor, dict[str, float]]:
    """λ_box·Σ(1 − IoU) + λ_obj·ΣBCE(obj) + λ_cls·ΣBCE(cls), all divided by the positive count."""
    nc = pred.num_classes
    targets = validate_targets(targets, nc)
    assigned = assign_targets(targets, pred.image_size, pred.grid_shapes(), pred.strides)
    n_pos = sum(int(a.pos.sum()) for a in assigned)
    norm = 1.0 / max(1, n_pos)
    box_terms, obj_terms, cls_terms = [], [], []
    for lv, a, stride in zip(pred.levels, assigned, pred.strides):
        n, ch, h, w = lv.shape
        flat = T.reshape(T.transpose(lv, (0, 2, 3, 1)), (n * h * w, ch))
        pos = a.pos.reshape(-1)
        obj_terms.append(T.bce_with_logits(flat[:, 4], pos.astype(np.float64)).sum())
        idx = np.nonzero(pos)[0]
        if idx.size == 0:
            continue
        rows = flat[idx]
        cx, cy = _cell_centers(h, w, stride)
        cx = np.tile(cx.reshape(-1), n)[idx]
        cy = np.tile(cy.reshape(-1), n)[idx]
        ltrb = T.softplus(rows[:, :4]) * float(stride)
        px1, py1 = cx - ltrb[:, 0], cy - ltrb[:, 1]
        px2, py2 = cx + ltrb[:, 2], cy + ltrb[:, 3]
        tb = a.boxes.reshape(-1, 4)[idx]
        iw = T.relu(T.minimum(px2, tb[:, 2]) - T.maximum(px1, tb[:, 0]))
        ih = T.relu(T.minimum(py2, tb[:, 3]) - T.maximum(py1, tb[:, 1]))
        inter = iw * ih
        area_p = (px2 - px1) * (py2 - py1)
        area_t = (tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1])
        iou = inter / (area_p + area_t - inter)
        box_terms.append((1.0 - iou).sum())
        onehot = np.zeros((idx.size, nc))
        onehot[np.arange(idx.size), a.cls.reshape(-1)[idx]] = 1.0
        cls_terms.append(T.bce_with_logits(rows[:, 5:], onehot).sum())

    def total(terms):
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out * norm

    zero = Tensor(0.0)
    l_box = total(box_terms) if box_terms else zero
    l_obj = total(obj_terms)
    l_cls = total(cls_terms) if cls_terms else zero
    loss = l_box * weights[0] + l_obj * weights[1] + l_cls * weights[2]
    parts = {"loss_box": l_box.item(), "loss_obj": l_obj.item(), "loss_cls": l_cls.item(), "n_pos": n_pos}
    return loss, parts


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thresh: float = 0.45) -> np.ndarray:
    """Greedy class-wise NMS; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    ious = iou_matrix(boxes, boxes)
    for rank, i in enumerate(order):
        if suppressed[rank]:
            continue
        keep.append(int(i))
        rest = order[rank + 1:]
        hit = (classes[rest] == classes[i]) & (ious[i, rest] > iou_thresh)
        suppressed[rank + 1:] |= hit
    return np.asarray(keep, dtype=np.int64)


def decode(pred: RawPrediction, conf_thresh: float = 0.25, iou_thresh: float = 0.45, max_det: int = 300,
           image_ids: Sequence[str] | None = None, pre_nms: int = 1000) -> list[list[Detection]]:
    """Decode head outputs into clamped xyxy detections with per-class scores, then NMS."""
    if not (0 <= conf_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    H, W = pred.image_size
    n = pred.levels[0].shape[0]
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(n)]
    per_level = []
    for lv, stride in zip(pred.levels, pred.strides):
        d = lv.data
        _, ch, h, w = d.shape
        cx, cy = _cell_centers(h, w, stride)
        ltrb = _softplus_np(d[:, :4]) * stride
        boxes = np.stack([np.clip(cx - ltrb[:, 0], 0, W), np.clip(cy - ltrb[:, 1], 0, H),
                          np.clip(cx + ltrb[:, 2], 0, W), np.clip(cy + ltrb[:, 3], 0, H)], axis=-1)
        scores = _sigmoid_np(d[:, 4:5]) * _sigmoid_np(d[:, 5:])  # (N, nc, h, w)
        per_level.append((boxes.reshape(n, -1, 4), scores.reshape(n, ch - 5, -1)))
    out = []
    for b in range(n):
        all_boxes, all_scores, all_cls = [], [], []
        for boxes, scores in per_level:
            c_idx, cell = np.nonzero(scores[b] >= conf_thresh)
            all_boxes.append(boxes[b][cell])
            all_scores.append(scores[b][c_idx, cell])
            all_cls.append(c_idx)
        bx = np.concatenate(all_boxes)
        sc = np.concatenate(all_scores)
        cl = np.concatenate(all_cls)
        ok = (bx[:, 2] - bx[:, 0] > 1e-6) & (bx[:, 3] - bx[:, 1] > 1e-6)
        bx, sc, cl = bx[ok], sc[ok], cl[ok]
        top = np.argsort(-sc, kind="stable")[:pre_nms]
        bx, sc, cl = bx[top], sc[top], cl[top]
        keep = nms(bx, sc, cl, iou_thresh)[:max_det]
        out.append([Detection(ids[b], int(cl[k]), Box(*map(float, bx[k])), float(sc[k])) for k in keep])
    return out

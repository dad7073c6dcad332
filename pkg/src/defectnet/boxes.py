"""Box geometry: IoU, delta encoding, anchors, matching, NMS.

Boxes are ``(x1, y1, x2, y2)`` in pixels, origin top-left, with
``area = (x2 - x1) * (y2 - y1)``. Array forms are ``[M, 4]`` float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# keeps exp() in decode from overflowing on wild predictions
DELTA_CLAMP = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def is_valid(self) -> bool:
        return all(math.isfinite(v) for v in self) and self.x2 > self.x1 and self.y2 > self.y1


def as_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``[len(a), len(b)]``."""
    a, b = as_array(a), as_array(b)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_deltas(boxes, anchors) -> np.ndarray:
    """Center-size offsets of ``boxes`` relative to ``anchors`` (row-aligned)."""
    b, a = as_array(boxes), as_array(anchors)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    cxa, cya = a[:, 0] + 0.5 * wa, a[:, 1] + 0.5 * ha
    w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    cx, cy = b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h
    return np.stack([(cx - cxa) / wa, (cy - cya) / ha, np.log(w / wa), np.log(h / ha)], axis=1)


def decode_deltas(deltas, anchors, image_size=None) -> np.ndarray:
    """Invert :func:`encode_deltas`; clip to ``image_size = (H, W)`` when given."""
    d, a = as_array(deltas), as_array(anchors)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    cxa, cya = a[:, 0] + 0.5 * wa, a[:, 1] + 0.5 * ha
    cx = cxa + d[:, 0] * wa
    cy = cya + d[:, 1] * ha
    w = wa * np.exp(np.minimum(d[:, 2], DELTA_CLAMP))
    h = ha * np.exp(np.minimum(d[:, 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        hh, ww = image_size
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, ww)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, hh)
    return out


def valid_mask(boxes, min_size: float = 1e-6) -> np.ndarray:
    b = as_array(boxes)
    return ((b[:, 2] - b[:, 0]) > min_size) & ((b[:, 3] - b[:, 1]) > min_size)


# ---------------------------------------------------------------- anchors


@dataclass
class Anchors:
    """All anchors of one image size, ordered by level, then cell (row-major), then ratio.

    ``local`` is the flat index of the anchor's objectness logit inside one
    image's ``[A, H, W]`` head output for its level.
    """

    boxes: np.ndarray
    level: np.ndarray
    local: np.ndarray
    grid: dict  # level -> (H, W)
    num_ratios: int

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slice(self, level: int) -> slice:
        idx = np.flatnonzero(self.level == level)
        return slice(int(idx[0]), int(idx[-1]) + 1)


def generate_anchors(image_size, levels=(2, 3, 4, 5), scale_per_level: float = 8.0,
                     ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> Anchors:
    """Anchors centered on every stride-2**level cell with base side ``scale * 2**level``.

    ``ratio`` is height/width; anchor area equals the base side squared.
    """
    hh, ww = image_size
    boxes, lv, local, grid = [], [], [], {}
    na = len(ratios)
    for level in levels:
        stride = 2**level
        gh, gw = hh // stride, ww // stride
        grid[level] = (gh, gw)
        side = scale_per_level * stride
        r = np.asarray(ratios, dtype=np.float64)
        aw, ah = side / np.sqrt(r), side * np.sqrt(r)
        ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        cy = (ys.reshape(-1, 1) + 0.5) * stride
        cx = (xs.reshape(-1, 1) + 0.5) * stride
        b = np.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], axis=-1).reshape(-1, 4)
        boxes.append(b)
        lv.append(np.full(len(b), level))
        a_idx = np.tile(np.arange(na), gh * gw)
        cell = np.repeat(np.arange(gh * gw), na)
        local.append(a_idx * gh * gw + cell)
    return Anchors(np.concatenate(boxes), np.concatenate(lv), np.concatenate(local), grid, na)


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def match_anchors(anchors, gt_boxes, pos_thr: float = 0.5, neg_thr: float = 0.3):
    """Label anchors positive / negative / ignore against ground truth.

    Returns ``(labels, targets, matched)`` where ``targets`` holds encoded
    deltas for positives (zeros elsewhere) and ``matched`` the GT index per
    positive (-1 elsewhere). Each GT's best anchor(s) are forced positive and
    regress toward that GT.
    """
    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise ValueError(f"match_anchors: need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    a = as_array(anchors)
    g = as_array(gt_boxes)
    m = len(a)
    labels = np.full(m, IGNORE, dtype=np.int64)
    targets = np.zeros((m, 4))
    matched = np.full(m, -1, dtype=np.int64)
    if len(g) == 0:
        labels[:] = NEGATIVE
        return labels, targets, matched
    ious = iou_matrix(a, g)
    best = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    labels[best < neg_thr] = NEGATIVE
    pos = best >= pos_thr
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    gt_best = ious.max(axis=0)
    for j in range(len(g)):
        if gt_best[j] <= 0:
            continue
        forced = np.flatnonzero(ious[:, j] == gt_best[j])
        labels[forced] = POSITIVE
        matched[forced] = j
    pos_idx = np.flatnonzero(labels == POSITIVE)
    if len(pos_idx):
        targets[pos_idx] = encode_deltas(g[matched[pos_idx]], a[pos_idx])
    return labels, targets, matched


def nms(boxes, scores, iou_thr: float = 0.5) -> list:
    """Greedy suppression; returns kept indices in descending score order.

    Ties in score keep the lower original index first.
    """
    b = as_array(boxes)
    s = np.asarray(scores, dtype=np.float64)
    if len(b) != len(s):
        raise ValueError(f"nms: {len(b)} boxes but {len(s)} scores")
    order = np.argsort(-s, kind="stable")
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        union = areas[i] + areas[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        order = rest[ov <= iou_thr]
    return keep

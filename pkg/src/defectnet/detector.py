"""Two-stage detection on the attended pyramid.

Stage one scores and regresses anchors on every level with a shared head;
stage two max-pools each proposal into a 7x7 grid and classifies it with a
small fully connected network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import Attention
from .backbone import LEVELS, Backbone, BackboneConfig, FeatureSet
from .boxes import Box, decode_deltas, generate_anchors, nms, valid_mask
from .nn import Conv2d, Linear, Module
from .pyramid import Pyramid
from .tensor import Tensor

CLASSES = ("brokenend", "brokenpick", "felter", "oilstains", "sundries")
BACKGROUND = 0  # logit index; defect class k lives at logit k + 1
VARIANTS = ("full", "no_multilevel", "no_attention")
POOL_SIZE = 7


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d: int = 128
    beta: float = 1.0
    variant: str = "full"
    anchor_scale: float = 8.0
    ratios: tuple = (0.5, 1.0, 2.0)
    pos_thr: float = 0.5
    neg_thr: float = 0.3
    rpn_batch: int = 256
    pre_nms_k: int = 1000
    post_nms_k: int = 100
    proposal_nms: float = 0.7
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    roi_pos_thr: float = 0.5
    hidden: int = 256
    dropout: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.ratios = tuple(float(r) for r in self.ratios)

    @property
    def num_anchors(self) -> int:
        return len(self.ratios)


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float

    @property
    def class_name(self) -> str:
        return CLASSES[self.class_id]

    def to_json(self, image: str) -> dict:
        return {"image": image, "class": self.class_name, "score": float(self.score),
                "box": [float(v) for v in self.box]}


# ---------------------------------------------------------------- region pooling


def roi_level(box) -> int:
    """Pyramid level for a box: clamp(floor(2 + log2(sqrt(area) / 32)), 2, 5)."""
    area = (box[2] - box[0]) * (box[3] - box[1])
    if not area > 0:
        raise ValueError(f"roi_level: degenerate box {tuple(box)}")
    lv = math.floor(2 + math.log2(math.sqrt(area) / 32.0))
    return int(min(max(lv, 2), 5))


def _bin_edges(lo: np.ndarray, hi: np.ndarray, extent: int, out: int):
    """Integer cell ranges [start, stop) of ``out`` bins over [lo, hi) feature coords."""
    width = (hi - lo)[:, None] / out
    starts = lo[:, None] + width * np.arange(out)
    ends = starts + width
    a = np.floor(starts).astype(np.int64)
    b = np.maximum(a + 1, np.ceil(ends).astype(np.int64))
    a = np.clip(a, 0, extent - 1)
    b = np.clip(b, a + 1, extent)
    return a, b


def _bin_cells(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-bin cell indices padded by repeating the first cell: [R, out, M]."""
    span = int((b - a).max())
    cells = a[..., None] + np.arange(span)
    return np.where(cells < b[..., None], cells, a[..., None])


def roi_pool_level(feat: Tensor, batch_idx, boxes, stride: int, out: int = POOL_SIZE) -> Tensor:
    """Max-pool each box of one level into an ``out x out`` grid: ``[R, C, out, out]``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    if len(boxes) and not np.all(valid_mask(boxes)):
        raise ValueError("roi_pool: degenerate box")
    n, c, h, w = feat.shape
    r = len(boxes)
    f = boxes / stride
    ra, rb = _bin_edges(f[:, 1], f[:, 3], h, out)
    ca, cb = _bin_edges(f[:, 0], f[:, 2], w, out)
    rows = _bin_cells(ra, rb)  # [R, out, MR]
    cols = _bin_cells(ca, cb)  # [R, out, MC]
    cells = rows[:, :, None, :, None] * w + cols[:, None, :, None, :]
    cells = cells.reshape(r, out * out, -1)
    flat = feat.data.reshape(n, c, h * w)
    gathered = flat[batch_idx[:, None, None], :, cells]  # [R, out*out, M, C]
    arg = gathered.argmax(axis=2)
    pooled = np.take_along_axis(gathered, arg[:, :, None, :], axis=2)[:, :, 0, :]
    chosen = np.take_along_axis(cells, arg, axis=2)  # [R, out*out, C]
    pos = (batch_idx[:, None, None] * c + np.arange(c)[None, None, :]) * (h * w) + chosen
    result = np.ascontiguousarray(pooled.transpose(0, 2, 1)).reshape(r, c, out, out)

    def _bw(g):
        gt = g.reshape(r, c, out * out).transpose(0, 2, 1)
        gx = np.bincount(pos.reshape(-1), weights=gt.reshape(-1), minlength=n * c * h * w)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(result, (feat,), _bw)


def roi_pool(features: FeatureSet, batch_idx, boxes, out: int = POOL_SIZE):
    """Pool every box from its assigned level.

    Returns ``(pooled [R, d, out, out], order)``: row ``k`` of ``pooled``
    belongs to input box ``order[k]``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    levels = np.array([roi_level(b) for b in boxes], dtype=np.int64)
    parts, order = [], []
    for lv in LEVELS:
        sel = np.flatnonzero(levels == lv)
        if len(sel) == 0:
            continue
        parts.append(roi_pool_level(features[lv], batch_idx[sel], boxes[sel], 2**lv, out))
        order.append(sel)
    if not parts:
        d = features[2].shape[1]
        return Tensor(np.zeros((0, d, out, out))), np.zeros(0, dtype=np.int64)
    pooled = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return pooled, np.concatenate(order)


# ---------------------------------------------------------------- heads


class ProposalHead(Module):
    """Shared across levels: 3x3 conv + relu, then 1x1 objectness and 1x1 deltas."""

    def __init__(self, d: int, num_anchors: int = 3):
        self.conv = Conv2d(d, d, 3, padding=1)
        self.objectness = Conv2d(d, num_anchors, 1)
        self.deltas = Conv2d(d, 4 * num_anchors, 1)

    def __call__(self, p: Tensor):
        h = T.relu(self.conv(p))
        return self.objectness(h), self.deltas(h)


class BoxHead(Module):
    """Flatten, FC hidden + relu + dropout, then class logits and per-class deltas."""

    def __init__(self, d: int, hidden: int = 256, num_classes: int = len(CLASSES), dropout: float = 0.5):
        self.dropout = dropout
        self.fc = Linear(d * POOL_SIZE * POOL_SIZE, hidden)
        self.cls = Linear(hidden, num_classes + 1)
        self.reg = Linear(hidden, 4 * num_classes)

    def __call__(self, roi_feat: Tensor, rng: Optional[np.random.Generator] = None):
        r = roi_feat.shape[0]
        x = T.reshape(roi_feat, (r, -1))
        h = T.relu(self.fc(x))
        h = T.dropout(h, self.dropout, rng, training=self.training)
        return self.cls(h), self.reg(h)


def classify_and_regress(roi_feat: Tensor, head: BoxHead, rng=None):
    if roi_feat.ndim == 3:
        roi_feat = T.reshape(roi_feat, (1,) + roi_feat.shape)
    return head(roi_feat, rng)


@lru_cache(maxsize=8)
def _anchors_cached(image_size, scale, ratios):
    return generate_anchors(image_size, LEVELS, scale, ratios)


def proposal_head(p: Tensor, head: ProposalHead):
    return head(p)


def select_proposals(head_outputs: dict, anchors, image_index: int, image_size, pre_nms_k: int = 1000,
                     post_nms_k: int = 100, iou_thr: float = 0.7):
    """Top-k anchors by objectness across levels, decoded, clipped and NMS-filtered.

    ``head_outputs`` maps level -> (objectness [N,A,H,W], deltas [N,4A,H,W])
    as arrays or tensors. Returns ``(boxes [K,4], scores [K])`` sorted by
    descending objectness logit.
    """
    logits, deltas = [], []
    for lv in LEVELS:
        obj, dl = head_outputs[lv]
        obj = obj.data if isinstance(obj, Tensor) else obj
        dl = dl.data if isinstance(dl, Tensor) else dl
        a = obj.shape[1]
        logits.append(obj[image_index].reshape(-1))
        # [4A, H, W] -> per-anchor rows matching Anchors.local ordering
        d4 = dl[image_index].reshape(a, 4, -1).transpose(0, 2, 1).reshape(-1, 4)
        deltas.append(d4)
    sl = [anchors.level_slice(lv) for lv in LEVELS]
    score = np.empty(len(anchors))
    dall = np.empty((len(anchors), 4))
    for lv_i, s in enumerate(sl):
        score[s] = logits[lv_i][anchors.local[s]]
        dall[s] = deltas[lv_i][anchors.local[s]]
    order = np.argsort(-score, kind="stable")[:pre_nms_k]
    boxes = decode_deltas(dall[order], anchors.boxes[order], image_size)
    ok = valid_mask(boxes, 1.0)
    boxes, sc = boxes[ok], score[order][ok]
    keep = nms(boxes, sc, iou_thr)[:post_nms_k]
    return boxes[keep], sc[keep]


# ---------------------------------------------------------------- model


class Detector(Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        self.config = config or ModelConfig()
        cfg = self.config
        self.backbone = Backbone(cfg.backbone)
        self.pyramid = Pyramid(cfg.backbone.stage_channels, cfg.d)
        self.attention = Attention(cfg.d, cfg.beta)
        self.rpn = ProposalHead(cfg.d, cfg.num_anchors)
        self.box_head = BoxHead(cfg.d, cfg.hidden, len(CLASSES), cfg.dropout)

    @property
    def variant(self) -> str:
        return self.config.variant

    def anchors(self, image_size):
        return _anchors_cached(tuple(image_size), self.config.anchor_scale, self.config.ratios)

    def features(self, images: Tensor) -> FeatureSet:
        c = self.backbone.extract_levels(images)
        if self.variant == "no_multilevel":
            p = self.pyramid.project_only(c)
        else:
            p = self.pyramid.build(c)
        if self.variant == "no_attention":
            return p
        return self.attention(p)

    def heads(self, features: FeatureSet) -> dict:
        return {lv: self.rpn(features[lv]) for lv in LEVELS}

    def detect_batch(self, images, conf_thr: float = 0.5, final_nms: float = 0.5,
                     max_detections: int = 100) -> list:
        """Eval-mode inference on ``[N,1,H,W]`` images; one detection list per image."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                x = images if isinstance(images, Tensor) else Tensor(images)
                feats = self.features(x)
                outs = self.heads(feats)
                size = x.shape[2:]
                anchors = self.anchors(size)
                results = []
                for n in range(x.shape[0]):
                    boxes, _ = select_proposals(outs, anchors, n, size, self.config.pre_nms_k,
                                                self.config.post_nms_k, self.config.proposal_nms)
                    results.append(self._second_stage(feats, n, boxes, size, conf_thr, final_nms, max_detections))
        finally:
            self.train(was_training)
        return results

    def _second_stage(self, feats, n, proposals, size, conf_thr, final_nms, max_detections):
        if len(proposals) == 0:
            return []
        pooled, order = roi_pool(feats, np.full(len(proposals), n), proposals)
        logits, deltas = self.box_head(pooled)
        props = proposals[order]
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(axis=1, keepdims=True)
        dets = []
        for k in range(len(CLASSES)):
            sc = prob[:, k + 1]
            sel = np.flatnonzero(sc >= conf_thr)
            if len(sel) == 0:
                continue
            bx = decode_deltas(deltas.data[sel, 4 * k : 4 * k + 4], props[sel], size)
            ok = valid_mask(bx)
            bx, s = bx[ok], sc[sel][ok]
            for i in nms(bx, s, final_nms):
                dets.append(Detection(Box(*map(float, bx[i])), k, float(s[i])))
        dets.sort(key=lambda d: (-d.score, d.class_id))
        return dets[:max_detections]


def detect(image, model: Detector, conf_thr: float = 0.5, final_nms: float = 0.5) -> list:
    """Detections for a single ``[H,W]`` image (values 0..255) or ``[1,1,H,W]`` tensor."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = normalize_image(x)[None, None]
    return model.detect_batch(Tensor(x), conf_thr, final_nms)[0]


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Map 0..255 grayscale to roughly zero-mean unit-range floats."""
    return (np.asarray(img, dtype=np.float64) - 128.0) / 64.0

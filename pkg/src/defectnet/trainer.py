"""End-to-end training: loss assembly, momentum SGD, logging and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .boxes import NEGATIVE, POSITIVE, encode_deltas, iou_matrix, match_anchors
from .checkpoint import save_checkpoint
from .data import Dataset, Sample, annotations_of, to_tensor_batch
from .detector import CLASSES, Detector, ModelConfig, roi_pool, select_proposals
from .metrics import evaluate
from .nn import init_gaussian, is_norm_param
from .tensor import Tensor

log = logging.getLogger(__name__)

SMOOTH_L1_BETA = 1.0 / 9.0
LOSS_KEYS = ("prop_cls", "prop_reg", "cls", "reg")
TRACKED_MODULES = ("multilevel", "attention")
INIT_SCHEMES = ("gaussian", "fan_in")
# final predictors keep a small fixed std under the fan-in scheme
PREDICTOR_STD = {"rpn.objectness.weight": 0.01, "rpn.deltas.weight": 0.01,
                 "box_head.cls.weight": 0.01, "box_head.reg.weight": 0.001}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 500
    batch_size: int = 2
    seed: int = 0
    init_sigma: float = 0.01
    init: str = "gaussian"
    log_every: int = 5
    tracked_weights: int = 6

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.iterations < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and log_every >= 1 are required")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {', '.join(INIT_SCHEMES)}, got {self.init!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, batch_ids, train_log):
        super().__init__(message)
        self.batch_ids = batch_ids
        self.log = train_log


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)   # dicts: iter, total, prop_cls, prop_reg, cls, reg
    weights: list = field(default_factory=list)  # tuples: iter, module, weight_id, value
    metrics: dict = field(default_factory=dict)

    def loss_series(self, key: str = "total") -> np.ndarray:
        return np.array([row[key] for row in self.losses])

    def trajectory(self, module: str, weight_id: str) -> np.ndarray:
        return np.array([v for _, m, w, v in self.weights if m == module and w == weight_id])

    def tracked_ids(self) -> list:
        seen = []
        for _, m, w, _ in self.weights:
            if (m, w) not in seen:
                seen.append((m, w))
        return seen

    def write_csv(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "total", *LOSS_KEYS])
            for row in self.losses:
                w.writerow([row["iter"]] + [format(row[k], ".17g") for k in ("total", *LOSS_KEYS)])
        with open(out / "weights.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "module", "weight_id", "value"])
            for it, mod, wid, val in self.weights:
                w.writerow([it, mod, wid, format(val, ".17g")])


# ---------------------------------------------------------------- initialization


def init_params(model: Detector, rng: np.random.Generator, sigma: float = 0.01, scheme: str = "gaussian") -> None:
    """Weights ~ N(0, sigma^2), biases 0, norm gamma 1 / shift 0, running stats reset.

    ``scheme="fan_in"`` rescales every weight to std ``1/sqrt(fan_in)`` instead,
    except the final predictors (see ``PREDICTOR_STD``). It draws the same
    random stream, so the two schemes differ only by per-tensor factors.
    """
    init_gaussian(model, rng, sigma)
    if scheme == "gaussian":
        return
    for name, p in model.named_parameters():
        if not name.endswith(".weight") or is_norm_param(name):
            continue
        fan_in = int(np.prod(p.shape[1:])) if p.data.ndim == 4 else p.shape[0]
        target = PREDICTOR_STD.get(name, 1.0 / math.sqrt(fan_in))
        p.data *= target / sigma


# ---------------------------------------------------------------- loss


def _sample(idx: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= k:
        return idx
    return np.sort(rng.choice(idx, size=k, replace=False))


def _zero() -> Tensor:
    return Tensor(0.0)


def total_loss(model: Detector, images, annotations, rng: np.random.Generator):
    """Sum of proposal BCE, proposal smooth-L1, classifier cross-entropy and box smooth-L1.

    ``images`` is ``[N,1,H,W]`` (normalized); ``annotations`` holds one
    ``(boxes [G,4], class_ids [G])`` pair per image. Returns the scalar loss
    tensor and a dict of float components.
    """
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    n = x.shape[0]
    size = x.shape[2:]
    feats = model.features(x)
    outs = model.heads(feats)
    anchors = model.anchors(size)
    na = cfg.num_anchors
    hw = {lv: anchors.grid[lv][0] * anchors.grid[lv][1] for lv in anchors.grid}

    obj_idx = {lv: [] for lv in outs}
    obj_tgt = {lv: [] for lv in outs}
    reg_idx = {lv: [] for lv in outs}
    reg_tgt = {lv: [] for lv in outs}
    num_sampled = 0
    num_pos_anchor = 0
    for i in range(n):
        gt = annotations[i][0]
        labels, targets, _ = match_anchors(anchors.boxes, gt, cfg.pos_thr, cfg.neg_thr)
        pos = np.flatnonzero(labels == POSITIVE)
        neg = np.flatnonzero(labels == NEGATIVE)
        pos = _sample(pos, cfg.rpn_batch // 2, rng)
        neg = _sample(neg, cfg.rpn_batch - len(pos), rng)
        num_sampled += len(pos) + len(neg)
        num_pos_anchor += len(pos)
        for group, flag in ((pos, 1.0), (neg, 0.0)):
            for lv in outs:
                sel = group[anchors.level[group] == lv]
                if len(sel) == 0:
                    continue
                local = anchors.local[sel]
                obj_idx[lv].append(i * na * hw[lv] + local)
                obj_tgt[lv].append(np.full(len(sel), flag))
                if flag:
                    a, cell = local // hw[lv], local % hw[lv]
                    k = np.arange(4)
                    flat = ((i * 4 * na + a[:, None] * 4 + k[None, :]) * hw[lv] + cell[:, None]).reshape(-1)
                    reg_idx[lv].append(flat)
                    reg_tgt[lv].append(targets[sel].reshape(-1))

    logits, tgts, preds, rtgts = [], [], [], []
    for lv, (obj, dl) in outs.items():
        if obj_idx[lv]:
            logits.append(T.take(obj, np.concatenate(obj_idx[lv])))
            tgts.append(np.concatenate(obj_tgt[lv]))
        if reg_idx[lv]:
            preds.append(T.take(dl, np.concatenate(reg_idx[lv])))
            rtgts.append(np.concatenate(reg_tgt[lv]))
    l_prop_cls = T.binary_cross_entropy_with_logits(T.concat(logits), np.concatenate(tgts)) if logits else _zero()
    if preds:
        l_prop_reg = T.scale(T.smooth_l1(T.concat(preds), np.concatenate(rtgts), SMOOTH_L1_BETA),
                             1.0 / num_pos_anchor)
    else:
        l_prop_reg = _zero()

    # second stage on detached proposals plus ground truth
    roi_boxes, roi_batch, roi_labels, roi_targets = [], [], [], []
    max_pos = int(round(cfg.roi_batch * cfg.roi_pos_fraction))
    for i in range(n):
        gt, cls = annotations[i]
        props, _ = select_proposals(outs, anchors, i, size, cfg.pre_nms_k, cfg.post_nms_k, cfg.proposal_nms)
        cand = np.concatenate([props, gt]) if len(gt) else props
        if len(cand) == 0:
            continue
        lab = np.zeros(len(cand), dtype=np.int64)
        tgt = np.zeros((len(cand), 4))
        if len(gt):
            ious = iou_matrix(cand, gt)
            best = ious.argmax(axis=1)
            fg = ious.max(axis=1) >= cfg.roi_pos_thr
            lab[fg] = cls[best[fg]] + 1
            tgt[fg] = encode_deltas(gt[best[fg]], cand[fg])
        pos = _sample(np.flatnonzero(lab > 0), max_pos, rng)
        neg = _sample(np.flatnonzero(lab == 0), cfg.roi_batch - len(pos), rng)
        keep = np.concatenate([pos, neg])
        roi_boxes.append(cand[keep])
        roi_batch.append(np.full(len(keep), i))
        roi_labels.append(lab[keep])
        roi_targets.append(tgt[keep])

    if roi_boxes:
        boxes = np.concatenate(roi_boxes)
        pooled, order = roi_pool(feats, np.concatenate(roi_batch), boxes)
        labels = np.concatenate(roi_labels)[order]
        targets = np.concatenate(roi_targets)[order]
        cls_logits, deltas = model.box_head(pooled, rng)
        l_cls = T.softmax_cross_entropy(cls_logits, labels)
        pos_rows = np.flatnonzero(labels > 0)
        if len(pos_rows):
            k = np.arange(4)
            ncls = len(CLASSES)
            flat = (pos_rows[:, None] * 4 * ncls + (labels[pos_rows, None] - 1) * 4 + k[None, :]).reshape(-1)
            l_reg = T.scale(T.smooth_l1(T.take(deltas, flat), targets[pos_rows].reshape(-1), SMOOTH_L1_BETA),
                            1.0 / len(pos_rows))
        else:
            l_reg = _zero()
    else:
        l_cls = l_reg = _zero()

    total = T.add(T.add(l_prop_cls, l_prop_reg), T.add(l_cls, l_reg))
    parts = {"prop_cls": l_prop_cls.item(), "prop_reg": l_prop_reg.item(), "cls": l_cls.item(), "reg": l_reg.item()}
    return total, parts


# ---------------------------------------------------------------- optimizer


def sgd_step(named_params, state: dict, config: TrainConfig) -> None:
    """``v = m v + g + wd p``; ``p -= lr v``; gradients zeroed afterwards.

    Batch-norm gamma/shift receive no weight decay.
    """
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"sgd_step: non-finite gradient in parameter {name}")
        wd = 0.0 if is_norm_param(name) else config.weight_decay
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p.data)
        v *= config.momentum
        v += g
        if wd:
            v += wd * p.data
        p.data -= config.lr * v
        if p.grad is not None:
            p.grad.fill(0.0)


# ---------------------------------------------------------------- tracking


def _module_params(model: Detector, module: str):
    prefix = {"multilevel": "pyramid.", "attention": "attention."}[module]
    return [(n, p) for n, p in model.named_parameters() if n.startswith(prefix)]


def choose_tracked(model: Detector, count: int, rng: np.random.Generator) -> list:
    """``count`` random (module, name, flat index) triples per tracked module."""
    picks = []
    for module in TRACKED_MODULES:
        params = _module_params(model, module)
        sizes = np.array([p.size for _, p in params])
        flat = np.sort(rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False))
        bounds = np.cumsum(sizes)
        for f in flat:
            j = int(np.searchsorted(bounds, f, side="right"))
            off = int(f - (bounds[j - 1] if j else 0))
            picks.append((module, params[j][0], off))
    return picks


def _record_weights(model, picks, it, train_log):
    params = dict(model.named_parameters())
    for module, name, off in picks:
        train_log.weights.append((it, module, f"{name}[{off}]", float(params[name].data.reshape(-1)[off])))


# ---------------------------------------------------------------- loop


def build_model(model_config: ModelConfig, train_config: TrainConfig) -> Detector:
    model = Detector(model_config)
    init_params(model, np.random.default_rng([train_config.seed, 0]), train_config.init_sigma, train_config.init)
    return model


def checkpoint_meta(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    from .config import flatten_configs

    meta = {f"config.{k}": v for k, v in flatten_configs(model_config, train_config).items()}
    meta["variant"] = model_config.variant
    return meta


def train(dataset, model_config: Optional[ModelConfig] = None, train_config: Optional[TrainConfig] = None,
          out_dir=None, progress: Optional[Callable] = None):
    """Train a fresh model on the dataset's train split (or a plain list of samples).

    Returns ``(model, TrainLog)``. With ``out_dir`` the checkpoint and the
    loss/weight CSVs are written there.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    if isinstance(dataset, Dataset):
        train_samples, val_samples = dataset.split("train"), dataset.split("val")
    else:
        train_samples, val_samples = list(dataset), []
    if not train_samples:
        raise ValueError("train: empty training split")

    model = build_model(model_config, train_config)
    model.train()
    rng = np.random.default_rng([train_config.seed, 1])
    picks = choose_tracked(model, train_config.tracked_weights, np.random.default_rng([train_config.seed, 2]))
    train_log = TrainLog()
    _record_weights(model, picks, 0, train_log)
    named = list(model.named_parameters())
    state: dict = {}

    order = rng.permutation(len(train_samples))
    cursor = 0
    for it in range(1, train_config.iterations + 1):
        batch = []
        while len(batch) < train_config.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(train_samples))
                cursor = 0
            batch.append(train_samples[order[cursor]])
            cursor += 1
        images = to_tensor_batch(batch)
        loss, parts = total_loss(model, images, annotations_of(batch), rng)
        value = loss.item()
        if not math.isfinite(value):
            ids = [s.id for s in batch]
            if out_dir is not None:
                train_log.write_csv(out_dir)
                Path(out_dir, "diverged.txt").write_text(f"iteration {it}\nbatch {' '.join(ids)}\n")
            raise TrainingDiverged(f"non-finite loss at iteration {it} (batch {ids})", ids, train_log)
        T.backward(loss)
        del loss
        sgd_step(named, state, train_config)
        train_log.losses.append({"iter": it, "total": value, **parts})
        if it % train_config.log_every == 0 or it == train_config.iterations:
            _record_weights(model, picks, it, train_log)
        if progress is not None:
            progress(it, value, parts)

    model.eval()
    if val_samples:
        report = evaluate_samples(model, val_samples)
        train_log.metrics["val_map"] = report.map
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(out_dir) / "model.ckpt", checkpoint_meta(model_config, train_config))
        train_log.write_csv(out_dir)
    return model, train_log


def run_detection(model: Detector, samples, score_floor: float = 0.05, batch_size: int = 2):
    """Detections (scores >= ``score_floor``) for every sample, in input order."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        dets = model.detect_batch(to_tensor_batch(chunk), conf_thr=score_floor)
        out.extend((s.id, d) for s, d in zip(chunk, dets))
    return out


def evaluate_samples(model: Detector, samples, iou_thr: float = 0.5, conf_thr: float = 0.5, score_floor: float = 0.05):
    dets = run_detection(model, samples, score_floor)
    annotations = {s.id: list(zip(s.boxes, s.labels)) for s in samples}
    return evaluate(dets, annotations, iou_thr, conf_thr)


def ablate(variant: str, dataset, model_config: Optional[ModelConfig] = None,
           train_config: Optional[TrainConfig] = None, out_dir=None):
    """Train one of ``full``, ``no_multilevel`` or ``no_attention`` with everything else unchanged."""
    model_config = replace(model_config or ModelConfig(), variant=variant)
    return train(dataset, model_config, train_config, out_dir)

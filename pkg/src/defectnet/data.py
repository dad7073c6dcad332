"""Synthetic textile-defect samples, augmentation, splitting and on-disk I/O.

Images are uint8 grayscale arrays ``[H, W]``. Each annotation is a box
``(x1, y1, x2, y2)`` in pixels plus one of the five class names. Normal
(defect-free) samples carry no annotations.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .boxes import Box
from .detector import CLASSES

ABBREV = {"n": (), "be": ("brokenend",), "bp": ("brokenpick",), "f": ("felter",), "o": ("oilstains",),
          "s": ("sundries",)}
SHORT = {"brokenend": "be", "brokenpick": "bp", "felter": "f", "oilstains": "o", "sundries": "s"}

SUNDRIES_MAX_SIDE = 16


class ParseError(ValueError):
    """Malformed PGM header or annotation line."""


@dataclass
class Sample:
    id: str
    image: np.ndarray
    boxes: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [Box(*map(float, b)) for b in self.boxes]
        self.labels = list(self.labels)
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"sample {self.id}: {len(self.boxes)} boxes but {len(self.labels)} labels")

    @property
    def label_set(self) -> tuple:
        return tuple(sorted(set(self.labels)))

    def box_array(self) -> np.ndarray:
        return np.array(self.boxes, dtype=np.float64).reshape(-1, 4)

    def class_ids(self) -> np.ndarray:
        return np.array([CLASSES.index(c) for c in self.labels], dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and self.boxes == other.boxes and self.labels == other.labels)


@dataclass
class Dataset:
    samples: list
    splits: dict = field(default_factory=dict)  # split name -> list of sample ids

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict:
        return {s.id: s for s in self.samples}

    def split(self, name: str) -> list:
        if name == "all":
            return list(self.samples)
        lookup = self.by_id()
        return [lookup[i] for i in self.splits.get(name, [])]


def combo_key(labels: Iterable[str]) -> str:
    """Canonical label-combination name, e.g. ``"be+s"``; ``"n"`` for normal."""
    names = sorted({SHORT[c] for c in labels})
    return "+".join(names) if names else "n"


def parse_combo(key: str) -> tuple:
    out = []
    for part in key.split("+"):
        part = part.strip()
        if part not in ABBREV:
            raise ValueError(f"unknown label abbreviation {part!r} in {key!r}")
        out.extend(ABBREV[part])
    return tuple(sorted(set(out)))


# ---------------------------------------------------------------- dataset spec

# label-set composition of the reference textile collection (1,000 images)
TABLE1_COUNTS = (
    ("n", 50), ("be", 30), ("bp", 30), ("f", 30), ("o", 30), ("s", 30),
    ("be+s", 155), ("bp+s", 155), ("f+s", 155), ("bp+o", 155), ("f+s", 155),
    ("f+o+s", 5), ("bp+f+o", 5), ("be+bp+s", 5), ("be+f+s", 5), ("be+o+s", 5),
)

TINY_COUNTS = (
    ("n", 2), ("be", 2), ("bp", 2), ("f", 2), ("o", 2), ("s", 2),
    ("be+s", 2), ("bp+s", 2), ("f+s", 2), ("bp+o", 2),
)


@dataclass
class DatasetSpec:
    counts: dict = field(default_factory=lambda: _merge_counts(TABLE1_COUNTS))
    tile: int = 320
    seed: int = 0
    augment_fraction: float = 0.3

    def __post_init__(self):
        self.counts = {combo_key(parse_combo(k)): int(v) for k, v in _merge_counts(self.counts.items()).items()}
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("dataset counts must be non-negative")
        if self.tile % 32:
            raise ValueError(f"tile size must be divisible by 32, got {self.tile}")
        if not 0.0 <= self.augment_fraction <= 1.0:
            raise ValueError("augment_fraction must lie in [0, 1]")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "DatasetSpec":
        if name == "default":
            return cls(seed=seed)
        if name == "tiny":
            return cls(counts=_merge_counts(TINY_COUNTS), seed=seed)
        raise ValueError(f"unknown dataset preset {name!r}")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def multi_label_fraction(self) -> float:
        multi = sum(v for k, v in self.counts.items() if k.count("+") >= 1)
        return multi / self.total if self.total else 0.0

    def to_lines(self) -> list:
        lines = [f"tile = {self.tile}", f"seed = {self.seed}", f"augment_fraction = {self.augment_fraction}"]
        lines += [f"count.{k} = {v}" for k, v in self.counts.items()]
        return lines

    @classmethod
    def from_mapping(cls, kv: dict) -> "DatasetSpec":
        counts = {k[len("count."):]: int(v) for k, v in kv.items() if k.startswith("count.")}
        known = {"tile", "seed", "augment_fraction"}
        unknown = [k for k in kv if not k.startswith("count.") and k not in known]
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        if "tile" in kv:
            kwargs["tile"] = int(kv["tile"])
        if "seed" in kv:
            kwargs["seed"] = int(kv["seed"])
        if "augment_fraction" in kv:
            kwargs["augment_fraction"] = float(kv["augment_fraction"])
        if counts:
            kwargs["counts"] = counts
        return cls(**kwargs)


def _merge_counts(items) -> dict:
    out: dict = {}
    for k, v in items:
        key = combo_key(parse_combo(k))
        out[key] = out.get(key, 0) + int(v)
    return out


# ---------------------------------------------------------------- painters


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = rng.uniform(4.0, 8.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    weave = 10.0 * np.sin(2 * np.pi * xx / px + phase[0]) * np.sin(2 * np.pi * yy / py + phase[1])
    ripple = 4.0 * np.sin(2 * np.pi * (xx + yy) / rng.uniform(20, 40))
    base = rng.uniform(120.0, 150.0)
    return base + weave + ripple + rng.normal(0.0, 4.0, size=(h, w))


def _paint_brokenend(img, rng):
    h, w = img.shape
    width = int(rng.integers(2, 5))
    length = int(rng.integers(h // 4, h // 2 + 1))
    x = int(rng.integers(4, w - width - 4))
    y = int(rng.integers(0, h - length + 1))
    img[y : y + length, x : x + width] -= rng.uniform(55, 75)
    return (x, y, x + width, y + length)


def _paint_brokenpick(img, rng):
    h, w = img.shape
    width = int(rng.integers(2, 5))
    length = int(rng.integers(w // 4, w // 2 + 1))
    y = int(rng.integers(4, h - width - 4))
    x = int(rng.integers(0, w - length + 1))
    img[y : y + width, x : x + length] -= rng.uniform(55, 75)
    return (x, y, x + length, y + width)


def _blob(img, cx, cy, sigma, amp):
    h, w = img.shape
    r = int(math.ceil(2 * sigma))
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    img[y0:y1, x0:x1] += amp * np.exp(-((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (2 * sigma**2))


def _paint_oilstains(img, rng):
    h, w = img.shape
    radius = float(rng.integers(15, 31))
    cx = rng.uniform(radius, w - radius)
    cy = rng.uniform(radius, h - radius)
    _blob(img, cx, cy, radius / 2.0, -rng.uniform(60, 80))
    return (max(0.0, np.floor(cx - radius)), max(0.0, np.floor(cy - radius)),
            min(float(w), np.ceil(cx + radius)), min(float(h), np.ceil(cy + radius)))


def _paint_felter(img, rng):
    h, w = img.shape
    side = int(rng.integers(30, 61))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    for _ in range(int(rng.integers(4, 8))):
        sigma = rng.uniform(3.0, 6.0)
        cx = rng.uniform(x0 + 2 * sigma, x0 + side - 2 * sigma)
        cy = rng.uniform(y0 + 2 * sigma, y0 + side - 2 * sigma)
        _blob(img, cx, cy, sigma, rng.uniform(50, 70))
    return (x0, y0, x0 + side, y0 + side)


def _paint_sundries(img, rng):
    h, w = img.shape
    side = int(rng.integers(8, SUNDRIES_MAX_SIDE + 1))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    patch = img[y0 : y0 + side, x0 : x0 + side]
    patch -= 25.0
    n = int(rng.integers(side, 2 * side))
    ys = rng.integers(0, side, size=n)
    xs = rng.integers(0, side, size=n)
    patch[ys, xs] -= rng.uniform(40, 70, size=n)
    # pin the speckle extent to the box corners
    patch[0, 0] -= 60
    patch[side - 1, side - 1] -= 60
    return (x0, y0, x0 + side, y0 + side)


PAINTERS = {
    "brokenend": _paint_brokenend,
    "brokenpick": _paint_brokenpick,
    "felter": _paint_felter,
    "oilstains": _paint_oilstains,
    "sundries": _paint_sundries,
}


def generate_sample(rng: np.random.Generator, label_set, size: int = 320, sample_id: str = "0") -> Sample:
    """Weave texture plus one painted defect per requested class."""
    labels = sorted(set(label_set))
    for c in labels:
        if c not in PAINTERS:
            raise ValueError(f"unknown defect class {c!r}")
    img = _texture(rng, size, size)
    boxes = [PAINTERS[c](img, rng) for c in labels]
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(sample_id, out, boxes, labels)


# ---------------------------------------------------------------- augmentation


def _clip_box(b, w, h):
    return (min(max(b[0], 0.0), w), min(max(b[1], 0.0), h), min(max(b[2], 0.0), w), min(max(b[3], 0.0), h))


def crop_tiles(image, tile: int = 320, min_keep: float = 0.25):
    """Non-overlapping ``tile x tile`` crops from the top-left; remainders discarded.

    Accepts a bare array (returns arrays) or a :class:`Sample` (returns
    samples with clipped boxes; a box keeping less than ``min_keep`` of its
    area inside a tile is dropped from that tile).
    """
    sample = image if isinstance(image, Sample) else None
    arr = sample.image if sample is not None else np.asarray(image)
    h, w = arr.shape[:2]
    if h < tile or w < tile:
        raise ValueError(f"crop_tiles: image {w}x{h} smaller than tile {tile}")
    out = []
    for ty in range(h // tile):
        for tx in range(w // tile):
            crop = arr[ty * tile : (ty + 1) * tile, tx * tile : (tx + 1) * tile].copy()
            if sample is None:
                out.append(crop)
                continue
            boxes, labels = [], []
            ox, oy = tx * tile, ty * tile
            for b, lab in zip(sample.boxes, sample.labels):
                shifted = (b.x1 - ox, b.y1 - oy, b.x2 - ox, b.y2 - oy)
                c = _clip_box(shifted, tile, tile)
                area = max(c[2] - c[0], 0) * max(c[3] - c[1], 0)
                if area > 0 and area >= min_keep * b.area:
                    boxes.append(c)
                    labels.append(lab)
            out.append(Sample(f"{sample.id}_t{ty}{tx}", crop, boxes, labels))
    return out


def translate(sample: Sample, dx: int, dy: int) -> Sample:
    """Shift right/down by ``(dx, dy)`` pixels with edge-replication fill."""
    if not (0 <= dx <= 50 and 0 <= dy <= 50):
        raise ValueError(f"translate: shifts must lie in [0, 50], got ({dx}, {dy})")
    h, w = sample.image.shape
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    img = sample.image[ys[:, None], xs[None, :]]
    boxes, labels = [], []
    for b, lab in zip(sample.boxes, sample.labels):
        c = _clip_box((b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy), w, h)
        if c[2] > c[0] and c[3] > c[1]:
            boxes.append(c)
            labels.append(lab)
    return Sample(sample.id, img, boxes, labels)


def rotate_point(x, y, theta_deg, cx, cy):
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy)


def rotate(sample: Sample, theta_deg: float) -> Sample:
    """Rotate about the image center; nearest-neighbour sampling, edge-replication fill.

    A point ``p`` maps to ``R(theta) (p - c) + c`` in (x right, y down) pixel
    coordinates. Boxes become the clipped bounding box of their rotated corners.
    """
    if not 5.0 <= abs(theta_deg) <= 20.0:
        raise ValueError(f"rotate: |theta| must lie in [5, 20] degrees, got {theta_deg}")
    h, w = sample.image.shape
    cx, cy = w / 2.0, h / 2.0
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx + 0.5 - cx, yy + 0.5 - cy
    # inverse rotation of each output pixel center
    sx = c * px + s * py + cx
    sy = -s * px + c * py + cy
    ix = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    img = sample.image[iy, ix]
    boxes, labels = [], []
    for b, lab in zip(sample.boxes, sample.labels):
        pts = [rotate_point(x, y, theta_deg, cx, cy) for x, y in ((b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2))]
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        cb = _clip_box((min(xs), min(ys), max(xs), max(ys)), w, h)
        if cb[2] > cb[0] and cb[3] > cb[1]:
            boxes.append(cb)
            labels.append(lab)
    return Sample(sample.id, img, boxes, labels)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Apply either a random translation or a random rotation (never both)."""
    if rng.random() < 0.5:
        dx, dy = (int(v) for v in rng.integers(0, 51, size=2))
        return translate(sample, dx, dy)
    theta = float(rng.uniform(5.0, 20.0)) * (1 if rng.random() < 0.5 else -1)
    return rotate(sample, theta)


def generate_dataset(spec: DatasetSpec) -> list:
    """Samples for every label combination in ``spec.counts``, seeded per sample index."""
    samples = []
    idx = 0
    for key, count in spec.counts.items():
        labels = parse_combo(key)
        for _ in range(count):
            rng = np.random.default_rng([spec.seed, idx])
            s = generate_sample(rng, labels, spec.tile, f"{idx:05d}")
            if rng.random() < spec.augment_fraction:
                s = augment(s, rng)
            samples.append(s)
            idx += 1
    return samples


# ---------------------------------------------------------------- splitting


def _apportion(sizes, fraction: float, target: int, rng: np.random.Generator) -> list:
    """Integer shares of each stratum summing to ``target``: floor, then largest remainder."""
    exact = [n * fraction for n in sizes]
    base = [int(math.floor(e)) for e in exact]
    rem = target - sum(base)
    frac = np.array([e - b for e, b in zip(exact, base)])
    tiebreak = rng.random(len(sizes))
    order = sorted(range(len(sizes)), key=lambda i: (-round(frac[i], 12), tiebreak[i]))
    for i in order:
        if rem <= 0:
            break
        if base[i] < sizes[i]:
            base[i] += 1
            rem -= 1
    return base


def split_dataset(samples, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Stratified 80/10/10 split by label combination.

    Each stratum is shuffled with the seed. Train and validation shares are
    floor(n * fraction) per stratum, topped up by largest fractional remainder
    until the global counts equal round(N * fraction); test takes the rest.
    A stratum of 5 therefore gets 4 train, 0 or 1 validation, the remainder test.
    """
    samples = list(samples)
    if len(samples) < 10:
        raise ValueError(f"split_dataset: need at least 10 samples, got {len(samples)}")
    rng = np.random.default_rng(seed)
    strata: dict = {}
    for s in samples:
        strata.setdefault(combo_key(s.labels), []).append(s.id)
    keys = sorted(strata)
    groups = []
    for k in keys:
        ids = list(strata[k])
        rng.shuffle(ids)
        groups.append(ids)
    sizes = [len(g) for g in groups]
    n = len(samples)
    n_train = _apportion(sizes, fractions[0], int(round(n * fractions[0])), rng)
    left = [s - t for s, t in zip(sizes, n_train)]
    # validation shares are apportioned against the original stratum sizes
    n_val = _apportion(sizes, fractions[1], int(round(n * fractions[1])), rng)
    n_val = [min(v, l) for v, l in zip(n_val, left)]
    out = {"train": [], "val": [], "test": []}
    for g, t, v in zip(groups, n_train, n_val):
        out["train"] += g[:t]
        out["val"] += g[t : t + v]
        out["test"] += g[t + v :]
    return out


# ---------------------------------------------------------------- I/O


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm: expected a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval 255) PGM file."""
    data = Path(path).read_bytes()
    tokens: list = []
    pos = 0
    line = 1
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            if data[pos] == 0x0A:
                line += 1
            pos += 1
        if pos >= len(data):
            raise ParseError(f"{path}: line {line}: truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append((data[start:pos], line))
    magic, wtok, htok, mtok = tokens
    if magic[0] != b"P5":
        raise ParseError(f"{path}: line {magic[1]}: expected magic 'P5', got {magic[0][:8]!r}")
    fields = []
    for tok, tok_line in (wtok, htok, mtok):
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise ParseError(f"{path}: line {tok_line}: non-integer PGM header field {tok[:8]!r}") from exc
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise ParseError(f"{path}: line {mtok[1]}: unsupported PGM header ({w}x{h}, maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise ParseError(f"{path}: line {mtok[1]}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def save_dataset(dataset: Dataset, directory) -> None:
    """``images/<id>.pgm`` plus ``annotations.jsonl`` and ``splits.json``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in dataset.samples:
        rel = f"images/{s.id}.pgm"
        write_pgm(root / rel, s.image)
        rec = {"id": s.id, "image": rel, "boxes": [list(b) for b in s.boxes], "labels": list(s.labels)}
        lines.append(json.dumps(rec))
    (root / "annotations.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    (root / "splits.json").write_text(json.dumps(dataset.splits, indent=1, sort_keys=True) + "\n")


def parse_annotations(text: str, source: str = "annotations.jsonl") -> list:
    records = []
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            boxes = [[float(v) for v in b] for b in rec["boxes"]]
            labels = [str(c) for c in rec["labels"]]
            if any(len(b) != 4 for b in boxes) or len(boxes) != len(labels):
                raise ValueError("boxes/labels mismatch")
            if any(c not in CLASSES for c in labels):
                raise ValueError("unknown class label")
            records.append({"id": str(rec["id"]), "image": str(rec["image"]), "boxes": boxes, "labels": labels})
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{source}: line {n}: {exc}") from exc
    return records


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl in {root}")
    samples = []
    for rec in parse_annotations(ann.read_text(), str(ann)):
        img = read_pgm(root / rec["image"])
        samples.append(Sample(rec["id"], img, rec["boxes"], rec["labels"]))
    splits_path = root / "splits.json"
    splits = json.loads(splits_path.read_text()) if splits_path.exists() else {}
    return Dataset(samples, splits)


def build_dataset(spec: DatasetSpec) -> Dataset:
    samples = generate_dataset(spec)
    splits = split_dataset(samples, spec.seed) if len(samples) >= 10 else {"train": [s.id for s in samples]}
    return Dataset(samples, splits)


def overfit_samples(count: int = 8, size: int = 320, seed: int = 0) -> list:
    """Small multi-defect set where every image has two or more defects, most with sundries."""
    combos = [("brokenend", "sundries"), ("brokenpick", "sundries"), ("felter", "sundries"),
              ("oilstains", "sundries"), ("brokenend", "oilstains", "sundries"), ("brokenpick", "felter", "oilstains"),
              ("brokenpick", "oilstains"), ("felter", "sundries", "brokenpick")]
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, 1000 + i])
        out.append(generate_sample(rng, combos[i % len(combos)], size, f"fit{i:02d}"))
    return out


def image_stats(samples) -> dict:
    counts: dict = {}
    for s in samples:
        counts[combo_key(s.labels)] = counts.get(combo_key(s.labels), 0) + 1
    return counts


def ensure_empty_dir(path, force: bool = False) -> None:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"output directory {p} is not empty (use --force)")
    os.makedirs(p, exist_ok=True)


def to_tensor_batch(samples) -> np.ndarray:
    from .detector import normalize_image

    return np.stack([normalize_image(s.image)[None] for s in samples])


def annotations_of(samples) -> list:
    return [(s.box_array(), s.class_ids()) for s in samples]

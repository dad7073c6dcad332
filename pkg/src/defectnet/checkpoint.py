"""Plain-text model checkpoints.

Layout::

    defectnet-checkpoint 1
    meta <key> <value>          (zero or more; config echo and variant tag)
    tensor <name>
    <shape ints>
    <one value per line, 17 significant digits>
    tensor <name>
    ...

Parameters come first in module order, then batch-norm running statistics.
Identical parameters give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import format_tensor, parse_tensor

MAGIC = "defectnet-checkpoint 1"


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta {k} {v}")
    parts = ["\n".join(lines) + "\n"]
    for name, arr in model.state_items():
        parts.append(f"tensor {name}\n")
        parts.append(format_tensor(arr))
    Path(path).write_text("".join(parts))


def read_checkpoint(path):
    """Return ``(meta, tensors)`` with tensors as an ordered name -> array dict."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: line 1: not a defectnet checkpoint")
    meta, tensors = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            _, key, *rest = line.split(" ", 2)
            meta[key] = rest[0] if rest else ""
            i += 1
        elif line.startswith("tensor "):
            name = line[len("tensor "):]
            arr, i = parse_tensor(lines, i + 1)
            tensors[name] = arr
        elif not line.strip():
            i += 1
        else:
            raise ValueError(f"{path}: line {i + 1}: unexpected content {line[:40]!r}")
    return meta, tensors


def load_state(model, tensors: dict) -> None:
    """Copy arrays into the model's parameters and buffers (names and shapes must agree)."""
    items = dict(model.state_items())
    missing = [k for k in items if k not in tensors]
    extra = [k for k in tensors if k not in items]
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in items.items():
        src = np.asarray(tensors[name])
        if src.shape != arr.shape:
            raise ValueError(f"checkpoint mismatch for {name}: {src.shape} vs {arr.shape}")
        arr[...] = src

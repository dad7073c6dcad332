"""Reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to the parent gradients. Calling
:func:`backward` on a scalar builds a :class:`Tape` (the reachable ops in
topological order) and replays it in reverse.

Tape policy: the graph lives on the tensors, so a tape is rebuilt for every
``backward`` call and the graph stays reusable. Gradients accumulate into
``Tensor.grad`` of leaves; call :meth:`Tensor.zero_grad` (or let the
optimizer do it) between steps.

Conventions:
  * conv2d is cross-correlation (no kernel flip), zero padding.
  * add/mul require identical shapes; there is no broadcasting.
  * max-pool routes gradient to the first argmax in row-major window order.
  * relu'(0) = 0.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Ops reachable from a loss, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls([n for n in order if n._backward is not None])

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + seed
        return
    Tape.build(loss).run(loss, seed)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_SIG_LO = np.finfo(DTYPE).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid_scaled(x: Tensor, beta: float = 1.0) -> Tensor:
    """``1 / (1 + exp(-beta * x))`` elementwise."""
    beta = float(beta)
    if not np.isfinite(beta):
        raise ValueError("sigmoid_scaled: beta must be finite")
    # keep saturated values inside the open interval (0, 1)
    s = np.clip(_sigmoid(beta * x.data), _SIG_LO, _SIG_HI)
    return Tensor._from_op(s, (x,), lambda g: (g * beta * s * (1.0 - s),))


def sigmoid(x: Tensor) -> Tensor:
    return sigmoid_scaled(x, 1.0)


# ---------------------------------------------------------------- reductions / reshaping


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    return scale(sum(x), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index) -> Tensor:
    """Gather elements of the flattened tensor at ``index`` (1-D int array)."""
    index = np.asarray(index, dtype=np.int64)
    size = x.size
    shape = x.shape

    def _bw(g):
        return (np.bincount(index, weights=g.reshape(-1), minlength=size).reshape(shape),)

    return Tensor._from_op(x.data.reshape(-1)[index], (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


# ---------------------------------------------------------------- convolution / pooling


def _pad_hw(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input channels Cin={cin} but kernel expects Cin={kcin}")
    if cout == 0 or kh == 0 or kw == 0:
        raise ValueError(f"conv2d: empty kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input H={h}, W={w}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # im2col in (kh, kw, Cin, N*Ho*Wo) layout so patch copies and col2im adds are contiguous
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xc[:, :, ::stride, ::stride]).reshape(cin, -1)
    else:
        cols = np.empty((kh, kw, cin, n, ho, wo), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                cols[i, j] = xc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(kh * kw * cin, -1)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        gx = gk = None
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(kh, kw, cin, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        if bias is not None:
            return gx, gk, g2.sum(axis=1)
        return gx, gk

    return Tensor._from_op(out, parents, _bw)


def pool2d(x: Tensor, kind: str = "max", kh: int = 2, kw: Optional[int] = None, stride: Optional[int] = None,
           padding: int = 0) -> Tensor:
    """Max or average pooling over ``kh x kw`` windows.

    Max pooling pads with ``-inf``; average pooling pads with zeros and
    divides by the full window size.
    """
    kw = kh if kw is None else kw
    stride = kh if stride is None else stride
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    if x.ndim != 4:
        raise ValueError(f"pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if stride < 1:
        raise ValueError("pool2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"pool2d: window {kh}x{kw} larger than input {h}x{w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    hp, wp = h + 2 * padding, w + 2 * padding

    if kind == "max":
        xp = _pad_hw(x.data, padding, -np.inf)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(n, c, ho, wo, kh * kw)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def _bw(g):
            rows = np.arange(ho)[:, None] * stride + arg // kw
            cols = np.arange(wo)[None, :] * stride + arg % kw
            base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (hp * wp)
            flat = base[:, :, None, None] + rows * wp + cols
            gxp = np.bincount(flat.reshape(-1), weights=g.reshape(-1), minlength=n * c * hp * wp)
            gxp = gxp.reshape(n, c, hp, wp)
            return (gxp[:, :, padding : padding + h, padding : padding + w],)

        return Tensor._from_op(np.ascontiguousarray(out), (x,), _bw)

    xp = _pad_hw(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(-2, -1))

    def _bw_avg(g):
        gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
        share = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._from_op(out, (x,), _bw_avg)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- normalization


BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batch_norm2d(x: Tensor, gamma: Tensor, shift: Tensor, eps: float = BN_EPS, training: bool = True,
                 running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
                 momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization of ``x[N,C,H,W]``.

    Training mode normalizes with the biased batch variance and, when running
    buffers are given, updates them in place (the variance buffer tracks the
    unbiased estimate). Eval mode uses the buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm2d: C={c} but gamma {gamma.shape}, shift {shift.shape}")
    gam = gamma.data[None, :, None, None]

    if training:
        m = n * h * w
        if m < 1:
            raise ValueError("batch_norm2d: empty channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        out = xhat * gam + shift.data[None, :, None, None]

        def _bw(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gs = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gam * inv[None, :, None, None] / m) * (
                    m * g - gs[None, :, None, None] - xhat * gg[None, :, None, None]
                )
            return gx, gg, gs

        return Tensor._from_op(out, (x, gamma, shift), _bw)

    if running_mean is None or running_var is None:
        raise ValueError("batch_norm2d: eval mode requires running statistics")
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gam + shift.data[None, :, None, None]

    def _bw_eval(g):
        return (g * gam * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, (x, gamma, shift), _bw_eval)


# ---------------------------------------------------------------- dense


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x[N,D]``, ``weight[D,K]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"fully_connected: expected 2-D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected: input D={x.shape[1]} but weight D={weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected: bias {bias.shape} does not match K={weight.shape[1]}")
    xd, wd = x.data, weight.data

    def _bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(xd @ wd + bias.data, (x, weight, bias), _bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: a random generator is required in training mode")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    if n == 0:
        return Tensor._from_op(np.array(0.0), (logits,), lambda g: (np.zeros((0, k)),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def _bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return Tensor._from_op(np.array(loss), (logits,), _bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ValueError(f"binary_cross_entropy_with_logits: targets {t.shape} vs logits {logits.shape}")
    n = logits.size
    if n == 0:
        return Tensor._from_op(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    z = logits.data
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    s = _sigmoid(z)
    return Tensor._from_op(np.array(loss), (logits,), lambda g: ((s - t) * (float(g) / n),))


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 (Huber with transition at ``beta``) against a constant target."""
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ValueError(f"smooth_l1: target {t.shape} vs prediction {pred.shape}")
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).sum()
    grad = np.where(quad, d / beta, np.sign(d))
    return Tensor._from_op(np.array(loss), (pred,), lambda g: (grad * float(g),))


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckResult:
    max_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray
    excluded: list


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, indices=None,
                      kink_tol: float = 1e-3) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    Elements where the one-sided slopes disagree by more than ``kink_tol``
    (relative) sit on a kink and are excluded from the error.
    """
    x0 = np.array(x.data, copy=True)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    f0 = out.item()
    if not np.isfinite(f0):
        raise FloatingPointError("grad_check: f(x) is not finite")
    backward(out)
    analytic = xt.grad.reshape(-1).copy()

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.zeros(len(idx))
    excluded = []
    errors = []

    def _eval(v: np.ndarray) -> float:
        with no_grad():
            val = f(Tensor(v.reshape(x0.shape))).item()
        return val

    for k, i in enumerate(idx):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        fp = _eval(probe)
        probe[i] = flat[i] - eps
        fm = _eval(probe)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value when perturbing element {int(i)}")
        numeric[k] = (fp - fm) / (2 * eps)
        right, left = (fp - f0) / eps, (f0 - fm) / eps
        if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
            excluded.append(int(i))
            continue
        a = analytic[i]
        errors.append(abs(a - numeric[k]) / max(1.0, abs(a), abs(numeric[k])))
    return GradCheckResult(
        max_error=float(max(errors)) if errors else 0.0,
        analytic=analytic[idx],
        numeric=numeric,
        checked=idx,
        excluded=excluded,
    )


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, indices=None) -> float:
    """Max relative error ``|a - n| / max(1, |a|, |n|)`` over checked elements."""
    return grad_check_report(f, x, eps=eps, indices=indices).max_error


# ---------------------------------------------------------------- text dump


def format_tensor(t) -> str:
    """Shape line, then one value per line in row-major order (17 significant digits)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    lines = [" ".join(str(d) for d in arr.shape)]
    lines.extend(format(v, ".17g") for v in arr.reshape(-1).tolist())
    return "\n".join(lines) + "\n"


def parse_tensor(lines: Sequence[str], start: int = 0):
    """Parse one dumped tensor block from ``lines[start:]``; return ``(array, next_index)``."""
    header = lines[start].split()
    try:
        shape = tuple(int(s) for s in header)
    except ValueError as exc:
        raise ValueError(f"line {start + 1}: bad shape line {lines[start]!r}") from exc
    count = int(np.prod(shape)) if shape else 1
    body = lines[start + 1 : start + 1 + count]
    if len(body) != count:
        raise ValueError(f"line {start + 1}: expected {count} values, found {len(body)}")
    try:
        values = np.array([float(v) for v in body], dtype=DTYPE)
    except ValueError as exc:
        raise ValueError(f"line {start + 2}: bad value in tensor block") from exc
    return values.reshape(shape), start + 1 + count


def dump_tensor(t, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        lines = fh.read().splitlines()
    arr, _ = parse_tensor(lines)
    return Tensor(arr)

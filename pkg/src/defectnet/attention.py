"""Per-level attention gating: batch-norm, scaled sigmoid, elementwise re-weighting."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import LEVELS, FeatureSet
from .nn import BatchNorm2d, Module
from .tensor import Tensor


class AttentionGate(Module):
    """Gate for one pyramid level; ``beta`` sharpens or flattens the sigmoid."""

    def __init__(self, d: int, beta: float = 1.0):
        self.beta = float(beta)
        self.norm = BatchNorm2d(d)

    def gate(self, p: Tensor) -> Tensor:
        return T.sigmoid_scaled(self.norm(p), self.beta)

    def __call__(self, p: Tensor) -> Tensor:
        if p.shape[1] != self.norm.gamma.shape[0]:
            raise ValueError(f"attention_gate: input has {p.shape[1]} channels, gate expects {self.norm.gamma.shape[0]}")
        return T.mul(self.gate(p), p)


def attention_gate(p: Tensor, gate: AttentionGate) -> Tensor:
    return gate(p)


class Attention(Module):
    """Independent gates for P2..P5 sharing one ``beta``."""

    def __init__(self, d: int, beta: float = 1.0):
        self.gates = [AttentionGate(d, beta) for _ in LEVELS]

    @property
    def beta(self) -> float:
        return self.gates[0].beta

    def __call__(self, pyramid: FeatureSet) -> FeatureSet:
        return FeatureSet({lv: self.gates[i](pyramid[lv]) for i, lv in enumerate(LEVELS)})


def attention_grad_identity_check(p: Tensor, gate: AttentionGate, upstream: np.ndarray | None = None,
                                  feature_jacobian: np.ndarray | None = None) -> float:
    """Max relative gap between autodiff and the explicit product-rule gradient.

    The gate runs with frozen statistics, so it is elementwise:
    ``out = s(P) * P`` with ``s = sigmoid(beta * (gamma * (P - mu) / sd + shift))``.
    With upstream gradient ``u`` and the feature's own derivative ``P'``
    (``feature_jacobian``, elementwise, default ones), the expected input
    gradient is ``(s'(P) * P + s(P) * P') * u``.
    """
    if gate.training:
        raise ValueError("attention_grad_identity_check: gate must be in eval mode")
    x = p.data
    u = np.ones_like(x) if upstream is None else np.asarray(upstream, dtype=np.float64)
    dp = np.ones_like(x) if feature_jacobian is None else np.asarray(feature_jacobian, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        bad = int(np.flatnonzero(~(np.isfinite(x) & np.isfinite(u)))[0])
        raise FloatingPointError(f"attention_grad_identity_check: non-finite value at element {bad}")

    # autodiff path: the feature is an elementwise function of a leaf with derivative dp
    leaf = Tensor(x, requires_grad=True)
    feat = T.add(T.mul(leaf, Tensor(dp)), Tensor(x - x * dp))
    out = gate(feat)
    T.backward(T.sum(T.mul(out, Tensor(u))))
    auto = leaf.grad

    # explicit product rule with frozen statistics
    bn = gate.norm
    shape = (1, -1, 1, 1)
    a = (bn.gamma.data / np.sqrt(bn.running_var + bn.eps)).reshape(shape)
    f_norm = a * (x - bn.running_mean.reshape(shape)) + bn.shift.data.reshape(shape)
    s = T._sigmoid(gate.beta * f_norm)
    ds = gate.beta * s * (1.0 - s) * a
    explicit = (ds * dp) * u * x + s * (dp * u)
    return float(np.max(np.abs(auto - explicit) / np.maximum(1.0, np.maximum(np.abs(auto), np.abs(explicit)))))

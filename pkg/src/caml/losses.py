"""Supervised, cross-pseudo-supervision and total losses plus the warm-up ramp."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caml.autodiff import ops
from caml.autodiff.tensor import Tensor

DICE_SMOOTH = 1e-5


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite; training must stop."""


@dataclass(frozen=True)
class LossWeights:
    beta_c: float = 1.0
    beta_o: float = 0.1
    t_max: int = 800

    def __post_init__(self):
        if self.beta_c < 0 or self.beta_o < 0:
            raise ValueError("loss weights must be non-negative")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass
class LossBreakdown:
    L_s: float
    l_c: float
    l_o: float
    lambda_c: float
    lambda_o: float
    total: float
    occ_active: bool = True


def one_hot(labels, n_classes, dtype=np.float32):
    """(b, D, H, W) ints -> (b, C, D, H, W) floats."""
    labels = np.asarray(labels)
    oh = np.eye(n_classes, dtype=dtype)[labels]
    return np.ascontiguousarray(np.moveaxis(oh, -1, 1))


def cross_entropy(logits, labels):
    """Voxel-mean cross-entropy of (b, C, ...) logits against integer labels."""
    target = Tensor(one_hot(labels, logits.shape[1], logits.dtype))
    n_vox = logits.size // logits.shape[1]
    nll = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), target))
    return ops.mul(nll, -1.0 / n_vox)


def soft_dice_loss(logits, labels, smooth=DICE_SMOOTH):
    """1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), averaged over foreground channels."""
    C = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    target = one_hot(labels, C, logits.dtype)
    terms = []
    for c in range(1, C):
        p = ops.getitem(probs, (slice(None), c))
        g = Tensor(target[:, c])
        inter = ops.sum(ops.mul(p, g))
        denom = ops.add(ops.sum(p), float(g.value.sum()) + smooth)
        terms.append(ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), denom)))
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return ops.mul(out, 1.0 / len(terms))


def supervised_loss(logits_v, logits_a, labels):
    """Mean over both branches of (CE + soft Dice) / 2 on labeled samples."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("supervised loss needs at least one labeled sample")

    def branch(lg):
        return ops.mul(ops.add(cross_entropy(lg, labels), soft_dice_loss(lg, labels)), 0.5)

    return ops.mul(ops.add(branch(logits_v), branch(logits_a)), 0.5)


def cps_loss(logits_v, logits_a):
    """CE(logits_v, argmax a) + CE(logits_a, argmax v); pseudo-labels carry no gradient."""
    y_v = logits_v.value.argmax(axis=1)
    y_a = logits_a.value.argmax(axis=1)
    return ops.add(cross_entropy(logits_v, y_a), cross_entropy(logits_a, y_v))


def warmup_weight(t, t_max, beta):
    """beta * exp(-5 (1 - t/t_max)^2), held at beta beyond t_max."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if t >= t_max:
        return float(beta)
    phase = 1.0 - max(t, 0) / t_max
    return float(beta * math.exp(-5.0 * phase * phase))


def total_loss(L_s, l_c, l_o, t, weights: LossWeights, occ_active=True, iteration=None):
    """Assemble L_s + lambda_c l_c + lambda_o l_o.

    Accepts tensors or floats; returns (total, LossBreakdown) where ``total``
    is a tensor when any input is. With ``occ_active`` false the
    omni-correlation term contributes nothing (lambda_o is still reported).
    """
    lam_c = warmup_weight(t, weights.t_max, weights.beta_c)
    lam_o = warmup_weight(t, weights.t_max, weights.beta_o)
    vals = {name: _scalar(v) for name, v in (("L_s", L_s), ("l_c", l_c), ("l_o", l_o))}
    if not occ_active:
        vals["l_o"] = 0.0
    where = f" at iteration {iteration}" if iteration is not None else ""
    for name, v in vals.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is {v}{where}")

    total = _as_term(L_s)
    if lam_c:
        total = ops.add(total, ops.mul(_as_term(l_c), lam_c))
    if occ_active and lam_o:
        total = ops.add(total, ops.mul(_as_term(l_o), lam_o))
    total_val = _scalar(total)
    if not math.isfinite(total_val):
        raise NonFiniteLossError(f"total is {total_val}{where}")
    return total, LossBreakdown(vals["L_s"], vals["l_c"], vals["l_o"], lam_c, lam_o,
                                total_val, occ_active)


def _scalar(v):
    if isinstance(v, Tensor):
        return float(v.value.reshape(-1)[0])
    return float(v)


def _as_term(v):
    return v if isinstance(v, Tensor) else Tensor(np.float64(v), dtype=np.float64)

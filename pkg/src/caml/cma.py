"""Cross-sample mutual attention.

Two post-norm transformer encoder layers applied to a feature map
``(b, c, k)``: ``e1`` attends over the ``k`` spatial tokens of each sample,
``e2`` attends over the ``b`` samples at each spatial position. Neither
stage uses positional encodings, so both are permutation equivariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caml.autodiff import ops
from caml.autodiff.tensor import Tensor


@dataclass
class CmaConfig:
    channels: int
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def hidden(self):
        return max(1, int(round(self.channels * self.mlp_ratio)))


@dataclass
class AttentionStats:
    """Number of attention-score entries materialised, per stage."""

    e1_entries: int = 0
    e2_entries: int = 0

    @property
    def total(self):
        return self.e1_entries + self.e2_entries

    def add(self, stage, n):
        setattr(self, f"{stage}_entries", getattr(self, f"{stage}_entries") + int(n))


def score_entries(b, k, heads):
    """Closed-form score count of the factorised module: b*k^2*h + k*b^2*h."""
    return b * k * k * heads + k * b * b * heads


def joint_score_entries(b, k, heads=1):
    """Score count of one attention over all b*k tokens."""
    return (b * k) ** 2 * heads


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def init_encoder_layer(rng, cfg: CmaConfig, prefix: str) -> dict:
    c, h = cfg.channels, cfg.hidden
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}{name}_w"] = _uniform(rng, (c, c), c)
        p[f"{prefix}{name}_b"] = np.zeros(c, np.float32)
    p[f"{prefix}ln1_g"] = np.ones(c, np.float32)
    p[f"{prefix}ln1_b"] = np.zeros(c, np.float32)
    p[f"{prefix}mlp1_w"] = _uniform(rng, (c, h), c)
    p[f"{prefix}mlp1_b"] = np.zeros(h, np.float32)
    p[f"{prefix}mlp2_w"] = _uniform(rng, (h, c), h)
    p[f"{prefix}mlp2_b"] = np.zeros(c, np.float32)
    p[f"{prefix}ln2_g"] = np.ones(c, np.float32)
    p[f"{prefix}ln2_b"] = np.zeros(c, np.float32)
    return p


def init_cma(rng, cfg: CmaConfig, prefix="cma.") -> dict:
    """Parameters for e1, e2 (disjoint) and the residual output projection."""
    p = {}
    p.update(init_encoder_layer(rng, cfg, prefix + "e1."))
    p.update(init_encoder_layer(rng, cfg, prefix + "e2."))
    # Zero output projection: the residual block starts as the identity, so the
    # auxiliary branch begins as a plain encoder-decoder (random init here gave
    # initial logits in the tens and an occasional run that never recovered).
    p[prefix + "out_w"] = np.zeros((cfg.channels, cfg.channels), np.float32)
    p[prefix + "out_b"] = np.zeros(cfg.channels, np.float32)
    return p


def multi_head_attention(tokens, p, prefix, heads, stats=None, stage="e1"):
    """Self-attention over axis 1 of ``tokens`` (N, L, c); returns (N, L, c)."""
    N, L, c = tokens.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (N, L, heads, d)), (0, 2, 1, 3))

    q = split(ops.linear(tokens, p[prefix + "q_w"], p[prefix + "q_b"]))
    k = split(ops.linear(tokens, p[prefix + "k_w"], p[prefix + "k_b"]))
    v = split(ops.linear(tokens, p[prefix + "v_w"], p[prefix + "v_b"]))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if stats is not None:
        stats.add(stage, scores.size)
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (N, L, c))
    return ops.linear(ctx, p[prefix + "o_w"], p[prefix + "o_b"])


def encoder_layer(tokens, p, prefix, heads, stats=None, stage="e1"):
    """Post-norm layer: LN(x + MHA(x)) then LN(y + MLP(y))."""
    a = multi_head_attention(tokens, p, prefix, heads, stats, stage)
    y = ops.layer_norm(ops.add(tokens, a), p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    m = ops.linear(ops.relu(ops.linear(y, p[prefix + "mlp1_w"], p[prefix + "mlp1_b"])),
                   p[prefix + "mlp2_w"], p[prefix + "mlp2_b"])
    return ops.layer_norm(ops.add(y, m), p[prefix + "ln2_g"], p[prefix + "ln2_b"])


def _check(x, heads):
    if x.ndim != 3:
        raise ValueError(f"expected (b, c, k) features, got {x.shape}")
    if x.shape[1] % heads:
        raise ValueError(f"channels {x.shape[1]} not divisible by heads {heads}")


def e1_intra_attention(x, p, heads=4, prefix="cma.", stats=None):
    """Attention among the k positions of each sample: (b, c, k) -> (b, c, k)."""
    _check(x, heads)
    tokens = ops.transpose(x, (0, 2, 1))  # (b, k, c)
    out = encoder_layer(tokens, p, prefix + "e1.", heads, stats, "e1")
    return ops.transpose(out, (0, 2, 1))


def e2_inter_attention(x, p, heads=4, prefix="cma.", stats=None):
    """Attention among the b samples at each position: (b, c, k) -> (b, c, k)."""
    _check(x, heads)
    tokens = ops.transpose(x, (2, 0, 1))  # (k, b, c)
    out = encoder_layer(tokens, p, prefix + "e2.", heads, stats, "e2")
    return ops.transpose(out, (1, 2, 0))


def cma_forward(x, p, heads=4, prefix="cma.", stats=None):
    """e2(e1(x)) on (b, c, k) features."""
    return e2_inter_attention(e1_intra_attention(x, p, heads, prefix, stats), p, heads, prefix, stats)


def cma_block(x, p, heads=4, prefix="cma.", stats=None):
    """Residual insertion used in the auxiliary branch: x + W_out * cma(x).

    With ``out_w`` and ``out_b`` at zero the block is exactly the identity.
    """
    y = cma_forward(x, p, heads, prefix, stats)
    proj = ops.linear(ops.transpose(y, (0, 2, 1)), p[prefix + "out_w"], p[prefix + "out_b"])
    return ops.add(x, ops.transpose(proj, (0, 2, 1)))


def as_tensors(params: dict, requires_grad=True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}

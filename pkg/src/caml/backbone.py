"""Encoder-decoder segmentation branches and projection heads.

Both branches share one layout: ``n_levels`` resolution levels of plain
conv+relu blocks, stride-2 2x2x2 convs down, 1x1x1 channel reduction +
trilinear x2 up, and skip concatenation at every level. The auxiliary
branch additionally routes its bottleneck through a residual cross-sample
attention block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caml import cma
from caml.autodiff import ops
from caml.autodiff.tensor import Tensor


class BatchSizeError(ValueError):
    pass


@dataclass(frozen=True)
class BranchConfig:
    n_levels: int = 3
    base_channels: int = 8
    n_classes: int = 2
    with_cma: bool = False
    proj_dim: int = 16
    heads: int = 4
    mlp_ratio: float = 2.0
    in_channels: int = 1

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("n_levels must be >= 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.proj_dim < 8:
            raise ValueError("proj_dim must be >= 8")

    def channels(self, level):
        return self.base_channels * 2 ** level

    @property
    def feature_channels(self):
        return self.base_channels


@dataclass
class BranchOutputs:
    logits: Tensor  # (b, C, D, H, W)
    decoder_features: Tensor  # (b, base_channels, D, H, W)
    projections: Tensor | None = None  # (b, proj_dim, D, H, W)


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _conv(p, rng, name, cin, cout, k):
    p[name + ".w"] = _kaiming(rng, (cout, cin, k, k, k), cin * k ** 3)
    p[name + ".b"] = np.zeros(cout, np.float32)


def init_branch(cfg: BranchConfig, rng) -> dict:
    p = {}
    c = cfg.channels
    _conv(p, rng, "enc0.conv1", cfg.in_channels, c(0), 3)
    _conv(p, rng, "enc0.conv2", c(0), c(0), 3)
    for lv in range(1, cfg.n_levels):
        _conv(p, rng, f"down{lv}", c(lv - 1), c(lv), 2)
        _conv(p, rng, f"enc{lv}.conv1", c(lv), c(lv), 3)
    if cfg.with_cma:
        p.update(cma.init_cma(rng, cma.CmaConfig(c(cfg.n_levels - 1), cfg.heads, cfg.mlp_ratio)))
    for lv in range(cfg.n_levels - 2, -1, -1):
        _conv(p, rng, f"up{lv}.reduce", c(lv + 1), c(lv), 1)
        _conv(p, rng, f"dec{lv}.conv1", 2 * c(lv), c(lv), 3)
    _conv(p, rng, "seg", c(0), cfg.n_classes, 1)
    return p


def init_head(cfg: BranchConfig, rng) -> dict:
    p = {}
    _conv(p, rng, "proj1", cfg.feature_channels, cfg.proj_dim, 1)
    _conv(p, rng, "proj2", cfg.proj_dim, cfg.proj_dim, 1)
    return p


def _tensors(arrays):
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def build_branches(cfg_v: BranchConfig, cfg_a: BranchConfig, seed):
    """Independent parameter sets (f_v, f_a, g_v, g_a), seeded per network."""
    if cfg_v.with_cma:
        raise ValueError("the vanilla branch must not contain cross-sample attention")
    if cfg_v.n_classes != cfg_a.n_classes or cfg_v.proj_dim != cfg_a.proj_dim:
        raise ValueError("both branches need the same class count and projection dim")
    seqs = np.random.SeedSequence(seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in seqs]
    return (_tensors(init_branch(cfg_v, rngs[0])), _tensors(init_branch(cfg_a, rngs[1])),
            _tensors(init_head(cfg_v, rngs[2])), _tensors(init_head(cfg_a, rngs[3])))


def count_parameters(params) -> int:
    return sum(t.size for t in params.values())


def _conv_relu(p, name, x, pad=1, stride=1):
    return ops.relu(ops.conv3d(x, p[name + ".w"], p[name + ".b"], stride=stride, padding=pad))


def check_input(cfg: BranchConfig, x):
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (b, {cfg.in_channels}, D, H, W) input, got {x.shape}")
    f = 2 ** (cfg.n_levels - 1)
    if any(n % f for n in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {f}")


def _forward(p, x, cfg: BranchConfig, stats=None):
    check_input(cfg, x)
    h = _conv_relu(p, "enc0.conv2", _conv_relu(p, "enc0.conv1", x))
    skips = [h]
    for lv in range(1, cfg.n_levels):
        h = _conv_relu(p, f"down{lv}", h, pad=0, stride=2)
        h = _conv_relu(p, f"enc{lv}.conv1", h)
        skips.append(h)
    if cfg.with_cma:
        b, c, d, hh, w = h.shape
        flat = ops.reshape(h, (b, c, d * hh * w))
        h = ops.reshape(cma.cma_block(flat, p, cfg.heads, stats=stats), (b, c, d, hh, w))
    for lv in range(cfg.n_levels - 2, -1, -1):
        up = ops.upsample2x(ops.conv3d(h, p[f"up{lv}.reduce.w"], p[f"up{lv}.reduce.b"]))
        h = _conv_relu(p, f"dec{lv}.conv1", ops.concat([up, skips[lv]], axis=1))
    logits = ops.conv3d(h, p["seg.w"], p["seg.b"])
    return BranchOutputs(logits, h)


def forward_vanilla(params, batch, cfg: BranchConfig, head=None):
    """Plain encoder-decoder; any batch size, samples processed independently."""
    if cfg.with_cma:
        raise ValueError("forward_vanilla needs a config without cross-sample attention")
    out = _forward(params, batch, cfg)
    if head is not None:
        out.projections = project_embeddings(head, out.decoder_features)
    return out


def forward_auxiliary(params, batch, cfg: BranchConfig, head=None, stats=None):
    """Encoder-decoder with cross-sample attention at the bottleneck."""
    if cfg.with_cma and batch.shape[0] < 2:
        raise BatchSizeError(
            "cross-sample attention requires a batch size larger than 1 "
            f"(got {batch.shape[0]}); use the vanilla branch for inference")
    out = _forward(params, batch, cfg, stats)
    if head is not None:
        out.projections = project_embeddings(head, out.decoder_features)
    return out


def project_embeddings(head, features):
    """1x1x1 conv -> relu -> 1x1x1 conv to ``proj_dim`` channels."""
    if features.ndim != 5 or features.shape[1] != head["proj1.w"].shape[1]:
        raise ValueError(f"features {features.shape} do not match head input "
                         f"{head['proj1.w'].shape[1]} channels")
    h = ops.relu(ops.conv3d(features, head["proj1.w"], head["proj1.b"]))
    return ops.conv3d(h, head["proj2.w"], head["proj2.b"])

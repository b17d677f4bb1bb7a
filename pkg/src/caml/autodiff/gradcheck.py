"""Central-difference gradient checking.

``grad_check`` draws inputs for a registered kernel, reduces its output to a
scalar with a fixed random weighting, and compares the reverse-mode gradient
with central differences. The checker runs in float64 by default; pass
``dtype=np.float32`` (with a larger ``h``) to exercise the f32 path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from caml.autodiff import ops
from caml.autodiff.tensor import Tensor, backward


@dataclass(frozen=True)
class KernelCase:
    fn: Callable
    shapes: tuple
    sampler: str = "normal"  # normal | positive | away_from_zero


def _fill(rng, shape, sampler):
    x = rng.standard_normal(shape)
    if sampler == "positive":
        return rng.uniform(0.5, 2.0, shape)
    if sampler == "away_from_zero":
        return np.sign(x) * (0.1 + np.abs(x))
    return x


KERNELS: dict[str, KernelCase] = {
    "add": KernelCase(lambda a, b: ops.add(a, b), ((3, 4), (4,))),
    "sub": KernelCase(lambda a, b: ops.sub(a, b), ((3, 4), (3, 1))),
    "mul": KernelCase(lambda a, b: ops.mul(a, b), ((3, 4), (3, 4))),
    "div": KernelCase(lambda a, b: ops.div(a, b), ((3, 4), (3, 4)), "positive"),
    "exp": KernelCase(ops.exp, ((3, 4),)),
    "log": KernelCase(ops.log, ((3, 4),), "positive"),
    "relu": KernelCase(ops.relu, ((3, 5),), "away_from_zero"),
    "matmul": KernelCase(ops.matmul, ((2, 3, 4), (2, 4, 5))),
    "linear": KernelCase(ops.linear, ((4, 3), (3, 2), (2,))),
    "softmax": KernelCase(lambda x: ops.softmax(x, axis=-1), ((5,),)),
    "log_softmax": KernelCase(lambda x: ops.log_softmax(x, axis=1), ((2, 3, 4),)),
    "layer_norm": KernelCase(ops.layer_norm, ((2, 8), (8,), (8,))),
    "sum": KernelCase(lambda x: ops.sum(x, axis=1), ((3, 4, 2),)),
    "mean": KernelCase(lambda x: ops.mean(x, axis=(0, 2)), ((3, 4, 2),)),
    "reshape": KernelCase(lambda x: ops.reshape(x, (4, 6)), ((2, 3, 4),)),
    "transpose": KernelCase(lambda x: ops.transpose(x, (2, 0, 1)), ((2, 3, 4),)),
    "concat": KernelCase(lambda a, b: ops.concat([a, b], axis=1), ((2, 3), (2, 2))),
    "getitem": KernelCase(lambda x: ops.getitem(x, (np.array([0, 2, 2]), slice(1, 3))), ((3, 4),)),
    "conv3d": KernelCase(lambda x, w, b: ops.conv3d(x, w, b, stride=1, padding=1),
                         ((2, 2, 4, 4, 4), (3, 2, 3, 3, 3), (3,))),
    "conv3d_s2": KernelCase(lambda x, w, b: ops.conv3d(x, w, b, stride=2, padding=0),
                            ((2, 2, 4, 4, 4), (3, 2, 2, 2, 2), (3,))),
    "upsample2x": KernelCase(ops.upsample2x, ((1, 2, 2, 3, 2),)),
    "cosine_normalize": KernelCase(ops.cosine_normalize, ((4, 5),)),
}


def relative_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|) elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_function(fn: Callable, arrays, h=1e-4, seed=0, dtype=np.float64):
    """Max relative gradient error of ``fn(*tensors)`` over all input entries.

    ``fn`` may return any-shaped tensor; it is reduced as sum(out * w) with a
    fixed random weighting ``w`` (the weighting keeps shift-invariant kernels
    such as softmax from collapsing to a constant).
    """
    arrays = [np.array(a, dtype=dtype) for a in arrays]
    wrng = np.random.default_rng(seed + 7919)
    weights = {}

    def weight_for(shape):
        if shape not in weights:
            weights[shape] = wrng.standard_normal(shape).astype(dtype)
        return weights[shape]

    def scalar(tensors):
        out = fn(*tensors)
        return ops.sum(ops.mul(out, Tensor(weight_for(out.shape), dtype=dtype)))

    def numeric_scalar(arrs):
        # reduced in float64 so f32 runs are not dominated by summation rounding
        out = fn(*[Tensor(a, dtype=dtype) for a in arrs])
        return float(np.sum(out.value.astype(np.float64) * weight_for(out.shape)))

    tensors = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    loss = scalar(tensors)
    backward(loss)
    worst = 0.0
    for idx, t in enumerate(tensors):
        numeric = np.zeros(arrays[idx].shape, dtype=np.float64)
        flat = arrays[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = numeric_scalar(arrays)
            flat[j] = orig - h
            fm = numeric_scalar(arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


def grad_check(op_id: str, shapes=None, seed=0, h=1e-4, dtype=np.float64) -> float:
    """Max relative error of the analytic gradient of a registered kernel."""
    if op_id not in KERNELS:
        raise ValueError(f"unknown op_id {op_id!r}")
    case = KERNELS[op_id]
    shapes = case.shapes if shapes is None else tuple(tuple(s) for s in shapes)
    rng = np.random.default_rng(seed)
    arrays = [_fill(rng, s, case.sampler) for s in shapes]
    return check_function(case.fn, arrays, h=h, seed=seed, dtype=dtype)

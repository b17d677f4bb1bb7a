"""Omni-correlation consistency.

A prototype bank keeps, per labeled training sample, a FIFO queue of
class-tagged fused embeddings harvested where both branches predict the
ground truth. Each step, confident agreed voxels of the unlabeled half are
compared against prototypes sampled from the bank; the two branches'
similarity distributions are tied together with a cross-entropy.

Bank dump format (little-endian, version 1)::

    b"CAMLBANK" | u32 version | u32 n_queues | u32 dim |
    n_queues x (i32 sample_id | u32 count | count x (u8 class | f32 vec[dim]))

Slots inside a queue are written oldest first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from caml.autodiff import ops
from caml.autodiff.tensor import Tensor

BANK_MAGIC = b"CAMLBANK"
BANK_VERSION = 1
LOG_EPS = 1e-12


class _Queue:
    __slots__ = ("vectors", "classes", "count", "cursor")

    def __init__(self, capacity, dim):
        self.vectors = np.zeros((capacity, dim), np.float32)
        self.classes = np.zeros(capacity, np.int64)
        self.count = 0
        self.cursor = 0  # next slot to overwrite

    def push(self, vecs, classes):
        cap = len(self.classes)
        for v, c in zip(vecs, classes):
            self.vectors[self.cursor] = v
            self.classes[self.cursor] = c
            self.cursor = (self.cursor + 1) % cap
            self.count = min(self.count + 1, cap)

    def ordered(self):
        """(vectors, classes) oldest first."""
        cap = len(self.classes)
        start = (self.cursor - self.count) % cap
        idx = (start + np.arange(self.count)) % cap
        return self.vectors[idx], self.classes[idx]


class PrototypeBank:
    """Per-labeled-sample FIFO queues of ``capacity`` normalised embeddings."""

    def __init__(self, sample_ids, capacity, dim, n_classes, seed=0):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.queues = {int(s): _Queue(self.capacity, self.dim) for s in sample_ids}
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return sum(q.count for q in self.queues.values())

    def enqueue(self, sample_id, vectors, classes):
        if sample_id not in self.queues:
            raise KeyError(f"unknown sample id {sample_id}")
        vectors = np.asarray(vectors, np.float32).reshape(-1, self.dim)
        classes = np.asarray(classes, np.int64).reshape(-1)
        if len(classes) and (classes.min() < 0 or classes.max() >= self.n_classes):
            raise ValueError("class id out of range")
        self.queues[sample_id].push(vectors, classes)

    def class_counts(self):
        counts = np.zeros(self.n_classes, np.int64)
        for q in self.queues.values():
            _, cls = q.ordered()
            counts += np.bincount(cls, minlength=self.n_classes)
        return counts

    def entries(self):
        """All (vectors, classes, owner ids) in queue-id then FIFO order."""
        vecs, cls, owners = [], [], []
        for sid in sorted(self.queues):
            v, c = self.queues[sid].ordered()
            vecs.append(v)
            cls.append(c)
            owners.append(np.full(len(c), sid))
        if not vecs:
            return np.zeros((0, self.dim), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(vecs), np.concatenate(cls), np.concatenate(owners)

    def is_warm(self):
        return bool(np.all(self.class_counts() >= 1))

    def dumps(self) -> bytes:
        parts = [BANK_MAGIC, struct.pack("<III", BANK_VERSION, len(self.queues), self.dim)]
        for sid in sorted(self.queues):
            v, c = self.queues[sid].ordered()
            parts.append(struct.pack("<iI", sid, len(c)))
            for vec, cls in zip(v, c):
                parts.append(struct.pack("<B", int(cls)))
                parts.append(vec.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def loads(cls, data: bytes, capacity, n_classes):
        if data[:8] != BANK_MAGIC:
            raise ValueError("not a bank dump")
        version, nq, dim = struct.unpack("<III", data[8:20])
        if version != BANK_VERSION:
            raise ValueError(f"unsupported bank dump version {version}")
        pos = 20
        ids, payload = [], []
        for _ in range(nq):
            sid, count = struct.unpack("<iI", data[pos:pos + 8])
            pos += 8
            vecs, classes = [], []
            for _ in range(count):
                classes.append(data[pos])
                vecs.append(np.frombuffer(data[pos + 1:pos + 1 + 4 * dim], "<f4"))
                pos += 1 + 4 * dim
            ids.append(sid)
            payload.append((sid, vecs, classes))
        bank = cls(ids, capacity, dim, n_classes)
        for sid, vecs, classes in payload:
            if vecs:
                bank.enqueue(sid, np.stack(vecs), classes)
        return bank


def _np(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _normalize_rows(v, eps=1e-8):
    v = v.astype(np.float32)
    return v / (np.sqrt((v * v).sum(-1, keepdims=True)) + np.float32(eps))


def update_bank(bank: PrototypeBank, logits_v, logits_a, proj_v, proj_a, labels, sample_ids):
    """Enqueue fused embeddings where both branches hit the ground truth.

    At most ``bank.capacity`` voxels per sample per call; larger eligible sets
    are uniformly subsampled with the bank's generator and enqueued in voxel
    order. Returns the number of embeddings enqueued.
    """
    lv, la = _np(logits_v), _np(logits_a)
    pv, pa = _np(proj_v), _np(proj_a)
    labels = np.asarray(labels)
    if lv.shape != la.shape or pv.shape != pa.shape or labels.shape != (lv.shape[0],) + lv.shape[2:]:
        raise ValueError("update_bank: inconsistent shapes")
    if len(sample_ids) != lv.shape[0]:
        raise ValueError("update_bank: one sample id per batch entry required")
    for sid in sample_ids:
        if int(sid) not in bank.queues:
            raise KeyError(f"unknown sample id {sid}")
    total = 0
    dim = pv.shape[1]
    for b, sid in enumerate(sample_ids):
        lab = labels[b].reshape(-1)
        ok = (lv[b].argmax(0).reshape(-1) == lab) & (la[b].argmax(0).reshape(-1) == lab)
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        if len(idx) > bank.capacity:
            idx = np.sort(bank.rng.choice(idx, size=bank.capacity, replace=False))
        fv = pv[b].reshape(dim, -1)[:, idx].T
        fa = pa[b].reshape(dim, -1)[:, idx].T
        fused = _normalize_rows((fv + fa) / 2)
        bank.enqueue(int(sid), fused, lab[idx])
        total += len(idx)
    return total


@dataclass
class SampledEmbeddings:
    z: Tensor | None  # (m, c') rows L2-normalised, differentiable
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def m(self):
        return len(self.classes)


def select_confident(logits_v, logits_a, i):
    """Flat (sample*V + voxel) indices and classes of the top-``i`` agreed voxels per class.

    Confidence is the mean of both branches' softmax probability for the
    agreed class; ties go to the lower flat index.
    """
    lv, la = _np(logits_v).astype(np.float64), _np(logits_a).astype(np.float64)
    if i < 1:
        raise ValueError("i must be >= 1")
    C = lv.shape[1]
    pv = _softmax_np(lv)
    pa = _softmax_np(la)
    cv, ca = pv.argmax(1), pa.argmax(1)
    agree = (cv == ca).reshape(-1)
    cls = cv.reshape(-1)
    conf = (np.take_along_axis(pv, cv[:, None], 1) + np.take_along_axis(pa, cv[:, None], 1))[:, 0] / 2
    conf = conf.reshape(-1)
    chosen, chosen_cls = [], []
    for c in range(C):
        cand = np.flatnonzero(agree & (cls == c))
        if len(cand) == 0:
            continue
        order = np.lexsort((cand, -conf[cand]))
        take = cand[order[:i]]
        chosen.append(take)
        chosen_cls.append(np.full(len(take), c))
    if not chosen:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(chosen), np.concatenate(chosen_cls)


def _softmax_np(x):
    z = x - x.max(1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(1, keepdims=True)


def gather_embeddings(proj, flat_idx):
    """Rows of (b, c', D, H, W) projections at flat (sample*V + voxel) indices, normalised."""
    b, c = proj.shape[:2]
    tokens = ops.reshape(ops.transpose(ops.reshape(proj, (b, c, -1)), (0, 2, 1)), (-1, c))
    return ops.cosine_normalize(ops.getitem(tokens, flat_idx))


def sample_unlabeled_embeddings(logits_v, logits_a, proj_v, proj_a, i):
    """Paired embeddings of both branches at the same confident agreed voxels."""
    flat, cls = select_confident(logits_v, logits_a, i)
    if len(flat) == 0:
        empty = SampledEmbeddings(None)
        return empty, SampledEmbeddings(None)
    V = int(np.prod(_np(logits_v).shape[2:]))
    pos = np.stack([flat // V, flat % V], 1)
    return (SampledEmbeddings(gather_embeddings(proj_v, flat), pos, cls),
            SampledEmbeddings(gather_embeddings(proj_a, flat), pos.copy(), cls.copy()))


@dataclass
class PrototypeSet:
    z_p: np.ndarray  # (n, c')
    classes: np.ndarray

    @property
    def n(self):
        return len(self.classes)


def sample_prototypes(bank: PrototypeBank, j, rng) -> PrototypeSet | None:
    """``j`` entries per class across all queues; ``None`` when a class is empty.

    Without replacement when a class holds at least ``j`` entries, with
    replacement otherwise.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    vecs, cls, _ = bank.entries()
    picks, picked_cls = [], []
    for c in range(bank.n_classes):
        pool = np.flatnonzero(cls == c)
        if len(pool) == 0:
            return None
        take = rng.choice(pool, size=j, replace=len(pool) < j)
        picks.append(take)
        picked_cls.append(np.full(j, c))
    idx = np.concatenate(picks)
    return PrototypeSet(vecs[idx], np.concatenate(picked_cls))


def cosine_matrix(z, z_p):
    """Pairwise cosine similarity (m, n); prototypes may be an array or tensor."""
    zn = ops.cosine_normalize(z)
    zp = z_p if isinstance(z_p, Tensor) else Tensor(np.asarray(z_p), dtype=zn.dtype)
    zpn = ops.cosine_normalize(zp)
    return ops.matmul(zn, ops.transpose(zpn, (1, 0)))


def omni_correlation(z, z_p, t):
    """Row-wise softmax of temperature-scaled cosine similarities, (m, n)."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    return ops.softmax(ops.mul(cosine_matrix(z, z_p), float(t)), axis=1)


def occ_loss(sim_vp, sim_ap):
    """Mean over rows of the cross-entropy between the two similarity rows."""
    if sim_vp.shape != sim_ap.shape:
        raise ValueError(f"occ_loss: shapes differ {sim_vp.shape} vs {sim_ap.shape}")
    m = sim_vp.shape[0]
    logq = ops.log(ops.add(sim_ap, LOG_EPS))
    return ops.mul(ops.sum(ops.mul(sim_vp, logq)), -1.0 / m)

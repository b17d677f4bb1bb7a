"""The co-teaching training loop and checkpoint evaluation."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from caml import occ
from caml.autodiff import checkpoint, ops
from caml.autodiff.optim import OptimizerState, sgd_step, zero_grads
from caml.autodiff.tensor import Tensor, backward
from caml.backbone import BranchConfig, build_branches, forward_auxiliary, forward_vanilla
from caml.cma import AttentionStats
from caml.config import TrainConfig, format_config
from caml.losses import LossWeights, cps_loss, supervised_loss, total_loss
from caml.metrics import metric_row, sliding_window_infer
from caml.volgen import load_manifest, load_samples, normalize_volume, random_crop

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ["iteration", "L_s", "l_c", "l_o", "lambda_c", "lambda_o", "total",
                  "bank_class0", "bank_class1", "m", "n", "attn_entries"]
EVAL_COLUMNS = ["sample_id", "dice", "jaccard", "hd95", "asd"]
NETWORKS = ("f_v", "f_a", "g_v", "g_a")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iteration, [MetricRow])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in RUNLOG_COLUMNS])


@dataclass
class TrainResult:
    params: dict  # network name -> {param name: Tensor}
    runlog: RunLog
    config: TrainConfig
    seconds: float = 0.0


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def branch_configs(cfg: TrainConfig):
    common = dict(n_levels=cfg.n_levels, base_channels=cfg.base_channels,
                  n_classes=cfg.n_classes, proj_dim=cfg.proj_dim, heads=cfg.heads,
                  mlp_ratio=cfg.mlp_ratio)
    use_cma = cfg.enable_cma and not cfg.supervised_only
    return BranchConfig(with_cma=False, **common), BranchConfig(with_cma=use_cma, **common)


def _prefixed(**groups):
    return {f"{g}/{k}": t for g, params in groups.items() for k, t in params.items()}


def load_training_data(manifest_path):
    m = load_manifest(manifest_path)
    records = load_samples(m, "train")
    for r in records:
        r.volume = normalize_volume(r.volume)
    labeled = [r for r in records if r.labeled]
    unlabeled = [r for r in records if not r.labeled]
    return m, labeled, unlabeled


def _draw_batch(rng, labeled, unlabeled, half, crop):
    """b/2 labeled + b/2 unlabeled crops, with replacement; same draws in every mode."""
    li = rng.integers(0, len(labeled), half)
    ui = rng.integers(0, len(unlabeled), half) if unlabeled else rng.integers(0, len(labeled), half)
    pool_u = unlabeled if unlabeled else labeled
    vols, labs, ids = [], [], []
    for k in li:
        v, lab = random_crop(labeled[k].volume, labeled[k].label, crop, rng)
        vols.append(v.data)
        labs.append(lab.data)
        ids.append(labeled[k].id)
    for k in ui:
        v, _ = random_crop(pool_u[k].volume, None, crop, rng)
        vols.append(v.data)
    x = np.stack(vols)[:, None].astype(np.float32)
    return x, np.stack(labs).astype(np.int64), ids


def train_run(cfg: TrainConfig, out_dir=None, data=None, progress=None) -> TrainResult:
    """Run ``cfg.iterations`` steps; optionally write checkpoints and logs to ``out_dir``."""
    cfg.validate()
    started = time.perf_counter()
    if data is None:
        data = load_training_data(cfg.manifest)
    manifest, labeled, unlabeled = data
    half = cfg.batch_size // 2
    if not labeled:
        raise ValueError("the manifest has no labeled training samples")

    cfg_v, cfg_a = branch_configs(cfg)
    f_v, f_a, g_v, g_a = build_branches(cfg_v, cfg_a, cfg.seed)
    params = {"f_v": f_v, "f_a": f_a, "g_v": g_v, "g_a": g_a}
    group_v = _prefixed(f_v=f_v, g_v=g_v)
    group_a = _prefixed(f_a=f_a, g_a=g_a)
    state_v = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    state_a = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)

    data_rng = np.random.default_rng([cfg.seed, 1])
    proto_rng = np.random.default_rng([cfg.seed, 2])
    use_occ = cfg.enable_occ and not cfg.supervised_only
    bank = occ.PrototypeBank([r.id for r in labeled], cfg.bank_slots, cfg.proj_dim,
                             cfg.n_classes, seed=[cfg.seed, 3])
    if cfg.supervised_only:
        # Degenerate run: both branches, L_s only (no cross or correlation terms).
        weights = LossWeights(0.0, 0.0, max(cfg.iterations, 1))
    else:
        weights = LossWeights(cfg.beta_c, cfg.beta_o, max(cfg.iterations, 1))
    runlog = RunLog()

    for it in range(cfg.iterations):
        x, labels, ids = _draw_batch(data_rng, labeled, unlabeled, half, cfg.crop_dims)
        stats = AttentionStats()
        X = Tensor(x)
        out_v = forward_vanilla(f_v, X, cfg_v, head=g_v if use_occ else None)
        out_a = forward_auxiliary(f_a, X, cfg_a, head=g_a if use_occ else None, stats=stats)
        lab_v = ops.getitem(out_v.logits, slice(0, half))
        lab_a = ops.getitem(out_a.logits, slice(0, half))
        L_s = supervised_loss(lab_v, lab_a, labels)
        l_c = cps_loss(out_v.logits, out_a.logits)
        l_o, m, n = _occ_term(cfg, use_occ, bank, proto_rng, out_v, out_a, half)
        total, br = total_loss(L_s, l_c, 0.0 if l_o is None else l_o, it, weights,
                               occ_active=l_o is not None, iteration=it)

        zero_grads(group_v)
        zero_grads(group_a)
        backward(total, retain_grads=False)
        sgd_step(group_v, state_v)
        sgd_step(group_a, state_a)

        if use_occ:
            occ.update_bank(bank, out_v.logits.value[:half], out_a.logits.value[:half],
                            out_v.projections.value[:half], out_a.projections.value[:half],
                            labels, ids)
        counts = bank.class_counts()
        runlog.rows.append(dict(
            iteration=it, L_s=br.L_s, l_c=br.l_c, l_o=br.l_o, lambda_c=br.lambda_c,
            lambda_o=br.lambda_o, total=br.total, bank_class0=int(counts[0]),
            bank_class1=int(counts[1]) if len(counts) > 1 else 0, m=m, n=n,
            attn_entries=stats.total))
        if progress is not None:
            progress(it, br)
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and it + 1 < cfg.iterations:
            runlog.evals.append((it + 1, evaluate_checkpoint(f_v, manifest, "test", cfg)))

    result = TrainResult(params, runlog, cfg, time.perf_counter() - started)
    if out_dir is not None:
        write_run(result, out_dir, manifest)
    return result


def _occ_term(cfg, use_occ, bank, proto_rng, out_v, out_a, half):
    """Omni-correlation loss on the unlabeled half, or None when it must be skipped."""
    if not use_occ or not bank.is_warm():
        return None, 0, 0
    unl_v = out_v.logits.value[half:]
    unl_a = out_a.logits.value[half:]
    z_v, z_a = occ.sample_unlabeled_embeddings(
        unl_v, unl_a,
        ops.getitem(out_v.projections, slice(half, None)),
        ops.getitem(out_a.projections, slice(half, None)), cfg.top_i)
    if z_v.m == 0:
        return None, 0, 0
    protos = occ.sample_prototypes(bank, cfg.proto_j, proto_rng)
    if protos is None:
        return None, z_v.m, 0
    sim_vp = occ.omni_correlation(z_v.z, protos.z_p, cfg.temperature)
    sim_ap = occ.omni_correlation(z_a.z, protos.z_p, cfg.temperature)
    return occ.occ_loss(sim_vp, sim_ap), z_v.m, protos.n


def evaluate_checkpoint(f_v_params, manifest, split, cfg: TrainConfig):
    """Metric rows for every sample of ``split`` using the vanilla branch only."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = load_manifest(manifest)
    cfg_v, _ = branch_configs(cfg)
    params = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in f_v_params.items()}
    expected = set(_expected_names(cfg_v))
    if set(params) != expected:
        raise ValueError("checkpoint does not match the configured vanilla branch")
    rows = []
    for e in manifest.split(split):
        if not e.labeled:
            continue
        rec = load_samples_entry(manifest, e)
        vol = normalize_volume(rec[0])
        pred = sliding_window_infer(params, vol, cfg.window, cfg.stride, cfg_v)
        rows.append(metric_row(e.id, pred, rec[1], manifest.spacing))
    return rows


def load_samples_entry(manifest, entry):
    from caml.volgen import read_label, read_volume
    return read_volume(manifest.root / entry.volume), read_label(manifest.root / entry.label)


def _expected_names(cfg_v):
    from caml.backbone import init_branch
    return init_branch(cfg_v, np.random.default_rng(0)).keys()


def write_eval_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) if c != "sample_id" else d[c] for c in EVAL_COLUMNS])


def read_eval_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != EVAL_COLUMNS:
            raise ValueError(f"{path}: unexpected metric columns {header}")
        return [dict(zip(header, (float(x) for x in row))) for row in reader]


def write_run(result: TrainResult, out_dir, manifest=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in NETWORKS:
        checkpoint.save(out / f"{name}.ckpt", result.params[name])
    result.runlog.write_csv(out / "runlog.csv")
    (out / "config.txt").write_text(format_config(result.config))
    cfg_v, cfg_a = branch_configs(result.config)
    meta = [
        f"threads = {os.environ.get('OMP_NUM_THREADS', 'unset')}",
        f"branch_v = {cfg_v}",
        f"branch_a = {cfg_a}",
        f"seconds = {result.seconds:.1f}",
    ]
    (out / "run_meta.txt").write_text("\n".join(meta) + "\n")
    for it, rows in result.runlog.evals:
        write_eval_csv(rows, out / f"eval_iter{it}.csv")


def load_run_params(run_dir):
    run = Path(run_dir)
    return {name: checkpoint.load(run / f"{name}.ckpt") for name in NETWORKS}

"""Command-line entry point: ``caml {gen-data,train,eval,ablate,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a
non-finite loss abort).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from caml.config import ConfigError, TrainConfig, load_config
from caml.losses import NonFiniteLossError
from caml.volgen import VolumeFormatError, generate_dataset

log = logging.getLogger("caml")

EVAL_NAME = "eval.csv"
# Component rows of the ablation table: (row name, enable_cma, enable_occ).
ABLATION_ROWS = (
    ("baseline", False, False),
    ("+OCC", False, True),
    ("+CMA", True, False),
    ("full", True, True),
)
LOWER_BOUND_ROW = "supervised-only"
REPORT_COLUMNS = ("dice", "jaccard", "hd95", "asd")
PERCENT_COLUMNS = ("dice", "jaccard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _triple(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return vals


def build_parser():
    p = _Parser(prog="caml", description="Semi-supervised 3D segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, action="append")
    g.add_argument("--labeled-fraction", type=float, default=0.1)
    g.add_argument("--n-samples", type=int, default=40)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--dims", type=_triple, default=(32, 32, 32))

    t = sub.add_parser("train", help="train once per seed and evaluate on the test split")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, action="append")
    t.add_argument("--out", required=True)
    t.add_argument("--no-eval", action="store_true")

    e = sub.add_parser("eval", help="evaluate a run's vanilla branch with sliding windows")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True, help="run directory or f_v.ckpt file")
    e.add_argument("--split", default="test")
    e.add_argument("--window", type=_triple)
    e.add_argument("--stride", type=_triple)
    e.add_argument("--out", required=True, help="metric CSV to write")

    a = sub.add_parser("ablate", help="baseline / +OCC / +CMA / full for every seed")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int, action="append")
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--lower-bound", action="store_true",
                   help="also train the supervised-only reference (L_s only)")

    r = sub.add_parser("report", help="aggregate eval CSVs into mean±std rows")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", help="prefix for the .md and .csv summaries")
    return p


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    seed = (args.seed or [0])[0]
    m = generate_dataset(seed, args.n_samples, args.dims, args.labeled_fraction, args.out,
                         n_test=args.n_test)
    n_lab = sum(e.labeled for e in m.split("train"))
    print(f"wrote {len(m.entries)} samples ({n_lab} labeled for training) to {args.out}")


def _seeds(args, cfg):
    return args.seed if args.seed else [cfg.seed]


def train_and_eval(cfg: TrainConfig, out_dir, evaluate=True):
    """One training run into ``out_dir`` plus the final-iteration test evaluation."""
    from caml.trainer import evaluate_checkpoint, train_run, write_eval_csv
    result = train_run(cfg, out_dir=out_dir)
    if evaluate:
        rows = evaluate_checkpoint(result.params["f_v"], cfg.manifest, "test", cfg)
        write_eval_csv(rows, Path(out_dir) / EVAL_NAME)
    return str(out_dir), result.seconds


def cmd_train(args):
    cfg = load_config(args.config)
    for seed in _seeds(args, cfg):
        run = cfg.replace(seed=seed)
        out, secs = train_and_eval(run, Path(args.out) / f"seed{seed}", not args.no_eval)
        print(f"seed {seed}: {out} ({secs:.1f}s)")


def cmd_eval(args):
    from caml.autodiff import checkpoint
    from caml.trainer import evaluate_checkpoint, write_eval_csv
    cfg = load_config(args.config)
    changes = {k: getattr(args, k) for k in ("window", "stride") if getattr(args, k)}
    cfg = cfg.replace(**changes)
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "f_v.ckpt"
    rows = evaluate_checkpoint(checkpoint.load(ckpt), cfg.manifest, args.split, cfg)
    write_eval_csv(rows, args.out)
    print(f"{len(rows)} samples -> {args.out}")


def ablation_jobs(cfg: TrainConfig, seeds, out, lower_bound=False):
    """(row name, seed, config, run dir) for every ablation run."""
    rows = [(name, dict(enable_cma=c, enable_occ=o)) for name, c, o in ABLATION_ROWS]
    if lower_bound:
        rows.append((LOWER_BOUND_ROW, dict(supervised_only=True)))
    return [(name, seed, cfg.replace(seed=seed, **sw), Path(out) / _slug(name) / f"seed{seed}")
            for seed in seeds for name, sw in rows]


def _slug(name):
    return {"+OCC": "occ", "+CMA": "cma"}.get(name, name)


def _run_job(job):
    name, seed, cfg, out = job
    logging.getLogger("caml").info("start %s seed %d", name, seed)
    return train_and_eval(cfg, out)


def cmd_ablate(args):
    cfg = load_config(args.config)
    jobs = ablation_jobs(cfg, _seeds(args, cfg), args.out, args.lower_bound)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_run_job, jobs))
    else:
        done = [_run_job(j) for j in jobs]
    for (name, seed, _, _), (out, secs) in zip(jobs, done):
        print(f"{name} seed {seed}: {out} ({secs:.1f}s)")
    names = [n for n, _, _ in ABLATION_ROWS]
    table = summarize([Path(args.out) / _slug(n) for n in names], names)
    write_summary(table, Path(args.out) / "ablation")
    print(format_markdown(table))
    if args.lower_bound:
        ref = summarize([Path(args.out) / LOWER_BOUND_ROW], [LOWER_BOUND_ROW])
        write_summary(ref, Path(args.out) / "lower_bound")
        print(format_markdown(ref))


# -- reporting ---------------------------------------------------------------------

def eval_csvs(run_dir):
    """Eval CSVs of a configuration: its own eval.csv or one per seed subdirectory."""
    d = Path(run_dir)
    own = d / EVAL_NAME
    found = [own] if own.exists() else sorted(d.glob(f"*/{EVAL_NAME}"))
    if not found:
        raise FileNotFoundError(f"no {EVAL_NAME} under {d}")
    return found


def read_metric_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["sample_id", *REPORT_COLUMNS]
        if header != expected:
            raise ValueError(f"{path}: metric columns {header} differ from {expected}")
        return [dict(zip(header, map(float, row))) for row in reader]


def seed_means(path):
    """Per-metric means of one eval CSV; NaN surface rows are counted as failures."""
    rows = read_metric_csv(path)
    means, failures = {}, 0
    for col in REPORT_COLUMNS:
        vals = np.array([r[col] for r in rows], np.float64)
        ok = np.isfinite(vals)
        failures = max(failures, int((~ok).sum()))
        means[col] = float(vals[ok].mean()) if ok.any() else math.nan
    return means, failures


def mean_std(values):
    v = np.asarray(values, np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), std


def format_cell(col, mean, std):
    scale = 100.0 if col in PERCENT_COLUMNS else 1.0
    return f"{mean * scale:.2f}±{std * scale:.2f}"


def summarize(run_dirs, names=None):
    """One row per configuration: seed count, failures and (mean, std) per metric."""
    names = names or [Path(d).name for d in run_dirs]
    table = []
    for name, d in zip(names, run_dirs):
        per_seed = [seed_means(p) for p in eval_csvs(d)]
        row = {"config": name, "seeds": len(per_seed),
               "failures": sum(f for _, f in per_seed)}
        for col in REPORT_COLUMNS:
            row[col] = mean_std([m[col] for m, _ in per_seed])
        table.append(row)
    return table


def format_markdown(table):
    head = "| config | seeds | Dice (%) | Jaccard (%) | 95HD (voxel) | ASD (voxel) |"
    lines = [head, "|---|---|---|---|---|---|"]
    for row in table:
        cells = [format_cell(c, *row[c]) for c in REPORT_COLUMNS]
        lines.append(f"| {row['config']} | {row['seeds']} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def write_summary(table, prefix):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".md").write_text(format_markdown(table) + "\n")
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seeds", "failures"]
                   + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std")])
        for row in table:
            w.writerow([row["config"], row["seeds"], row["failures"]]
                       + [repr(x) for c in REPORT_COLUMNS for x in row[c]])


def cmd_report(args):
    table = summarize(args.run_dirs)
    if args.out:
        write_summary(table, args.out)
    print(format_markdown(table))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"caml {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"caml {args.command}: training aborted: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, VolumeFormatError) as exc:
        print(f"caml {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()

"""Command line entry point: ``acvae <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from .config import RunConfig, format_config, load_config, preset
from .container import ContainerError
from .data import FORMATS, DataError, SequenceDataset, load_interactions, preprocess
from .evaluation import corr_metric, dump_json, toy_avb_demo, toy_summary, write_toy_csv
from .training import ABLATIONS, NumericalError, ablation_config, evaluate_state, load_checkpoint, train

log = logging.getLogger("acvae")

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# -- config assembly ---------------------------------------------------------

def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def build_config(args) -> RunConfig:
    """Preset or config file first, then ``--set`` pairs, then dedicated flags."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        cfg = RunConfig()
    overrides = {}
    for pair in getattr(args, "set", None) or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = _parse_value(raw.strip())
    for flag, key in (("alpha", "alpha"), ("beta", "beta"), ("epochs", "epochs"), ("seed", "seed"),
                      ("eval_every", "eval_every"), ("dtype", "dtype"), ("max_len", "max_len")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return cfg.replace(**overrides)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _load_dataset(path) -> SequenceDataset:
    if not Path(path).exists():
        raise UsageError(f"dataset cache not found: {path}")
    return SequenceDataset.load(path)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.train.seed}


# -- commands ----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    records = load_interactions(args.input, args.format)
    dataset = preprocess(records, threshold=args.threshold, min_core=args.min_core)
    dataset.save(args.out)
    s = dataset.stats()
    print(f"users={s['users']} items={s['items']} records={s['records']} "
          f"avg_length={s['avg_length']:.1f} sparsity={s['sparsity']:.4f}")
    return 0


def _train_and_report(dataset, cfg, out: Optional[Path], resume=None, manifest=None):
    params, manifest, state = train(dataset, cfg, out, resume=resume, manifest=manifest)
    report = evaluate_state(state, cfg, dataset)
    manifest.metrics.append({"epoch": state.epoch, "final": True, **report.to_json()})
    if out:
        report.write_csv(out / "metrics.csv", _stamp(cfg))
        (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return report, manifest


def cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    out = _out_dir(args.out_dir)
    resume = manifest = None
    if args.resume:
        resume, saved_cfg, manifest = load_checkpoint(args.resume)
        cfg = saved_cfg.replace(**({"epochs": args.epochs} if args.epochs else {}))
    else:
        cfg = build_config(args)
    (out / "config.ini").write_text(format_config(cfg))
    report, _ = _train_and_report(dataset, cfg, out, resume, manifest)
    print(f"Recall@10={report.recall[10]:.4f} NDCG@10={report.ndcg[10]:.4f} MRR@10={report.mrr[10]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    state, cfg, _ = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    report = evaluate_state(state, cfg, dataset, exclude_train=not args.include_train)
    out = _out_dir(args.out_dir)
    report.write_csv(out / "metrics.csv", _stamp(cfg))
    dump_json({**report.to_json(), **_stamp(cfg)}, out / "metrics.json")
    for row in report.rows():
        print(f"k={row['k']} recall={row['recall']:.4f} ndcg={row['ndcg']:.4f} mrr={row['mrr']:.4f}")
    return 0


def _variants(raw: Optional[str]) -> List[tuple]:
    if not raw:
        return [(), ("no_avb",), ("no_contrastive",), ("no_cnn",)]
    out = []
    for item in raw.split(","):
        item = item.strip()
        switches = () if item in ("full", "") else tuple(item.split("+"))
        if set(switches) - set(ABLATIONS):
            raise UsageError(f"unknown ablation {item!r}; choose from full, {', '.join(ABLATIONS)}")
        out.append(switches)
    return out


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args.data)
    base = build_config(args)
    out = _out_dir(args.out_dir)
    rows = []
    for switches in _variants(args.variants):
        name = "+".join(switches) or "full"
        cfg = ablation_config(base, switches)
        report, _ = _train_and_report(dataset, cfg, _out_dir(out / name))
        for r in report.rows():
            rows.append({"variant": name, **_stamp(cfg), **r})
        print(f"{name}: Recall@10={report.recall[10]:.4f} NDCG@10={report.ndcg[10]:.4f}")
    _write_rows(out / "ablation.csv", rows)
    return 0


def _write_rows(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def parse_grid(items: List[str]) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or key not in ("alpha", "beta"):
            raise UsageError(f"grid entries look like alpha=0,0.05 or beta=0.5; got {item!r}")
        try:
            grid[key] = [float(v) for v in values.split(",") if v]
        except ValueError:
            raise UsageError(f"non-numeric grid value in {item!r}") from None
    return grid


def _sweep_cell(job):
    index, alpha, beta, cfg_dict, data_path, out = job
    cfg = RunConfig.from_dict(cfg_dict)
    row = {"alpha": alpha, "beta": beta, "Recall@10": "", "NDCG@10": "", "seed": cfg.train.seed,
           "config_hash": cfg.config_hash(), "status": "ok"}
    try:
        report, _ = _train_and_report(SequenceDataset.load(data_path), cfg, _out_dir(out))
        row["Recall@10"], row["NDCG@10"] = report.recall[10], report.ndcg[10]
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return index, row


def num_workers() -> int:
    raw = os.environ.get("ACVAE_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"ACVAE_NUM_THREADS must be an integer, got {raw!r}") from None


def cmd_sweep(args) -> int:
    _load_dataset(args.data)  # fail fast on a bad path
    base = build_config(args)
    grid = parse_grid(args.grid)
    alphas = grid.get("alpha", [base.model.alpha])
    betas = grid.get("beta", [base.model.beta])
    out = _out_dir(args.out_dir)
    jobs = []
    for a in alphas:
        for b in betas:
            index = len(jobs)
            cfg = base.replace(alpha=a, beta=b, seed=base.train.seed + index)
            jobs.append((index, a, b, cfg.to_dict(), str(args.data), str(out / f"cell{index:03d}")))
    workers = min(num_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = dict(pool.map(_sweep_cell, jobs))
    else:
        results = dict(map(_sweep_cell, jobs))
    rows = [results[i] for i in range(len(jobs))]
    _write_rows(out / "sweep.csv", rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed; table in {out / 'sweep.csv'}")
    return 0


def cmd_corr(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    state, cfg, _ = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    report = corr_metric(state.params, cfg.model, dataset, args.sample_users, seed=cfg.train.seed)
    out = _out_dir(args.out_dir)
    label = args.label or ("no_avb" if cfg.train.no_avb else "full")
    dump_json({**report.to_json(), "label": label, **_stamp(cfg)}, out / f"corr_{label}.json")
    with open(out / f"corr_{label}_matrix.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.matrix.tolist())
    print(f"{label}: corr={report.corr:.4f} over {report.n_samples} latent samples")
    return 0


def cmd_toy_demo(args) -> int:
    result = toy_avb_demo(sigma=args.sigma, n=args.n, seed=args.seed, steps=args.steps)
    out = _out_dir(args.out_dir)
    write_toy_csv(result, out / "toy_points.csv")
    summary = toy_summary(result)
    dump_json({**summary, "seed": args.seed, "n": args.n}, out / "toy_summary.json")
    print(f"kl_difference={summary['kl_difference']} discriminator_auc={summary['discriminator_auc']:.4f} "
          f"bayes_auc={summary['bayes_auc']:.4f}")
    return 0


# -- parser ------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="sectioned key = value config file")
    src.add_argument("--preset", help="bundled preset: ml-latest, ml-1m, ml-10m, yelp, ml-100k")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw interactions to a binary dataset cache")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--out", required=True)
    p.add_argument("--min-core", type=int, default=5, dest="min_core")
    p.add_argument("--threshold", type=float, default=3)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--include-train", action="store_true", help="rank items already in the train prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the full model and its ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--variants", help="comma list of full, no_avb, no_contrastive, no_cnn (join with +)")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="alpha x beta grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--grid", nargs="+", default=["alpha=0,0.05,0.1,0.2", "beta=0,0.05,0.1,0.2,0.3,0.5,1.0"])
    _config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("corr", help="latent correlation statistic of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--sample-users", type=int, dest="sample_users")
    p.add_argument("--label")
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("toy-demo", help="KL vs discriminator on the two-cluster toy")
    p.add_argument("--sigma", type=float, default=0.4)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_toy_demo)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        where = f"; last good checkpoint: {exc.checkpoint}" if exc.checkpoint else ""
        print(f"acvae: numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, ContainerError, FileNotFoundError, ValueError) as exc:
        print(f"acvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Multi-seed training protocol behind the end-to-end, ablation and correlation checks.

Each (variant, seed) run lives in its own directory and leaves a
``result.json``; finished runs are skipped, so an interrupted protocol
resumes where it stopped.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .config import RunConfig
from .data import SequenceDataset
from .evaluation import corr_metric
from .training import ablation_config, evaluate_state, load_checkpoint, train

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_avb", "no_contrastive", "no_cnn")

# Recall@10 floor and target band for the end-to-end check
RECALL_FLOOR = 0.075
RECALL_TARGET = 0.091
RECALL_BAND = 0.020


def run_one(dataset: SequenceDataset, base: RunConfig, variant: str, seed: int, out: Path) -> dict:
    done = out / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    out.mkdir(parents=True, exist_ok=True)
    switches = () if variant == "full" else tuple(variant.split("+"))
    cfg = ablation_config(base.replace(seed=seed), switches)
    resume = manifest = None
    ckpt = out / "checkpoint.acvae"
    if ckpt.exists():
        resume, cfg, manifest = load_checkpoint(ckpt)
        log.info("resuming %s seed %d at epoch %d", variant, seed, resume.epoch)
    _, manifest, state = train(dataset, cfg, out, resume=resume, manifest=manifest)
    final = evaluate_state(state, cfg, dataset)
    history = [m for m in manifest.metrics if "recall" in m]
    best = max([m["recall"]["10"] for m in history] + [final.recall[10]])
    corr = corr_metric(state.params, cfg.model, dataset)
    result = {"variant": variant, "seed": seed, "epochs": state.epoch,
              "recall@10": final.recall[10], "ndcg@10": final.ndcg[10], "mrr@10": final.mrr[10],
              "best_recall@10": best, "corr": corr.corr, "config_hash": cfg.config_hash(),
              "history": [{"epoch": m["epoch"], "recall@10": m["recall"]["10"], "ndcg@10": m["ndcg"]["10"]}
                          for m in history]}
    done.write_text(json.dumps(result, indent=2) + "\n")
    return result


def run_protocol(dataset: SequenceDataset, base: RunConfig, out_dir, seeds: Sequence[int] = (0, 1, 2),
                 variants: Iterable[str] = VARIANTS) -> List[dict]:
    out = Path(out_dir)
    results = []
    for variant in variants:
        for seed in seeds:
            results.append(run_one(dataset, base, variant, seed, out / f"{variant}_seed{seed}"))
            r = results[-1]
            log.info("%s seed %d: recall@10=%.4f best=%.4f corr=%.3f", variant, seed,
                     r["recall@10"], r["best_recall@10"], r["corr"])
    (out / "summary.json").write_text(json.dumps(results, indent=2) + "\n")
    return results


def _by(results, variant) -> Dict[int, dict]:
    return {r["seed"]: r for r in results if r["variant"] == variant}


def judge_end_to_end(results: List[dict]) -> dict:
    full = _by(results, "full")
    mean = float(np.mean([r["recall@10"] for r in full.values()]))
    return {"mean_recall@10": mean, "mean_ndcg@10": float(np.mean([r["ndcg@10"] for r in full.values()])),
            "seeds": len(full), "passed": mean >= RECALL_FLOOR,
            "in_band": abs(mean - RECALL_TARGET) <= RECALL_BAND}


def judge_ablation(results: List[dict]) -> dict:
    full = _by(results, "full")
    out = {"passed": True}
    for variant in VARIANTS[1:]:
        other = _by(results, variant)
        seeds = sorted(set(full) & set(other))
        wins = sum(full[s]["best_recall@10"] >= other[s]["best_recall@10"] for s in seeds)
        out[variant] = {"wins": wins, "seeds": len(seeds)}
        out["passed"] &= wins >= 2
    return out


def judge_correlation(results: List[dict]) -> dict:
    full, no_avb = _by(results, "full"), _by(results, "no_avb")
    seeds = sorted(set(full) & set(no_avb))
    wins = sum(full[s]["corr"] < no_avb[s]["corr"] for s in seeds)
    return {"wins": wins, "seeds": len(seeds), "passed": wins >= 2,
            "corr_full": [full[s]["corr"] for s in seeds], "corr_no_avb": [no_avb[s]["corr"] for s in seeds]}

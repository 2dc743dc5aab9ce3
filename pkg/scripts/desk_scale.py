"""End-to-end protocol: 3 seeds x {full, no_avb, no_contrastive, no_cnn}.

Trains every run (resumable), then prints the end-to-end Recall@10 check,
the ablation ordering and the AVB correlation comparison.

    python3 scripts/desk_scale.py --ratings ml-latest-small/ratings.csv --out-dir runs/ml-latest
    python3 scripts/desk_scale.py --ratings data/ml-100k.csv --out-dir runs/ml-100k --preset ml-100k
"""
import argparse
import json
import logging
from pathlib import Path

from acvae.config import preset
from acvae.data import SequenceDataset, load_interactions, preprocess
from acvae.protocol import VARIANTS, judge_ablation, judge_correlation, judge_end_to_end, run_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ratings", required=True, help="userId,movieId,rating,timestamp CSV or a dataset cache")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--preset", default="ml-latest")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--eval-every", type=int, default=10)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.ratings.endswith(".acvae"):
        dataset = SequenceDataset.load(args.ratings)
    else:
        dataset = preprocess(load_interactions(args.ratings, "csv"))
        dataset.save(out / "dataset.acvae")
    print("dataset", dataset.stats())

    cfg = preset(args.preset).replace(eval_every=args.eval_every)
    if args.epochs:
        cfg = cfg.replace(epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_protocol(dataset, cfg, out, seeds, args.variants.split(","))
    verdict = {"end_to_end": judge_end_to_end(results)}
    if len(set(r["variant"] for r in results)) == len(VARIANTS):
        verdict["ablation"] = judge_ablation(results)
        verdict["correlation"] = judge_correlation(results)
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2) + "\n")
    print(json.dumps(verdict, indent=2))


if __name__ == "__main__":
    main()

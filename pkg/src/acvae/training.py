"""Alternating optimisation of the ACVAE (even iterations: VAE side, odd: adversary)."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import container
from .config import RunConfig
from .data import PaddedBatch, SequenceDataset, make_batches
from .evaluation import MetricsReport, evaluate
from .model import (Params, adversary_objective, encode, encoder_noise, frozen, full_objective,
                    group, init_params, sample_prior)
from .optim import OptimizerState, adam, clip_by_global_norm, optimizer_step, sgd

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "epoch", "recon", "adv_term", "contrast", "psi_objective")


class NumericalError(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class RunManifest:
    config: dict
    dataset_fingerprint: str
    config_hash: str
    seed: int
    epoch_losses: List[dict] = field(default_factory=list)
    metrics: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "RunManifest":
        return cls(**d)


@dataclass
class TrainState:
    params: Params
    vae_opt: OptimizerState
    adv_opt: OptimizerState
    iteration: int = 0
    epoch: int = 0  # epochs completed
    losses: List[dict] = field(default_factory=list)
    con_opt: Optional[OptimizerState] = None  # set when the contrastive head has its own optimizer


def _optimizers(state: TrainState):
    tags = [("vae", state.vae_opt), ("adv", state.adv_opt)]
    return tags + ([("con", state.con_opt)] if state.con_opt is not None else [])


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.train.dtype == "float64" else np.float32


def new_state(cfg: RunConfig, n_items: int) -> TrainState:
    cfg.model.n_items = n_items
    params = init_params(cfg.model, cfg.train.seed, _dtype(cfg))
    t = cfg.train
    con_opt = sgd(t.adv_lr, t.adv_l2) if t.con_optimizer == "sgd" else None
    return TrainState(params, adam(t.vae_lr, t.vae_l2), sgd(t.adv_lr, t.adv_l2), con_opt=con_opt)


def _grads(params: Params, clip: float) -> Dict[str, np.ndarray]:
    grads = {k: v.grad for k, v in params.items()}
    if "enc.embedding" in grads:
        grads["enc.embedding"] = grads["enc.embedding"].copy()
        grads["enc.embedding"][0] = 0  # padding row stays zero
    clip_by_global_norm(grads, clip)
    return grads


def vae_step(state: TrainState, cfg: RunConfig, batch: PaddedBatch, rng: np.random.Generator) -> dict:
    """One update of encoder, decoder and contrastive discriminator; adversary frozen."""
    params = state.params
    trainable = group(params, "vae")
    view = dict(trainable, **frozen(group(params, "adv")))
    alpha = 0.0 if cfg.train.no_avb else cfg.model.alpha
    with ad.Tape() as tape:
        loss, diag = full_objective(view, cfg.model, batch, rng, alpha=alpha)
        if not np.isfinite(diag["loss"]):
            raise NumericalError(f"non-finite VAE loss at iteration {state.iteration}")
        tape.backward(loss, trainable.values())
    grads = _grads(trainable, cfg.train.clip_norm)
    if state.con_opt is None:
        optimizer_step(trainable, grads, state.vae_opt)
    else:
        con = {k for k in grads if k.startswith("con.")}
        optimizer_step(trainable, {k: g for k, g in grads.items() if k not in con}, state.vae_opt)
        optimizer_step(trainable, {k: grads[k] for k in con}, state.con_opt)
    return diag


def adversary_step(state: TrainState, cfg: RunConfig, batch: PaddedBatch, rng: np.random.Generator) -> float:
    """One ascent step on the adversary objective with everything else frozen."""
    params = state.params
    trainable = group(params, "adv")
    view = dict(frozen(group(params, "vae")), **trainable)
    dtype = params["enc.embedding"].dtype
    z_post = encode(view, cfg.model, batch.inputs, encoder_noise(rng, batch, cfg.model, dtype))
    z_prior = ad.Tensor(sample_prior(rng, z_post.shape, dtype))
    with ad.Tape() as tape:
        obj = adversary_objective(view, batch, ad.Tensor(z_post.value), z_prior, cfg.model.reduction)
        if not np.isfinite(obj.value):
            raise NumericalError(f"non-finite adversary objective at iteration {state.iteration}")
        tape.backward(ad.mul(obj, -1.0), trainable.values())
    optimizer_step(trainable, _grads(trainable, cfg.train.clip_norm), state.adv_opt)
    return float(obj.value)


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def epoch_batches(dataset: SequenceDataset, cfg: RunConfig, epoch: int) -> List[PaddedBatch]:
    batches = make_batches(dataset.sequences, cfg.model.max_len, cfg.train.batch_size,
                           shuffle_seed=cfg.train.seed * 100_003 + epoch)
    # every row needs a next-item target and the contrastive term needs two users
    return [b.trimmed() for b in batches if b.mask.sum() > 0 and len(b.user_indices) >= 2]


def run_epoch(state: TrainState, cfg: RunConfig, dataset: SequenceDataset) -> dict:
    batches = epoch_batches(dataset, cfg, state.epoch)
    schedule = [(b, b) for b in batches] if cfg.train.same_batch else [(b,) for b in batches]
    rows = []
    for item in schedule:
        for batch in item:
            i = state.iteration
            rng = _iteration_rng(cfg.train.seed, i)
            row = {"iter": i, "epoch": state.epoch, "recon": "", "adv_term": "", "contrast": "",
                   "psi_objective": ""}
            if i % 2 == 0:
                diag = vae_step(state, cfg, batch, rng)
                row.update({k: diag[k] for k in ("recon", "adv_term", "contrast") if np.isfinite(diag[k])})
            elif not cfg.train.no_avb:
                row["psi_objective"] = adversary_step(state, cfg, batch, rng)
            rows.append(row)
            state.iteration += 1
    state.losses.extend(rows)
    state.epoch += 1
    summary = {"epoch": state.epoch - 1}
    for key in ("recon", "adv_term", "contrast", "psi_objective"):
        vals = [r[key] for r in rows if r[key] != ""]
        summary[key] = float(np.mean(vals)) if vals else None
    return summary


# -- checkpoints -------------------------------------------------------------

def state_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {f"param/{k}": v.value for k, v in state.params.items()}
    for tag, opt in _optimizers(state):
        for k in opt.m:
            arrays[f"opt/{tag}/m/{k}"] = opt.m[k]
            arrays[f"opt/{tag}/v/{k}"] = opt.v[k]
    return arrays


def save_checkpoint(path, state: TrainState, cfg: RunConfig, manifest: Optional[RunManifest] = None) -> None:
    meta = {
        "kind": "checkpoint",
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "optimizers": {tag: {"kind": o.kind, "learning_rate": o.learning_rate,
                             "weight_decay": o.weight_decay, "step": o.step}
                       for tag, o in _optimizers(state)},
        "losses": state.losses,
        "manifest": manifest.to_json() if manifest else None,
    }
    container.save(path, state_arrays(state), meta)


def load_checkpoint(path):
    """Returns ``(TrainState, RunConfig, RunManifest | None)``."""
    arrays, meta = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path} is not a checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    params = {k[len("param/"):]: ad.Tensor(v, requires_grad=True, name=k[len("param/"):])
              for k, v in arrays.items() if k.startswith("param/")}
    opts = {}
    for tag, o in meta["optimizers"].items():
        st = OptimizerState(o["kind"], o["learning_rate"], o["weight_decay"], step=o["step"])
        for k, v in arrays.items():
            if k.startswith(f"opt/{tag}/m/"):
                st.m[k[len(f"opt/{tag}/m/"):]] = v
            elif k.startswith(f"opt/{tag}/v/"):
                st.v[k[len(f"opt/{tag}/v/"):]] = v
        opts[tag] = st
    state = TrainState(params, opts["vae"], opts["adv"], meta["iteration"], meta["epoch"], meta["losses"],
                       opts.get("con"))
    manifest = RunManifest.from_json(meta["manifest"]) if meta.get("manifest") else None
    return state, cfg, manifest


def write_loss_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- driver ------------------------------------------------------------------

def evaluate_state(state: TrainState, cfg: RunConfig, dataset: SequenceDataset, **kw) -> MetricsReport:
    eps_rng = np.random.default_rng([cfg.train.seed, 7, state.epoch]) if cfg.train.eval_noise else None
    return evaluate(state.params, cfg.model, dataset, eps_rng=eps_rng, **kw)


def train(dataset: SequenceDataset, cfg: RunConfig, out_dir=None, resume: Optional[TrainState] = None,
          manifest: Optional[RunManifest] = None,
          on_epoch: Optional[Callable[[TrainState, dict], None]] = None):
    """Train for ``cfg.train.epochs`` epochs; returns ``(params, manifest, state)``.

    With ``out_dir`` a checkpoint is written every ``checkpoint_every``
    epochs; a non-finite loss raises :class:`NumericalError` carrying the
    path of the last good checkpoint.
    """
    state = resume or new_state(cfg, dataset.n_items)
    cfg.model.n_items = dataset.n_items
    if manifest is None:
        manifest = RunManifest(cfg.to_dict(), dataset.fingerprint(), cfg.config_hash(), cfg.train.seed)
    out = Path(out_dir) if out_dir else None
    ckpt = out / "checkpoint.acvae" if out else None
    last_good = str(ckpt) if ckpt and ckpt.exists() else None
    start = time.perf_counter()
    while state.epoch < cfg.train.epochs:
        try:
            summary = run_epoch(state, cfg, dataset)
        except (NumericalError, FloatingPointError) as exc:
            raise NumericalError(str(exc), last_good) from exc
        manifest.epoch_losses.append(summary)
        if cfg.train.eval_every and state.epoch % cfg.train.eval_every == 0:
            report = evaluate_state(state, cfg, dataset)
            manifest.metrics.append({"epoch": state.epoch, **report.to_json()})
            log.info("epoch %d recall@10=%.4f ndcg@10=%.4f", state.epoch, report.recall[10], report.ndcg[10])
        log.info("epoch %d %s", state.epoch, summary)
        if on_epoch:
            on_epoch(state, summary)
        if ckpt and (state.epoch % cfg.train.checkpoint_every == 0 or state.epoch == cfg.train.epochs):
            manifest.wall_clock += time.perf_counter() - start
            start = time.perf_counter()
            save_checkpoint(ckpt, state, cfg, manifest)
            last_good = str(ckpt)
    manifest.wall_clock += time.perf_counter() - start
    if out:
        save_checkpoint(ckpt, state, cfg, manifest)
        write_loss_csv(state.losses, out / "losses.csv")
        (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return state.params, manifest, state


ABLATIONS = ("no_avb", "no_contrastive", "no_cnn")


def ablation_config(base: RunConfig, switches) -> RunConfig:
    unknown = set(switches) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation switch(es): {sorted(unknown)}")
    cfg = RunConfig.from_dict(base.to_dict())
    if "no_avb" in switches:
        cfg.model.alpha = 0.0
        cfg.train.no_avb = True
    if "no_contrastive" in switches:
        cfg.model.beta = 0.0
    if "no_cnn" in switches:
        cfg.model.use_cnn = False
    return cfg


def ablate(dataset: SequenceDataset, base: RunConfig, variants=None, out_dir=None) -> Dict[str, MetricsReport]:
    """Train and evaluate the full model and each listed switch set."""
    variants = variants if variants is not None else [(), ("no_avb",), ("no_contrastive",), ("no_cnn",)]
    reports = {}
    for switches in variants:
        name = "+".join(switches) or "full"
        cfg = ablation_config(base, switches)
        sub = Path(out_dir) / name if out_dir else None
        if sub:
            sub.mkdir(parents=True, exist_ok=True)
        params, _, state = train(dataset, cfg, sub)
        reports[name] = evaluate_state(state, cfg, dataset)
    return reports

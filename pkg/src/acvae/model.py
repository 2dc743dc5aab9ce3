"""ACVAE networks and loss terms.

Parameters live in a flat ``{name: Tensor}`` dict. Name prefixes define the
two groups updated alternately during training: ``enc.``, ``dec.`` and
``con.`` (encoder, decoder, contrastive discriminator) against
``adv.`` (the adversary that estimates the log density ratio).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .data import PaddedBatch

Params = Dict[str, Tensor]

VAE_PREFIXES = ("enc.", "dec.", "con.")
ADV_PREFIX = "adv."


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _mlp_params(prefix, n_in, width, rng, dtype):
    out = {}
    for i, (a, b) in enumerate([(n_in, width), (width, width), (width, 1)], start=1):
        bound = 1 / np.sqrt(a)
        out[f"{prefix}w{i}"] = _uniform(rng, bound, (a, b), dtype)
        out[f"{prefix}b{i}"] = _uniform(rng, bound, (b,), dtype)
    return out


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> Params:
    if cfg.n_items < 2:
        raise ValueError("n_items must count the padding index plus at least one item")
    rng = np.random.default_rng(seed)
    V, e, d, z = cfg.n_items, cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim
    emb = rng.standard_normal((V, e)).astype(dtype)
    emb[0] = 0
    raw = {
        "enc.embedding": emb,
        "enc.gru.w": _uniform(rng, 1 / np.sqrt(d), (e, 3 * d), dtype),
        "enc.gru.u": _uniform(rng, 1 / np.sqrt(d), (d, 3 * d), dtype),
        "enc.gru.b": np.zeros(3 * d, dtype=dtype),
    }
    if cfg.use_cnn:
        raw["enc.conv.filter"] = _uniform(rng, 1 / np.sqrt(cfg.filter_height), (cfg.filter_height, 1), dtype)
    else:
        raw["enc.fc.w"] = _uniform(rng, 1 / np.sqrt(d), (d, d), dtype)
        raw["enc.fc.b"] = _uniform(rng, 1 / np.sqrt(d), (d,), dtype)
    raw["enc.out.w"] = _uniform(rng, 1 / np.sqrt(d), (d, z), dtype)
    raw["enc.out.b"] = _uniform(rng, 1 / np.sqrt(d), (z,), dtype)
    raw["dec.w"] = _uniform(rng, 1 / np.sqrt(z), (z, V), dtype)
    raw["dec.b"] = _uniform(rng, 1 / np.sqrt(z), (V,), dtype)
    raw.update(_mlp_params("adv.", e + z, cfg.disc_hidden, rng, dtype))
    raw.update(_mlp_params("con.", e + z, cfg.disc_hidden, rng, dtype))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def group(params: Params, which: str) -> Params:
    if which == "vae":
        return {k: v for k, v in params.items() if k.startswith(VAE_PREFIXES)}
    if which == "adv":
        return {k: v for k, v in params.items() if k.startswith(ADV_PREFIX)}
    raise ValueError(which)


def frozen(params: Params) -> Params:
    """Views of ``params`` that no tape will differentiate."""
    return {k: Tensor(v.value, name=k) for k, v in params.items()}


# -- encoder / decoder -------------------------------------------------------

@dataclass
class LatentSeq:
    z: Tensor
    epsilon_seed: Optional[int] = None


def encoder_noise(rng: np.random.Generator, batch: PaddedBatch, cfg: ModelConfig, dtype) -> np.ndarray:
    b, T = batch.inputs.shape
    return rng.standard_normal((b, T, cfg.hidden_dim), dtype=np.float64).astype(dtype, copy=False)


def encode(params: Params, cfg: ModelConfig, inputs: np.ndarray, eps: Optional[np.ndarray] = None) -> Tensor:
    """Item indices ``[b, T]`` to latents ``[b, T, latent_dim]``.

    embed -> GRU -> softplus -> add noise -> causal conv + residual ->
    softplus -> affine. ``eps=None`` means no noise.
    """
    if inputs.size and inputs.max() >= params["enc.embedding"].shape[0]:
        raise ValueError("item index out of vocabulary range")
    x = ad.embedding(params["enc.embedding"], inputs)
    h = ad.softplus(ad.gru(x, params["enc.gru.w"], params["enc.gru.u"], params["enc.gru.b"]))
    if eps is not None:
        h = ad.add(h, Tensor(eps.astype(h.dtype, copy=False)))
    if cfg.use_cnn:
        c = ad.add(h, ad.causal_conv(h, params["enc.conv.filter"]))
    else:
        c = ad.add(h, ad.linear(h, params["enc.fc.w"], params["enc.fc.b"]))
    return ad.linear(ad.softplus(c), params["enc.out.w"], params["enc.out.b"])


def decode(params: Params, z: Tensor) -> Tensor:
    return ad.linear(z, params["dec.w"], params["dec.b"])


def _normalizer(mask: np.ndarray, reduction: str) -> float:
    count = float(mask.sum())
    if count == 0:
        raise ValueError("empty batch: mask selects no positions")
    return count if reduction == "position" else float(mask.shape[0])


def reconstruction_term(logits: Tensor, batch: PaddedBatch, reduction: str = "position") -> Tensor:
    """Masked next-item negative log-likelihood (to be minimised)."""
    return ad.softmax_cross_entropy(logits, batch.targets, batch.mask,
                                    normalizer=_normalizer(batch.mask, reduction))


# -- discriminators ----------------------------------------------------------
#
# Every loss term only reads real (mask = 1) positions, so the heavy heads
# run on those rows alone: ``positions`` are flat indices into [b * T].

def real_positions(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask)


def gather_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    b, T = x.shape[:2]
    return ad.take_rows(ad.reshape(x, (b * T,) + x.shape[2:]), positions)


def _mlp(params: Params, prefix: str, x: Tensor) -> Tensor:
    h = ad.leaky_relu(ad.linear(x, params[prefix + "w1"], params[prefix + "b1"]), 0.2)
    h = ad.leaky_relu(ad.linear(h, params[prefix + "w2"], params[prefix + "b2"]), 0.2)
    out = ad.linear(h, params[prefix + "w3"], params[prefix + "b3"])
    return ad.reshape(out, out.shape[:-1])


def pair_score(params: Params, prefix: str, items: np.ndarray, z: Tensor) -> Tensor:
    """Score of (embedding(x_t), z_t) pairs; ``items`` has the shape of ``z`` minus its last axis."""
    emb = ad.embedding(params["enc.embedding"], items)
    return _mlp(params, prefix, ad.concat([emb, z], axis=-1))


def adversary_score(params: Params, batch: PaddedBatch, z: Tensor) -> Tensor:
    """Per-timestep adversary output ``[b, T]``."""
    return pair_score(params, ADV_PREFIX, batch.inputs, z)


def sample_prior(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)


def _reduce(total: Tensor, mask: np.ndarray, reduction: str, sign: float = 1.0) -> Tensor:
    return ad.mul(total, sign / _normalizer(mask, reduction))


def adversary_objective(params: Params, batch: PaddedBatch, z_post: Tensor, z_prior: Tensor,
                        reduction: str = "position") -> Tensor:
    """log σ(T(x, z_post)) + log(1 - σ(T(x, z_prior))) over real positions; maximised by the adversary."""
    pos_idx = real_positions(batch.mask)
    items = batch.inputs.reshape(-1)[pos_idx]
    pos = ad.log_sigmoid(pair_score(params, ADV_PREFIX, items, gather_positions(z_post, pos_idx)))
    neg = ad.log_sigmoid(ad.mul(pair_score(params, ADV_PREFIX, items, gather_positions(z_prior, pos_idx)), -1.0))
    return _reduce(ad.add(ad.sum(pos), ad.sum(neg)), batch.mask, reduction)


def kl_estimate(params: Params, batch: PaddedBatch, z: Tensor) -> Tensor:
    """Adversary scores standing in for log q(z|x) - log p(z) per position."""
    return adversary_score(params, batch, z)


def kl_term(params: Params, batch: PaddedBatch, z: Tensor, reduction: str = "position") -> Tensor:
    pos_idx = real_positions(batch.mask)
    items = batch.inputs.reshape(-1)[pos_idx]
    scores = pair_score(params, ADV_PREFIX, items, gather_positions(z, pos_idx))
    return _reduce(ad.sum(scores), batch.mask, reduction)


# -- contrastive term --------------------------------------------------------

def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("contrastive loss requires batch >= 2")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def shuffle_latents(z: Tensor, rng: np.random.Generator) -> Tensor:
    """Permute latents across users so nobody keeps their own."""
    return ad.take_rows(z, derangement(z.shape[0], rng))


def _contrast_from_scores(g_pos: Tensor, g_neg: Tensor, form: str) -> Tensor:
    pos = ad.log_sigmoid(g_pos)
    if form == "literal":
        neg = ad.log_sigmoid(ad.sub(1.0, g_neg))
    elif form == "canonical":
        neg = ad.log_sigmoid(ad.mul(g_neg, -1.0))
    else:
        raise ValueError(f"unknown contrastive form {form!r}")
    return ad.add(ad.sum(pos), ad.sum(neg))


def contrastive_loss(params: Params, batch: PaddedBatch, z: Tensor, z_tilde: Tensor,
                     form: str = "literal", reduction: str = "position") -> Tensor:
    """Negative log-likelihood of telling a user's own latents from another user's."""
    pos_idx = real_positions(batch.mask)
    items = batch.inputs.reshape(-1)[pos_idx]
    g_pos = pair_score(params, "con.", items, gather_positions(z, pos_idx))
    g_neg = pair_score(params, "con.", items, gather_positions(z_tilde, pos_idx))
    return _reduce(_contrast_from_scores(g_pos, g_neg, form), batch.mask, reduction, -1.0)


# -- combined objective ------------------------------------------------------

def full_objective(params: Params, cfg: ModelConfig, batch: PaddedBatch, rng: np.random.Generator,
                   alpha: Optional[float] = None, beta: Optional[float] = None,
                   eps: Optional[np.ndarray] = None):
    """Loss minimised over encoder, decoder and contrastive discriminator.

    recon + alpha * adversary estimate + beta * contrastive. Pass a
    :func:`frozen` adversary to keep its weights out of the gradient.
    Returns ``(loss, diagnostics)``.
    """
    alpha = cfg.alpha if alpha is None else alpha
    beta = cfg.beta if beta is None else beta
    dtype = params["enc.embedding"].dtype
    if eps is None:
        eps = encoder_noise(rng, batch, cfg, dtype)
    mask = batch.mask
    pos_idx = real_positions(mask)
    items = batch.inputs.reshape(-1)[pos_idx]
    z = encode(params, cfg, batch.inputs, eps)
    z_real = gather_positions(z, pos_idx)
    norm = _normalizer(mask, cfg.reduction)
    recon = ad.softmax_cross_entropy(decode(params, z_real), batch.targets.reshape(-1)[pos_idx],
                                     np.ones(pos_idx.size), normalizer=norm)
    loss = recon
    diag = {"recon": float(recon.value), "adv_term": float("nan"), "contrast": float("nan")}
    if alpha > 0:
        kl = ad.mul(ad.sum(pair_score(params, ADV_PREFIX, items, z_real)), 1.0 / norm)
        loss = ad.add(loss, ad.mul(kl, alpha))
        diag["adv_term"] = float(kl.value)
    if beta > 0:
        b, T = mask.shape
        perm = derangement(b, rng)
        partner = perm[pos_idx // T]
        # a shorter partner has no latent at t: use its last real position
        last = np.maximum(batch.lengths[partner] - 1, 0)
        neg_idx = partner * T + np.minimum(pos_idx % T, last)
        g_pos = pair_score(params, "con.", items, z_real)
        g_neg = pair_score(params, "con.", items, gather_positions(z, neg_idx))
        con = ad.mul(_contrast_from_scores(g_pos, g_neg, cfg.contrastive_form), -1.0 / norm)
        loss = ad.add(loss, ad.mul(con, beta))
        diag["contrast"] = float(con.value)
    diag["loss"] = float(loss.value)
    return loss, diag

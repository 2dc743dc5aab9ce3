"""Top-k ranking metrics, the latent correlation diagnostic and the toy AVB demo."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .data import SequenceDataset, UserSequence, pad_prefix
from .model import Params, decode, encode
from .optim import adam, optimizer_step

log = logging.getLogger(__name__)

KS = (5, 10, 20)


# -- per-user metrics --------------------------------------------------------

def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    rel = set(relevant)
    hits = sum(1 for item in ranked[:k] if item in rel)
    return hits / len(rel)


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    rel = set(relevant)
    dcg = 0.0
    for i, item in enumerate(ranked[:k], start=1):
        if item in rel:
            dcg += 1 / math.log2(i + 1)
    idcg = 0.0
    for i in range(1, min(k, len(rel)) + 1):
        idcg += 1 / math.log2(i + 1)
    return dcg / idcg


def mrr_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    rel = set(relevant)
    for i, item in enumerate(ranked[:k], start=1):
        if item in rel:
            return 1 / i
    return 0.0


# -- ranking -----------------------------------------------------------------

def last_step_logits(params: Params, cfg: ModelConfig, users: Sequence[UserSequence],
                     batch_size: int = 256, eps_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Decoder logits at each user's final real training position, ``[n, V]``.

    Runs outside any tape; ``eps_rng=None`` evaluates without encoder noise.
    """
    out = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        rows = [pad_prefix(u.train, cfg.max_len) for u in chunk]
        lengths = np.array([r[3] for r in rows])
        T = int(lengths.max())
        inputs = np.stack([r[0][:T] for r in rows])
        eps = None
        if eps_rng is not None:
            eps = eps_rng.standard_normal((len(chunk), T, cfg.hidden_dim))
        z = encode(params, cfg, inputs, eps)
        last = Tensor(z.value[np.arange(len(chunk)), lengths - 1])
        out.append(decode(params, last).value)
    return np.concatenate(out, axis=0)


def rank_from_logits(logits: np.ndarray, exclude: Iterable[int] = ()) -> List[int]:
    """Items by descending score, ties to the lower index; padding and ``exclude`` removed."""
    scores = np.asarray(logits, dtype=np.float64).copy()
    scores[0] = -np.inf
    ex = np.fromiter(exclude, dtype=np.int64)
    scores[ex] = -np.inf
    order = np.argsort(-scores, kind="stable")
    n_valid = int(np.isfinite(scores).sum())
    return order[:n_valid].tolist()


def rank_items(params: Params, cfg: ModelConfig, user: UserSequence, exclude_train: bool = True) -> List[int]:
    if not user.train:
        raise ValueError("user has an empty training prefix")
    logits = last_step_logits(params, cfg, [user])[0]
    return rank_from_logits(logits, user.train if exclude_train else ())


# -- aggregate report --------------------------------------------------------

@dataclass
class MetricsReport:
    recall: Dict[int, float] = field(default_factory=dict)
    ndcg: Dict[int, float] = field(default_factory=dict)
    mrr: Dict[int, float] = field(default_factory=dict)
    users_evaluated: int = 0
    exclude_train: bool = True

    def rows(self) -> List[dict]:
        return [{"k": k, "recall": self.recall[k], "ndcg": self.ndcg[k], "mrr": self.mrr[k]}
                for k in sorted(self.recall)]

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("recall", "ndcg", "mrr"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def write_csv(self, path, extra: Optional[dict] = None) -> None:
        rows = [dict(extra or {}, **r) for r in self.rows()]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def score_rankings(rankings: Sequence[Sequence[int]], tests: Sequence[Sequence[int]],
                   ks: Sequence[int] = KS, exclude_train: bool = True) -> MetricsReport:
    report = MetricsReport(exclude_train=exclude_train)
    pairs = [(r, t) for r, t in zip(rankings, tests) if len(t) > 0]
    if not pairs:
        raise ValueError("no users with a non-empty test set")
    for k in ks:
        report.recall[k] = float(np.mean([recall_at_k(r, t, k) for r, t in pairs]))
        report.ndcg[k] = float(np.mean([ndcg_at_k(r, t, k) for r, t in pairs]))
        report.mrr[k] = float(np.mean([mrr_at_k(r, t, k) for r, t in pairs]))
    report.users_evaluated = len(pairs)
    return report


def evaluate(params: Params, cfg: ModelConfig, dataset: SequenceDataset, ks: Sequence[int] = KS,
             exclude_train: bool = True, eps_rng: Optional[np.random.Generator] = None) -> MetricsReport:
    users = [u for u in dataset.sequences if u.test and u.train]
    logits = last_step_logits(params, cfg, users, eps_rng=eps_rng)
    top = max(ks)
    rankings = []
    for u, row in zip(users, logits):
        rankings.append(rank_from_logits(row, u.train if exclude_train else ())[:top])
    return score_rankings(rankings, [u.test for u in users], ks, exclude_train)


# -- latent correlation ------------------------------------------------------

@dataclass
class CorrReport:
    matrix: np.ndarray
    corr: float
    n_samples: int

    def to_json(self) -> dict:
        return {"corr": self.corr, "n_samples": self.n_samples, "latent_dim": int(self.matrix.shape[0])}


def correlation_matrix(samples: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of ``samples``; constant columns get 0 off-diagonal."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    x = x - x.mean(axis=0)
    std = np.sqrt((x * x).sum(axis=0))
    dead = std == 0
    if dead.any():
        log.warning("%d latent dimension(s) have zero variance; their correlations are set to 0",
                    int(dead.sum()))
    std[dead] = 1.0
    xs = x / std
    c = xs.T @ xs
    c = (c + c.T) / 2
    np.fill_diagonal(c, 1.0)
    return c


def corr_statistic(c: np.ndarray) -> float:
    off = c - np.eye(c.shape[0])
    return float(np.sum(off * off))


def latent_samples(params: Params, cfg: ModelConfig, users: Sequence[UserSequence],
                   batch_size: int = 256) -> np.ndarray:
    """Noise-free latents at every real training position, pooled over users."""
    pooled = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        rows = [pad_prefix(u.train, cfg.max_len) for u in chunk]
        lengths = np.array([r[3] for r in rows])
        T = int(lengths.max())
        z = encode(params, cfg, np.stack([r[0][:T] for r in rows])).value
        for i, L in enumerate(lengths):
            pooled.append(z[i, :L])
    return np.concatenate(pooled, axis=0)


def corr_metric(params: Params, cfg: ModelConfig, dataset: SequenceDataset,
                sample_users: Optional[int] = None, seed: int = 0) -> CorrReport:
    users = [u for u in dataset.sequences if u.train]
    if sample_users is not None and sample_users < len(users):
        pick = np.random.default_rng(seed).choice(len(users), size=sample_users, replace=False)
        users = [users[i] for i in sorted(pick)]
    samples = latent_samples(params, cfg, users)
    c = correlation_matrix(samples)
    return CorrReport(c, corr_statistic(c), int(samples.shape[0]))


# -- toy demonstration -------------------------------------------------------

def gaussian_kl_to_standard(mu: np.ndarray, sigma: float) -> np.ndarray:
    """KL(N(mu, sigma^2 I) || N(0, I)) per row of ``mu``."""
    mu = np.atleast_2d(mu)
    d = mu.shape[1]
    return 0.5 * (d * sigma ** 2 + np.sum(mu * mu, axis=1) - d - 2 * d * math.log(sigma))


def auc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Probability a positive outscores a negative (Mann-Whitney, ties count half)."""
    ranks = rankdata(np.concatenate([scores_pos, scores_neg]))
    n_p, n_n = len(scores_pos), len(scores_neg)
    return float((ranks[:n_p].sum() - n_p * (n_p + 1) / 2) / (n_p * n_n))


def train_binary_mlp(x_pos: np.ndarray, x_neg: np.ndarray, hidden: int = 32, steps: int = 2000,
                     lr: float = 1e-2, seed: int = 0, batch: int = 256):
    """Fit a 2-hidden-layer leaky-ReLU MLP with logistic loss; returns a scoring function."""
    rng = np.random.default_rng(seed)
    n_in = x_pos.shape[1]
    params = {}
    for i, (a, b) in enumerate([(n_in, hidden), (hidden, hidden), (hidden, 1)], start=1):
        bound = 1 / np.sqrt(a)
        params[f"w{i}"] = Tensor(rng.uniform(-bound, bound, (a, b)), requires_grad=True)
        params[f"b{i}"] = Tensor(rng.uniform(-bound, bound, (b,)), requires_grad=True)

    def forward(p, x):
        h = ad.leaky_relu(ad.linear(Tensor(x), p["w1"], p["b1"]))
        h = ad.leaky_relu(ad.linear(h, p["w2"], p["b2"]))
        out = ad.linear(h, p["w3"], p["b3"])
        return ad.reshape(out, out.shape[:-1])

    state = adam(lr)
    for _ in range(steps):
        ip = rng.integers(0, len(x_pos), batch)
        ineg = rng.integers(0, len(x_neg), batch)
        with ad.Tape() as tape:
            pos = ad.log_sigmoid(forward(params, x_pos[ip]))
            neg = ad.log_sigmoid(ad.mul(forward(params, x_neg[ineg]), -1.0))
            loss = ad.mul(ad.add(ad.sum(pos), ad.sum(neg)), -1.0 / batch)
            tape.backward(loss, params.values())
        optimizer_step(params, {k: v.grad for k, v in params.items()}, state)

    return lambda x: forward(params, np.asarray(x, dtype=np.float64)).value


def toy_avb_samples(sigma: float, n: int, rng: np.random.Generator):
    """Real: mean uniform on {-1,1}^2. Fake: mean is [-1,-1] or [1,1]. Both add N(0, sigma^2 I)."""
    mu_real = rng.choice([-1.0, 1.0], size=(n, 2))
    mu_fake = np.repeat(rng.choice([-1.0, 1.0], size=(n, 1)), 2, axis=1)
    z_real = mu_real + sigma * rng.standard_normal((n, 2))
    z_fake = mu_fake + sigma * rng.standard_normal((n, 2))
    return mu_real, z_real, mu_fake, z_fake


def toy_log_ratio(z: np.ndarray, sigma: float) -> np.ndarray:
    """Exact log p_real(z) - log p_fake(z) for the toy mixtures."""
    def log_mix(mus):
        d2 = np.stack([np.sum((z - np.array(m)) ** 2, axis=1) for m in mus])
        return logsumexp(-d2 / (2 * sigma ** 2), axis=0) - math.log(len(mus))
    return log_mix([(-1, -1), (-1, 1), (1, -1), (1, 1)]) - log_mix([(-1, -1), (1, 1)])


def toy_avb_demo(sigma: float = 0.4, n: int = 2000, seed: int = 0, steps: int = 1500) -> dict:
    rng = np.random.default_rng(seed)
    mu_real, z_real, mu_fake, z_fake = toy_avb_samples(sigma, n, rng)
    kl_real = gaussian_kl_to_standard(mu_real, sigma)
    kl_fake = gaussian_kl_to_standard(mu_fake, sigma)
    half = n // 2
    score = train_binary_mlp(z_real[:half], z_fake[:half], steps=steps, seed=seed)
    held_real, held_fake = score(z_real[half:]), score(z_fake[half:])
    return {
        "sigma": sigma,
        "per_dim_kl_real": kl_real / 2,
        "per_dim_kl_fake": kl_fake / 2,
        "kl_difference": float(np.max(np.abs(np.sort(kl_real) - np.sort(kl_fake)))),
        "discriminator_auc": auc(held_real, held_fake),
        # ceiling for any discriminator: half the real mass sits on the fake clusters
        "bayes_auc": auc(toy_log_ratio(z_real[half:], sigma), toy_log_ratio(z_fake[half:], sigma)),
        "points": {"real": z_real, "fake": z_fake,
                   "score_real": score(z_real), "score_fake": score(z_fake)},
    }


def write_toy_csv(result: dict, path) -> None:
    pts = result["points"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "z1", "z2", "score", "kl"])
        for name, kl_key in (("real", "per_dim_kl_real"), ("fake", "per_dim_kl_fake")):
            for z, s, kl in zip(pts[name], pts["score_" + name], result[kl_key] * 2):
                w.writerow([name, f"{z[0]:.6f}", f"{z[1]:.6f}", f"{s:.6f}", f"{kl:.6f}"])


def toy_summary(result: dict) -> dict:
    return {k: v for k, v in result.items() if k not in ("points", "per_dim_kl_real", "per_dim_kl_fake")} | {
        "mean_kl_real": float(np.mean(result["per_dim_kl_real"] * 2)),
        "mean_kl_fake": float(np.mean(result["per_dim_kl_fake"] * 2)),
    }


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

import numpy as np
import pytest

from acvae import autodiff as ad


def numeric_grad(f, tensor, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``tensor``."""
    out = np.zeros_like(tensor.value)
    for idx in np.ndindex(tensor.shape):
        old = tensor.value[idx]
        tensor.value[idx] = old + h
        up = float(f())
        tensor.value[idx] = old - h
        down = float(f())
        tensor.value[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def recorded_grads(f, tensors):
    with ad.Tape() as tape:
        loss = f()
        tape.backward(loss, tensors)
    return [t.grad for t in tensors]


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def max_rel_err(f, tensors, h=1e-5):
    """Worst relative error between recorded and finite-difference gradients."""
    grads = recorded_grads(f, tensors)
    value = lambda: f().value  # noqa: E731
    return max(rel_err(g, numeric_grad(value, t, h)) for g, t in zip(grads, tensors))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def markov_dataset(n_users=20, n_items=10, length=12, seed=0, noise=0.0):
    """Users walk the cycle 1 -> 2 -> ... -> n_items -> 1 from random starts."""
    from acvae.data import SequenceDataset, UserSequence, Vocab, split_point

    r = np.random.default_rng(seed)
    seqs = []
    for u in range(n_users):
        cur = int(r.integers(n_items))
        items = []
        for _ in range(length):
            items.append(cur + 1)
            cur = int(r.integers(n_items)) if r.random() < noise else (cur + 1) % n_items
        seqs.append(UserSequence(u, items, split_point(length)))
    vocab = Vocab([f"i{k}" for k in range(1, n_items + 1)], [f"u{u}" for u in range(n_users)])
    return SequenceDataset(seqs, vocab)


def small_run_config(**train):
    from acvae.config import ModelConfig, RunConfig, TrainConfig

    model = ModelConfig(embed_dim=8, hidden_dim=8, latent_dim=4, max_len=12, disc_hidden=8)
    opts = dict(epochs=2, batch_size=4, seed=0)
    opts.update(train)
    return RunConfig(model, TrainConfig(**opts))


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for status in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            label = {"passed": "PASS", "failed": "FAIL", "skipped": "BLOCKED"}[status]
            if status == "skipped" and isinstance(rep.longrepr, tuple):
                label = rep.longrepr[2].removeprefix("Skipped: ")
            verdicts[nodeid.split("::")[1]] = label
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for name in sorted(verdicts, key=lambda n: int(n.split("_")[2])):
            terminalreporter.write_line(f"{name}: {verdicts[name]}")

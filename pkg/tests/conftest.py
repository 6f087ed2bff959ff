import numpy as np
import pytest

from fedlora_sim.config import from_dict
from fedlora_sim.model import ModelConfig, init_model
from fedlora_sim.numerics import RngStream


def tiny_config(l=2, d_model=8, r=1, **kw):
    base = dict(l=l, d_model=d_model, n_heads=2, d_ff=2 * d_model, r=r, alpha=2.0 * r,
                dropout_p=0.0, n_classes=3, seq_len=4, vocab=7)
    base.update(kw)
    return ModelConfig(**base)


def randomize_adapters(params, seed=1, std=0.3):
    """Non-zero B and A so every adapter coordinate carries gradient."""
    g = np.random.default_rng(seed)
    for group in params.lora:
        for k in group:
            group[k] = g.normal(0.0, std, group[k].shape)
    params.touch()
    return params


def toy_batch(cfg, n=5, seed=2):
    g = np.random.default_rng(seed)
    return g.integers(0, cfg.vocab, (n, cfg.seq_len)), g.integers(0, cfg.n_classes, n)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    base, params = init_model(cfg, RngStream(0, "init"))
    return cfg, base, params


def small_experiment(**overrides):
    """A federated run small enough for unit tests (well under a second per round)."""
    raw = {
        "model": dict(l=4, d_model=8, n_heads=2, d_ff=16, r=1, alpha=2.0, dropout_p=0.0,
                      n_classes=4, seq_len=6, vocab=10),
        "federation": dict(n=6, s=3, T=3, tau=1, batch_size=8, lr=0.01, weight_decay=0.0),
        "schedule": dict(strategy="CoDesign", T_RGD=1, T_FIM=2),
        "capability": dict(levels=[2, 3, 4], ratios=[0.5, 0.3, 0.2]),
        "partition": dict(mode="IID"),
        "proxy": dict(size=10),
        "data": dict(n_train=120, n_test=60, separation=1.0),
        "seeds": [0],
    }
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        raw[section][key] = value
    return from_dict(raw).validate()


def gradient_check(cfg, seed=0, h=1e-5, mask=None):
    """Worst relative error between backward() and central differences over every trainable coordinate."""
    from fedlora_sim.model import backward, forward
    from fedlora_sim.numerics import finite_diff_grad

    base, params = init_model(cfg, RngStream(seed, "init"))
    randomize_adapters(params, seed + 1)
    x, y = toy_batch(cfg, seed=seed + 2)
    mask = [1] * cfg.l if mask is None else mask
    res = forward(base, params, mask, x, y)
    grads = backward(base, params, res.cache, mask)
    worst = 0.0
    checked = 0
    for (name, tensor), (_, g) in zip(params.named_tensors(), grads.named_tensors()):
        if name.startswith("lora.") and not mask[int(name.split(".")[1])]:
            continue

        def loss_at(v, t=tensor):
            saved = t.copy()
            t[...] = v.reshape(t.shape)
            out = forward(base, params, mask, x, y).loss
            t[...] = saved
            return out

        fd = finite_diff_grad(loss_at, tensor.ravel().copy(), h)
        rel = np.abs(fd - g.ravel()) / np.maximum(np.abs(g.ravel()), 1e-8)
        worst = max(worst, float(rel.max()))
        checked += g.size
    return worst, checked


def train_locally(sim, theta, t, i):
    """Replay one client's local training on all adapters, returning its final parameters."""
    from fedlora_sim.model import OptimizerState, adamw_step, backward, forward

    fc = sim.config.federation
    ones = np.ones(sim.config.model.l, dtype=np.int8)
    data = sim.clients[i]
    local = theta.copy()
    opt = OptimizerState(fc.lr, fc.beta1, fc.beta2, fc.eps, fc.weight_decay)
    stream = RngStream(sim.seed, f"local/{t}/{i}")
    shuffle_rng, dropout_rng = stream.child("shuffle"), stream.child("dropout")
    for _ in range(fc.tau):
        order = shuffle_rng.generator.permutation(len(data))
        for start in range(0, len(data), fc.batch_size):
            idx = order[start:start + fc.batch_size]
            res = forward(sim.base, local, ones, data.x[idx], data.y[idx], train=True, rng=dropout_rng)
            adamw_step(local, backward(sim.base, local, res.cache, ones), opt, ones)
    return local


def fedavg_reference(config, seed, rounds):
    """Plain FedAvg written directly against the model primitives.

    Every sampled client trains all adapters; the server adds the mean of
    the client differences in ascending client order. Shares only data
    construction and random stream names with the simulator.
    """
    from fedlora_sim.federation import build_simulation

    sim, state = build_simulation(config, seed)
    fc = config.federation
    theta = state.params.copy()
    for t in range(rounds):
        chosen = RngStream(seed, f"client-sample/{t}").generator.choice(fc.n, size=fc.s, replace=False)
        diffs = []
        for i in sorted(int(c) for c in chosen):
            local = train_locally(sim, theta, t, i)
            diffs.append([a - b for (_, a), (_, b) in zip(local.named_tensors(), theta.named_tensors())])
        new = theta.copy()
        for pos, (_, tensor) in enumerate(new.named_tensors()):
            total = np.zeros_like(tensor)
            for d in diffs:
                total += d[pos]
            tensor[...] = tensor + total / len(diffs)
        theta = new
    return theta


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

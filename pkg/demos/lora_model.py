"""
A toy transformer with rank-r adapters
======================================

Frozen random base weights, trainable low-rank adapters on the query and
value projections, and a classifier head. Gradients are computed by hand;
here we check them against finite differences and take a few AdamW steps.
"""
import numpy as np

from fedlora_sim.data import generate_synthetic
from fedlora_sim.model import (
    ModelConfig,
    OptimizerState,
    adamw_step,
    backward,
    effective_weight,
    forward,
    init_model,
)
from fedlora_sim.numerics import RngStream, finite_diff_grad

cfg = ModelConfig(l=2, d_model=16, n_heads=2, d_ff=32, r=2, alpha=4.0, dropout_p=0.0,
                  n_classes=4, seq_len=6, vocab=12)
base, params = init_model(cfg, RngStream(0, "init"))

# B starts at zero, so the adapted weight equals the frozen one.
W = effective_weight(base.layers[0]["Wq"], params.lora[0]["A_q"], params.lora[0]["B_q"], cfg.alpha, cfg.r)
print("adapter is neutral at init:", np.array_equal(W, base.layers[0]["Wq"]))

train, _ = generate_synthetic(4, 6, 12, 64, 8, RngStream(0, "data"), separation=2.0)

# Give the adapters some weight so every coordinate has a gradient, then compare.
params.lora[0]["B_v"][:] = np.random.default_rng(1).normal(0, 0.3, size=params.lora[0]["B_v"].shape)
res = forward(base, params, None, train.x[:4], train.y[:4])
grads = backward(base, params, res.cache)
t = params.lora[0]["A_v"]


def loss_at(v):
    saved = t.copy()
    t[...] = v.reshape(t.shape)
    out = forward(base, params, None, train.x[:4], train.y[:4]).loss
    t[...] = saved
    return out


fd = finite_diff_grad(loss_at, t.ravel().copy())
print("max |analytic - numeric| on A_v:", float(np.max(np.abs(fd - grads.lora[0]["A_v"].ravel()))))

# Full-batch AdamW on the adapters and head.
state = OptimizerState(lr=1e-2, weight_decay=0.0)
for step in range(51):
    res = forward(base, params, None, train.x, train.y)
    if step % 10 == 0:
        print(f"step {step:2d}  loss {res.loss:.4f}")
    adamw_step(params, backward(base, params, res.cache), state)

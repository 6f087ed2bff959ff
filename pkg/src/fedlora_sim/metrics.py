"""Evaluation and analytic cost estimates.

Cost figures follow the big-O expressions for local backward work and
per-round traffic with every hidden constant set to 1, so only ratios
between strategies are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StateError
from .model import forward


@dataclass(frozen=True)
class CostModelInputs:
    tau: float
    l: int
    d: float  # frozen parameters per transformer layer
    R: float  # LoRA parameters per layer group
    N: float  # local samples per client per round
    s: float
    c_bar: float  # mean trainable layers per selected client
    N_FIM: float = 0.0
    T_FIM: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        for name in ("tau", "l", "d", "R", "N", "s", "c_bar", "T_FIM", "T"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"cost input {name} must be positive")
        if self.N_FIM < 0:
            raise ParameterError("cost input N_FIM must be >= 0")
        if self.c_bar > self.l:
            raise ParameterError("c_bar cannot exceed l")


def backward_cost(inp: CostModelInputs) -> dict[str, float]:
    """Local forward/backward work per round for full training and for partial layers."""
    per_layer = inp.tau * (inp.d + inp.R) ** 2 * inp.N * inp.s
    full = per_layer * inp.l
    ours = per_layer * inp.c_bar
    return {"full": full, "ours": ours, "ratio": ours / full}


def backward_cost_per_client(tau, d, R, l, capabilities, sample_counts) -> dict[str, float]:
    """Same estimate summed client by client instead of through the fleet mean."""
    caps = np.asarray(capabilities, dtype=np.float64)
    ns = np.asarray(sample_counts, dtype=np.float64)
    per = tau * (d + R) ** 2 * ns
    ours = float(np.sum(per * caps))
    full = float(np.sum(per * l))
    return {"full": full, "ours": ours, "ratio": ours / full if full else float("nan")}


def fim_overhead(inp: CostModelInputs) -> float:
    """Amortized server cost of periodic score refreshes (gradient pass + norms)."""
    frac = inp.T_FIM / inp.T
    return inp.l * (inp.d + inp.R) ** 2 * inp.N_FIM * frac + inp.R**2 * frac


def comm_cost(inp: CostModelInputs) -> dict[str, float]:
    """Parameters moved per round; the map term amortizes allocation-map traffic."""
    full = 2.0 * inp.l * inp.R * inp.s
    map_term = inp.l * inp.s * inp.T_FIM / inp.T
    ours = 2.0 * inp.c_bar * inp.R * inp.s + map_term
    return {"full": full, "ours": ours, "map_term": map_term, "ratio": ours / full}


def memory_proxy(cfg, mask, batch_size: int) -> dict[str, int]:
    """Trainable-parameter count and adapter activation slots for one client.

    Each trained layer keeps the adapter inputs and the rank-r intermediates
    of its two adapters for every token in the batch.
    """
    m = np.asarray(mask, dtype=np.int64)
    trained = int(m.sum())
    params = trained * cfg.lora_params_per_layer + cfg.head_params
    slots = trained * 2 * batch_size * cfg.seq_len * (cfg.d_model + cfg.r)
    return {"trainable_params": params, "activation_slots": slots}


@dataclass(frozen=True)
class EvalReport:
    round: int
    accuracy: float
    loss: float


def evaluate(base, params, test, *, round_index: int = -1, proxy=None, batch_size: int = 256) -> EvalReport:
    """Top-1 accuracy and mean cross-entropy over the whole test set."""
    if test is None or len(test) == 0:
        raise ParameterError("evaluation needs a non-empty test set")
    if proxy is not None and np.intersect1d(proxy.ids, test.ids).size:
        raise StateError("proxy samples leaked into the evaluation set")
    frozen = np.zeros(base.cfg.l, dtype=np.int8)
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(test), batch_size):
        xb = test.x[start:start + batch_size]
        yb = test.y[start:start + batch_size]
        res = forward(base, params, frozen, xb, yb)
        correct += int(np.count_nonzero(np.argmax(res.logits, axis=1) == yb))
        loss_sum += res.loss * len(yb)
    return EvalReport(round_index, correct / len(test), loss_sum / len(test))

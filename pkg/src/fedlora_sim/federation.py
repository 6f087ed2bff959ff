"""Server loop: client sampling, masked local training, masked aggregation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .allocation import AllocatorState, allocate_round
from .config import ExperimentConfig, FederationConfig
from .data import Dataset, ProxySpec, extract_proxy, generate_synthetic, partition
from .errors import ParameterError
from .metrics import (
    CostModelInputs,
    EvalReport,
    backward_cost_per_client,
    comm_cost,
    evaluate,
    memory_proxy,
)
from .model import (
    LORA_KEYS,
    Delta,
    FrozenBase,
    OptimizerState,
    TrainableParams,
    adamw_step,
    backward,
    flatten_delta,
    forward,
    init_model,
)
from .numerics import RngStream

log = logging.getLogger(__name__)


def sample_clients(n: int, s: int, rng: RngStream) -> list[int]:
    """Uniform size-``s`` subset of ``range(n)``, sorted ascending."""
    if not 1 <= s <= n:
        raise ParameterError(f"cannot sample {s} of {n} clients")
    return sorted(int(i) for i in rng.generator.choice(n, size=s, replace=False))


@dataclass
class ClientUpdate:
    client_id: int
    map: np.ndarray
    delta: Delta
    sample_count: int
    train_loss: float
    steps: int


def local_update(
    theta_g: TrainableParams,
    base: FrozenBase,
    mask,
    data: Dataset,
    cfg: FederationConfig,
    rng: RngStream,
    client_id: int = -1,
) -> ClientUpdate | None:
    """Train a private copy of ``theta_g`` with layers outside ``mask`` frozen.

    Runs ``cfg.tau`` shuffled epochs of AdamW (capped at ``cfg.max_steps``
    steps when set) and returns the difference to ``theta_g``. Optimizer
    state lives only for this call. Returns None for an empty dataset.
    """
    mask = np.asarray(mask, dtype=np.int8)
    if mask.size != base.cfg.l:
        raise ParameterError(f"map has length {mask.size}, model has {base.cfg.l} layers")
    if data is None or len(data) == 0:
        log.warning("client %s has no local data; skipped", client_id)
        return None
    params = theta_g.copy()
    opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    shuffle_rng = rng.child("shuffle")
    dropout_rng = rng.child("dropout")
    steps = 0
    losses = []
    limit = cfg.max_steps
    for _ in range(cfg.tau):
        order = shuffle_rng.generator.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            if limit is not None and steps >= limit:
                break
            idx = order[start:start + cfg.batch_size]
            res = forward(base, params, mask, data.x[idx], data.y[idx], train=True, rng=dropout_rng)
            grads = backward(base, params, res.cache, mask)
            adamw_step(params, grads, opt, mask)
            losses.append(res.loss)
            steps += 1
    delta = flatten_delta(theta_g, params)
    return ClientUpdate(
        client_id, mask.copy(), delta, len(data),
        float(np.mean(losses)) if losses else float("nan"), steps,
    )


def aggregate(updates: list[ClientUpdate], l: int) -> Delta | None:
    """Per-layer mean over the clients that trained the layer.

    Clients are reduced in ascending id order. A layer nobody trained gets
    an exact-zero delta; the head is averaged over every participant.
    Returns None when there are no updates.
    """
    if not updates:
        log.warning("no client updates this round; aggregation skipped")
        return None
    ups = sorted(updates, key=lambda u: u.client_id)
    ref = ups[0].delta
    layers = []
    for j in range(l):
        acc = {k: np.zeros_like(ref.layers[j][k]) for k in LORA_KEYS}
        count = 0
        for u in ups:
            if u.map[j]:
                for k in LORA_KEYS:
                    acc[k] += u.delta.layers[j][k]
                count += 1
        if count:
            for k in LORA_KEYS:
                acc[k] /= count
        layers.append(acc)
    head = {k: np.zeros_like(v) for k, v in ref.head.items()}
    for u in ups:
        for k in head:
            head[k] += u.delta.head[k]
    for k in head:
        head[k] /= len(ups)
    return Delta(layers, head)


@dataclass
class RoundRecord:
    round: int
    strategy: str
    seed: int
    selected: list[int]
    maps: dict[int, np.ndarray | None]
    layer_probs: np.ndarray
    delta_norms: np.ndarray
    head_delta_norm: float
    train_loss: float
    accuracy: float
    loss: float
    fim_refreshed: bool
    costs: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


@dataclass
class GlobalState:
    round: int
    params: TrainableParams
    base: FrozenBase
    alloc: AllocatorState = field(default_factory=AllocatorState)


@dataclass
class Simulation:
    """Everything a run needs besides the evolving global state."""

    config: ExperimentConfig
    seed: int
    base: FrozenBase
    clients: dict[int, Dataset]
    capabilities: dict[int, int]
    test: Dataset
    proxy: Dataset
    strategy_label: str = ""

    def __post_init__(self):
        if not self.strategy_label:
            sc = self.config.schedule
            self.strategy_label = f"GD-{sc.base_pattern}" if sc.strategy == "GD" else sc.strategy

    def stream(self, name: str) -> RngStream:
        return RngStream(self.seed, name)


def build_simulation(config: ExperimentConfig, seed: int) -> tuple[Simulation, GlobalState]:
    """Data, partition, proxy, capabilities and initial model for one seed."""
    mc, dc = config.model, config.data
    train, test = generate_synthetic(
        mc.n_classes, mc.seq_len, mc.vocab, dc.n_train, dc.n_test, RngStream(seed, "data"),
        kind=dc.kind, separation=dc.separation, motif_len=dc.motif_len, noise=dc.noise,
    )
    proxy, test = extract_proxy(test, ProxySpec(config.proxy.size), RngStream(seed, "proxy"))
    clients = partition(train, config.partition_spec, RngStream(seed, "partition"))
    caps = config.profile.population(config.federation.n)
    order = RngStream(seed, "capability").generator.permutation(len(caps))
    capabilities = {i: int(caps[order[i]]) for i in range(config.federation.n)}
    base, params = init_model(mc, RngStream(seed, "init"))
    sim = Simulation(config, seed, base, clients, capabilities, test, proxy)
    return sim, GlobalState(0, params, base)


def _norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(x, x)))


def run_round(sim: Simulation, state: GlobalState) -> tuple[GlobalState, RoundRecord, list[ClientUpdate]]:
    """Sample, allocate, train locally, aggregate, apply, evaluate."""
    cfg = sim.config
    fc = cfg.federation
    l = cfg.model.l
    t = state.round
    notes = []

    selected = sample_clients(fc.n, fc.s, sim.stream(f"client-sample/{t}"))
    maps, state.alloc = allocate_round(
        t, cfg.schedule, cfg.profile, {i: sim.capabilities[i] for i in selected}, l,
        sim.stream(f"alloc-sample/{t}"),
        model=(state.base, state.params), proxy=sim.proxy,
        population=fc.n, state=state.alloc,
    )

    updates = []
    for i in selected:
        if maps[i] is None:
            continue
        up = local_update(state.params, state.base, maps[i], sim.clients[i], fc,
                          sim.stream(f"local/{t}/{i}"), client_id=i)
        if up is None:
            notes.append(f"client {i} skipped: empty dataset")
            continue
        updates.append(up)

    delta = aggregate(updates, l)
    if delta is None:
        notes.append("no participating clients; global model unchanged")
        norms = np.zeros(l)
        head_norm = 0.0
        new_params = state.params
    else:
        norms = np.array([_norm(delta.layer_vector(j)) for j in range(l)])
        head_norm = _norm(delta.head_vector())
        new_params = delta.apply_to(state.params)
    for msg in notes:
        log.warning("round %d: %s", t, msg)

    last = t == fc.T - 1
    if (t + 1) % fc.eval_every == 0 or last:
        rep = evaluate(state.base, new_params, sim.test, round_index=t, proxy=sim.proxy)
    else:
        rep = EvalReport(t, float("nan"), float("nan"))

    costs = round_costs(sim, updates)
    record = RoundRecord(
        round=t,
        strategy=sim.strategy_label,
        seed=sim.seed,
        selected=selected,
        maps={i: maps[i] for i in selected},
        layer_probs=np.asarray(state.alloc.probs, dtype=np.float64),
        delta_norms=norms,
        head_delta_norm=head_norm,
        train_loss=float(np.mean([u.train_loss for u in updates])) if updates else float("nan"),
        accuracy=rep.accuracy,
        loss=rep.loss,
        fim_refreshed=state.alloc.refreshed,
        costs=costs,
        notes=notes,
    )
    return GlobalState(t + 1, new_params, state.base, state.alloc), record, updates


def round_costs(sim: Simulation, updates: list[ClientUpdate]) -> dict[str, float]:
    cfg = sim.config
    mc, fc = cfg.model, cfg.federation
    keys = ("backward_ours", "backward_full", "comm_ours", "comm_full",
            "mem_trainable_params", "mem_activation_slots")
    if not updates:
        return dict.fromkeys(keys, 0.0)
    caps = [int(u.map.sum()) for u in updates]
    ns = [u.sample_count for u in updates]
    d, R = mc.frozen_params_per_layer, mc.lora_params_per_layer
    bw = backward_cost_per_client(fc.tau, d, R, mc.l, caps, ns)
    inputs = CostModelInputs(
        tau=fc.tau, l=mc.l, d=d, R=R, N=float(np.mean(ns)), s=len(updates),
        c_bar=max(float(np.mean(caps)), 1e-12), N_FIM=cfg.proxy.size,
        T_FIM=cfg.schedule.T_FIM, T=max(fc.T, 1),
    )
    cc = comm_cost(inputs)
    mem = [memory_proxy(mc, u.map, fc.batch_size) for u in updates]
    return {
        "backward_ours": bw["ours"],
        "backward_full": bw["full"],
        "comm_ours": cc["ours"],
        "comm_full": cc["full"],
        "mem_trainable_params": float(np.mean([m["trainable_params"] for m in mem])),
        "mem_activation_slots": float(np.mean([m["activation_slots"] for m in mem])),
    }


@dataclass
class ExperimentResult:
    state: GlobalState
    records: list[RoundRecord]
    simulation: Simulation


def run_experiment(config: ExperimentConfig, seed: int | None = None, on_round=None) -> ExperimentResult:
    """Run ``config.federation.T`` rounds for one seed (default: first configured seed).

    ``on_round(record, state)`` is called after every round with the new state.
    """
    config.validate()
    seed = config.seeds[0] if seed is None else int(seed)
    sim, state = build_simulation(config, seed)
    if config.schedule.strategy == "Exclusive" and max(sim.capabilities.values()) < config.model.l:
        log.warning("Exclusive learning: no client can train all %d layers; nothing will train",
                    config.model.l)
    records = []
    for _ in range(config.federation.T):
        state, rec, _ = run_round(sim, state)
        records.append(rec)
        if on_round is not None:
            on_round(rec, state)
    return ExperimentResult(state, records, sim)

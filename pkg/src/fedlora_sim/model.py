"""Tiny pre-LN transformer-encoder classifier with LoRA on query/value.

Forward and backward passes are written out by hand in numpy. The frozen
base is shared by every client; each client trains a private copy of the
LoRA adapters and the classifier head. One "LoRA layer" is the q/v adapter
pair of one transformer block, and the allocation mask toggles both.

Convention: projections act on row vectors, ``y = x @ W`` with ``W`` shaped
``(d_in, d_out)``. The low-rank update is ``(alpha / r) * B @ A`` with ``B``
shaped ``(d_model, r)`` and ``A`` shaped ``(r, d_model)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, StateError
from .numerics import RngStream, matmul

LORA_KEYS = ("A_q", "B_q", "A_v", "B_v")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_version_counter = itertools.count(1)


@dataclass(frozen=True)
class ModelConfig:
    l: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    r: int = 16
    alpha: float = 16.0
    dropout_p: float = 0.1
    n_classes: int = 10
    seq_len: int = 16
    vocab: int = 64
    continuous: bool = False  # inputs are (seq_len, vocab) float features, not token ids

    def problems(self) -> list[str]:
        out = []
        for name in ("l", "d_model", "n_heads", "d_ff", "r", "n_classes", "seq_len", "vocab"):
            if int(getattr(self, name)) < 1:
                out.append(f"model.{name} must be >= 1")
        if self.d_model % max(self.n_heads, 1):
            out.append("model.d_model must be divisible by model.n_heads")
        if self.r > self.d_model / 2:
            out.append("model.r must be <= d_model / 2")
        if not 0 <= self.dropout_p < 1:
            out.append("model.dropout_p must lie in [0, 1)")
        if self.alpha <= 0:
            out.append("model.alpha must be > 0")
        if self.n_classes < 2:
            out.append("model.n_classes must be >= 2")
        return out

    def validate(self) -> "ModelConfig":
        bad = self.problems()
        if bad:
            raise ParameterError("; ".join(bad))
        return self

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def frozen_params_per_layer(self) -> int:
        d, f = self.d_model, self.d_ff
        return 4 * d * d + 2 * d * f + f + d + 4 * d

    @property
    def lora_params_per_layer(self) -> int:
        return 4 * self.d_model * self.r

    @property
    def head_params(self) -> int:
        return self.d_model * self.n_classes + self.n_classes


@dataclass
class FrozenBase:
    cfg: ModelConfig
    embed: np.ndarray
    pos: np.ndarray
    layers: list[dict[str, np.ndarray]]
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray


@dataclass
class TrainableParams:
    lora: list[dict[str, np.ndarray]]
    head: dict[str, np.ndarray]
    version: int = field(default_factory=lambda: next(_version_counter))

    @property
    def n_layers(self) -> int:
        return len(self.lora)

    def copy(self) -> "TrainableParams":
        return TrainableParams(
            lora=[{k: v.copy() for k, v in g.items()} for g in self.lora],
            head={k: v.copy() for k, v in self.head.items()},
        )

    def touch(self) -> None:
        """Mark the parameters as modified; outstanding forward caches become stale."""
        self.version = next(_version_counter)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for j, group in enumerate(self.lora):
            for k in LORA_KEYS:
                out.append((f"lora.{j}.{k}", group[k]))
        out.append(("head.W", self.head["W"]))
        out.append(("head.b", self.head["b"]))
        return out

    def zeros_like(self) -> "TrainableParams":
        return TrainableParams(
            lora=[{k: np.zeros_like(v) for k, v in g.items()} for g in self.lora],
            head={k: np.zeros_like(v) for k, v in self.head.items()},
        )

    def layer_vector(self, j: int) -> np.ndarray:
        return np.concatenate([self.lora[j][k].ravel() for k in LORA_KEYS])

    def head_vector(self) -> np.ndarray:
        return np.concatenate([self.head["W"].ravel(), self.head["b"].ravel()])


def _normal(rng: RngStream, shape, std):
    return rng.generator.normal(0.0, std, size=shape)


def init_model(cfg: ModelConfig, rng: RngStream) -> tuple[FrozenBase, TrainableParams]:
    """Random "pre-trained" base plus fresh adapters (B = 0, A ~ N(0, 0.02^2))."""
    cfg.validate()
    d, f = cfg.d_model, cfg.d_ff
    base_rng = rng.child("base")
    embed = _normal(base_rng, (cfg.vocab, d), 1.0 if not cfg.continuous else 1.0 / math.sqrt(cfg.vocab))
    pos = _normal(base_rng, (cfg.seq_len, d), 0.5)
    layers = []
    for _ in range(cfg.l):
        layers.append(
            {
                "Wq": _normal(base_rng, (d, d), 1.0 / math.sqrt(d)),
                "Wk": _normal(base_rng, (d, d), 1.0 / math.sqrt(d)),
                "Wv": _normal(base_rng, (d, d), 1.0 / math.sqrt(d)),
                "Wo": _normal(base_rng, (d, d), 1.0 / math.sqrt(d)),
                "W1": _normal(base_rng, (d, f), 1.0 / math.sqrt(d)),
                "b1": np.zeros(f),
                "W2": _normal(base_rng, (f, d), 1.0 / math.sqrt(f)),
                "b2": np.zeros(d),
                "ln1_g": np.ones(d),
                "ln1_b": np.zeros(d),
                "ln2_g": np.ones(d),
                "ln2_b": np.zeros(d),
            }
        )
    base = FrozenBase(cfg, embed, pos, layers, np.ones(d), np.zeros(d))

    lora_rng = rng.child("lora")
    lora = []
    for _ in range(cfg.l):
        lora.append(
            {
                "A_q": _normal(lora_rng, (cfg.r, d), 0.02),
                "B_q": np.zeros((d, cfg.r)),
                "A_v": _normal(lora_rng, (cfg.r, d), 0.02),
                "B_v": np.zeros((d, cfg.r)),
            }
        )
    head = {"W": _normal(rng.child("head"), (d, cfg.n_classes), 0.02), "b": np.zeros(cfg.n_classes)}
    return base, TrainableParams(lora, head)


def effective_weight(W0: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float, r: int) -> np.ndarray:
    if B.shape[1] != r or A.shape[0] != r:
        raise ShapeError(f"adapter rank mismatch: B {B.shape}, A {A.shape}, r={r}")
    delta = matmul(B, A)
    if delta.shape != W0.shape:
        raise ShapeError(f"B @ A has shape {delta.shape}, W0 has {W0.shape}")
    return W0 + (alpha / r) * delta


# --- building blocks -------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_back(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _gelu(z):
    t = np.tanh(_GELU_C * (z + 0.044715 * z**3))
    return 0.5 * z * (1.0 + t), t


def _gelu_back(dy, z, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return dy * (0.5 * (1.0 + t) + 0.5 * z * dt)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, h):
    bsz, L, d = x.shape
    return x.reshape(bsz, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    bsz, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(bsz, L, h * dh)


def _as_mask(mask, l):
    if mask is None:
        return np.ones(l, dtype=np.int8)
    m = np.asarray(getattr(mask, "bits", mask), dtype=np.int8).ravel()
    if m.size != l:
        raise ShapeError(f"mask has length {m.size}, model has {l} layers")
    return m


@dataclass
class ForwardCache:
    params_id: int
    params_version: int
    mask: np.ndarray
    x_tokens: np.ndarray
    y: np.ndarray
    layers: list
    ln_f: tuple
    pooled: np.ndarray
    probs: np.ndarray
    consumed: bool = False


@dataclass
class ForwardResult:
    logits: np.ndarray
    loss: float
    cache: ForwardCache


def _embed(base: FrozenBase, x):
    cfg = base.cfg
    if cfg.continuous:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.vocab):
            raise ShapeError(f"continuous inputs must be (batch, {cfg.seq_len}, {cfg.vocab}), got {x.shape}")
        return x @ base.embed + base.pos
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.seq_len:
        raise ShapeError(f"token inputs must be (batch, {cfg.seq_len}), got {x.shape}")
    if x.size and (x.min() < 0 or x.max() >= cfg.vocab):
        raise ParameterError(f"token ids must lie in [0, {cfg.vocab})")
    return base.embed[x] + base.pos


def forward(
    base: FrozenBase,
    params: TrainableParams,
    mask,
    x,
    y,
    *,
    train: bool = False,
    rng: RngStream | None = None,
) -> ForwardResult:
    """Mean cross-entropy forward pass.

    Adapter intermediates are cached only for layers whose mask bit is 1;
    frozen layers keep just what is needed to pass gradients through them.
    Dropout on the adapter input is applied when ``train`` is set and an
    ``rng`` is supplied.
    """
    cfg = base.cfg
    m = _as_mask(mask, cfg.l)
    y = np.asarray(y, dtype=np.int64)
    s = cfg.scaling
    H = cfg.n_heads
    dh = cfg.d_model // H
    use_dropout = train and cfg.dropout_p > 0 and rng is not None

    x = _embed(base, x)
    bsz, L, d = x.shape
    layer_caches = []
    for j in range(cfg.l):
        W = base.layers[j]
        P = params.lora[j]
        h, ln1 = _layernorm(x, W["ln1_g"], W["ln1_b"])
        if use_dropout:
            keep = (rng.generator.random(h.shape) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
            hd = h * keep
        else:
            keep = None
            hd = h
        uq = hd @ P["B_q"]
        uv = hd @ P["B_v"]
        q = h @ W["Wq"] + s * (uq @ P["A_q"])
        v = h @ W["Wv"] + s * (uv @ P["A_v"])
        k = h @ W["Wk"]
        qh, kh, vh = _split_heads(q, H), _split_heads(k, H), _split_heads(v, H)
        att = _softmax(qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh))
        ctx = _merge_heads(att @ vh)
        x1 = x + ctx @ W["Wo"]
        h2, ln2 = _layernorm(x1, W["ln2_g"], W["ln2_b"])
        z = h2 @ W["W1"] + W["b1"]
        a, t = _gelu(z)
        x = x1 + a @ W["W2"] + W["b2"]
        lc = {
            "ln1": ln1, "keep": keep, "qh": qh, "kh": kh, "vh": vh, "att": att,
            "ctx": ctx, "ln2": ln2, "h2": h2, "z": z, "t": t, "a": a,
        }
        if m[j]:
            lc["hd"] = hd
            lc["uq"] = uq
            lc["uv"] = uv
        layer_caches.append(lc)

    hf, ln_f = _layernorm(x, base.ln_f_g, base.ln_f_b)
    pooled = hf.mean(axis=1)
    if y.shape != (bsz,):
        raise ShapeError(f"labels must have shape ({bsz},), got {y.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        logits = pooled @ params.head["W"] + params.head["b"]
        probs = _softmax(logits)
        picked = probs[np.arange(bsz), y]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    if not np.isfinite(loss) or not np.all(np.isfinite(logits)):
        finite = np.abs(logits[np.isfinite(logits)])
        biggest = f"{finite.max():.3g}" if finite.size else "none finite"
        raise NumericError(
            f"non-finite loss {loss}; max finite |logit| = {biggest}, "
            f"max |pooled| = {np.abs(pooled).max():.3g}"
        )
    cache = ForwardCache(
        id(params), params.version, m, x, y, layer_caches, ln_f, pooled, probs
    )
    return ForwardResult(logits, loss, cache)


def backward(base: FrozenBase, params: TrainableParams, cache: ForwardCache, mask=None) -> TrainableParams:
    """Gradients of the mean loss w.r.t. the head and the masked-in adapters.

    Layers with mask bit 0 get exact-zero gradient tensors and no parameter
    gradient is computed for them; backpropagation stops below the lowest
    masked-in layer.
    """
    cfg = base.cfg
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StateError("forward cache is stale: parameters changed since forward()")
    m = cache.mask if mask is None else _as_mask(mask, cfg.l)
    for j in np.flatnonzero(m):
        if "uq" not in cache.layers[j]:
            raise StateError(f"layer {j} was frozen during forward(); cannot differentiate it")
    s = cfg.scaling
    H = cfg.n_heads
    dh = cfg.d_model // H
    grads = params.zeros_like()

    bsz = cache.y.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(bsz), cache.y] -= 1.0
    dlogits /= bsz
    grads.head["W"] = cache.pooled.T @ dlogits
    grads.head["b"] = dlogits.sum(axis=0)

    active = np.flatnonzero(m)
    if active.size == 0:
        return grads
    lowest = int(active[0])

    L = cfg.seq_len
    dpooled = dlogits @ params.head["W"].T
    dhf = np.repeat(dpooled[:, None, :] / L, L, axis=1)
    dx = _layernorm_back(dhf, cache.ln_f)

    for j in range(cfg.l - 1, lowest - 1, -1):
        W = base.layers[j]
        P = params.lora[j]
        c = cache.layers[j]
        # feed-forward branch
        da = dx @ W["W2"].T
        dz = _gelu_back(da, c["z"], c["t"])
        dx1 = dx + _layernorm_back(dz @ W["W1"].T, c["ln2"])
        # attention branch
        dctx = _split_heads(dx1 @ W["Wo"].T, H)
        att = c["att"]
        datt = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dctx
        dscore = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dqh = dscore @ c["kh"]
        dkh = dscore.transpose(0, 1, 3, 2) @ c["qh"]
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)

        duq = s * (dq @ P["A_q"].T)
        duv = s * (dv @ P["A_v"].T)
        if m[j]:
            g = grads.lora[j]
            d = cfg.d_model
            r = cfg.r
            g["A_q"] = s * (c["uq"].reshape(-1, r).T @ dq.reshape(-1, d))
            g["A_v"] = s * (c["uv"].reshape(-1, r).T @ dv.reshape(-1, d))
            hd2 = c["hd"].reshape(-1, d)
            g["B_q"] = hd2.T @ duq.reshape(-1, r)
            g["B_v"] = hd2.T @ duv.reshape(-1, r)
        if j == lowest:
            break
        dhd = duq @ P["B_q"].T + duv @ P["B_v"].T
        if c["keep"] is not None:
            dhd = dhd * c["keep"]
        dh_ = dq @ W["Wq"].T + dk @ W["Wk"].T + dv @ W["Wv"].T + dhd
        dx = dx1 + _layernorm_back(dh_, c["ln1"])

    for _, gt in grads.named_tensors():
        if not np.all(np.isfinite(gt)):
            raise NumericError("non-finite gradient")
    return grads


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _eligible(name: str, mask) -> bool:
    if name.startswith("head."):
        return True
    return bool(mask[int(name.split(".")[1])])


def adamw_step(params: TrainableParams, grads: TrainableParams, state: OptimizerState, mask=None) -> TrainableParams:
    """One AdamW step (bias-corrected, decoupled decay) on head + masked-in adapters, in place."""
    m_bits = _as_mask(mask, params.n_layers)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for (name, p), (gname, g) in zip(params.named_tensors(), grads.named_tensors()):
        if name != gname or p.shape != g.shape:
            raise ShapeError(f"gradient {gname}{g.shape} does not match parameter {name}{p.shape}")
        if not _eligible(name, m_bits):
            continue
        mt = state.m.get(name)
        if mt is None:
            mt = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        vt = state.v[name]
        mt *= b1
        mt += (1.0 - b1) * g
        vt *= b2
        vt += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (mt / bc1) / (np.sqrt(vt / bc2) + state.eps)
    params.touch()
    return params


# --- deltas ----------------------------------------------------------------

@dataclass
class Delta:
    layers: list[dict[str, np.ndarray]]
    head: dict[str, np.ndarray]

    def layer_vector(self, j: int) -> np.ndarray:
        return np.concatenate([self.layers[j][k].ravel() for k in LORA_KEYS])

    def head_vector(self) -> np.ndarray:
        return np.concatenate([self.head["W"].ravel(), self.head["b"].ravel()])

    def apply_to(self, params: TrainableParams) -> TrainableParams:
        out = params.copy()
        for j, g in enumerate(out.lora):
            for k in LORA_KEYS:
                g[k] += self.layers[j][k]
        for k in out.head:
            out.head[k] += self.head[k]
        return out


def flatten_delta(before: TrainableParams, after: TrainableParams) -> Delta:
    if before.n_layers != after.n_layers:
        raise ShapeError("parameter snapshots have different layer counts")
    layers = []
    for gb, ga in zip(before.lora, after.lora):
        entry = {}
        for k in LORA_KEYS:
            if gb[k].shape != ga[k].shape:
                raise ShapeError(f"{k} shapes differ: {gb[k].shape} vs {ga[k].shape}")
            entry[k] = ga[k] - gb[k]
        layers.append(entry)
    head = {}
    for k in before.head:
        if before.head[k].shape != after.head[k].shape:
            raise ShapeError(f"head.{k} shapes differ")
        head[k] = after.head[k] - before.head[k]
    return Delta(layers, head)


def predict(base: FrozenBase, params: TrainableParams, x, y) -> ForwardResult:
    return forward(base, params, None, x, y)

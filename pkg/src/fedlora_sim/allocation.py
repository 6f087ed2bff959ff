"""Heterogeneous LoRA-layer allocation.

Maps are int8 numpy vectors of length ``l`` with one bit per transformer
layer. Layer probabilities come from one of three sources: gradient-norm
(Fisher) scores clustered against the capability levels, the column mass of
a geometric mask pattern over the client population, or a plain uniform
draw. The :func:`allocate_round` dispatcher ties these to a schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ParameterError
from .model import backward, forward
from .numerics import RngStream


class Pattern(str, Enum):
    TRIANGLE = "Triangle"
    INVERTED_TRIANGLE = "InvertedTriangle"
    BOTTLENECK = "Bottleneck"
    UNIFORM = "Uniform"


STRATEGIES = ("FIM", "GD", "RGD", "CoDesign", "Random", "Straggler", "Exclusive")

# Map given to clients that sit out a round under Exclusive learning.
EXCLUDED = None


@dataclass(frozen=True)
class CapabilityProfile:
    levels: tuple[int, ...]
    ratios: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    def problems(self, l: int | None = None) -> list[str]:
        out = []
        if not self.levels or len(self.levels) != len(self.ratios):
            out.append("capability.levels and capability.ratios must be non-empty and equally long")
            return out
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            out.append("capability.levels must be strictly ascending")
        if self.levels[0] < 1 or (l is not None and self.levels[-1] > l):
            out.append(f"capability.levels must lie in [1, {l if l is not None else 'l'}]")
        if any(r <= 0 for r in self.ratios):
            out.append("capability.ratios must be positive")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            out.append("capability.ratios must sum to 1")
        return out

    def validate(self, l: int | None = None) -> "CapabilityProfile":
        bad = self.problems(l)
        if bad:
            raise ParameterError("; ".join(bad))
        return self

    @property
    def k(self) -> int:
        return len(self.levels)

    def population(self, n: int) -> list[int]:
        """Capabilities of ``n`` clients split by ratio (largest remainder), ascending."""
        raw = np.array(self.ratios) * n
        counts = np.floor(raw).astype(int)
        short = n - counts.sum()
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
        out = []
        for c, cnt in zip(self.levels, counts):
            out.extend([c] * int(cnt))
        return out


@dataclass(frozen=True)
class ScheduleConfig:
    strategy: str = "CoDesign"
    base_pattern: str = "Bottleneck"
    T_RGD: int = 50
    T_FIM: int = 50
    fim_every: int = 1  # refresh period for the standalone FIM strategy
    literal_bernoulli: bool = False
    straggler_pattern: str = "InvertedTriangle"

    def problems(self) -> list[str]:
        out = []
        if self.strategy not in STRATEGIES:
            out.append(f"schedule.strategy must be one of {', '.join(STRATEGIES)}")
        for key in ("base_pattern", "straggler_pattern"):
            try:
                Pattern(getattr(self, key))
            except ValueError:
                out.append(f"schedule.{key} must be one of {', '.join(p.value for p in Pattern)}")
        if self.T_RGD < 0:
            out.append("schedule.T_RGD must be >= 0")
        if self.T_FIM < 1:
            out.append("schedule.T_FIM must be >= 1")
        if self.fim_every < 1:
            out.append("schedule.fim_every must be >= 1")
        return out


# --- geometric patterns ----------------------------------------------------

def gd_mask(pattern, l: int, c: int, rng: RngStream | None = None, literal_bernoulli: bool = False) -> np.ndarray:
    pattern = Pattern(pattern)
    if not 1 <= c <= l:
        raise ParameterError(f"capability {c} must lie in [1, {l}]")
    m = np.zeros(l, dtype=np.int8)
    if pattern is Pattern.TRIANGLE:
        m[:c] = 1
    elif pattern is Pattern.INVERTED_TRIANGLE:
        m[l - c:] = 1
    elif pattern is Pattern.BOTTLENECK:
        head, tail = math.ceil(c / 2), c // 2
        m[:head] = 1
        if tail:
            m[l - tail:] = 1
    else:
        if rng is None:
            raise ParameterError("the Uniform pattern needs an rng")
        if literal_bernoulli:
            m[:] = rng.generator.random(l) < c / l
        else:
            m[rng.generator.choice(l, size=c, replace=False)] = 1
    return m


def expected_gd_mask(pattern, l: int, c: int) -> np.ndarray:
    """Per-layer inclusion rate of a pattern; exact 0/1 except for Uniform (c / l)."""
    if Pattern(pattern) is Pattern.UNIFORM:
        return np.full(l, c / l)
    return gd_mask(pattern, l, c).astype(np.float64)


def prior_from_masks(masks) -> np.ndarray:
    """Column mass of a mask population, normalized to a distribution."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 2:
        raise ParameterError("masks must be a 2-D (clients x layers) array")
    col = masks.sum(axis=0)
    total = col.sum()
    if total <= 0:
        raise ParameterError("mask population has zero total mass")
    return col / total


def rgd_prior(profile: CapabilityProfile, pattern, l: int, n: int) -> np.ndarray:
    """Layer prior from the geometric masks of an ``n``-client population."""
    profile.validate(l)
    if n < 1:
        raise ParameterError("population size must be >= 1")
    masks = [expected_gd_mask(pattern, l, c) for c in profile.population(n)]
    return prior_from_masks(masks)


# --- Fisher-score route ----------------------------------------------------

def base_capability_probs(profile: CapabilityProfile) -> np.ndarray:
    """Base per-layer probability for each capability level.

    Numerator: how many levels reach at least ``c_h``. Denominator: the
    ratio-weighted mean capability.
    """
    profile.validate()
    levels = np.array(profile.levels)
    denom = float(np.dot(levels, profile.ratios))
    return np.array([np.count_nonzero(levels >= c) for c in levels], dtype=np.float64) / denom


def fim_scores(base, params, proxy) -> np.ndarray:
    """Mean over proxy samples of the squared per-layer adapter gradient norm."""
    if proxy is None or len(proxy) == 0:
        raise ParameterError("FIM scoring needs a non-empty proxy dataset")
    l = base.cfg.l
    ones = np.ones(l, dtype=np.int8)
    total = np.zeros(l)
    for i in range(len(proxy)):
        res = forward(base, params, ones, proxy.x[i:i + 1], proxy.y[i:i + 1])
        g = backward(base, params, res.cache, ones)
        for j in range(l):
            total[j] += float(np.dot(gv := g.layer_vector(j), gv))
    return total / len(proxy)


def _quantile_groups(gamma: np.ndarray, k: int) -> np.ndarray:
    """Split layers into ``k`` rank groups, highest scores first.

    When there are at least ``k`` distinct scores the split runs over the
    distinct values, so tied layers always share a group. Otherwise ties are
    broken by layer index.
    """
    values = np.unique(gamma)[::-1]
    labels = np.empty(len(gamma), dtype=np.int64)
    if values.size >= k:
        for h, chunk in enumerate(np.array_split(values, k)):
            labels[np.isin(gamma, chunk)] = h
        return labels
    order = np.argsort(-gamma, kind="stable")
    for h, chunk in enumerate(np.array_split(order, k)):
        labels[chunk] = h
    return labels


def cluster_scores(gamma, k: int, max_iter: int = 100) -> np.ndarray:
    """1-D k-means over layer scores.

    Returns a group label per layer, where label 0 is the cluster with the
    highest centroid. Centroids start at evenly spaced quantiles; a point
    equidistant from two centroids joins the higher one. With fewer distinct
    values than ``k`` (or if a cluster empties), layers are instead split
    into ``k`` groups by descending score rank.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    l = gamma.size
    if not 1 <= k <= l:
        raise ParameterError(f"k must lie in [1, {l}], got {k}")
    if np.any(gamma < 0):
        raise ParameterError("scores must be non-negative")
    if k == 1:
        return np.zeros(l, dtype=np.int64)
    if np.unique(gamma).size < k:
        return _quantile_groups(gamma, k)

    cent = np.quantile(gamma, (np.arange(k) + 0.5) / k)[::-1].copy()
    labels = None
    for _ in range(max_iter):
        dist = np.abs(gamma[:, None] - cent[None, :])
        # argmin picks the first (highest-centroid) column on ties
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if np.unique(labels).size < k:
            return _quantile_groups(gamma, k)
        cent = np.array([gamma[labels == h].mean() for h in range(k)])
        order = np.argsort(-cent, kind="stable")
        cent = cent[order]
        labels = np.argsort(order)[labels]
    return labels.astype(np.int64)


def fim_allocation_probs(gamma, profile: CapabilityProfile) -> np.ndarray:
    """Layer probabilities: each score cluster takes its level's base probability, then normalize."""
    a = base_capability_probs(profile)
    groups = cluster_scores(gamma, profile.k)
    w = a[groups]
    return w / w.sum()


# --- sampling --------------------------------------------------------------

def sample_allocation(probs, c: int, rng: RngStream) -> np.ndarray:
    """Draw ``c`` distinct layers by sequential draw-and-renormalize.

    If fewer than ``c`` layers carry positive probability, the remainder is
    filled uniformly from the zero-probability layers.
    """
    p = np.asarray(probs, dtype=np.float64).copy()
    l = p.size
    if not 0 <= c <= l:
        raise ParameterError(f"cannot pick {c} of {l} layers")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ParameterError("probabilities must be finite and non-negative")
    m = np.zeros(l, dtype=np.int8)
    g = rng.generator
    for _ in range(c):
        total = p.sum()
        if total <= 0:
            rest = np.flatnonzero(m == 0)
            pick = rest[g.integers(len(rest))]
        else:
            u = g.random() * total
            pick = int(np.searchsorted(np.cumsum(p), u, side="right"))
            pick = min(pick, l - 1)
            while p[pick] == 0:  # guard against u landing on a zero-width bin edge
                pick -= 1
        m[pick] = 1
        p[pick] = 0.0
    return m


def inclusion_probabilities(probs, c: int) -> np.ndarray:
    """Exact marginal inclusion rates of :func:`sample_allocation` by enumeration.

    Exponential in ``c``; intended as a reference for small ``l``.
    """
    p = np.asarray(probs, dtype=np.float64)
    l = p.size
    out = np.zeros(l)

    def walk(chosen, weight, remaining):
        if len(chosen) == c:
            for j in chosen:
                out[j] += weight
            return
        total = remaining.sum()
        if total <= 0:
            raise ParameterError("enumeration needs at least c positive-probability layers")
        for j in range(l):
            if remaining[j] > 0:
                nxt = remaining.copy()
                nxt[j] = 0.0
                walk(chosen + [j], weight * remaining[j] / total, nxt)

    walk([], 1.0, p.copy())
    return out


# --- round-level dispatch --------------------------------------------------

@dataclass
class AllocatorState:
    """Server-side allocation memory carried between rounds."""

    probs: np.ndarray | None = None
    fim_round: int | None = None
    gamma: np.ndarray | None = None
    refreshed: bool = False
    history: list = field(default_factory=list)


def allocate_round(
    t: int,
    schedule: ScheduleConfig,
    profile: CapabilityProfile,
    capabilities: dict[int, int],
    l: int,
    rng: RngStream,
    *,
    model=None,
    proxy=None,
    population: int | None = None,
    state: AllocatorState | None = None,
) -> tuple[dict[int, np.ndarray | None], AllocatorState]:
    """Produce one allocation map per selected client for round ``t``.

    ``capabilities`` maps each selected client id to its layer budget.
    ``population`` is the fleet size used for the geometric prior (all
    clients, not just this round's selection). Excluded clients map to
    ``None``.
    """
    if t < 0:
        raise ParameterError("round index must be >= 0")
    state = state or AllocatorState()
    state.refreshed = False
    strategy = schedule.strategy
    ids = sorted(capabilities)
    n_pop = population or len(capabilities)

    if strategy in ("FIM", "CoDesign") and (model is None or proxy is None or len(proxy) == 0):
        raise ConfigError(f"strategy {strategy} needs a model and proxy data")

    def refresh_fim():
        base, params = model
        state.gamma = fim_scores(base, params, proxy)
        state.probs = fim_allocation_probs(state.gamma, profile)
        state.fim_round = t
        state.refreshed = True

    maps: dict[int, np.ndarray | None] = {}
    if strategy == "GD":
        for i in ids:
            maps[i] = gd_mask(schedule.base_pattern, l, capabilities[i], rng, schedule.literal_bernoulli)
        state.probs = rgd_prior(profile, schedule.base_pattern, l, n_pop)
        return maps, state

    if strategy == "Random":
        for i in ids:
            maps[i] = gd_mask(Pattern.UNIFORM, l, capabilities[i], rng)
        state.probs = np.full(l, 1.0 / l)
        return maps, state

    if strategy == "Straggler":
        c_min = min(profile.levels)
        shared = gd_mask(schedule.straggler_pattern, l, c_min, rng)
        for i in ids:
            maps[i] = shared.copy()
        state.probs = shared / shared.sum()
        return maps, state

    if strategy == "Exclusive":
        for i in ids:
            maps[i] = np.ones(l, dtype=np.int8) if capabilities[i] >= l else EXCLUDED
        state.probs = np.full(l, 1.0 / l)
        return maps, state

    if strategy == "RGD":
        state.probs = rgd_prior(profile, schedule.base_pattern, l, n_pop)
    elif strategy == "FIM":
        if state.fim_round is None or t % schedule.fim_every == 0:
            refresh_fim()
    else:  # CoDesign
        if t < schedule.T_RGD:
            state.probs = rgd_prior(profile, schedule.base_pattern, l, n_pop)
        elif state.fim_round is None or t % schedule.T_FIM == 0:
            refresh_fim()
    for i in ids:
        maps[i] = sample_allocation(state.probs, capabilities[i], rng)
    return maps, state

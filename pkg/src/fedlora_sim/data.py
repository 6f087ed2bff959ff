"""Synthetic classification tasks, client partitioning and proxy extraction."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .numerics import RngStream


@dataclass
class Dataset:
    """Samples ``x`` with integer labels ``y``.

    ``ids`` are stable sample identifiers within the originating split; they
    survive subsetting and make disjointness checks cheap.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        if len(self.x) != len(self.y) or len(self.ids) != len(self.y):
            raise ParameterError("x, y and ids must have equal length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ParameterError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.n_classes, self.ids[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            self.n_classes,
            np.concatenate([self.ids, other.ids]),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def dump(self, path) -> None:
        """One sample per line: label, then whitespace-separated tokens or values."""
        integer = np.issubdtype(self.x.dtype, np.integer)
        with open(path, "w") as fh:
            shape = "x".join(map(str, self.x.shape[1:]))
            fh.write(f"# n_classes={self.n_classes} shape={shape} dtype={'int' if integer else 'float'}\n")
            for xi, yi in zip(self.x, self.y):
                vals = xi.ravel()
                body = " ".join(str(int(v)) for v in vals) if integer else " ".join(repr(float(v)) for v in vals)
                fh.write(f"{int(yi)} {body}\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().lstrip("#").split()
            meta = dict(item.split("=", 1) for item in header)
            shape = tuple(int(s) for s in meta["shape"].split("x") if s)
            rows = [line.split() for line in fh if line.strip()]
        y = np.array([int(r[0]) for r in rows], dtype=np.int64)
        dtype = np.int64 if meta.get("dtype", "int") == "int" else np.float64
        x = np.array([[float(v) for v in r[1:]] for r in rows]).astype(dtype)
        return cls(x.reshape((len(rows),) + shape), y, int(meta["n_classes"]))


def _balanced_labels(n, n_classes, rng):
    y = np.arange(n) % n_classes
    return rng.generator.permutation(y)


def generate_synthetic(
    n_classes: int,
    seq_len: int,
    vocab: int,
    n_train: int,
    n_test: int,
    rng: RngStream,
    *,
    kind: str = "tokens",
    separation: float = 3.0,
    motif_len: int = 3,
    noise: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Balanced synthetic train/test splits.

    ``kind="tokens"``: every class owns a short ordered motif of tokens that
    is planted at random positions of a noise sequence. ``separation``
    controls how many copies of the motif appear (rounded up, at least one);
    the remaining positions draw from a background distribution shared by
    all classes. Motifs are distinct ordered picks from one small token
    inventory, so classes often differ only in token order.

    ``kind="gaussian"``: features of shape ``(seq_len, vocab)`` drawn from
    isotropic Gaussians with std ``noise``. Class means sit on scaled
    orthogonal directions so that the nearest pair of means is
    ``2 * separation * noise`` apart; the nearest-centroid error is then at
    most ``(n_classes - 1) * Phi(-separation)``.
    """
    for name, v in (("n_classes", n_classes), ("seq_len", seq_len), ("vocab", vocab),
                    ("n_train", n_train), ("n_test", n_test)):
        if v < 1:
            raise ParameterError(f"{name} must be positive, got {v}")
    if kind == "tokens" and n_classes > vocab:
        raise ParameterError(f"n_classes ({n_classes}) exceeds vocab ({vocab})")
    task_rng = rng.child("task")
    y_tr = _balanced_labels(n_train, n_classes, rng.child("labels-train"))
    y_te = _balanced_labels(n_test, n_classes, rng.child("labels-test"))

    if kind == "gaussian":
        dim = seq_len * vocab
        if n_classes > dim:
            raise ParameterError("gaussian task needs seq_len * vocab >= n_classes")
        basis = np.linalg.qr(task_rng.generator.normal(size=(dim, n_classes)))[0].T
        means = basis * (separation * noise * np.sqrt(2.0))

        def draw(y, stream):
            z = stream.generator.normal(0.0, noise, size=(len(y), dim))
            return (means[y] + z).reshape(len(y), seq_len, vocab)

        return (
            Dataset(draw(y_tr, rng.child("x-train")), y_tr, n_classes),
            Dataset(draw(y_te, rng.child("x-test")), y_te, n_classes),
        )
    if kind != "tokens":
        raise ParameterError(f"unknown synthetic kind {kind!r}")

    if motif_len > seq_len:
        raise ParameterError("motif_len exceeds seq_len")
    size = motif_len
    while size <= vocab and math.perm(size, motif_len) < n_classes:
        size += 1
    if size > vocab:
        raise ParameterError("vocab too small for distinct class motifs")
    inventory = task_rng.generator.choice(vocab, size=size, replace=False)
    candidates = list(itertools.permutations(inventory.tolist(), motif_len))
    pick = task_rng.generator.choice(len(candidates), size=n_classes, replace=False)
    motifs = np.array([candidates[i] for i in pick], dtype=np.int64)
    background = task_rng.generator.dirichlet(np.ones(vocab))
    copies = max(1, int(np.ceil(separation)))

    def draw(y, stream):
        g = stream.generator
        x = g.choice(vocab, size=(len(y), seq_len), p=background)
        for i, label in enumerate(y):
            for _ in range(copies):
                start = g.integers(0, seq_len - motif_len + 1)
                x[i, start:start + motif_len] = motifs[label]
        return x.astype(np.int64)

    return (
        Dataset(draw(y_tr, rng.child("x-train")), y_tr, n_classes),
        Dataset(draw(y_te, rng.child("x-test")), y_te, n_classes),
    )


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "IID"  # "IID" or "LabelSkew"
    classes_per_client: int = 2
    dirichlet_alpha: float = 1.0
    n_clients: int = 100

    def problems(self, n_classes: int | None = None) -> list[str]:
        out = []
        if self.mode not in ("IID", "LabelSkew"):
            out.append(f"partition.mode must be IID or LabelSkew, got {self.mode!r}")
        if self.n_clients < 1:
            out.append("partition.n_clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            out.append("partition.dirichlet_alpha must be > 0")
        if self.classes_per_client < 1:
            out.append("partition.classes_per_client must be >= 1")
        if n_classes is not None and self.classes_per_client > n_classes:
            out.append("partition.classes_per_client exceeds the number of classes")
        return out


def client_class_sets(n_clients: int, n_classes: int, C: int) -> list[np.ndarray]:
    """Round-robin class assignment: client i holds classes i*C .. i*C+C-1 (mod K)."""
    return [np.array(sorted({(i * C + k) % n_classes for k in range(C)})) for i in range(n_clients)]


def partition(train: Dataset, spec: PartitionSpec, rng: RngStream, max_attempts: int = 100) -> dict[int, Dataset]:
    """Split ``train`` into a set partition over ``spec.n_clients`` clients."""
    bad = spec.problems(train.n_classes)
    if bad:
        raise ParameterError("; ".join(bad))
    n = spec.n_clients
    if len(train) < n:
        raise ParameterError(f"{len(train)} samples cannot fill {n} non-empty clients")

    if spec.mode == "IID":
        order = rng.generator.permutation(len(train))
        return {i: train.subset(np.sort(chunk)) for i, chunk in enumerate(np.array_split(order, n))}

    K, C = train.n_classes, spec.classes_per_client
    if n * C < K:
        raise ParameterError(f"{n} clients x {C} classes cannot cover {K} classes")
    sets = client_class_sets(n, K, C)
    holders = [[i for i in range(n) if c in sets[i]] for c in range(K)]
    by_class = [np.flatnonzero(train.y == c) for c in range(K)]
    for c in range(K):
        if len(by_class[c]) < len(holders[c]):
            raise ParameterError(f"class {c} has too few samples for its {len(holders[c])} holders")

    for _ in range(max_attempts):
        props = {i: rng.generator.dirichlet(np.full(len(sets[i]), spec.dirichlet_alpha)) for i in range(n)}
        shards: dict[int, list[np.ndarray]] = {i: [] for i in range(n)}
        for c in range(K):
            idx = rng.generator.permutation(by_class[c])
            w = np.array([props[i][np.searchsorted(sets[i], c)] for i in holders[c]])
            w = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
            cuts = np.round(np.cumsum(w)[:-1] * len(idx)).astype(int)
            for i, part in zip(holders[c], np.split(idx, cuts)):
                shards[i].append(part)
        sizes = [sum(len(p) for p in shards[i]) for i in range(n)]
        if min(sizes) >= 1:
            return {i: train.subset(np.sort(np.concatenate(shards[i]))) for i in range(n)}
    raise ParameterError(f"could not draw a partition with non-empty clients in {max_attempts} attempts")


@dataclass(frozen=True)
class ProxySpec:
    size: int = 100


def extract_proxy(test: Dataset, spec: ProxySpec, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Draw the FIM proxy uniformly from ``test``; return it and the remaining test set."""
    if spec.size < 1 or spec.size >= len(test):
        raise ParameterError(f"proxy size must lie in [1, {len(test)}), got {spec.size}")
    chosen = np.sort(rng.generator.choice(len(test), size=spec.size, replace=False))
    rest = np.setdiff1d(np.arange(len(test)), chosen)
    return test.subset(chosen), test.subset(rest)

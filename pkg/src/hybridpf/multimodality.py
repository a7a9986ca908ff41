"""Dataset multimodality measure and tracking-time mode coverage.

The dataset measure clusters inputs and outputs separately, counts which
output clusters each input cluster maps to, and weights every input cluster
by ``h = N(x) * exp(H) / n`` where ``H`` is the natural-log entropy of its
association frequencies and ``n`` the number of distinct output clusters.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import ParticleSet, make_rng


@dataclass(frozen=True)
class ClusterModel:
    centers: np.ndarray
    inertia_history: tuple = ()

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def assign(self, points) -> np.ndarray:
        """Nearest-centre labels; ties go to the lowest index."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return np.argmin(cdist(P, self.centers, "sqeuclidean"), axis=1)


def _kmeanspp(X: np.ndarray, k: int, rng) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining points coincide with chosen centres
            rest = np.setdiff1d(np.arange(n), idx)
            idx.append(int(rest[0]))
        else:
            idx.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((X - X[idx[-1]]) ** 2, axis=1))
    return X[idx].copy()


def _assign(X, C, chunk: int = 4096):
    labels = np.empty(X.shape[0], dtype=np.int64)
    dist = np.empty(X.shape[0])
    for s in range(0, X.shape[0], chunk):
        D = cdist(X[s:s + chunk], C, "sqeuclidean")
        labels[s:s + chunk] = np.argmin(D, axis=1)
        dist[s:s + chunk] = D[np.arange(D.shape[0]), labels[s:s + chunk]]
    return labels, dist


def kmeans_fit(points, k: int, seed: int = 0, max_iters: int = 100) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters keep their previous centre, so the inertia never goes up.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = np.unique(X, axis=0).shape[0]
    if n_distinct < k:
        raise ValueError(f"need at least {k} distinct points, got {n_distinct}")
    rng = make_rng(seed)
    if n_distinct == k:
        C = np.unique(X, axis=0)
    else:
        C = _kmeanspp(X, k, rng)
    labels, dist = _assign(X, C)
    history = [float(dist.sum())]
    for _ in range(max_iters):
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        C_new = C.copy()
        C_new[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_labels, dist = _assign(X, C_new)
        inertia = float(dist.sum())
        C = C_new
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterModel(C, tuple(history))


# ---------------------------------------------------------------------------
# associations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssociationTable:
    input_cluster: int
    assoc: dict = field(default_factory=dict)   # output cluster -> count

    @property
    def total(self) -> int:
        return int(sum(self.assoc.values()))

    @property
    def n(self) -> int:
        return len(self.assoc)

    @property
    def h(self) -> float:
        return association_weight(self)


def table_from_indices(indices, input_cluster: int = 0) -> AssociationTable:
    """Table for one input cluster from its list of output-cluster indices."""
    return AssociationTable(input_cluster, dict(sorted(Counter(int(i) for i in indices).items())))


def build_associations(inputs, outputs, in_model: ClusterModel,
                       out_model: ClusterModel) -> list:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    if inputs.shape[0] != outputs.shape[0]:
        raise ValueError(f"length mismatch: {inputs.shape[0]} inputs, {outputs.shape[0]} outputs")
    a = in_model.assign(inputs)
    b = out_model.assign(outputs)
    tables = []
    for c in np.unique(a):
        tables.append(table_from_indices(b[a == c], int(c)))
    return tables


def association_weight(table: AssociationTable) -> float:
    """``N(x) * exp(H) / n`` with ``H`` the natural-log association entropy."""
    counts = np.array(list(table.assoc.values()), dtype=float)
    if counts.size == 0 or counts.sum() <= 0:
        raise ValueError("empty association table")
    N = counts.sum()
    p = counts / N
    H = -np.sum(p * np.log(p))
    return float(N * np.exp(H) / counts.size)


@dataclass(frozen=True)
class MultimodalityHistogram:
    bins: dict      # n -> summed weight

    def mass_at_least(self, n: int) -> float:
        return float(sum(w for k, w in self.bins.items() if k >= n))

    @property
    def total(self) -> float:
        return float(sum(self.bins.values()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "n", "weight"])
        for i, n in enumerate(sorted(self.bins)):
            w.writerow([i, n, repr(float(self.bins[n]))])
        return buf.getvalue()


def histogram(tables) -> MultimodalityHistogram:
    tables = list(tables)
    if not tables:
        raise ValueError("no association tables")
    bins: dict = {}
    for t in tables:
        bins[t.n] = bins.get(t.n, 0.0) + association_weight(t)
    return MultimodalityHistogram(dict(sorted(bins.items())))


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------


def coverage_ratio(tables, current_input, particles, out_model: ClusterModel,
                   in_model: ClusterModel = None, return_flag: bool = False):
    """Fraction of the current input cluster's association mass held by particles.

    ``current_input`` is either an input-cluster index or an input vector
    (which then needs ``in_model``).  ``particles`` is a ``ParticleSet`` or an
    array of states already in the output space of ``out_model``.  An input
    cluster without a table gives 1 with the flag set.
    """
    if np.ndim(current_input) == 0:
        cluster = int(current_input)
    else:
        if in_model is None:
            raise ValueError("in_model is required to assign an input vector")
        cluster = int(in_model.assign(current_input)[0])
    states = particles.states if isinstance(particles, ParticleSet) else np.atleast_2d(particles)
    if states.shape[0] == 0:
        raise ValueError("particles must be nonempty")
    table = next((t for t in tables if t.input_cluster == cluster), None)
    if table is None or table.total == 0:
        return (1.0, True) if return_flag else 1.0
    occupied = set(int(c) for c in np.unique(out_model.assign(states)))
    covered = sum(c for o, c in table.assoc.items() if o in occupied)
    ratio = covered / table.total
    return (ratio, False) if return_flag else ratio


def coverage_csv(series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "ratio"])
    for i, r in enumerate(series):
        w.writerow([i, repr(float(r))])
    return buf.getvalue()

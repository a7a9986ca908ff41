"""Shared types, the PCA latent model, weight bookkeeping and resampling.

Vectors (latent states, ambient poses, observations) are plain 1-D numpy
arrays; batches of them are 2-D arrays with one row per item.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

LATENT_MODEL_VERSION = 1


class DegenerateWeightsError(ValueError):
    """All particle weights are zero (or not finite)."""


class Origin(IntEnum):
    """Which proposal generated a particle."""

    DYN = 0
    BU = 1


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def make_rng(seed, *key: int) -> np.random.Generator:
    """Return a generator for the stream ``key`` under a session ``seed``.

    Streams with different keys are statistically independent, and the same
    ``(seed, key)`` always yields the same stream.  A ``Generator`` passed as
    ``seed`` is returned unchanged.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Particle:
    state: np.ndarray
    weight: float
    origin: Origin


@dataclass(frozen=True)
class ParticleSet:
    """Weighted particle cloud stored column-wise.

    ``states`` has shape (N, d); ``weights`` and ``origins`` have shape (N,).
    """

    states: np.ndarray
    weights: np.ndarray
    origins: np.ndarray = None
    time_index: int = 0

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if states.shape[0] == 0:
            raise ValueError("particle set must be nonempty")
        if weights.shape[0] != states.shape[0]:
            raise ValueError(
                f"{states.shape[0]} states but {weights.shape[0]} weights")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.origins is None:
            origins = np.full(states.shape[0], Origin.DYN, dtype=np.int8)
        else:
            origins = np.asarray(self.origins, dtype=np.int8).reshape(-1)
            if origins.shape[0] != states.shape[0]:
                raise ValueError("origins length mismatch")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "origins", origins)

    @classmethod
    def uniform(cls, states, origins=None, time_index: int = 0) -> "ParticleSet":
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = states.shape[0]
        return cls(states, np.full(n, 1.0 / n), origins, time_index)

    @classmethod
    def from_particles(cls, particles: Sequence[Particle], time_index: int = 0):
        return cls(np.array([p.state for p in particles]),
                   np.array([p.weight for p in particles]),
                   np.array([int(p.origin) for p in particles]), time_index)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[Particle]:
        for s, w, o in zip(self.states, self.weights, self.origins):
            yield Particle(s, float(w), Origin(int(o)))

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def with_weights(self, weights) -> "ParticleSet":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def weighted_mean(self) -> np.ndarray:
        w = self.weights / self.weights.sum()
        return w @ self.states

    def map_state(self) -> np.ndarray:
        return self.states[int(np.argmax(self.weights))]


def normalize_weights(ps: ParticleSet) -> ParticleSet:
    """Rescale weights to sum to one.

    Raises
    ------
    DegenerateWeightsError
        If every weight is zero; recovery is left to the caller.
    """
    total = ps.weights.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateWeightsError("degenerate weights")
    return ps.with_weights(ps.weights / total)


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    """Normalized weights from log-weights, guarding against underflow."""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise DegenerateWeightsError("degenerate weights")
    w = np.exp(log_w - top)
    return w / w.sum()


def effective_sample_size(ps: ParticleSet, atol: float = 1e-9) -> float:
    w = ps.weights
    if abs(w.sum() - 1.0) > atol:
        raise ValueError("effective_sample_size expects normalized weights")
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights: np.ndarray, rng) -> np.ndarray:
    """Ancestor indices from one systematic (low-variance) sweep."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateWeightsError("degenerate weights")
    n = w.shape[0]
    rng = make_rng(rng)
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def systematic_resample(ps: ParticleSet, rng_seed) -> ParticleSet:
    """Systematic resampling; returns N particles with weights 1/N.

    Origin tags are inherited from the ancestors.
    """
    if abs(ps.weights.sum() - 1.0) > 1e-9:
        raise ValueError("systematic_resample expects normalized weights")
    idx = systematic_indices(ps.weights, rng_seed)
    n = len(ps)
    return ParticleSet(ps.states[idx], np.full(n, 1.0 / n), ps.origins[idx],
                       ps.time_index)


# ---------------------------------------------------------------------------
# latent model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentModel:
    """Affine PCA map between ambient poses and latent states."""

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    residual_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def d_ambient(self) -> int:
        return self.basis.shape[0]

    @property
    def d_latent(self) -> int:
        return self.basis.shape[1]

    def to_dict(self) -> dict:
        return {
            "version": LATENT_MODEL_VERSION,
            "d_ambient": self.d_ambient,
            "d_latent": self.d_latent,
            "mean": self.mean.tolist(),
            "basis": self.basis.reshape(-1).tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "residual_eigenvalues": self.residual_eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LatentModel":
        if doc.get("version") != LATENT_MODEL_VERSION:
            raise ValueError(f"unsupported latent model version {doc.get('version')}")
        basis = np.asarray(doc["basis"], dtype=float).reshape(
            doc["d_ambient"], doc["d_latent"])
        return cls(np.asarray(doc["mean"], dtype=float), basis,
                   np.asarray(doc["eigenvalues"], dtype=float),
                   np.asarray(doc.get("residual_eigenvalues", []), dtype=float))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "LatentModel":
        return cls.from_dict(json.loads(text))


def pca_fit(poses, d_latent: int) -> LatentModel:
    """Fit a ``d_latent``-dimensional PCA model to a stack of poses."""
    Y = np.atleast_2d(np.asarray(poses, dtype=float))
    n, d = Y.shape
    if d_latent < 1 or d_latent > d:
        raise ValueError(f"d_latent must be in [1, {d}], got {d_latent}")
    if n < d_latent + 1:
        raise ValueError(f"need at least {d_latent + 1} poses, got {n}")
    mean = Y.mean(axis=0)
    centred = Y - mean
    # SVD of the centred data avoids squaring the condition number
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    eig = sv ** 2 / max(n - 1, 1)
    if eig.size == 0 or eig[0] <= 1e-300 or np.count_nonzero(eig > eig[0] * 1e-12) == 0:
        raise ValueError("rank deficient")
    basis = vt[:d_latent].T.copy()
    # fix the sign so that the largest component of each direction is positive
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d_latent)])
    basis *= np.where(signs == 0, 1.0, signs)
    eigenvalues = np.zeros(d_latent)
    eigenvalues[:min(d_latent, eig.size)] = eig[:d_latent]
    return LatentModel(mean, basis, eigenvalues, eig[d_latent:].copy())


def _check_dim(got: int, want: int, what: str):
    if got != want:
        raise ValueError(f"{what} dimension mismatch: expected {want}, got {got}")


def encode(model: LatentModel, pose) -> np.ndarray:
    """Latent coordinates of one pose (1-D) or a batch of poses (2-D)."""
    y = np.asarray(pose, dtype=float)
    _check_dim(y.shape[-1], model.d_ambient, "pose")
    return (y - model.mean) @ model.basis


def decode(model: LatentModel, x) -> np.ndarray:
    """Ambient pose(s) for latent state(s) ``x``."""
    x = np.asarray(x, dtype=float)
    _check_dim(x.shape[-1], model.d_latent, "latent state")
    return model.mean + x @ model.basis.T

"""Synthetic depth-ambiguous articulated chain.

A pose is ``(theta, a_1, ..., a_L)``: ``theta`` is the in-image orientation
of a root segment and ``a_k`` the joint angle of link ``k``.  In-plane links
turn the heading by ``a_k``; out-of-plane links keep the heading and tilt
out of the image plane by ``a_k``.  The observation is the image position of
the root end and of every joint, followed by one depth feature per link.  Under ``DEPTH_SIGN`` the
depth feature is ``|dz|`` so flipping the sign of any out-of-plane angle
leaves the observation unchanged; under ``NONE`` it is the signed ``dz``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

from .core import LatentModel, decode, make_rng
from .multimodality import kmeans_fit

DATASET_VERSION = 1
N_VIEWS = 8
DESCRIPTOR_EPS = 1e-8


class Ambiguity(str, Enum):
    DEPTH_SIGN = "depth_sign"
    NONE = "none"


class Motion(str, Enum):
    SINUSOID = "sinusoid"
    RANDOM_WALK = "random_walk"


@dataclass(frozen=True)
class ChainSpec:
    n_links: int = 4
    link_lengths: tuple = None
    obs_noise: float = None
    ambiguity: Ambiguity = Ambiguity.DEPTH_SIGN
    out_of_plane: tuple = None      # indices of out-of-plane links; default the last
    root_length: float = 1.0

    def __post_init__(self):
        if self.n_links < 1:
            raise ValueError("n_links must be >= 1")
        lengths = self.link_lengths
        if lengths is None:
            lengths = (1.0,) * self.n_links
        lengths = tuple(float(v) for v in lengths)
        if len(lengths) != self.n_links or min(lengths) <= 0:
            raise ValueError("need one positive length per link")
        oop = self.out_of_plane
        if oop is None:
            oop = (self.n_links - 1,)
        oop = tuple(sorted(int(i) for i in oop))
        if any(i < 0 or i >= self.n_links for i in oop):
            raise ValueError("out_of_plane index out of range")
        noise = self.obs_noise
        if noise is None:
            noise = 0.02 * sum(lengths)
        if noise <= 0:
            raise ValueError("obs_noise must be positive")
        if self.root_length <= 0:
            raise ValueError("root_length must be positive")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "out_of_plane", oop)
        object.__setattr__(self, "obs_noise", float(noise))
        object.__setattr__(self, "ambiguity", Ambiguity(self.ambiguity))

    @property
    def d_ambient(self) -> int:
        return self.n_links + 1

    @property
    def d_obs(self) -> int:
        return 2 + 3 * self.n_links

    @property
    def total_length(self) -> float:
        return float(sum(self.link_lengths))

    def to_dict(self) -> dict:
        return {"n_links": self.n_links, "link_lengths": list(self.link_lengths),
                "obs_noise": self.obs_noise, "ambiguity": self.ambiguity.value,
                "out_of_plane": list(self.out_of_plane), "root_length": self.root_length}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSpec":
        return cls(int(d["n_links"]), tuple(d["link_lengths"]), float(d["obs_noise"]),
                   Ambiguity(d["ambiguity"]), tuple(d["out_of_plane"]),
                   float(d.get("root_length", 1.0)))


def default_latent_dim(spec: ChainSpec) -> int:
    return min(5, spec.d_ambient - 1)


def view_label(theta) -> np.ndarray:
    """Orientation bin in ``[0, 8)`` (eight equal sectors of the circle)."""
    t = np.mod(np.asarray(theta, dtype=float), 2 * np.pi)
    return np.minimum((t // (2 * np.pi / N_VIEWS)).astype(int), N_VIEWS - 1)


# ---------------------------------------------------------------------------
# kinematics and observation
# ---------------------------------------------------------------------------


def forward_kinematics(spec: ChainSpec, poses) -> np.ndarray:
    """Joint positions, shape (..., n_links + 1, 3).

    Row 0 is the end of the root segment (the base sits at the origin).
    """
    Y = np.asarray(poses, dtype=float)
    if Y.shape[-1] != spec.d_ambient:
        raise ValueError(f"pose dimension mismatch: expected {spec.d_ambient}, got {Y.shape[-1]}")
    heading = Y[..., 0].copy()
    pos = np.stack([spec.root_length * np.cos(heading), spec.root_length * np.sin(heading),
                    np.zeros_like(heading)], axis=-1)
    out = np.empty(Y.shape[:-1] + (spec.n_links + 1, 3))
    out[..., 0, :] = pos
    oop = set(spec.out_of_plane)
    for k in range(spec.n_links):
        a = Y[..., k + 1]
        ell = spec.link_lengths[k]
        if k in oop:
            step = np.stack([np.cos(a) * np.cos(heading), np.cos(a) * np.sin(heading),
                             np.sin(a)], axis=-1)
        else:
            heading = heading + a
            step = np.stack([np.cos(heading), np.sin(heading), np.zeros_like(heading)], axis=-1)
        pos = pos + ell * step
        out[..., k + 1, :] = pos
    return out


def noiseless_observation(spec: ChainSpec, poses) -> np.ndarray:
    J = forward_kinematics(spec, poses)
    xy = J[..., :2].reshape(J.shape[:-2] + (2 * spec.n_links + 2,))
    dz = np.diff(J[..., 2], axis=-1)
    if spec.ambiguity is Ambiguity.DEPTH_SIGN:
        dz = np.abs(dz)
    return np.concatenate([xy, dz], axis=-1)


def project_observe(spec: ChainSpec, pose, seed=None) -> np.ndarray:
    """Observation of ``pose``; Gaussian noise is added when ``seed`` is given."""
    obs = noiseless_observation(spec, pose)
    if seed is None:
        return obs
    rng = make_rng(seed)
    return obs + spec.obs_noise * rng.standard_normal(obs.shape)


def log_likelihood(spec: ChainSpec, obs, states, latent: LatentModel) -> np.ndarray:
    """Gaussian log-likelihood (up to the normaliser) for a batch of latent states."""
    pred = noiseless_observation(spec, decode(latent, states))
    r = pred - np.asarray(obs, dtype=float)
    return -np.sum(r * r, axis=-1) / (2 * spec.obs_noise ** 2)


def likelihood(spec: ChainSpec, obs, state, latent: LatentModel):
    return np.exp(log_likelihood(spec, obs, state, latent))


def ambiguity_set(spec: ChainSpec, pose) -> list:
    """All poses whose noiseless observation equals that of ``pose``."""
    y = np.asarray(pose, dtype=float)
    if spec.ambiguity is Ambiguity.NONE:
        return [y.copy()]
    bent = [k for k in spec.out_of_plane if y[k + 1] != 0.0]
    out = []
    for signs in itertools.product((1.0, -1.0), repeat=len(bent)):
        z = y.copy()
        for k, s in zip(bent, signs):
            z[k + 1] = s * y[k + 1]
        out.append(z)
    return out


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@dataclass
class GroundTruthSequence:
    spec: ChainSpec
    states: np.ndarray          # (T, d_ambient)
    observations: np.ndarray    # (T, d_obs)
    view_labels: np.ndarray     # (T,)
    seed: int = 0
    motion: str = Motion.SINUSOID.value
    params: dict = field(default_factory=dict)

    def __len__(self):
        return self.states.shape[0]

    def to_dict(self) -> dict:
        return {"version": DATASET_VERSION, "spec": self.spec.to_dict(),
                "seed": self.seed, "motion": self.motion, "params": self.params,
                "states": self.states.tolist(), "observations": self.observations.tolist(),
                "view_labels": self.view_labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthSequence":
        if d.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {d.get('version')}")
        spec = ChainSpec.from_dict(d["spec"])
        return cls(spec, np.asarray(d["states"], dtype=float).reshape(-1, spec.d_ambient),
                   np.asarray(d["observations"], dtype=float).reshape(-1, spec.d_obs),
                   np.asarray(d["view_labels"], dtype=int), int(d["seed"]), d["motion"],
                   dict(d.get("params", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "GroundTruthSequence":
        return cls.from_dict(json.loads(text))


def generate_sequence(spec: ChainSpec, n_frames: int, motion=Motion.SINUSOID, seed: int = 0,
                      speed: float = 1.0, step_scale: float = 0.05,
                      theta_center: float = None, oop_sign: float = None,
                      shift: float = 0.0, theta_amp: float = 0.4) -> GroundTruthSequence:
    """Smooth joint-angle trajectory and its noisy observations.

    SINUSOID: every angle oscillates around a random centre; ``speed`` scales
    the angular frequencies.  Out-of-plane angles keep a fixed sign with
    magnitude in ``[0.45, 0.95]`` so the mirrored modes stay apart.  The
    second joint angle is tied to the first (``a_2 = a_1 / 2``) so the pose
    set lies in a ``d_ambient - 1`` dimensional subspace.  ``shift`` offsets
    the in-plane angle centres (used to build out-of-distribution test
    sequences).

    RANDOM_WALK: Gaussian increments of size ``step_scale`` from a random
    start; ``step_scale = 0`` gives a constant sequence.

    Orientation stays inside ``(-pi, pi)`` without wrapping.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    motion = Motion(motion)
    rng = make_rng(seed, 0)
    L = spec.n_links
    oop = set(spec.out_of_plane)
    t = np.arange(n_frames, dtype=float)
    Y = np.zeros((n_frames, spec.d_ambient))
    if motion is Motion.SINUSOID:
        amp_theta = float(theta_amp)
        if theta_center is None:
            theta_center = rng.uniform(-np.pi + amp_theta + 0.05, np.pi - amp_theta - 0.05)
        else:
            rng.uniform()
        Y[:, 0] = theta_center + amp_theta * np.sin(speed * 0.03 * t + rng.uniform(0, 2 * np.pi))
        signs = rng.choice([-1.0, 1.0], size=L)
        if oop_sign is not None:
            signs[:] = np.sign(oop_sign)
        for k in range(L):
            phase = rng.uniform(0, 2 * np.pi)
            freq = speed * rng.uniform(0.03, 0.06)
            if k in oop:
                Y[:, k + 1] = signs[k] * (0.7 + 0.25 * np.sin(freq * t + phase))
            elif k == 1 and L > 2 and 0 not in oop and 1 not in oop:
                Y[:, k + 1] = 0.5 * Y[:, 1]
            else:
                centre = rng.uniform(-0.3, 0.3) + shift
                Y[:, k + 1] = centre + 0.5 * np.sin(freq * t + phase)
    else:
        y = np.concatenate([[rng.uniform(-1.0, 1.0)], rng.uniform(-0.5, 0.5, L)])
        for k in oop:
            y[k + 1] = rng.choice([-1.0, 1.0]) * 0.7
        steps = step_scale * rng.standard_normal((n_frames, spec.d_ambient))
        steps[0] = 0.0
        Y = y + np.cumsum(steps, axis=0)
        Y[:, 0] = np.clip(Y[:, 0], -np.pi + 1e-6, np.pi - 1e-6)
    obs_rng = make_rng(seed, 1)
    obs = noiseless_observation(spec, Y) + spec.obs_noise * obs_rng.standard_normal((n_frames, spec.d_obs))
    params = {"speed": speed, "step_scale": step_scale, "shift": shift, "theta_amp": theta_amp}
    return GroundTruthSequence(spec, Y, obs, view_label(Y[:, 0]), int(seed), motion.value, params)


def training_set(spec: ChainSpec, n_sequences: int, n_frames: int, seed: int = 0,
                 **kwargs) -> list:
    """Sequences whose orientation centres cover all views evenly.

    The orientation swing shrinks near the +-pi seam so no sequence wraps.
    """
    seqs = []
    centres = -np.pi + 2 * np.pi * (np.arange(n_sequences) + 0.5) / n_sequences
    for i, c in enumerate(centres):
        amp = float(min(0.4, np.pi - abs(c) - 0.02))
        seqs.append(generate_sequence(spec, n_frames, Motion.SINUSOID,
                                      seed=int(seed) * 1000 + i,
                                      theta_center=float(c), theta_amp=amp, **kwargs))
    return seqs


# ---------------------------------------------------------------------------
# vector quantised descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Codebook:
    prototypes: np.ndarray

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    def to_dict(self) -> dict:
        return {"K": self.K, "dim": self.prototypes.shape[1],
                "prototypes": self.prototypes.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(np.asarray(d["prototypes"], dtype=float).reshape(d["K"], d["dim"]))


def build_codebook(observations, K: int = 400, seed: int = 0) -> Codebook:
    return Codebook(kmeans_fit(observations, K, seed).centers)


def descriptor(codebook: Codebook, obs) -> np.ndarray:
    """Normalised inverse distances to the prototypes; rows sum to one."""
    O = np.asarray(obs, dtype=float)
    D = cdist(np.atleast_2d(O), codebook.prototypes)
    inv = 1.0 / (D + DESCRIPTOR_EPS)
    out = inv / inv.sum(axis=1, keepdims=True)
    return out[0] if O.ndim == 1 else out

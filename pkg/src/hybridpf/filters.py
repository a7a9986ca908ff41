"""Annealed particle filters with learned proposals.

Four algorithms share one step skeleton:

* APF: resample, propagate through the dynamics, then anneal.
* OPF: propagate by sampling the conditional mixture p(x_n | x_{n-1}, r_n).
* JPF: propagate through a mixture of the dynamics and the bottom-up
  predictor, with the mixing weight gamma adapted from the share of weight
  mass carried by bottom-up particles.
* JLM: APF whose likelihood is blended with the bottom-up density,
  ``p^(1-beta) * q^beta``.

Annealing: for layers ``m = 1..M`` weights are ``lik ** e_m``; every layer
but the last is followed by systematic resampling and a Gaussian diffusion
with per-layer scale.  The last layer uses ``e_M = 1`` on the final
particle positions, so its weights are the full-likelihood weights that
leave the step (with ``M = 1`` this is plain bootstrap SIR).

Randomness is drawn from independent streams keyed by (seed, step,
purpose, layer), so that switching the learned proposal off reproduces the
baseline bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import mixture as mx
from .core import (DegenerateWeightsError, Origin, ParticleSet, effective_sample_size,
                   make_rng, normalize_log_weights, systematic_indices)
from .multimodality import coverage_ratio

# stream purposes
_S_INIT, _S_RESAMPLE, _S_DYN, _S_BU_PICK, _S_BU_DRAW, _S_LAYER_RS, _S_LAYER_DIFF, _S_OPF = range(8)


class Algorithm(str, Enum):
    APF = "apf"
    OPF = "opf"
    JPF = "jpf"
    JLM = "jlm"


class ConfigurationError(ValueError):
    """The configuration asks for a model the bundle does not provide."""


@dataclass(frozen=True)
class AnnealSchedule:
    """Per-layer likelihood exponents and relative diffusion scales."""

    exponents: tuple = None
    diffusion_scales: tuple = None

    def __post_init__(self):
        e = tuple(float(v) for v in self.exponents)
        s = tuple(float(v) for v in self.diffusion_scales)
        if len(e) < 1 or len(e) != len(s):
            raise ValueError("need one exponent and one diffusion scale per layer")
        if any(b <= a for a, b in zip(e, e[1:])) or e[-1] != 1.0 or e[0] <= 0:
            raise ValueError("exponents must increase strictly within (0, 1] and end at 1")
        if any(b >= a for a, b in zip(s, s[1:])) or min(s) <= 0:
            raise ValueError("diffusion scales must be positive and strictly decreasing")
        object.__setattr__(self, "exponents", e)
        object.__setattr__(self, "diffusion_scales", s)

    @property
    def layers(self) -> int:
        return len(self.exponents)

    @classmethod
    def geometric(cls, layers: int = 10, first: float = 0.1) -> "AnnealSchedule":
        """``e_m = k ** (M - m)`` with ``e_1 = first``; scales halve per layer."""
        if layers < 1:
            raise ValueError("layers must be >= 1")
        if layers == 1:
            return cls((1.0,), (1.0,))
        k = first ** (1.0 / (layers - 1))
        e = [k ** (layers - m) for m in range(1, layers + 1)]
        e[-1] = 1.0
        return cls(tuple(e), tuple(0.5 ** m for m in range(layers)))

    def to_dict(self) -> dict:
        return {"exponents": list(self.exponents), "diffusion_scales": list(self.diffusion_scales)}


@dataclass(frozen=True)
class FilterConfig:
    algorithm: Algorithm = Algorithm.APF
    n_particles: int = 200
    gamma0: float = 0.5
    beta: float = 0.35
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule.geometric)
    seed: int = 0
    gamma_mode: str = "mass"        # "mass" or "clt"
    fixed_gamma: Optional[float] = None
    stratify_origins: bool = True
    gamma_floor: float = 0.2       # proposal gamma is clipped to [floor, 1 - floor]

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must be in [0, 1]")
        if not (0.0 <= self.gamma0 <= 1.0):
            raise ValueError("gamma0 must be in [0, 1]")
        if self.fixed_gamma is not None and not (0.0 <= self.fixed_gamma <= 1.0):
            raise ValueError("fixed_gamma must be in [0, 1]")
        if not (0.0 <= self.gamma_floor <= 0.5):
            raise ValueError("gamma_floor must be in [0, 0.5]")
        if self.gamma_mode not in ("mass", "clt"):
            raise ValueError("gamma_mode must be 'mass' or 'clt'")

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm.value, "n_particles": self.n_particles,
                "gamma0": self.gamma0, "beta": self.beta, "schedule": self.schedule.to_dict(),
                "seed": self.seed, "gamma_mode": self.gamma_mode,
                "fixed_gamma": self.fixed_gamma, "stratify_origins": self.stratify_origins,
                "gamma_floor": self.gamma_floor}


@dataclass(frozen=True)
class RandomWalkDynamics:
    """Zero-mean Gaussian random walk with per-dimension scale."""

    scale: np.ndarray

    @classmethod
    def from_latent(cls, latent, c: float = 0.05) -> "RandomWalkDynamics":
        return cls(c * np.sqrt(np.maximum(latent.eigenvalues, 0.0)))

    def sample(self, states, rng) -> np.ndarray:
        return states + self.scale * rng.standard_normal(states.shape)


@dataclass
class CoverageModel:
    """Association tables plus the cluster models used to score coverage."""

    tables: list
    in_model: object
    out_model: object


@dataclass
class ModelBundle:
    """Everything a filter needs besides its configuration.

    ``log_likelihood(obs, states)`` maps an observation and an (N, d) batch
    of states to N log-likelihoods; it must be pure.  Use
    :func:`from_scalar_likelihood` to wrap a per-state likelihood.
    """

    dynamics: RandomWalkDynamics
    log_likelihood: Callable
    hbme: mx.HbmeModel = None
    cbme: mx.CbmeModel = None
    descriptor_fn: Callable = None
    coverage: CoverageModel = None


def from_scalar_likelihood(fn: Callable) -> Callable:
    """Batch log-likelihood from a function ``fn(obs, state) -> likelihood``."""
    def log_lik(obs, states):
        vals = np.array([fn(obs, s) for s in np.atleast_2d(states)], dtype=float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("likelihood must be finite and nonnegative")
        with np.errstate(divide="ignore"):
            return np.log(vals)
    return log_lik


@dataclass
class TrackerState:
    particles: ParticleSet
    gamma: float
    step: int = 0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# weight helpers
# ---------------------------------------------------------------------------


def jlm_log_weight(log_p, log_q, beta: float):
    """``(1 - beta) log p + beta log q`` with the end points returned exactly."""
    if beta == 0.0:
        return log_p
    if beta == 1.0:
        return log_q
    return (1.0 - beta) * np.asarray(log_p) + beta * np.asarray(log_q)


def jlm_weight(likelihood_value, prior_density, beta: float):
    """Joint likelihood ``p ** (1 - beta) * q ** beta`` computed in log space."""
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta must be in [0, 1]")
    p = np.asarray(likelihood_value, dtype=float)
    q = np.asarray(prior_density, dtype=float)
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("inputs must be nonnegative")
    if beta == 0.0:
        out = p
    elif beta == 1.0:
        out = q
    else:
        with np.errstate(divide="ignore"):
            out = np.exp(jlm_log_weight(np.log(p), np.log(q), beta))
    return float(out) if out.ndim == 0 else out


def gamma_update(prev_particles: ParticleSet, gamma0: float = 0.5) -> float:
    """Share of weight mass held by bottom-up particles."""
    w = prev_particles.weights
    total = float(np.sum(w))
    if not np.isfinite(total) or total <= 0:
        return float(gamma0)
    bu = float(np.sum(w[prev_particles.origins == Origin.BU]))
    return float(min(max(bu / total, 0.0), 1.0))


def gamma_clt(prev_particles: ParticleSet, gamma0: float = 0.5) -> float:
    """Inverse-variance mixing weight from the spread of each particle group.

    With ``s1`` and ``s2`` the weighted total variances of the dynamic and
    bottom-up groups the bottom-up share is ``s1 / (s1 + s2)``: the tighter
    group gets the larger share.
    """
    ps = prev_particles
    out = []
    for o in (Origin.DYN, Origin.BU):
        m = ps.origins == o
        w = ps.weights[m]
        if m.sum() < 2 or w.sum() <= 0:
            return gamma_update(ps, gamma0)
        w = w / w.sum()
        mu = w @ ps.states[m]
        out.append(float(np.sum(w @ (ps.states[m] - mu) ** 2)))
    s1, s2 = out
    if s1 + s2 <= 0:
        return float(gamma0)
    return float(s1 / (s1 + s2))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def _descriptor(bundle: ModelBundle, obs):
    if bundle.descriptor_fn is None:
        return np.asarray(obs, dtype=float)
    return bundle.descriptor_fn(obs)


def init_tracker(bundle: ModelBundle, first_obs, cfg: FilterConfig, step: int = 0) -> TrackerState:
    """Particles drawn from the bottom-up predictor for the first frame."""
    if bundle.hbme is None:
        raise ConfigurationError("initialisation needs the bottom-up mixture (hbme)")
    dens = mx.hbme_predict(bundle.hbme, _descriptor(bundle, first_obs))
    states = mx.sample(dens, cfg.n_particles, make_rng(cfg.seed, step, _S_INIT))
    if not np.all(np.isfinite(states)):
        raise DegenerateWeightsError("degenerate density")
    n = cfg.n_particles
    ps = ParticleSet(states, np.full(n, 1.0 / n), np.full(n, Origin.BU, dtype=np.int8), step)
    return TrackerState(ps, float(cfg.gamma0), step, {"ess": float(n), "recovery": False})


def _resample_start(state: TrackerState, cfg: FilterConfig, step: int) -> np.ndarray:
    ps = state.particles
    idx = systematic_indices(ps.weights, make_rng(cfg.seed, step, _S_RESAMPLE))
    return ps.states[idx]


def _anneal(states, origins, log_lik_fn, bundle, cfg, step, diag):
    """Annealing layers; returns final states, origins and full-power log weights."""
    sched = cfg.schedule
    M = sched.layers
    diag["flat_layers"] = []
    for m in range(M):
        ll = log_lik_fn(states)
        if m == M - 1:
            return states, origins, ll
        lw = sched.exponents[m] * ll
        groups = np.unique(origins)
        if groups.size == 1 or not cfg.stratify_origins:
            idx = _layer_indices(lw, make_rng(cfg.seed, step, _S_LAYER_RS, m), diag, m)
        else:
            # each proposal's particles compete only among themselves
            idx = np.empty(len(lw), dtype=np.int64)
            for g in groups:
                members = np.flatnonzero(origins == g)
                sub = _layer_indices(lw[members],
                                     make_rng(cfg.seed, step, _S_LAYER_RS, m, 1 + int(g)), diag, m)
                idx[members] = members[sub]
        states = states[idx]
        origins = origins[idx]
        noise = make_rng(cfg.seed, step, _S_LAYER_DIFF, m).standard_normal(states.shape)
        states = states + sched.diffusion_scales[m] * bundle.dynamics.scale * noise


def _layer_indices(lw, rng, diag, m):
    try:
        w = normalize_log_weights(lw)
    except DegenerateWeightsError:
        w = np.full(len(lw), 1.0 / len(lw))
        diag["flat_layers"].append(m)
    return systematic_indices(w, rng)


def _finish(states, origins, log_w, state: TrackerState, cfg, step, diag, gamma_next=None):
    try:
        w = normalize_log_weights(log_w)
    except DegenerateWeightsError:
        raise DegenerateWeightsError("degenerate weights at full likelihood")
    ps = ParticleSet(states, w, origins, step)
    diag["ess"] = effective_sample_size(ps)
    diag["mass_bu"] = float(np.sum(w[origins == Origin.BU]))
    diag["mass_dyn"] = float(np.sum(w[origins == Origin.DYN]))
    if gamma_next is None:
        gamma_next = state.gamma
    return TrackerState(ps, float(gamma_next), step, diag)


def _lik_fn(bundle: ModelBundle, obs):
    return lambda X: np.asarray(bundle.log_likelihood(obs, X), dtype=float)


def apf_step(state: TrackerState, obs, bundle: ModelBundle, cfg: FilterConfig) -> TrackerState:
    step = state.step + 1
    diag: dict = {}
    states = _resample_start(state, cfg, step)
    states = bundle.dynamics.sample(states, make_rng(cfg.seed, step, _S_DYN))
    origins = np.full(len(states), Origin.DYN, dtype=np.int8)
    states, origins, ll = _anneal(states, origins, _lik_fn(bundle, obs), bundle, cfg, step, diag)
    return _finish(states, origins, ll, state, cfg, step, diag)


def opf_step(state: TrackerState, obs, bundle: ModelBundle, cfg: FilterConfig) -> TrackerState:
    """Propagate by sampling the conditional mixture, then anneal as APF.

    The evidence p(r_n | x_{n-1}) is estimated by the likelihood at the
    single drawn sample, so the propagated weights are the likelihood.
    """
    if bundle.cbme is None:
        raise ConfigurationError("OPF needs the conditional mixture (cbme) in the bundle")
    step = state.step + 1
    diag: dict = {}
    prev = _resample_start(state, cfg, step)
    r = _descriptor(bundle, obs)
    logw, means, variances = mx.cbme_predict_batch(bundle.cbme, prev, r)
    rng = make_rng(cfg.seed, step, _S_OPF)
    n = prev.shape[0]
    u = rng.random(n)
    cdf = np.cumsum(np.exp(logw), axis=1)
    comp = np.minimum((u[:, None] > cdf).sum(axis=1), logw.shape[1] - 1)
    mu = means[np.arange(n), comp]
    sd = np.sqrt(variances[np.arange(n), comp])
    states = mu + sd * rng.standard_normal(mu.shape)
    act = float(np.mean(mx.cbme_activation(bundle.cbme, prev, r)))
    diag["kernel_activation"] = act
    diag["collapse"] = act < 0.01
    origins = np.full(n, Origin.DYN, dtype=np.int8)
    states, origins, ll = _anneal(states, origins, _lik_fn(bundle, obs), bundle, cfg, step, diag)
    return _finish(states, origins, ll, state, cfg, step, diag)


def jpf_step(state: TrackerState, obs, bundle: ModelBundle, cfg: FilterConfig,
             density: mx.PredictiveDensity = None) -> TrackerState:
    """Mixture proposal: ``ceil(gamma N)`` bottom-up draws, the rest from the dynamics.

    Weights are the likelihood alone: the mixture proposal stands in for the
    state prior, so prior and proposal cancel in the importance ratio.
    """
    if bundle.hbme is None:
        raise ConfigurationError("JPF needs the bottom-up mixture (hbme) in the bundle")
    step = state.step + 1
    diag: dict = {}
    if cfg.fixed_gamma is not None:
        gamma = float(cfg.fixed_gamma)
    else:
        # keep both proposals populated so the mass ratio stays informative
        gamma = min(max(state.gamma, cfg.gamma_floor), 1.0 - cfg.gamma_floor)
    states = _resample_start(state, cfg, step)
    states = bundle.dynamics.sample(states, make_rng(cfg.seed, step, _S_DYN))
    n = states.shape[0]
    origins = np.full(n, Origin.DYN, dtype=np.int8)
    n_bu = min(n, int(math.ceil(gamma * n - 1e-12)))
    if n_bu > 0:
        if density is None:
            density = mx.hbme_predict(bundle.hbme, _descriptor(bundle, obs))
        pick = make_rng(cfg.seed, step, _S_BU_PICK).permutation(n)[:n_bu]
        states = states.copy()
        states[pick] = mx.sample(density, n_bu, make_rng(cfg.seed, step, _S_BU_DRAW))
        origins[pick] = Origin.BU
    diag["n_bu"] = n_bu
    diag["gamma_used"] = gamma
    states, origins, ll = _anneal(states, origins, _lik_fn(bundle, obs), bundle, cfg, step, diag)
    out = _finish(states, origins, ll, state, cfg, step, diag)
    if cfg.gamma_mode == "clt":
        g = gamma_clt(out.particles, cfg.gamma0)
    else:
        g = gamma_update(out.particles, cfg.gamma0)
    out.gamma = g
    return out


def jlm_step(state: TrackerState, obs, bundle: ModelBundle, cfg: FilterConfig,
             density: mx.PredictiveDensity = None) -> TrackerState:
    if bundle.hbme is None:
        raise ConfigurationError("JLM needs the bottom-up mixture (hbme) in the bundle")
    step = state.step + 1
    diag: dict = {}
    states = _resample_start(state, cfg, step)
    states = bundle.dynamics.sample(states, make_rng(cfg.seed, step, _S_DYN))
    origins = np.full(len(states), Origin.DYN, dtype=np.int8)
    base = _lik_fn(bundle, obs)
    beta = cfg.beta
    if beta == 0.0:
        fn = base
    else:
        if density is None:
            density = mx.hbme_predict(bundle.hbme, _descriptor(bundle, obs))

        def fn(X):
            return jlm_log_weight(base(X), mx.log_pdf(density, X), beta)
    states, origins, ll = _anneal(states, origins, fn, bundle, cfg, step, diag)
    return _finish(states, origins, ll, state, cfg, step, diag)


_STEPS = {Algorithm.APF: apf_step, Algorithm.OPF: opf_step,
          Algorithm.JPF: jpf_step, Algorithm.JLM: jlm_step}


def step(state, obs, bundle, cfg: FilterConfig, density=None) -> TrackerState:
    fn = _STEPS[cfg.algorithm]
    if cfg.algorithm in (Algorithm.JPF, Algorithm.JLM):
        return fn(state, obs, bundle, cfg, density)
    return fn(state, obs, bundle, cfg)


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@dataclass
class TrackResult:
    estimates: np.ndarray
    map_states: np.ndarray
    ess: np.ndarray
    gamma: np.ndarray
    coverage: np.ndarray
    recovery: np.ndarray
    bu_means: np.ndarray = None
    adapt_error: np.ndarray = None
    mass_bu: np.ndarray = None
    config: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def __len__(self):
        return self.estimates.shape[0]

    def to_csv(self) -> str:
        d = self.estimates.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = (["step"] + [f"est_{j}" for j in range(d)] + [f"map_{j}" for j in range(d)]
                + ["ess", "gamma", "coverage", "recovery"])
        if self.adapt_error is not None:
            head.append("adapt_error")
        w.writerow(head)
        for t in range(len(self)):
            row = ([t] + [repr(float(v)) for v in self.estimates[t]]
                   + [repr(float(v)) for v in self.map_states[t]]
                   + [repr(float(self.ess[t])), repr(float(self.gamma[t])),
                      repr(float(self.coverage[t])), int(self.recovery[t])])
            if self.adapt_error is not None:
                row.append(repr(float(self.adapt_error[t])))
            w.writerow(row)
        return buf.getvalue()


def _frame_coverage(bundle: ModelBundle, r, ps: ParticleSet) -> float:
    cov = bundle.coverage
    if cov is None:
        return float("nan")
    return float(coverage_ratio(cov.tables, r, ps, cov.out_model, in_model=cov.in_model))


def run_sequence(bundle: ModelBundle, observations, cfg: FilterConfig,
                 online_learning: bool = False, elite_fraction: float = 0.01) -> TrackResult:
    """Track a whole sequence, recovering from degenerate frames.

    With ``online_learning`` the top ``elite_fraction`` particles of every
    frame (paired with the frame's descriptor) adapt the bottom-up mixture
    after the step; later frames use the adapted model.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("no observations")
    if online_learning and not (0 < elite_fraction <= mx.MAX_ELITE_FRACTION):
        raise ValueError(f"elite fraction must be in (0, {mx.MAX_ELITE_FRACTION}]")
    bundle = replace(bundle)
    T = len(observations)
    est, mp, ess, gam, cov, rec, bu, mass = [], [], [], [], [], [], [], []
    adapt = [] if online_learning else None
    events = []
    state = None
    for t, obs in enumerate(observations):
        r = _descriptor(bundle, obs)
        density = mx.hbme_predict(bundle.hbme, r) if bundle.hbme is not None else None
        recovered = False
        if state is None:
            state = init_tracker(bundle, obs, cfg, step=t)
        else:
            try:
                state = step(state, obs, bundle, cfg, density)
            except DegenerateWeightsError:
                state = init_tracker(bundle, obs, cfg, step=t)
                recovered = True
                events.append({"step": t, "event": "recovery"})
        ps = state.particles
        est.append(ps.weighted_mean())
        mp.append(ps.map_state())
        ess.append(effective_sample_size(ps))
        gam.append(state.gamma)
        cov.append(_frame_coverage(bundle, r, ps))
        rec.append(recovered)
        mass.append(float(np.sum(ps.weights[ps.origins == Origin.BU])))
        bu.append(density.mean() if density is not None else np.full(ps.dim, np.nan))
        if online_learning:
            order = np.argsort(-ps.weights, kind="stable")
            k = mx._elite_count(len(ps), elite_fraction)
            elite = [(r, ps.states[i], float(ps.weights[i])) for i in order[:k]]
            adapt.append(float(np.linalg.norm(bu[-1] - est[-1])))
            bundle.hbme = mx.online_update(bundle.hbme, elite, elite_fraction, n_total=len(ps))
    return TrackResult(np.array(est), np.array(mp), np.array(ess), np.array(gam),
                       np.array(cov), np.array(rec, dtype=bool), np.array(bu),
                       None if adapt is None else np.array(adapt), np.array(mass),
                       cfg.to_dict(), events)


def model_hash(doc) -> str:
    text = json.dumps(doc, sort_keys=True) if not isinstance(doc, str) else doc
    return hashlib.sha256(text.encode()).hexdigest()

"""Gated Gaussian-mixture conditional densities.

``HbmeModel`` is the two-level mixture used as the bottom-up predictor
p_B(x | r): a view gate, a per-view expert gate and a grid of sparse
regressors.  ``CbmeModel`` is a single-level mixture over the joint input
(previous state, descriptor) used as a learned proposal.  Experts are
trained on per-dimension standardised targets so that the shared noise
precision of a multi-output regressor is meaningful; predictions are
mapped back to state units.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import sparse_bayes as sb
from .core import make_rng
from .multimodality import kmeans_fit

MODEL_VERSION = 1
MAX_ELITE_FRACTION = 0.05
BUFFER_CAP = 2000
ROUTE_TIE_TOL = 1e-9


# ---------------------------------------------------------------------------
# predictive density
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictiveDensity:
    """Diagonal Gaussian mixture.

    ``weights`` (K,), ``means`` (K, d), ``variances`` (K, d).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    floors: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.asarray(self.variances, dtype=float)
        if v.ndim == 1:
            v = np.repeat(v[:, None], m.shape[1], axis=1)
        if w.shape[0] != m.shape[0] or v.shape != m.shape:
            raise ValueError("component shape mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(~(v > 0)):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def log_pdf(density: PredictiveDensity, x) -> np.ndarray:
    """Log density at one point (scalar result) or a batch of rows."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    m, v = density.means, density.variances
    diff = X[:, None, :] - m[None, :, :]
    comp = -0.5 * np.sum(diff ** 2 / v + np.log(2 * np.pi * v), axis=2)
    with np.errstate(divide="ignore"):
        out = logsumexp(comp + np.log(density.weights), axis=1)
    return float(out[0]) if single else out


def pdf(density: PredictiveDensity, x):
    return np.exp(log_pdf(density, x))


def sample(density: PredictiveDensity, n: int, rng_seed) -> np.ndarray:
    """Ancestral samples: component by weight, then a diagonal Gaussian draw."""
    rng = make_rng(rng_seed)
    comp = rng.choice(density.n_components, size=n, p=density.weights)
    z = rng.standard_normal((n, density.dim))
    return density.means[comp] + np.sqrt(density.variances[comp]) * z


def sample_with_components(density: PredictiveDensity, n: int, rng_seed):
    rng = make_rng(rng_seed)
    comp = rng.choice(density.n_components, size=n, p=density.weights)
    z = rng.standard_normal((n, density.dim))
    return density.means[comp] + np.sqrt(density.variances[comp]) * z, comp


# ---------------------------------------------------------------------------
# experts and gates
# ---------------------------------------------------------------------------


@dataclass
class MixtureConfig:
    n_views: int = 8
    n_experts: int = 2
    width_scale: float = 1.0        # multiplies the median-heuristic inverse width
    gate_width_scale: float = 3.0
    max_em_iters: int = 10
    em_change_tol: float = 0.01
    min_expert_samples: int = 5
    gate_candidates: int = 120
    seed: int = 0
    # online adaptation: gates are refitted once per ``gate_batch`` updates
    gate_batch: int = 5
    gate_update_iters: int = 40

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _fit_expert(R, Xs, cfg: sb.KernelConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return sb.fit_regressor(R, Xs, cfg, top_down_max=0)


def _expert_loglik(model: sb.RvmRegressor, R, Xs) -> np.ndarray:
    mean, var = sb.predict(model, R)
    d = Xs.shape[1]
    return -0.5 * (np.sum((Xs - mean) ** 2, axis=1) / var + d * np.log(2 * np.pi * var))


def _partition(R, Xs, n_experts, kcfg, mc: MixtureConfig, seed):
    """Residual k-means split, then hard-EM reassignment to the best expert."""
    n = R.shape[0]
    base = _fit_expert(R, Xs, kcfg)
    if n_experts == 1:
        return np.zeros(n, dtype=int), [base], base
    resid = Xs - sb.predict(base, R)[0]
    n_distinct = np.unique(resid, axis=0).shape[0]
    if n_distinct < n_experts:
        labels = np.arange(n) % n_experts
    else:
        labels = kmeans_fit(resid, n_experts, make_rng(*seed)).assign(resid)
    experts = None
    for _ in range(mc.max_em_iters):
        if np.min(np.bincount(labels, minlength=n_experts)) < mc.min_expert_samples:
            break
        experts = [_fit_expert(R[labels == i], Xs[labels == i], kcfg) for i in range(n_experts)]
        ll = np.column_stack([_expert_loglik(e, R, Xs) for e in experts])
        new = np.argmax(ll, axis=1)
        changed = np.mean(new != labels)
        if changed < mc.em_change_tol or np.min(np.bincount(new, minlength=n_experts)) < mc.min_expert_samples:
            break
        labels = new
        experts = None
    if experts is None:
        counts = np.bincount(labels, minlength=n_experts)
        if np.min(counts) < mc.min_expert_samples:
            # fall back to a balanced split along the first residual direction
            order = np.argsort(resid[:, 0], kind="stable")
            labels = np.empty(n, dtype=int)
            labels[order] = np.arange(n) * n_experts // n
        experts = [_fit_expert(R[labels == i], Xs[labels == i], kcfg) for i in range(n_experts)]
    return labels, experts, base


def _keep_split(R, Xs, experts, gate, base) -> bool:
    """True when the gated experts explain the data better than one expert.

    On unimodal data the residual split is arbitrary, the gate cannot learn
    it and the blended mean is worse than the single fit.
    """
    if len(experts) == 1:
        return True
    P = _gate_proba(gate, R, len(experts))
    ll = np.column_stack([_expert_loglik(e, R, Xs) for e in experts])
    with np.errstate(divide="ignore"):
        mix = np.sum(logsumexp(np.log(P) + ll, axis=1))
    return bool(mix > np.sum(_expert_loglik(base, R, Xs)))


def _fit_gate(R, labels, n_classes, kcfg, mc: MixtureConfig):
    present = np.unique(labels)
    if n_classes == 1 or present.size < 2:
        return None
    return sb.fit_classifier(R, labels, n_classes, kcfg, max_candidates=mc.gate_candidates)


def _gate_proba(gate, R, n_classes, fixed=0):
    if gate is None:
        P = np.zeros((R.shape[0], n_classes))
        P[:, fixed] = 1.0
        return P
    return sb.predict_proba(gate, R)


# ---------------------------------------------------------------------------
# hierarchical mixture
# ---------------------------------------------------------------------------


@dataclass
class HbmeModel:
    view_gate: sb.RvmClassifier
    expert_gates: list
    experts: list              # experts[v][i]
    config: MixtureConfig
    target_scale: np.ndarray
    view_edges: np.ndarray = None
    buffer: deque = field(default_factory=lambda: deque(maxlen=BUFFER_CAP), repr=False)
    routed: dict = field(default_factory=dict, repr=False)
    pending: tuple = field(default=(), repr=False)     # gate rows (r, view, expert)
    n_updates: int = 0

    @property
    def n_views(self) -> int:
        return len(self.experts)

    @property
    def n_experts(self) -> int:
        return len(self.experts[0])

    @property
    def n_components(self) -> int:
        return self.n_views * self.n_experts

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "target_scale": self.target_scale.tolist(),
            "view_edges": None if self.view_edges is None else self.view_edges.tolist(),
            "view_gate": None if self.view_gate is None else self.view_gate.to_dict(),
            "expert_gates": [None if g is None else g.to_dict() for g in self.expert_gates],
            "experts": [[e.to_dict() for e in row] for row in self.experts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HbmeModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported mixture version {d.get('version')}")
        edges = d.get("view_edges")
        return cls(
            None if d["view_gate"] is None else sb.RvmClassifier.from_dict(d["view_gate"]),
            [None if g is None else sb.RvmClassifier.from_dict(g) for g in d["expert_gates"]],
            [[sb.RvmRegressor.from_dict(e) for e in row] for row in d["experts"]],
            MixtureConfig(**d["config"]), np.asarray(d["target_scale"], dtype=float),
            None if edges is None else np.asarray(edges, dtype=float))


def _target_scale(X):
    s = np.std(X, axis=0)
    return np.where(s > 0, s, 1.0)


def hbme_train_arrays(R, X, views, cfg: MixtureConfig = None) -> HbmeModel:
    """Train from stacked descriptors ``R`` (N, k), states ``X`` (N, d) and view labels."""
    mc = cfg or MixtureConfig()
    R = np.atleast_2d(np.asarray(R, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    views = np.asarray(views, dtype=int).reshape(-1)
    if not (R.shape[0] == X.shape[0] == views.shape[0]):
        raise ValueError("descriptor, state and view counts differ")
    if np.any(views < 0) or np.any(views >= mc.n_views):
        raise ValueError("view label out of range")
    need = mc.n_experts * 5
    counts = np.bincount(views, minlength=mc.n_views)
    short = [v for v in range(mc.n_views) if counts[v] < need]
    if short:
        raise ValueError(f"views with fewer than {need} samples: {short}")
    scale = _target_scale(X)
    Xs = X / scale
    gate_cfg = sb.median_heuristic(R).scaled(mc.gate_width_scale)
    view_gate = _fit_gate(R, views, mc.n_views, gate_cfg, mc)
    experts, gates = [], []
    for v in range(mc.n_views):
        m = views == v
        Rv, Xv = R[m], Xs[m]
        kcfg = sb.median_heuristic(Rv).scaled(mc.width_scale)
        labels, ex, base = _partition(Rv, Xv, mc.n_experts, kcfg, mc, (mc.seed, v))
        gate = _fit_gate(Rv, labels, mc.n_experts,
                         sb.median_heuristic(Rv).scaled(mc.gate_width_scale), mc)
        if not _keep_split(Rv, Xv, ex, gate, base):
            ex, gate = [base] * mc.n_experts, None
        experts.append(ex)
        gates.append(gate)
    return HbmeModel(view_gate, gates, experts, mc, scale,
                     np.linspace(0, 2 * np.pi, mc.n_views + 1))


def hbme_train(pairs, cfg: MixtureConfig = None) -> HbmeModel:
    """Train from a list of ``(descriptor, state, view_label)`` triples."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    R = np.array([p[0] for p in pairs], dtype=float)
    X = np.array([p[1] for p in pairs], dtype=float)
    V = np.array([p[2] for p in pairs], dtype=int)
    return hbme_train_arrays(R, X, V, cfg)


def _hbme_parts(model: HbmeModel, R):
    """Per-query log weights (n, K), means (n, K, d) and variances (n, K, d)."""
    n = R.shape[0]
    Nv, Nd = model.n_views, model.n_experts
    Pv = _gate_proba(model.view_gate, R, Nv)
    logw, means, variances = [], [], []
    s2 = model.target_scale ** 2
    with np.errstate(divide="ignore"):
        for v in range(Nv):
            Pe = _gate_proba(model.expert_gates[v], R, Nd)
            for i in range(Nd):
                mu, var = sb.predict(model.experts[v][i], R)
                logw.append(np.log(Pv[:, v]) + np.log(Pe[:, i]))
                means.append(mu * model.target_scale)
                variances.append(var[:, None] * s2)
    logw = np.column_stack(logw)
    return logw, np.stack(means, axis=1), np.stack(variances, axis=1)


def _to_density(logw, means, variances, floors=None):
    w = np.exp(logw - logsumexp(logw))
    w = w / w.sum()
    return PredictiveDensity(w, means, variances, floors)


def hbme_predict(model: HbmeModel, descriptor) -> PredictiveDensity:
    """One component per (view, expert), weighted by the product of gates."""
    r = np.asarray(descriptor, dtype=float).reshape(1, -1)
    logw, means, variances = _hbme_parts(model, r)
    floors = np.array([[e.sigma_D for e in row] for row in model.experts]).reshape(-1)
    floors = floors[:, None] * model.target_scale ** 2
    return _to_density(logw[0], means[0], variances[0], floors)


def hbme_predict_batch(model: HbmeModel, R) -> list:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    logw, means, variances = _hbme_parts(model, R)
    return [_to_density(logw[j], means[j], variances[j]) for j in range(R.shape[0])]


# ---------------------------------------------------------------------------
# conditional mixture
# ---------------------------------------------------------------------------


@dataclass
class CbmeModel:
    gate: sb.RvmClassifier
    experts: list
    config: MixtureConfig
    target_scale: np.ndarray
    state_dim: int

    @property
    def n_components(self) -> int:
        return len(self.experts)

    def to_dict(self) -> dict:
        return {"version": MODEL_VERSION, "config": self.config.to_dict(),
                "target_scale": self.target_scale.tolist(), "state_dim": self.state_dim,
                "gate": None if self.gate is None else self.gate.to_dict(),
                "experts": [e.to_dict() for e in self.experts]}

    @classmethod
    def from_dict(cls, d: dict) -> "CbmeModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported mixture version {d.get('version')}")
        return cls(None if d["gate"] is None else sb.RvmClassifier.from_dict(d["gate"]),
                   [sb.RvmRegressor.from_dict(e) for e in d["experts"]],
                   MixtureConfig(**d["config"]), np.asarray(d["target_scale"], dtype=float),
                   int(d["state_dim"]))


def _product_cfg(Z, d, width_scale):
    sx = sb.median_heuristic(Z[:, :d]).sigma_x * width_scale
    sr = sb.median_heuristic(Z[:, d:]).sigma_x * width_scale
    return sb.KernelConfig(sb.KernelKind.PRODUCT_RBF, sx, sr, d)


def cbme_train_arrays(X_prev, R, X_next, cfg: MixtureConfig = None,
                      n_experts: int = 5) -> CbmeModel:
    mc = cfg or MixtureConfig()
    X_prev = np.atleast_2d(np.asarray(X_prev, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    X_next = np.atleast_2d(np.asarray(X_next, dtype=float))
    if not (X_prev.shape[0] == R.shape[0] == X_next.shape[0]):
        raise ValueError("triple component counts differ")
    if X_prev.shape[0] < n_experts * 10:
        raise ValueError(f"need at least {n_experts * 10} triples, got {X_prev.shape[0]}")
    d = X_prev.shape[1]
    Z = np.hstack([X_prev, R])
    scale = _target_scale(X_next)
    Xs = X_next / scale
    kcfg = _product_cfg(Z, d, mc.width_scale)
    labels, experts, base = _partition(Z, Xs, n_experts, kcfg, mc, (mc.seed, 99))
    gate = _fit_gate(Z, labels, n_experts, _product_cfg(Z, d, mc.gate_width_scale), mc)
    if not _keep_split(Z, Xs, experts, gate, base):
        experts, gate = [base] * n_experts, None
    return CbmeModel(gate, experts, mc, scale, d)


def cbme_train(triples, cfg: MixtureConfig = None, n_experts: int = 5) -> CbmeModel:
    triples = list(triples)
    if not triples:
        raise ValueError("no training triples")
    return cbme_train_arrays(np.array([t[0] for t in triples]), np.array([t[1] for t in triples]),
                             np.array([t[2] for t in triples]), cfg, n_experts)


def _cbme_parts(model: CbmeModel, Z):
    M = model.n_components
    P = _gate_proba(model.gate, Z, M)
    s2 = model.target_scale ** 2
    means, variances = [], []
    for e in model.experts:
        mu, var = sb.predict(e, Z)
        means.append(mu * model.target_scale)
        variances.append(var[:, None] * s2)
    with np.errstate(divide="ignore"):
        logw = np.log(P)
    return logw, np.stack(means, axis=1), np.stack(variances, axis=1)


def cbme_predict(model: CbmeModel, prev_state, descriptor) -> PredictiveDensity:
    z = np.concatenate([np.asarray(prev_state, dtype=float).reshape(-1),
                        np.asarray(descriptor, dtype=float).reshape(-1)])[None, :]
    logw, means, variances = _cbme_parts(model, z)
    return _to_density(logw[0], means[0], variances[0])


def cbme_predict_batch(model: CbmeModel, prev_states, descriptor):
    """Component log weights, means and variances for many previous states."""
    P = np.atleast_2d(np.asarray(prev_states, dtype=float))
    r = np.asarray(descriptor, dtype=float).reshape(1, -1)
    Z = np.hstack([P, np.repeat(r, P.shape[0], axis=0)])
    logw, means, variances = _cbme_parts(model, Z)
    logw = logw - logsumexp(logw, axis=1, keepdims=True)
    return logw, means, variances


def cbme_activation(model: CbmeModel, prev_states, descriptor) -> np.ndarray:
    """Largest kernel activation over each expert's anchors, averaged over experts."""
    P = np.atleast_2d(np.asarray(prev_states, dtype=float))
    r = np.asarray(descriptor, dtype=float).reshape(1, -1)
    Z = np.hstack([P, np.repeat(r, P.shape[0], axis=0)])
    acts = []
    for e in model.experts:
        if e.anchors.shape[0] == 0:
            continue
        acts.append(np.max(sb.kernel_matrix(e.kernel, Z, e.anchors), axis=1))
    if not acts:
        return np.zeros(P.shape[0])
    return np.mean(acts, axis=0)


# ---------------------------------------------------------------------------
# online adaptation
# ---------------------------------------------------------------------------


def route(model: HbmeModel, descriptor, state):
    """Maximum-responsibility ``(view, expert)`` for a labelled pair.

    Ties within ``1e-9`` (in log responsibility) go to the lowest index.
    """
    return route_batch(model, np.reshape(descriptor, (1, -1)), np.reshape(state, (1, -1)))[0]


def route_batch(model: HbmeModel, R, X) -> list:
    """``route`` over rows of ``R`` and ``X``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    logw, means, variances = _hbme_parts(model, R)
    ll = -0.5 * np.sum((X[:, None, :] - means) ** 2 / variances
                       + np.log(2 * np.pi * variances), axis=2)
    with np.errstate(invalid="ignore"):
        resp = logw + ll
    out = []
    for row in resp:
        k = int(np.flatnonzero(row >= np.max(row) - ROUTE_TIE_TOL)[0])
        out.append(divmod(k, model.n_experts))
    return out


def _elite_count(n_total: int, fraction: float) -> int:
    return max(1, int(np.ceil(fraction * n_total - 1e-9)))


def online_update(model: HbmeModel, elite, fraction: float = 0.01, n_total: int = None,
                  em_iters: int = 3) -> HbmeModel:
    """Adapt the mixture with high-weight ``(descriptor, state, weight)`` triples.

    ``elite`` is sorted by weight, highest first.  The first
    ``ceil(fraction * n_total)`` entries are used, where ``n_total`` defaults
    to ``len(elite)``.  Each pair is routed to its maximum-responsibility
    (view, expert); that expert gets a basis update and the route becomes a
    gate label.  Up to ``em_iters`` rounds then re-route
    this call's pairs and feed those that changed route to their new expert
    (regressors cannot forget data, so nothing is removed).  The buffer keeps
    the last ``BUFFER_CAP`` adapted pairs for ``buffer_log_likelihood``.

    Gate labels are queued and both gate levels are refitted on every
    ``config.gate_batch``-th call (``flush_gates`` forces a refit).
    """
    if not (0 < fraction <= MAX_ELITE_FRACTION):
        raise ValueError(f"elite fraction must be in (0, {MAX_ELITE_FRACTION}], got {fraction}")
    elite = list(elite)
    if not elite:
        return model
    w = [float(e[2]) for e in elite]
    if any(a < b for a, b in zip(w, w[1:])):
        raise ValueError("elite must be sorted by weight, highest first")
    n_use = min(len(elite), _elite_count(n_total or len(elite), fraction))
    elite = elite[:n_use]
    experts = [list(row) for row in model.experts]
    gates = list(model.expert_gates)
    view_gate = model.view_gate
    buffer = deque(model.buffer, maxlen=BUFFER_CAP)
    routed = dict(model.routed)
    snapshot = replace(model, experts=experts, expert_gates=gates)

    adds: dict = {}
    Re = np.array([np.asarray(e[0], dtype=float).reshape(-1) for e in elite])
    Xe = np.array([np.asarray(e[1], dtype=float).reshape(-1) for e in elite])
    for r, x, (v, i) in zip(Re, Xe, route_batch(snapshot, Re, Xe)):
        adds.setdefault((v, i), []).append((r, x / model.target_scale))
        buffer.append((r, x))
        routed[_pair_key(r, x)] = (v, i)
    _apply_adds(experts, adds)
    for _ in range(em_iters):
        snapshot = replace(model, experts=experts, expert_gates=gates)
        moved: dict = {}
        for r, x, dest in zip(Re, Xe, route_batch(snapshot, Re, Xe)):
            k = _pair_key(r, x)
            if routed.get(k) != dest:
                moved.setdefault(dest, []).append((r, x / model.target_scale))
                routed[k] = dest
        if not moved:
            break
        _apply_adds(experts, moved)
    # one gate label per distinct descriptor, from its highest-weight pair;
    # conflicting labels on an identical input would only blur the gates
    pending, seen = list(model.pending), set()
    for r, x in zip(Re, Xe):
        if r.tobytes() not in seen:
            seen.add(r.tobytes())
            pending.append((r, *routed[_pair_key(r, x)]))
    n_updates = model.n_updates + 1
    if n_updates % max(1, model.config.gate_batch) == 0:
        view_gate, gates = _refit_gates(model, view_gate, gates, pending)
        pending = []
    live = {_pair_key(r, x) for r, x in buffer}
    routed = {k: val for k, val in routed.items() if k in live}
    return HbmeModel(view_gate, gates, experts, model.config, model.target_scale,
                     model.view_edges, buffer, routed, tuple(pending), n_updates)


def flush_gates(model: HbmeModel) -> HbmeModel:
    """Refit the gates with any labels still waiting for the next batch."""
    if not model.pending:
        return model
    view_gate, gates = _refit_gates(model, model.view_gate, list(model.expert_gates),
                                    model.pending)
    return replace(model, view_gate=view_gate, expert_gates=gates, pending=())


def _refit_gates(model, view_gate, gates, pending):
    kw = dict(n_outer=1, inner_iter=model.config.gate_update_iters,
              max_basis=model.config.gate_candidates)
    if view_gate is not None:
        view_gate = sb.update_classifier(view_gate, np.array([p[0] for p in pending]),
                                         np.array([p[1] for p in pending]), **kw)
    by_view: dict = {}
    for r, v, i in pending:
        by_view.setdefault(v, []).append((r, i))
    for v, items in sorted(by_view.items()):
        if gates[v] is not None:
            gates[v] = sb.update_classifier(gates[v], np.array([a for a, _ in items]),
                                            np.array([b for _, b in items]), **kw)
    return view_gate, gates


def _pair_key(r, x):
    return (np.asarray(r).tobytes(), np.asarray(x).tobytes())


def _apply_adds(experts, adds):
    for (v, i), items in sorted(adds.items()):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            experts[v][i] = sb.update_basis(experts[v][i], items, reestimate="active",
                                            restarts=False)


def buffer_log_likelihood(model: HbmeModel) -> float:
    """Predictive log density of the adaptation buffer under the model."""
    if not model.buffer:
        return 0.0
    total = 0.0
    for r, x in model.buffer:
        total += log_pdf(hbme_predict(model, r), x)
    return float(total)

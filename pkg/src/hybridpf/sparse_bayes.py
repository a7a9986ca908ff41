"""Relevance vector machines with automatic relevance determination.

Regression uses the fast sequential marginal-likelihood optimiser: one basis
function at a time is added, re-estimated or deleted, whichever raises the
log evidence most.  The change for a single basis reduces to a closed form
in its "sparsity" ``s`` and "quality" ``q`` factors, which is also what
drives the online basis updates (``ml_delta`` / ``update_basis``).

Several outputs share one basis set, one ARD precision vector and one noise
level, so the evidence is a sum over outputs and the optimal precision of a
basis is ``D s^2 / (||q||^2 - D s)``.

Classification is a multinomial softmax over the same kernel bases, fitted
by MAP estimation with a per-class Laplace approximation and MacKay ARD
updates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

MODEL_VERSION = 1
ALPHA_PRUNE = 1e8
BETA_MAX = 1e10          # noise variance floor sigma_D >= 1e-10
DUPLICATE_TOL = 1e-12
_LOG2PI = np.log(2 * np.pi)


class KernelKind(str, Enum):
    RBF = "rbf"
    PRODUCT_RBF = "product_rbf"


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel ``exp(-sigma * ||a - b||^2)`` (inverse-width convention).

    For ``PRODUCT_RBF`` the input is the concatenation ``(x, r)``; the first
    ``split`` columns are ``x`` and use ``sigma_x``, the rest use ``sigma_r``.
    """

    kind: KernelKind = KernelKind.RBF
    sigma_x: float = 1.0
    sigma_r: float = 1.0
    split: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.sigma_x <= 0 or (self.kind is KernelKind.PRODUCT_RBF and self.sigma_r <= 0):
            raise ValueError("kernel widths must be positive")
        if self.kind is KernelKind.PRODUCT_RBF and self.split < 1:
            raise ValueError("PRODUCT_RBF needs split >= 1")

    def scaled(self, factor_x: float = 1.0, factor_r: float = 1.0) -> "KernelConfig":
        return replace(self, sigma_x=self.sigma_x * factor_x,
                       sigma_r=self.sigma_r * factor_r)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "sigma_x": self.sigma_x,
                "sigma_r": self.sigma_r, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        return cls(KernelKind(d["kind"]), d["sigma_x"], d["sigma_r"], d["split"])


def _median_sqdist(X: np.ndarray, max_points: int = 400) -> float:
    X = np.atleast_2d(X)
    if X.shape[0] > max_points:
        X = X[np.linspace(0, X.shape[0] - 1, max_points).astype(int)]
    d2 = cdist(X, X, "sqeuclidean")
    d2 = d2[np.triu_indices_from(d2, k=1)]
    d2 = d2[d2 > 0]
    return float(np.median(d2)) if d2.size else 1.0


def median_heuristic(X, split: int = 0) -> KernelConfig:
    """Kernel widths ``1 / (2 * median pairwise squared distance)``.

    With ``split > 0`` a ``PRODUCT_RBF`` config is returned whose two blocks
    get their own median.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if split:
        return KernelConfig(KernelKind.PRODUCT_RBF,
                            0.5 / _median_sqdist(X[:, :split]),
                            0.5 / _median_sqdist(X[:, split:]), split)
    return KernelConfig(KernelKind.RBF, 0.5 / _median_sqdist(X))


def _sqdist(A, B) -> np.ndarray:
    # the matrix-product expansion is far faster for long descriptors
    if A.shape[1] < 32:
        return cdist(A, B, "sqeuclidean")
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(d2, 0.0)


def kernel_matrix(cfg: KernelConfig, A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"input dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if cfg.kind is KernelKind.RBF:
        return np.exp(-cfg.sigma_x * _sqdist(A, B))
    s = cfg.split
    e = cfg.sigma_x * _sqdist(A[:, :s], B[:, :s])
    e += cfg.sigma_r * _sqdist(A[:, s:], B[:, s:])
    return np.exp(-e)


@dataclass(frozen=True)
class BasisSet:
    anchors: np.ndarray
    active: np.ndarray = None

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        active = (np.ones(anchors.shape[0], dtype=bool) if self.active is None
                  else np.asarray(self.active, dtype=bool))
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "active", active)


def design_row(cfg: KernelConfig, basis: BasisSet, x) -> np.ndarray:
    """Kernel activations of ``x`` against every anchor of ``basis``."""
    return kernel_matrix(cfg, np.asarray(x, dtype=float).reshape(1, -1),
                         basis.anchors)[0]


def _unique_first(X: np.ndarray) -> np.ndarray:
    """Indices of the first occurrence of every distinct row, in order."""
    _, idx = np.unique(X, axis=0, return_index=True)
    return np.sort(idx)


# ---------------------------------------------------------------------------
# fast sequential sparse Bayesian learning
# ---------------------------------------------------------------------------


class _Design:
    """Candidate design matrix and its Gram products over a growing dataset.

    Column 0 is the bias when enabled; the others are kernels centred on the
    distinct training inputs.
    """

    def __init__(self, cfg, X, T, bias):
        self.cfg = cfg
        self.bias = bias
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.T = np.asarray(T, dtype=float).reshape(self.X.shape[0], -1)
        self.rows = _unique_first(self.X)          # X row of each anchor column
        K = kernel_matrix(cfg, self.X, self.X[self.rows])
        self.Phi = np.hstack([np.ones((self.X.shape[0], 1)), K]) if bias else K
        self.G = self.Phi.T @ self.Phi
        self.FT = self.Phi.T @ self.T
        self.tt = float(np.sum(self.T ** 2))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.T.shape[1]

    def column_of_row(self, r: int) -> int:
        j = np.flatnonzero(self.rows == r)
        if j.size == 0:
            raise KeyError(r)
        return int(j[0]) + int(self.bias)

    def row_of_column(self, c: int) -> int:
        return int(self.rows[c - int(self.bias)])

    def find_row(self, x) -> int:
        """Index of an existing distinct row equal to ``x`` (within tolerance), or -1."""
        diff = np.max(np.abs(self.X[self.rows] - x), axis=1)
        hit = np.flatnonzero(diff <= DUPLICATE_TOL)
        return int(self.rows[hit[0]]) if hit.size else -1

    def extend(self, X, T):
        """Add data rows whose inputs already have anchor columns."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = np.asarray(T, dtype=float).reshape(X.shape[0], -1)
        K = kernel_matrix(self.cfg, X, self.X[self.rows])
        R = np.hstack([np.ones((X.shape[0], 1)), K]) if self.bias else K
        self.X = np.vstack([self.X, X])
        self.T = np.vstack([self.T, T])
        self.Phi = np.vstack([self.Phi, R])
        self.G += R.T @ R
        self.FT += R.T @ T
        self.tt += float(np.sum(T ** 2))

    def append(self, x, t):
        """Add one data row; a new anchor column is added if ``x`` is new."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        t = np.asarray(t, dtype=float).reshape(1, -1)
        new_anchor = self.find_row(x[0]) < 0
        self.X = np.vstack([self.X, x])
        self.T = np.vstack([self.T, t])
        if new_anchor:
            self.rows = np.append(self.rows, self.n - 1)
        krow = kernel_matrix(self.cfg, x, self.X[self.rows])
        row = np.hstack([[[1.0]], krow]) if self.bias else krow
        if new_anchor:
            col = kernel_matrix(self.cfg, self.X[:-1], x)
            self.Phi = np.hstack([self.Phi, col])
            self.G = np.pad(self.G, ((0, 1), (0, 1)))
            self.G[:, -1] = self.Phi.T @ col[:, 0]
            self.G[-1, :] = self.G[:, -1]
            self.FT = np.vstack([self.FT, col.T @ self.T[:-1]])
        self.Phi = np.vstack([self.Phi, row])
        self.G += row.T @ row
        self.FT += row.T @ t
        self.tt += float(np.sum(t ** 2))


@dataclass
class _Fit:
    active: list            # candidate columns in the model
    alpha: np.ndarray       # precision per active column
    beta: float
    Sigma: np.ndarray = None
    mu: np.ndarray = None   # (len(active), D)
    log_ml: float = -np.inf


def _chol(H):
    """Cholesky factor, with growing diagonal jitter if rounding broke PD."""
    try:
        return cho_factor(H, lower=True)
    except np.linalg.LinAlgError:
        pass
    scale = np.mean(np.abs(np.diag(H)))
    for k in range(-12, -3):
        try:
            return cho_factor(H + (scale * 10.0 ** k) * np.eye(H.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("posterior precision is not positive definite")


def _posterior(design: _Design, fit: _Fit) -> _Fit:
    A = np.asarray(fit.active)
    H = np.diag(fit.alpha) + fit.beta * design.G[np.ix_(A, A)]
    c, low = _chol(H)
    Sigma = cho_solve((c, low), np.eye(len(A)))
    b = design.FT[A]
    mu = fit.beta * Sigma @ b
    n, d = design.n, design.d
    logdet_H = 2.0 * np.sum(np.log(np.diag(c)))
    # t' C^-1 t = beta t't - beta^2 b' Sigma b, summed over outputs
    quad = fit.beta * design.tt - fit.beta * np.sum(b * mu)
    log_ml = -0.5 * (d * (n * _LOG2PI - n * np.log(fit.beta) + logdet_H
                          - np.sum(np.log(fit.alpha))) + quad)
    fit.Sigma, fit.mu, fit.log_ml = Sigma, mu, float(log_ml)
    return fit


def _factors(design: _Design, fit: _Fit):
    """Sparsity/quality factors (s, ||q||^2) of every candidate column.

    For active columns these are the leave-one-out values, so the same
    closed form covers adding, re-estimating and deleting.
    """
    A = np.asarray(fit.active)
    beta = fit.beta
    GA = design.G[:, A]
    GAS = GA @ fit.Sigma
    S = beta * np.diag(design.G) - beta ** 2 * np.sum(GAS * GA, axis=1)
    Q = beta * design.FT - beta ** 2 * GAS @ design.FT[A]
    s, q = S.copy(), Q.copy()
    a = fit.alpha
    denom = a - S[A]
    s[A] = a * S[A] / denom
    q[A] = (a / denom)[:, None] * Q[A]
    return s, np.sum(q ** 2, axis=1)


def _ell(alpha, s, qq, d):
    """Evidence contribution of one basis at precision ``alpha``."""
    with np.errstate(invalid="ignore", divide="ignore"):    # round-off makes s < -alpha
        return 0.5 * (d * np.log(alpha / (alpha + s)) + qq / (alpha + s))


def _optimal_alpha(s, qq, d):
    theta = qq - d * s
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(theta > 0, d * s ** 2 / np.where(theta > 0, theta, 1.0), np.inf)


def _beta_step(design: _Design, fit: _Fit) -> float:
    A = np.asarray(fit.active)
    gamma = 1.0 - fit.alpha * np.diag(fit.Sigma)
    mu = fit.mu
    resid = (design.tt - 2 * np.sum(mu * design.FT[A])
             + np.sum(mu * (design.G[np.ix_(A, A)] @ mu)))
    resid = max(resid, 0.0)
    dof = design.d * max(design.n - np.sum(gamma), 1e-12)
    if resid <= dof / BETA_MAX:
        return BETA_MAX
    return float(np.clip(dof / resid, 1e-12, BETA_MAX))


def _sbl(design: _Design, fit: _Fit, max_iters: int, tol: float,
         history: list, candidates=None):
    """Greedy evidence maximisation; mutates and returns ``fit``.

    ``candidates`` restricts which inactive columns may be added.
    Returns ``(fit, converged)``.
    """
    d = design.d
    n_cols = design.G.shape[0]
    allowed = np.ones(n_cols, dtype=bool) if candidates is None else np.zeros(n_cols, bool)
    if candidates is not None:
        allowed[list(candidates)] = True
        allowed[fit.active] = True
    fit = _posterior(design, fit)
    history.append(fit.log_ml)
    for _ in range(max_iters):
        s, qq = _factors(design, fit)
        new_alpha = _optimal_alpha(s, qq, d)
        is_active = np.zeros(n_cols, dtype=bool)
        is_active[fit.active] = True
        cur = np.full(n_cols, np.inf)
        cur[fit.active] = fit.alpha
        gain = np.full(n_cols, -np.inf)
        finite_new = np.isfinite(new_alpha)
        ell_new = np.zeros(n_cols)
        ell_new[finite_new] = _ell(new_alpha[finite_new], s[finite_new], qq[finite_new], d)
        ell_cur = np.zeros(n_cols)
        ell_cur[is_active] = _ell(cur[is_active], s[is_active], qq[is_active], d)
        gain[allowed] = (ell_new - ell_cur)[allowed]
        if len(fit.active) == 1:
            # never delete the last basis
            j = fit.active[0]
            if not finite_new[j]:
                gain[j] = -np.inf
        # guard against round-off at stationary points
        gain[~is_active & ~finite_new] = -np.inf
        best = int(np.argmax(gain))
        if not np.isfinite(gain[best]) or gain[best] <= tol:
            old = fit.log_ml
            trial = replace(fit, beta=_beta_step(design, fit))
            trial = _posterior(design, trial)
            if trial.log_ml > old + tol:
                fit = trial
                history.append(fit.log_ml)
                continue
            return fit, True
        active = list(fit.active)
        alpha = list(fit.alpha)
        if is_active[best]:
            k = active.index(best)
            if finite_new[best]:
                alpha[k] = float(new_alpha[best])
            else:
                del active[k], alpha[k]
        else:
            active.append(best)
            alpha.append(float(new_alpha[best]))
        prev = fit
        fit = _posterior(design, _Fit(active, np.asarray(alpha), fit.beta))
        if fit.log_ml < prev.log_ml:
            # numerical trouble (ill-conditioned H); keep the previous state
            return prev, True
        # occasional noise re-estimation, kept only if it helps
        trial = _posterior(design, replace(fit, beta=_beta_step(design, fit)))
        if trial.log_ml > fit.log_ml:
            fit = trial
        history.append(fit.log_ml)
    return fit, False


def _optimise(design: _Design, fit: _Fit, max_iters: int, tol: float, history: list,
              candidates=None, max_rounds: int = 20):
    """Greedy evidence maximisation followed by drop-one restarts.

    Neighbouring kernels are nearly interchangeable, so the greedy path can
    stall in a poorer local optimum.  Each round removes one basis, re-runs
    the greedy optimiser from there and keeps the result if the evidence
    went up; it stops when no removal leads anywhere better.
    """
    fit, converged = _sbl(design, fit, max_iters, tol, history, candidates)
    for _ in range(max_rounds):
        if not converged or len(fit.active) < 2:
            break
        improved = False
        for k in range(len(fit.active)):
            keep = [i for i in range(len(fit.active)) if i != k]
            trial = _Fit([fit.active[i] for i in keep], fit.alpha[keep], fit.beta)
            trial, ok = _sbl(design, trial, max_iters, tol, [], candidates)
            if ok and trial.log_ml > fit.log_ml + max(tol, 1e-9):
                fit = trial
                history.append(fit.log_ml)
                improved = True
                break
        if not improved:
            break
    return fit, converged


def _top_down(design: _Design, beta: float, max_iters: int = 300, tol: float = 1e-6) -> _Fit:
    """All bases active, MacKay fixed-point updates, prune diverging precisions."""
    m = design.G.shape[0]
    active = np.arange(m)
    alpha = np.full(m, 1e-2)
    d = design.d
    for _ in range(max_iters):
        GA = design.G[np.ix_(active, active)]
        H = np.diag(alpha[active]) + beta * GA
        try:
            c, low = cho_factor(H, lower=True)
        except np.linalg.LinAlgError:
            break
        Sigma = cho_solve((c, low), np.eye(active.size))
        mu = beta * Sigma @ design.FT[active]
        gamma = 1.0 - alpha[active] * np.diag(Sigma)
        new = d * np.clip(gamma, 1e-12, None) / np.maximum(np.sum(mu ** 2, axis=1), 1e-300)
        change = np.max(np.abs(np.log(new) - np.log(alpha[active])))
        alpha[active] = new
        resid = design.tt - 2 * np.sum(mu * design.FT[active]) + np.sum(mu * (GA @ mu))
        beta = float(np.clip(d * max(design.n - gamma.sum(), 1e-12) / max(resid, 1e-300),
                             1e-12, BETA_MAX))
        keep = alpha[active] < ALPHA_PRUNE
        if not np.any(keep):
            keep[np.argmin(alpha[active])] = True
        active = active[keep]
        if change < tol:
            break
    return _Fit([int(a) for a in active], alpha[active].copy(), beta)


def _initial_fit(design: _Design, beta: float) -> _Fit:
    d = design.d
    diagG = np.diag(design.G)
    S = beta * diagG
    qq = beta ** 2 * np.sum(design.FT ** 2, axis=1)
    score = np.sum(design.FT ** 2, axis=1) / np.maximum(diagG, 1e-300)
    j = int(np.argmax(score))
    a = _optimal_alpha(S[j], qq[j], d)
    if not np.isfinite(a):
        a = 1.0
    return _Fit([j], np.array([float(a)]), beta)


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


@dataclass
class RvmRegressor:
    """Trained multi-output RVM.

    ``W`` has shape (D, n_basis) and ``Sigma`` (n_basis, n_basis); the
    bases are the bias (if ``bias_active``) followed by ``anchors``.
    The training data are kept for online basis updates.
    """

    kernel: KernelConfig
    anchors: np.ndarray
    bias_active: bool
    W: np.ndarray
    alpha: np.ndarray
    Sigma: np.ndarray
    sigma_D: float
    X: np.ndarray
    T: np.ndarray
    log_ml: float
    converged: bool = True
    use_bias: bool = True
    history: list = field(default_factory=list, repr=False)
    _design: _Design = field(default=None, repr=False, compare=False)
    _fit: _Fit = field(default=None, repr=False, compare=False)

    @property
    def n_basis(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.W.shape[0]

    @property
    def basis(self) -> BasisSet:
        return BasisSet(self.anchors)

    def phi(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.X.shape[1]:
            raise ValueError(
                f"input dimension mismatch: expected {self.X.shape[1]}, got {X.shape[1]}")
        parts = []
        if self.bias_active:
            parts.append(np.ones((X.shape[0], 1)))
        if self.anchors.shape[0]:
            parts.append(kernel_matrix(self.kernel, X, self.anchors))
        return np.hstack(parts)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "kernel": self.kernel.to_dict(),
            "anchors": self.anchors.tolist(),
            "bias_active": self.bias_active,
            "use_bias": self.use_bias,
            "W": self.W.tolist(),
            "alpha": self.alpha.tolist(),
            "Sigma": self.Sigma.reshape(-1).tolist(),
            "sigma_D": self.sigma_D,
            "X": self.X.tolist(),
            "T": self.T.tolist(),
            "log_ml": self.log_ml,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RvmRegressor":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        nb = len(d["alpha"])
        X = np.asarray(d["X"], dtype=float)
        anchors = np.asarray(d["anchors"], dtype=float).reshape(-1, X.shape[1])
        return cls(KernelConfig.from_dict(d["kernel"]), anchors, d["bias_active"],
                   np.asarray(d["W"], dtype=float).reshape(-1, nb),
                   np.asarray(d["alpha"], dtype=float),
                   np.asarray(d["Sigma"], dtype=float).reshape(nb, nb),
                   d["sigma_D"], X, np.asarray(d["T"], dtype=float).reshape(X.shape[0], -1),
                   d["log_ml"], d["converged"], d["use_bias"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RvmRegressor":
        return cls.from_dict(json.loads(text))


def _regressor_from_fit(design: _Design, fit: _Fit, converged, history, use_bias):
    cols = list(fit.active)
    order = sorted(range(len(cols)), key=lambda k: cols[k])
    cols = [cols[k] for k in order]
    alpha = fit.alpha[order]
    Sigma = fit.Sigma[np.ix_(order, order)]
    mu = fit.mu[order]
    bias_active = design.bias and 0 in cols
    anchor_rows = [design.row_of_column(c) for c in cols if not (design.bias and c == 0)]
    anchors = design.X[anchor_rows] if anchor_rows else np.zeros((0, design.X.shape[1]))
    model = RvmRegressor(design.cfg, anchors.copy(), bias_active, mu.T.copy(), alpha.copy(),
                         Sigma.copy(), 1.0 / fit.beta, design.X.copy(), design.T.copy(),
                         fit.log_ml, converged, use_bias, list(history))
    model._design = design
    model._fit = _Fit(cols, alpha.copy(), fit.beta, Sigma, mu, fit.log_ml)
    return model


def _ensure_design(model: RvmRegressor):
    """Rebuild the cached design/fit state (e.g. after deserialisation)."""
    if model._design is not None:
        return model._design, model._fit
    design = _Design(model.kernel, model.X, model.T, model.use_bias)
    cols = []
    if model.bias_active:
        cols.append(0)
    for a in model.anchors:
        r = design.find_row(a)
        cols.append(design.column_of_row(r))
    fit = _posterior(design, _Fit(cols, model.alpha.copy(), 1.0 / model.sigma_D))
    model._design, model._fit = design, fit
    return design, fit


def fit_regressor(X, T, cfg: KernelConfig = None, max_iters: int = 2000,
                  bias: bool = True, tol: float = 1e-8, beta0: float = None,
                  top_down_max: int = 600) -> RvmRegressor:
    """Fit an RVM regressor by sequential evidence maximisation.

    Parameters
    ----------
    X : array (N, d_in)
    T : array (N,) or (N, D)
    cfg : kernel configuration; the median heuristic is used when omitted.
    max_iters : basis updates before giving up; the best model so far is
        returned with ``converged=False`` and a warning.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.ndim(T) == 1 and len(T) > 1:
        X = X.T
    T = np.asarray(T, dtype=float)
    T = T.reshape(X.shape[0], -1)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isfinite(T)) or not np.all(np.isfinite(X)):
        raise ValueError("inputs and targets must be finite")
    if cfg is None:
        cfg = median_heuristic(X)
    design = _Design(cfg, X, T, bias)
    if beta0 is None:
        var = float(np.mean(np.var(T, axis=0)))
        beta0 = 1.0 / (0.1 * var) if var > 0 else 1e6
    history: list = []
    fit, converged = _optimise(design, _initial_fit(design, beta0), max_iters, tol, history)
    if design.G.shape[0] <= top_down_max:
        # a second start from the full basis often escapes the greedy path's optimum
        alt_hist: list = []
        alt, alt_conv = _optimise(design, _top_down(design, beta0), max_iters, tol, alt_hist)
        if alt_conv and alt.log_ml > fit.log_ml:
            fit, converged = alt, alt_conv
            history = alt_hist
    if not converged:
        warnings.warn("RVM regression did not converge; returning best model so far",
                      RuntimeWarning, stacklevel=2)
    return _regressor_from_fit(design, fit, converged, history, bias)


WIDTH_SCALES = (0.3, 1.0, 3.0, 10.0, 30.0, 100.0)


def fit_regressor_evidence(X, T, scales=WIDTH_SCALES, base: KernelConfig = None,
                           **kwargs) -> RvmRegressor:
    """Fit over a grid of kernel widths and keep the highest-evidence model.

    ``scales`` multiply the inverse width(s) of ``base`` (the median heuristic
    by default).  Extra keyword arguments go to :func:`fit_regressor`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.ndim(T) == 1 and len(T) > 1:
        X = X.T
    if base is None:
        base = median_heuristic(X)
    best = None
    for f in scales:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = fit_regressor(X, T, base.scaled(f, f), **kwargs)
        if best is None or m.log_ml > best.log_ml:
            best = m
    return best


def predict(model: RvmRegressor, X):
    """Predictive mean ``W phi`` and variance ``sigma_D + phi' Sigma phi``.

    A single input (1-D) gives a (D,) mean and a scalar variance; a batch
    gives (n, D) and (n,).
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    P = model.phi(X.reshape(1, -1) if single else X)
    mean = P @ model.W.T
    var = model.sigma_D + np.einsum("ij,jk,ik->i", P, model.Sigma, P)
    var = np.maximum(var, model.sigma_D)
    if single:
        return mean[0], float(var[0])
    return mean, var


def log_marginal_likelihood(model: RvmRegressor) -> float:
    return float(model.log_ml)


def _candidate_factors(design: _Design, fit: _Fit, x_new, t_new):
    """(s, ||q||^2) of a new basis centred on ``x_new`` after the data row joins."""
    cfg = design.cfg
    X = np.vstack([design.X, np.reshape(x_new, (1, -1))])
    T = np.vstack([design.T, np.reshape(t_new, (1, -1))])
    cols = fit.active
    PhiA = []
    for c in cols:
        if design.bias and c == 0:
            PhiA.append(np.ones(X.shape[0]))
        else:
            PhiA.append(kernel_matrix(cfg, X, design.X[[design.row_of_column(c)]])[:, 0])
    PhiA = np.column_stack(PhiA)
    phi = kernel_matrix(cfg, X, np.reshape(x_new, (1, -1)))[:, 0]
    beta = fit.beta
    H = np.diag(fit.alpha) + beta * PhiA.T @ PhiA
    L = _chol(H)[0]  # only the lower triangle is read
    u = solve_triangular(L, PhiA.T @ phi, lower=True)
    V = solve_triangular(L, PhiA.T @ T, lower=True)
    S = beta * phi @ phi - beta ** 2 * u @ u
    Q = beta * phi @ T - beta ** 2 * u @ V
    return float(S), float(np.sum(Q ** 2))


def ml_delta(model: RvmRegressor, x_new, t_new, return_duplicate: bool = False):
    """Change in log evidence if ``(x_new, t_new)`` joins the basis.

    The data row is added in both cases; the value compares the model with
    the new basis at its optimal precision against the model without it,
    all other hyperparameters held fixed.  It is never negative: zero means
    the optimal precision is infinite (the basis would be pruned).

    A candidate coinciding with an active anchor yields 0; pass
    ``return_duplicate=True`` to get ``(delta, is_duplicate)``.
    """
    design, fit = _ensure_design(model)
    x_new = np.asarray(x_new, dtype=float).reshape(-1)
    t_new = np.asarray(t_new, dtype=float).reshape(-1)
    if x_new.shape[0] != design.X.shape[1] or t_new.shape[0] != design.d:
        raise ValueError("candidate dimension mismatch")
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(t_new))):
        raise ValueError("candidate must be finite")
    dup = bool(model.anchors.shape[0]) and bool(
        np.any(np.max(np.abs(model.anchors - x_new), axis=1) <= DUPLICATE_TOL))
    if dup:
        return (0.0, True) if return_duplicate else 0.0
    s, qq = _candidate_factors(design, fit, x_new, t_new)
    a = _optimal_alpha(s, qq, design.d)
    delta = float(_ell(a, s, qq, design.d)) if np.isfinite(a) else 0.0
    return (delta, False) if return_duplicate else delta


def update_basis(model: RvmRegressor, add, prune_threshold: float = ALPHA_PRUNE,
                 max_iters: int = 2000, tol: float = 1e-8,
                 reestimate: str = "all", restarts: bool = True) -> RvmRegressor:
    """Online basis update with new labelled pairs.

    Every pair joins the data; its kernel joins the basis iff ``ml_delta``
    is positive.  Bases whose precision exceeds ``prune_threshold`` are then
    deleted and the hyperparameters re-estimated on the union data.  With
    ``reestimate="active"`` only current bases are revisited (cheaper);
    ``"all"`` lets any training input re-enter the basis.  ``restarts``
    enables the drop-one restarts after the greedy pass.
    """
    add = list(add)
    if not add:
        return model
    design, fit = _ensure_design(model)
    design = _copy_design(design)
    fit = _Fit(list(fit.active), fit.alpha.copy(), fit.beta)
    new_cols = []
    pending = []    # rows with known inputs, added in one batch
    for x, t in add:
        x = np.asarray(x, dtype=float).reshape(-1)
        t = np.asarray(t, dtype=float).reshape(-1)
        if design.find_row(x) >= 0:
            pending.append((x, t))
            continue
        if pending:
            design.extend([p for p, _ in pending], [q for _, q in pending])
            pending = []
        design.append(x, t)
        # the factors only need the Gram matrices, so no posterior per step
        s, qq = _candidate_factors_after(design, fit)
        a = float(_optimal_alpha(s, qq, design.d))
        if np.isfinite(a) and _ell(a, s, qq, design.d) > 0:
            col = design.G.shape[0] - 1
            fit = _Fit(list(fit.active) + [col], np.append(fit.alpha, a), fit.beta)
            new_cols.append(col)
    if pending:
        design.extend([p for p, _ in pending], [q for _, q in pending])
    keep = [k for k, a in enumerate(fit.alpha) if a <= prune_threshold]
    if not keep:
        keep = [int(np.argmin(fit.alpha))]
    fit = _posterior(design, _Fit([fit.active[k] for k in keep], fit.alpha[keep], fit.beta))
    history = list(model.history)
    candidates = None if reestimate == "all" else new_cols
    fit, converged = _optimise(design, fit, max_iters, tol, history, candidates=candidates,
                               max_rounds=20 if restarts else 0)
    return _regressor_from_fit(design, fit, converged, history, design.bias)


def _candidate_factors_after(design: _Design, fit: _Fit):
    """(s, ||q||^2) of the most recently appended column (data already included)."""
    A = np.asarray(fit.active)
    beta = fit.beta
    H = np.diag(fit.alpha) + beta * design.G[np.ix_(A, A)]
    L = _chol(H)[0]  # only the lower triangle is read
    j = design.G.shape[0] - 1
    u = solve_triangular(L, design.G[A, j], lower=True)
    V = solve_triangular(L, design.FT[A], lower=True)
    S = beta * design.G[j, j] - beta ** 2 * u @ u
    Q = beta * design.FT[j] - beta ** 2 * u @ V
    return float(S), float(np.sum(Q ** 2))


def _copy_design(design: _Design) -> _Design:
    new = object.__new__(_Design)
    new.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                         for k, v in design.__dict__.items()})
    return new


def batch_log_evidence(X, T, anchors, alpha, beta, cfg, bias_alpha=None) -> float:
    """Dense log N(T | 0, beta^-1 I + Phi A^-1 Phi') summed over outputs.

    Reference implementation used to check the fast factorised updates.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float).reshape(X.shape[0], -1)
    cols = []
    alphas = []
    if bias_alpha is not None:
        cols.append(np.ones((X.shape[0], 1)))
        alphas.append(bias_alpha)
    if len(anchors):
        cols.append(kernel_matrix(cfg, X, anchors))
        alphas.extend(np.atleast_1d(alpha))
    Phi = np.hstack(cols)
    C = np.eye(X.shape[0]) / beta + (Phi / np.asarray(alphas, dtype=float)) @ Phi.T
    sign, logdet = np.linalg.slogdet(C)
    sol = np.linalg.solve(C, T)
    n, d = T.shape
    return float(-0.5 * (d * (n * _LOG2PI + logdet) + np.sum(T * sol)))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass
class RvmClassifier:
    """Sparse kernel softmax classifier.

    ``Lambda`` has shape (n_basis, n_classes); bases are the bias (if
    ``bias_active``) followed by ``anchors``.
    """

    kernel: KernelConfig
    anchors: np.ndarray
    bias_active: bool
    Lambda: np.ndarray
    alpha: np.ndarray
    n_classes: int
    X: np.ndarray = None
    y: np.ndarray = None
    # kernel matrix of X against the anchors, kept to make updates cheap
    _K: np.ndarray = field(default=None, repr=False, compare=False)

    def phi(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        parts = []
        if self.bias_active:
            parts.append(np.ones((X.shape[0], 1)))
        if self.anchors.shape[0]:
            if X.shape[1] != self.anchors.shape[1]:
                raise ValueError("input dimension mismatch")
            parts.append(kernel_matrix(self.kernel, X, self.anchors))
        return np.hstack(parts)

    def logits(self, X) -> np.ndarray:
        return self.phi(X) @ self.Lambda

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "kernel": self.kernel.to_dict(),
            "anchors": self.anchors.tolist(),
            "bias_active": self.bias_active,
            "Lambda": self.Lambda.tolist(),
            "alpha": self.alpha.tolist(),
            "n_classes": self.n_classes,
            "X": None if self.X is None else self.X.tolist(),
            "y": None if self.y is None else self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RvmClassifier":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        X = None if d["X"] is None else np.asarray(d["X"], dtype=float)
        dim = X.shape[1] if X is not None else (len(d["anchors"][0]) if d["anchors"] else 0)
        return cls(KernelConfig.from_dict(d["kernel"]),
                   np.asarray(d["anchors"], dtype=float).reshape(-1, dim),
                   d["bias_active"],
                   np.asarray(d["Lambda"], dtype=float).reshape(-1, d["n_classes"]),
                   np.asarray(d["alpha"], dtype=float), d["n_classes"], X,
                   None if d["y"] is None else np.asarray(d["y"], dtype=int))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RvmClassifier":
        return cls.from_dict(json.loads(text))


def predict_proba(model: RvmClassifier, X) -> np.ndarray:
    """Class probabilities; rows sum to one."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    P = softmax(model.logits(X.reshape(1, -1) if single else X), axis=1)
    return P[0] if single else P


def _map_softmax(Phi, Y, alpha, L0, max_iter=60, gtol=1e-6):
    m, c = L0.shape

    def f(flat):
        L = flat.reshape(m, c)
        Z = Phi @ L
        Z = Z - np.max(Z, axis=1, keepdims=True)
        E = np.exp(Z)
        s = np.sum(E, axis=1)
        nll = -(np.sum(Y * Z) - np.sum(np.log(s))) + 0.5 * np.sum(alpha[:, None] * L * L)
        P = E / s[:, None]
        grad = Phi.T @ (P - Y) + alpha[:, None] * L
        return nll, grad.reshape(-1)

    res = minimize(f, L0.reshape(-1), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol})
    return res.x.reshape(m, c)


def _ard_classify(Phi, Y, alpha, L, prune, n_outer, tol=1e-2, inner_iter=60):
    active = np.arange(Phi.shape[1])
    for _ in range(n_outer):
        Pa = Phi[:, active]
        L_a = _map_softmax(Pa, Y, alpha[active], L[active], max_iter=inner_iter)
        L[active] = L_a
        P = softmax(Pa @ L_a, axis=1)
        gamma = np.zeros(len(active))
        for k in range(Y.shape[1]):
            w = P[:, k] * (1 - P[:, k])
            H = (Pa * w[:, None]).T @ Pa + np.diag(alpha[active])
            try:
                c_, low = cho_factor(H, lower=True)
                diag = np.diag(cho_solve((c_, low), np.eye(len(active))))
            except np.linalg.LinAlgError:
                diag = np.diag(np.linalg.pinv(H))
            gamma += 1.0 - alpha[active] * diag
        gamma = np.clip(gamma, 0.0, None)
        new = gamma / np.maximum(np.sum(L_a ** 2, axis=1), 1e-300)
        new = np.clip(new, 1e-8, 1e12)
        change = np.max(np.abs(np.log(new) - np.log(alpha[active])))
        alpha[active] = new
        keep = alpha[active] <= prune
        if not np.any(keep):
            keep[np.argmin(alpha[active])] = True
        pruned = not np.all(keep)
        L[active[~keep]] = 0.0
        active = active[keep]
        if change < tol and not pruned:
            break
    return active, alpha, L


def _select_candidates(X: np.ndarray, max_candidates: int) -> np.ndarray:
    """Deterministic, spread-out subset of the distinct rows (farthest point)."""
    rows = _unique_first(X)
    if rows.size <= max_candidates:
        return rows
    U = X[rows]
    chosen = [0]
    d2 = np.sum((U - U[0]) ** 2, axis=1)
    for _ in range(max_candidates - 1):
        j = int(np.argmax(d2))
        chosen.append(j)
        d2 = np.minimum(d2, np.sum((U - U[j]) ** 2, axis=1))
    return rows[np.sort(chosen)]


def fit_classifier(X, labels, n_classes: int, cfg: KernelConfig = None,
                   max_candidates: int = 120, n_outer: int = 15,
                   prune_threshold: float = ALPHA_PRUNE) -> RvmClassifier:
    """Fit a sparse multinomial kernel classifier.

    Raises ``ValueError("degenerate labels")`` when fewer than two classes
    are present, and if any class has no sample.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(labels, dtype=int).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ValueError("labels length mismatch")
    present = np.unique(y)
    if present.size < 2:
        raise ValueError("degenerate labels")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError("labels out of range")
    missing = sorted(set(range(n_classes)) - set(present.tolist()))
    if missing:
        raise ValueError(f"classes without samples: {missing}")
    if cfg is None:
        cfg = median_heuristic(X)
    rows = _select_candidates(X, max_candidates)
    K = kernel_matrix(cfg, X, X[rows])
    Phi = np.hstack([np.ones((X.shape[0], 1)), K])
    Y = np.eye(n_classes)[y]
    alpha = np.full(Phi.shape[1], 1.0)
    alpha[0] = 1e-2
    L = np.zeros((Phi.shape[1], n_classes))
    active, alpha, L = _ard_classify(Phi, Y, alpha, L, prune_threshold, n_outer)
    return _classifier_from(cfg, X, y, rows, active, alpha, L, n_classes, K)


def _classifier_from(cfg, X, y, rows, active, alpha, L, n_classes, K):
    active = np.sort(active)
    bias = bool(np.any(active == 0))
    anchor_cols = active[active > 0]
    anchors = X[rows[anchor_cols - 1]] if anchor_cols.size else np.zeros((0, X.shape[1]))
    return RvmClassifier(cfg, anchors.copy(), bias, L[active].copy(), alpha[active].copy(),
                         n_classes, X.copy(), y.copy(), K[:, anchor_cols - 1])


def update_classifier(model: RvmClassifier, X_new, y_new, n_outer: int = 5,
                      prune_threshold: float = ALPHA_PRUNE,
                      inner_iter: int = 60, max_basis: int = None) -> RvmClassifier:
    """Add labelled samples and their kernels as candidate bases, then refit.

    The refit is warm-started from the current weights and precisions and
    only revisits the current bases plus the new candidates.  ``inner_iter``
    caps the optimiser iterations per outer round.  With ``max_basis`` the
    old anchors with the largest precision (least relevant) are dropped
    before the refit so that at most ``max_basis`` anchors are candidates.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    y_new = np.asarray(y_new, dtype=int).reshape(-1)
    if X_new.shape[0] == 0:
        return model
    X = X_new if model.X is None else np.vstack([model.X, X_new])
    y = y_new if model.y is None else np.concatenate([model.y, y_new])
    old = model.anchors
    fresh = [x for x in X_new
             if not (old.shape[0] and np.any(np.max(np.abs(old - x), axis=1) <= DUPLICATE_TOL))]
    fresh = np.unique(np.array(fresh), axis=0) if fresh else np.zeros((0, X.shape[1]))
    anchors = np.vstack([old, fresh]) if fresh.shape[0] else old
    K_old = model._K
    if K_old is None or model.X is None or K_old.shape != (model.X.shape[0], old.shape[0]):
        K = kernel_matrix(model.kernel, X, anchors)
    else:
        if fresh.shape[0]:
            K_old = np.hstack([K_old, kernel_matrix(model.kernel, model.X, fresh)])
        K = np.vstack([K_old, kernel_matrix(model.kernel, X_new, anchors)])
    Phi = np.hstack([np.ones((X.shape[0], 1)), K])
    n_old = old.shape[0]
    alpha = np.empty(Phi.shape[1])
    L = np.zeros((Phi.shape[1], model.n_classes))
    prior_alpha = float(np.median(model.alpha)) if model.alpha.size else 1.0
    alpha[:] = prior_alpha
    if model.bias_active:
        alpha[0] = model.alpha[0]
        L[0] = model.Lambda[0]
        off = 1
    else:
        alpha[0] = prune_threshold  # inactive bias starts at the pruning edge
        off = 0
    alpha[1:1 + n_old] = model.alpha[off:]
    L[1:1 + n_old] = model.Lambda[off:]
    excess = anchors.shape[0] - max_basis if max_basis is not None else 0
    if excess > 0:
        drop = 1 + np.argsort(-alpha[1:1 + n_old], kind="stable")[:min(excess, n_old)]
        keep = np.setdiff1d(np.arange(Phi.shape[1]), drop)
        Phi, alpha, L = Phi[:, keep], alpha[keep], L[keep]
        anchors, K = anchors[keep[1:] - 1], K[:, keep[1:] - 1]
    Y = np.eye(model.n_classes)[y]
    active, alpha, L = _ard_classify(Phi, Y, alpha, L, prune_threshold, n_outer,
                                     inner_iter=inner_iter)
    active = np.sort(active)
    bias = bool(np.any(active == 0))
    anchor_cols = active[active > 0] - 1
    return RvmClassifier(model.kernel, anchors[anchor_cols].copy(), bias, L[active].copy(),
                         alpha[active].copy(), model.n_classes, X, y, K[:, anchor_cols])

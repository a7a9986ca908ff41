"""Training, serialisation and scoring glue for the chain benchmark.

A trained bundle holds the chain spec, the PCA latent model, the descriptor
codebook, the bottom-up mixtures and the coverage association tables.  It is
stored as a single JSON document so that identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from . import filters as F
from . import mixture as mx
from . import multimodality as mm
from . import synthbench as S

DATASET_FORMAT = "hybridpf-dataset"
BUNDLE_FORMAT = "hybridpf-bundle"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def dataset_dumps(sequences) -> str:
    seqs = list(sequences)
    if not seqs:
        raise ValueError("no sequences")
    doc = {"format": DATASET_FORMAT, "version": FORMAT_VERSION,
           "sequences": [s.to_dict() for s in seqs]}
    return json.dumps(doc, sort_keys=True)


def dataset_loads(text: str) -> list:
    doc = json.loads(text)
    if doc.get("format") != DATASET_FORMAT:
        raise ValueError("not a dataset file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')}")
    return [S.GroundTruthSequence.from_dict(d) for d in doc["sequences"]]


def stack(sequences):
    """Concatenated states, observations and view labels."""
    seqs = list(sequences)
    return (np.vstack([s.states for s in seqs]), np.vstack([s.observations for s in seqs]),
            np.concatenate([s.view_labels for s in seqs]))


def mirror_poses(spec: S.ChainSpec, poses) -> list:
    """For every pose, the other members of its ambiguity set (possibly none)."""
    out = []
    for y in np.atleast_2d(poses):
        members = S.ambiguity_set(spec, y)
        out.append([m for m in members if not np.array_equal(m, y)])
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    latent_dim: int = None              # None: min(5, d_ambient - 1)
    codebook_size: int = 400
    n_views: int = 8
    n_experts: int = 2
    cbme_experts: int = 5
    train_cbme: bool = True
    width_grid: tuple = (0.5, 1.0, 2.0)
    validation_fraction: float = 0.1
    mirror_augment: bool = True
    coverage_k_in: int = 800       # descriptor clusters for the coverage table
    coverage_k_out: int = 6        # latent-state clusters
    dynamics_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.width_grid = tuple(float(w) for w in self.width_grid)
        if not self.width_grid or min(self.width_grid) <= 0:
            raise ValueError("width_grid needs positive entries")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in [0, 1)")
        if len(self.width_grid) > 1 and self.validation_fraction == 0:
            raise ValueError("a width grid needs a validation split")
        if self.codebook_size < 1 or self.coverage_k_in < 1 or self.coverage_k_out < 1:
            raise ValueError("cluster counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_grid"] = list(self.width_grid)
        return d


@dataclass
class TrainedModels:
    spec: S.ChainSpec
    latent: core.LatentModel
    codebook: S.Codebook
    hbme: mx.HbmeModel
    cbme: mx.CbmeModel = None
    coverage: F.CoverageModel = None
    config: TrainConfig = field(default_factory=TrainConfig)
    report: dict = field(default_factory=dict)

    def dynamics(self) -> F.RandomWalkDynamics:
        return F.RandomWalkDynamics.from_latent(self.latent, self.config.dynamics_scale)

    def bundle(self) -> F.ModelBundle:
        spec, latent, cb = self.spec, self.latent, self.codebook
        return F.ModelBundle(
            self.dynamics(),
            lambda obs, X: S.log_likelihood(spec, obs, X, latent),
            self.hbme, self.cbme, lambda obs: S.descriptor(cb, obs), self.coverage)

    def to_dict(self) -> dict:
        cov = None
        if self.coverage is not None:
            cov = {"in_centers": self.coverage.in_model.centers.tolist(),
                   "out_centers": self.coverage.out_model.centers.tolist(),
                   "tables": [{"input_cluster": t.input_cluster,
                               "assoc": [[int(k), int(v)] for k, v in t.assoc.items()]}
                              for t in self.coverage.tables]}
        return {"format": BUNDLE_FORMAT, "version": FORMAT_VERSION,
                "spec": self.spec.to_dict(), "latent": self.latent.to_dict(),
                "codebook": self.codebook.to_dict(), "hbme": self.hbme.to_dict(),
                "cbme": None if self.cbme is None else self.cbme.to_dict(),
                "coverage": cov, "config": self.config.to_dict(), "report": self.report}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModels":
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError("not a model bundle")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported bundle version {d.get('version')}")
        cov = None
        if d.get("coverage") is not None:
            c = d["coverage"]
            tables = [mm.AssociationTable(t["input_cluster"], {k: v for k, v in t["assoc"]})
                      for t in c["tables"]]
            cov = F.CoverageModel(tables, mm.ClusterModel(np.asarray(c["in_centers"], dtype=float)),
                                  mm.ClusterModel(np.asarray(c["out_centers"], dtype=float)))
        return cls(S.ChainSpec.from_dict(d["spec"]), core.LatentModel.from_dict(d["latent"]),
                   S.Codebook.from_dict(d["codebook"]), mx.HbmeModel.from_dict(d["hbme"]),
                   None if d.get("cbme") is None else mx.CbmeModel.from_dict(d["cbme"]),
                   cov, TrainConfig(**d["config"]), d.get("report", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "TrainedModels":
        return cls.from_dict(json.loads(text))


def _augmented(spec, sequences, mirror: bool):
    """Per-sequence ``(states, observations, views, source_frames, is_copy)``.

    Mirrored copies of DEPTH_SIGN sequences follow their source; every row
    carries the index of its original frame across the whole set.
    """
    out, offset = [], 0
    for s in sequences:
        src = offset + np.arange(len(s))
        offset += len(s)
        out.append((s.states, s.observations, s.view_labels, src, False))
        if mirror and S.Ambiguity(spec.ambiguity) is S.Ambiguity.DEPTH_SIGN:
            mirrors = mirror_poses(spec, s.states)
            n_alt = min(len(m) for m in mirrors)
            for j in range(n_alt):
                out.append((np.array([m[j] for m in mirrors]), s.observations,
                            s.view_labels, src, True))
    return out


def _validation_scores(model: mx.HbmeModel, latent, spec, R, X, Y) -> dict:
    """Predictive density and top-component errors on held-out pairs."""
    nll, sq, ang = [], [], []
    for r, x, y in zip(R, X, Y):
        dens = mx.hbme_predict(model, r)
        nll.append(-float(mx.log_pdf(dens, x)))
        top = dens.means[int(np.argmax(dens.weights))]
        targets = [core.encode(latent, m) for m in S.ambiguity_set(spec, y)]
        k = int(np.argmin([np.sum((top - t) ** 2) for t in targets]))
        sq.append(float(np.sum((top - targets[k]) ** 2)))
        ang.append(float(joint_angle_error(spec, core.decode(latent, top)[None], y[None])[0]))
    return {"nlpd": float(np.mean(nll)), "rmse": float(np.sqrt(np.mean(sq))),
            "angle_error_deg": float(np.mean(ang)), "n": int(len(R))}


def train_models(sequences, cfg: TrainConfig = None, codebook_sequences=None,
                 log=None) -> TrainedModels:
    """Fit every model in a bundle from ground-truth training sequences.

    The codebook is built from ``codebook_sequences`` when given.  Building
    it from the training observations themselves puts prototypes on top of
    isolated training points, whose descriptors then become one-hot and
    unlike any test descriptor, so a disjoint set is recommended.

    With more than one entry in ``cfg.width_grid`` a random
    ``validation_fraction`` of the frames is held out, an hBME is fitted on
    the rest for every width factor and the factor with the lowest
    held-out negative log predictive density is used for the final fit on
    all frames.
    """
    cfg = cfg or TrainConfig()
    say = log or (lambda msg: None)
    seqs = list(sequences)
    if not seqs:
        raise ValueError("no training sequences")
    spec = seqs[0].spec
    if any(s.spec != spec for s in seqs):
        raise ValueError("training sequences use different chain specs")
    d_latent = cfg.latent_dim or S.default_latent_dim(spec)
    parts = _augmented(spec, seqs, cfg.mirror_augment)
    Y = np.vstack([p[0] for p in parts])
    O = np.vstack([p[1] for p in parts])
    V = np.concatenate([p[2] for p in parts])
    latent = core.pca_fit(Y, d_latent)
    X = core.encode(latent, Y)
    cb_obs = stack(codebook_sequences)[1] if codebook_sequences else stack(seqs)[1]
    K = min(cfg.codebook_size, np.unique(cb_obs, axis=0).shape[0])
    codebook = S.build_codebook(cb_obs, K, cfg.seed)
    say(f"codebook: {K} prototypes from {cb_obs.shape[0]} observations")
    R = S.descriptor(codebook, O)
    mcfg = mx.MixtureConfig(n_views=cfg.n_views, n_experts=cfg.n_experts, seed=cfg.seed)

    report = {"n_frames": int(sum(len(s) for s in seqs)), "n_pairs": int(len(R)),
              "latent_dim": d_latent, "codebook_size": K}
    width = cfg.width_grid[0]
    if cfg.validation_fraction > 0:
        # split by original frame so mirrored copies stay with their source
        n_orig = report["n_frames"]
        n_val = max(1, int(round(cfg.validation_fraction * n_orig)))
        perm = core.make_rng(cfg.seed, 7).permutation(n_orig)
        is_val = np.zeros(n_orig, dtype=bool)
        is_val[perm[:n_val]] = True
        mask_val = is_val[np.concatenate([p[3] for p in parts])]
        first_copy = ~np.concatenate([np.full(len(p[3]), p[4]) for p in parts])
        scores = {}
        for w in cfg.width_grid:
            model = mx.hbme_train_arrays(R[~mask_val], X[~mask_val], V[~mask_val],
                                         _with_width(mcfg, w))
            vmask = mask_val & first_copy
            scores[w] = _validation_scores(model, latent, spec, R[vmask], X[vmask], Y[vmask])
            say(f"width x{w:g}: validation nlpd {scores[w]['nlpd']:.4f}, "
                f"angle error {scores[w]['angle_error_deg']:.3f} deg")
        width = min(cfg.width_grid, key=lambda w: (scores[w]["nlpd"], w))
        report["validation"] = {"fraction": cfg.validation_fraction, "n_held_out": n_val,
                                "scores": {repr(w): s for w, s in scores.items()},
                                "selected_width": width}
    mcfg = _with_width(mcfg, width)
    hbme = mx.hbme_train_arrays(R, X, V, mcfg)
    say("hBME trained")
    cbme = None
    if cfg.train_cbme:
        Xp, Rn, Xn = _triples(parts, latent, codebook)
        cbme = mx.cbme_train_arrays(Xp, Rn, Xn, mcfg, n_experts=cfg.cbme_experts)
        say("cBME trained")
    coverage = build_coverage(R, X, cfg.coverage_k_in, cfg.coverage_k_out, cfg.seed)
    return TrainedModels(spec, latent, codebook, hbme, cbme, coverage, cfg, report)


def _with_width(mcfg: mx.MixtureConfig, w: float) -> mx.MixtureConfig:
    d = mcfg.to_dict()
    d["width_scale"] = float(w)
    return mx.MixtureConfig(**d)


def _triples(parts, latent, codebook):
    Xp, Rn, Xn = [], [], []
    for Ys, Os, *_ in parts:
        if Ys.shape[0] < 2:
            continue
        Xs = core.encode(latent, Ys)
        Xp.append(Xs[:-1])
        Rn.append(S.descriptor(codebook, Os[1:]))
        Xn.append(Xs[1:])
    if not Xp:
        raise ValueError("need sequences with at least two frames for the cBME")
    return np.vstack(Xp), np.vstack(Rn), np.vstack(Xn)


def build_coverage(R, X, k_in: int, k_out: int, seed: int = 0) -> F.CoverageModel:
    """Descriptor and latent-state clusterings plus their association tables."""
    k_in = min(k_in, np.unique(R, axis=0).shape[0])
    k_out = min(k_out, np.unique(X, axis=0).shape[0])
    in_model = mm.kmeans_fit(R, k_in, seed)
    out_model = mm.kmeans_fit(X, k_out, seed)
    return F.CoverageModel(mm.build_associations(R, X, in_model, out_model), in_model, out_model)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def joint_angle_error(spec: S.ChainSpec, est_poses, true_poses, mode_aware: bool = True):
    """Per-frame mean absolute joint-angle error in degrees.

    The global orientation (entry 0) is not a joint and is left out.  With
    ``mode_aware`` the error is taken against the closest member of the
    truth's ambiguity set, since those poses explain the frame equally well.
    """
    E = np.atleast_2d(np.asarray(est_poses, dtype=float))
    T = np.atleast_2d(np.asarray(true_poses, dtype=float))
    if E.shape != T.shape:
        raise ValueError(f"shape mismatch: {E.shape} vs {T.shape}")
    out = np.empty(E.shape[0])
    for i, (e, t) in enumerate(zip(E, T)):
        members = S.ambiguity_set(spec, t) if mode_aware else [t]
        out[i] = min(np.mean(np.abs(_wrap(e[1:] - m[1:]))) for m in members)
    return np.degrees(out)


def joint_position_error(spec: S.ChainSpec, est_poses, true_poses, mode_aware: bool = True):
    """Per-frame mean joint position error divided by the total chain length."""
    E = np.atleast_2d(np.asarray(est_poses, dtype=float))
    T = np.atleast_2d(np.asarray(true_poses, dtype=float))
    if E.shape != T.shape:
        raise ValueError(f"shape mismatch: {E.shape} vs {T.shape}")
    Pe = S.forward_kinematics(spec, E)
    out = np.empty(E.shape[0])
    for i, t in enumerate(T):
        members = S.ambiguity_set(spec, t) if mode_aware else [t]
        Pm = S.forward_kinematics(spec, np.array(members))
        out[i] = min(np.mean(np.linalg.norm(Pe[i] - p, axis=-1)) for p in Pm)
    return out / spec.total_length


def score_track(models: TrainedModels, result: F.TrackResult, truth: S.GroundTruthSequence,
                use_map: bool = False) -> dict:
    """Per-frame error arrays for a tracking result."""
    est = result.map_states if use_map else result.estimates
    poses = core.decode(models.latent, est)
    return {"angle_error_deg": joint_angle_error(models.spec, poses, truth.states),
            "position_error": joint_position_error(models.spec, poses, truth.states)}


def quiet_train(*args, **kwargs) -> TrainedModels:
    """``train_models`` with numerical warnings silenced."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return train_models(*args, **kwargs)

"""Acceptance criteria 1-10.

Each test prints one ``CRITERION n: PASS|FAIL`` line (also repeated in the
session summary) and then asserts the same condition.  Seeds used here are
held out from the runs that fixed the benchmark protocols: tracking
criteria use sequence seeds from 1000 (criteria 5 and 6) and 3000
(criterion 7).
"""

import json
import os
import time

import numpy as np
import pytest

from hybridpf import cli, core
from hybridpf import filters as F
from hybridpf import mixture as mx
from hybridpf import multimodality as M
from hybridpf import pipeline as P
from hybridpf import sparse_bayes as sb
from hybridpf import synthbench as S

N_PAIRED = 20
GAMMAS = []     # gamma series of every benchmark run, checked by criterion 8


def sinc(x):
    return np.sinc(x / np.pi)


@pytest.fixture(scope="module")
def depth_models():
    """DEPTH_SIGN benchmark bundle: 128 x 30 training frames, disjoint codebook."""
    t0 = time.perf_counter()
    spec = S.ChainSpec()
    cfg = P.TrainConfig(width_grid=(1.0,), validation_fraction=0.0, train_cbme=False)
    models = P.quiet_train(S.training_set(spec, 128, 30, seed=0), cfg,
                           codebook_sequences=S.training_set(spec, 128, 30, seed=5))
    print(f"\nbenchmark bundle trained in {time.perf_counter() - t0:.1f} s")
    return models


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_association_weight(acceptance_report):
    t0 = time.perf_counter()
    ha = M.association_weight(M.table_from_indices([1, 1, 1, 1, 2, 3]))
    hb = M.association_weight(M.table_from_indices([1, 1, 2, 2, 3, 3]))
    dt = time.perf_counter() - t0
    ok = abs(ha - 4.762) <= 1e-3 and abs(hb - 6.0) <= 1e-3 and dt < 1
    acceptance_report(1, ok, f"h(A)={ha:.4f} (4.762), h(B)={hb:.4f} (6.000)", dt)
    assert ok


# -- 2 ---------------------------------------------------------------------------------------


def test_criterion_2_rvm_sinc(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.uniform(-10, 10, (100, 1))
    y = sinc(X[:, 0]) + 0.1 * rng.standard_normal(100)
    m = sb.fit_regressor_evidence(X, y)
    Xt = np.linspace(-10, 10, 1000)[:, None]
    rmse = float(np.sqrt(np.mean((sb.predict(m, Xt)[0][:, 0] - sinc(Xt[:, 0])) ** 2)))
    _, var = sb.predict(m, np.linspace(-30, 30, 10_000)[:, None])
    var_ok = bool(np.all(var >= m.sigma_D))
    dt = time.perf_counter() - t0
    ok = rmse < 0.12 and m.n_basis < 20 and var_ok and dt < 10
    acceptance_report(2, ok, f"test RMSE {rmse:.4f} (<0.12), {m.n_basis} bases (<20), "
                      f"variance >= sigma_D on 1e4 sweep: {var_ok}", dt)
    assert ok


# -- 3 ------------------------------------------------------------------------------------------


def generative_problem(seed, noise=0.1, n=100, k=20):
    cfg = sb.KernelConfig("rbf", 0.5)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-10, 10, n)[:, None]
    anchors = X[[5, 40, 77]]
    w = np.array([1.0, -0.8, 0.6])
    y = sb.kernel_matrix(cfg, X, anchors) @ w + noise * rng.standard_normal(n)
    Xn = rng.uniform(-10, 10, k)[:, None]
    yn = sb.kernel_matrix(cfg, Xn, anchors) @ w + noise * rng.standard_normal(k)
    return cfg, X, y, Xn, yn


def _incremental_vs_batch(seed):
    cfg, X, y, Xn, yn = generative_problem(seed)
    m = sb.fit_regressor(X, y, cfg)
    mu = sb.update_basis(m, list(zip(Xn, yn)))
    g = sb.fit_regressor(np.vstack([X, Xn]), np.append(y, yn), cfg)
    Xt = np.linspace(-10, 10, 500)[:, None]
    rmse = float(np.sqrt(np.mean((sb.predict(mu, Xt)[0] - sb.predict(g, Xt)[0]) ** 2)))
    return abs(mu.log_ml - g.log_ml), rmse


def test_criterion_3_incremental_matches_batch(acceptance_report):
    t0 = time.perf_counter()
    dml, rmse = _incremental_vs_batch(0)
    dt = time.perf_counter() - t0
    rate = np.mean([d <= 1e-4 and r <= 1e-3 for d, r in map(_incremental_vs_batch, range(1, 11))])
    ok = dml <= 1e-4 and rmse <= 1e-3 and dt < 30
    acceptance_report(3, ok, f"20 candidates: |dlogML| {dml:.2e} (<=1e-4), prediction RMSE "
                      f"{rmse:.2e} (<=1e-3); agreement on seeds 1-10: {rate:.0%} (information)", dt)
    assert ok


# -- 4 ----------------------------------------------------------------------------------------------


def test_criterion_4_degenerate_equivalence(depth_models, acceptance_report):
    t0 = time.perf_counter()
    b = depth_models.bundle()
    seq = S.generate_sequence(depth_models.spec, 15, seed=1000)
    obs = seq.observations

    def run(**kw):
        return F.run_sequence(b, obs, F.FilterConfig(seed=1000, **kw))

    apf = run()
    jlm = run(algorithm="jlm", beta=0.0)
    jpf = run(algorithm="jpf", fixed_gamma=0.0)
    same_jlm = np.array_equal(apf.estimates, jlm.estimates) and \
        np.array_equal(apf.map_states, jlm.map_states)
    same_jpf = np.array_equal(apf.estimates, jpf.estimates) and \
        np.array_equal(apf.map_states, jpf.map_states)

    # one annealing layer versus a bootstrap SIR step written out directly
    c = F.FilterConfig(schedule=F.AnnealSchedule.geometric(1), seed=1000)
    st = F.init_tracker(b, obs[0], c)
    out = F.apf_step(st, obs[1], b, c)
    step = st.step + 1
    idx = core.systematic_indices(st.particles.weights, core.make_rng(c.seed, step, F._S_RESAMPLE))
    x = st.particles.states[idx]
    x = x + b.dynamics.scale * core.make_rng(c.seed, step, F._S_DYN).standard_normal(x.shape)
    w = core.normalize_log_weights(b.log_likelihood(obs[1], x))
    same_sir = np.array_equal(out.particles.states, x) and np.array_equal(out.particles.weights, w)
    dt = time.perf_counter() - t0
    ok = same_jlm and same_jpf and same_sir and dt < 10
    acceptance_report(4, ok, f"JLM(beta=0)==APF: {same_jlm}, JPF(gamma=0)==APF: {same_jpf}, "
                      f"1-layer APF==SIR: {same_sir}", dt)
    assert ok


# -- 5 ---------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_mode_preservation(depth_models, acceptance_report):
    t0 = time.perf_counter()
    b = depth_models.bundle()
    cov = {"apf": [], "jpf": []}
    at100 = {"apf": [], "jpf": []}
    for i in range(N_PAIRED):
        seq = S.generate_sequence(depth_models.spec, 200, seed=1000 + i)
        for a in cov:
            r = F.run_sequence(b, seq.observations, F.FilterConfig(algorithm=a, seed=1000 + i))
            cov[a].append(np.nanmean(r.coverage))
            at100[a].append(r.coverage[100])
            GAMMAS.append(r.gamma)
    med = {a: float(np.median(v)) for a, v in cov.items()}
    apf_lost = float(np.mean(np.array(at100["apf"]) < 1))
    jpf_kept = float(np.mean(np.array(at100["jpf"]) == 1))
    dt = time.perf_counter() - t0
    ok = med["jpf"] > med["apf"] and apf_lost >= 0.7 and jpf_kept >= 0.7 and dt < 300
    acceptance_report(5, ok, f"median coverage JPF {med['jpf']:.3f} > APF {med['apf']:.3f}; "
                      f"frame 100: APF lost a mode in {apf_lost:.0%} (>=70%), "
                      f"JPF kept both in {jpf_kept:.0%} (>=70%) of {N_PAIRED} seeds", dt)
    assert ok


# -- 6 -------------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_accuracy_ordering(depth_models, acceptance_report):
    """Fast motion (speed 3); mode-aware error of the MAP particle."""
    t0 = time.perf_counter()
    b = depth_models.bundle()
    err = {(a, s, k): [] for a in ("apf", "jpf") for s in (3.0, 1.0) for k in ("map", "mean")}
    for speed in (3.0, 1.0):
        for i in range(N_PAIRED):
            seq = S.generate_sequence(depth_models.spec, 200, seed=1100 + i, speed=speed)
            for a in ("apf", "jpf"):
                r = F.run_sequence(b, seq.observations,
                                   F.FilterConfig(algorithm=a, seed=1100 + i))
                GAMMAS.append(r.gamma)
                err[a, speed, "map"].append(np.median(
                    P.score_track(depth_models, r, seq, use_map=True)["angle_error_deg"]))
                err[a, speed, "mean"].append(np.median(
                    P.score_track(depth_models, r, seq)["angle_error_deg"]))
        if speed == 3.0:
            dt = time.perf_counter() - t0
    med = {k: float(np.median(v)) for k, v in err.items()}
    ok = med["jpf", 3.0, "map"] <= med["apf", 3.0, "map"] and dt < 300
    other = "; ".join(f"speed {s:g} {k}: JPF {med['jpf', s, k]:.2f} vs APF {med['apf', s, k]:.2f}"
                      for s, k in ((3.0, "mean"), (1.0, "map"), (1.0, "mean")))
    acceptance_report(6, ok, f"median joint-angle error JPF {med['jpf', 3.0, 'map']:.2f} deg <= "
                      f"APF {med['apf', 3.0, 'map']:.2f} deg over {N_PAIRED} seeds "
                      f"(information, not asserted: {other})", dt)
    assert ok


# -- 7 ---------------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_online_learning(acceptance_report):
    t0 = time.perf_counter()
    spec = S.ChainSpec(ambiguity="none")
    train = S.training_set(spec, 32, 30, seed=0)
    Y, O, V = P.stack(train)
    latent = core.pca_fit(Y, 4)
    cb = S.build_codebook(P.stack(S.training_set(spec, 32, 30, seed=5))[1], 400, 0)
    hbme = mx.hbme_train_arrays(S.descriptor(cb, O), core.encode(latent, Y), V,
                                mx.MixtureConfig())
    bundle = F.ModelBundle(F.RandomWalkDynamics.from_latent(latent, 0.05),
                           lambda o, Z: S.log_likelihood(spec, o, Z, latent), hbme, None,
                           lambda o: S.descriptor(cb, o), None)
    T = 300
    errs = {"off": [], "e1": [], "e10": []}
    for i in range(10):
        seq = S.generate_sequence(spec, T, seed=3000 + i, shift=0.6)
        for name, on, frac in (("off", False, 0.01), ("e1", True, 0.005), ("e10", True, 0.05)):
            r = F.run_sequence(bundle, seq.observations, F.FilterConfig(seed=3000 + i),
                               online_learning=on, elite_fraction=frac)
            e = P.joint_angle_error(spec, core.decode(latent, r.bu_means), seq.states)
            errs[name].append(float(np.mean(e[2 * T // 3:])))
    med = {k: float(np.median(v)) for k, v in errs.items()}
    dt = time.perf_counter() - t0
    ok = med["e1"] < med["off"] and med["e10"] < med["off"] and med["e10"] <= med["e1"] \
        and dt < 300
    acceptance_report(7, ok, f"final-third hBME error (median of 10): off {med['off']:.2f}, "
                      f"1 elite {med['e1']:.2f}, 10 elites {med['e10']:.2f} deg", dt)
    assert ok


# -- 8 ------------------------------------------------------------------------------------------------------


def test_criterion_8_gamma_mechanics(acceptance_report):
    t0 = time.perf_counter()
    BU, DYN = core.Origin.BU, core.Origin.DYN
    cases = [
        (core.ParticleSet(np.zeros((4, 1)), [0.3, 0.3, 0.2, 0.2], [BU, BU, DYN, DYN]), 0.6),
        (core.ParticleSet(np.zeros((2, 1)), [0.5, 0.5], [DYN, DYN]), 0.0),
        (core.ParticleSet(np.zeros((2, 1)), [0.0, 0.0], [BU, DYN]), 0.5),
        (core.ParticleSet(np.zeros((3, 1)), [0.1, 0.2, 0.7], [BU, BU, BU]), 1.0),
    ]
    arith = all(abs(F.gamma_update(ps) - want) <= 1e-12 for ps, want in cases)
    g0 = F.FilterConfig().gamma0 == 0.5
    in_range = bool(GAMMAS) and all(np.all((g >= 0) & (g <= 1)) for g in GAMMAS)
    dt = time.perf_counter() - t0
    ok = arith and g0 and in_range
    acceptance_report(8, ok, f"weight-mass ratios exact: {arith}, gamma0 = 0.5: {g0}, "
                      f"gamma in [0,1] over {len(GAMMAS)} benchmark runs: {in_range}", dt)
    assert ok


# -- 9 --------------------------------------------------------------------------------------------------------


def _mass_ge2(ambiguity, k):
    Y, O, _ = P.stack(S.training_set(S.ChainSpec(ambiguity=ambiguity), 20, 100, seed=0))
    h = M.histogram(M.build_associations(O, Y, M.kmeans_fit(O, k, 0), M.kmeans_fit(Y, k, 0)))
    return h.mass_at_least(2) / h.total


def test_criterion_9_dataset_multimodality(acceptance_report):
    t0 = time.perf_counter()
    none, depth = _mass_ge2("none", 100), _mass_ge2("depth_sign", 100)
    dt = time.perf_counter() - t0
    t1 = time.perf_counter()
    Y, O, _ = P.stack(S.training_set(S.ChainSpec(), 20, 347, seed=0))
    tables = M.build_associations(O, Y, M.kmeans_fit(O, 1500, 0), M.kmeans_fit(Y, 1500, 0))
    h = M.histogram(tables)
    smoke_ok = len(O) == 6940 and abs(h.total - sum(t.h for t in tables)) <= 1e-6 * h.total
    dt_smoke = time.perf_counter() - t1
    ok = depth > none and dt < 120 and smoke_ok and dt_smoke < 600
    acceptance_report(9, ok, f"mass at n>=2 (N=2000, k=100): DEPTH_SIGN {depth:.3f} > NONE "
                      f"{none:.3f} in {dt:.1f} s; N=6940, k=1500 smoke completed in "
                      f"{dt_smoke:.1f} s, bins sum to total h: {smoke_ok}", dt + dt_smoke)
    assert ok


# -- 10 ---------------------------------------------------------------------------------------------------------


def _outputs(d):
    got = {}
    for f in sorted(os.listdir(d)):
        with open(os.path.join(d, f), "rb") as fh:
            data = fh.read()
        if f == "manifest.json":
            doc = json.loads(data)
            doc.pop("created")
            data = json.dumps(doc, sort_keys=True).encode()
        got[f] = data
    return got


def test_criterion_10_cli_reproducibility(tmp_path, acceptance_report):
    t0 = time.perf_counter()
    small = ["--codebook-size", "60", "--coverage-k-in", "40", "--coverage-k-out", "6"]
    same = {}
    w = tmp_path
    for _ in range(2):      # same paths and settings both times
        steps = [
            ("gen", ["gen", "--out", w / "train", "--training", "--n-sequences", 8,
                     "--n-frames", 40]),
            ("gen_cb", ["gen", "--out", w / "cb", "--training", "--n-sequences", 8,
                        "--n-frames", 40, "--seed", 5]),
            ("gen_test", ["gen", "--out", w / "test", "--n-frames", 30, "--seed", 3]),
            ("train", ["train", "--out", w / "bundle", "--dataset", w / "train/dataset.json",
                       "--codebook-dataset", w / "cb/dataset.json", *small]),
            ("track", ["track", "--out", w / "track", "--bundle", w / "bundle/bundle.json",
                       "--dataset", w / "test/dataset.json", "--algorithm", "jpf",
                       "--particles", 60, "--layers", 3, "--online-learning"]),
            ("eval", ["eval", "--out", w / "eval", w / "track"]),
            ("multimodality", ["multimodality", "--out", w / "mm", "--dataset",
                               w / "train/dataset.json", "--k-in", 50, "--k-out", 20]),
        ]
        for name, argv in steps:
            assert cli.main([str(a) for a in argv]) == 0, name
        for name, d in (("gen", "train"), ("train", "bundle"), ("track", "track"),
                        ("eval", "eval"), ("multimodality", "mm")):
            same.setdefault(name, []).append(_outputs(w / d))
    identical = {k: v[0] == v[1] for k, v in same.items()}
    dt = time.perf_counter() - t0
    ok = all(identical.values())
    acceptance_report(10, ok, "byte-identical outputs apart from the manifest timestamp: " +
                      ", ".join(f"{k} {v}" for k, v in identical.items()), dt)
    assert ok

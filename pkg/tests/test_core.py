import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridpf import core
from hybridpf.core import ParticleSet, Origin


weights_st = arrays(np.float64, st.integers(1, 30),
                    elements=st.floats(0, 10, allow_nan=False)).filter(lambda w: w.sum() > 1e-6)


# -- latent model -----------------------------------------------------------


def test_pca_recovers_affine_subspace(rng):
    B = np.linalg.qr(rng.normal(size=(10, 2)))[0]
    Y = rng.normal(size=(100, 2)) @ B.T + rng.normal(size=10)
    m = core.pca_fit(Y, 2)
    rec = core.decode(m, core.encode(m, Y))
    assert np.sqrt(np.mean((rec - Y) ** 2)) < 1e-8


def test_encode_mean_is_zero(rng):
    Y = rng.normal(size=(50, 6))
    m = core.pca_fit(Y, 3)
    assert np.allclose(core.encode(m, Y.mean(axis=0)), 0, atol=1e-12)
    assert np.allclose(core.decode(m, np.zeros(3)), m.mean)


def test_paper_scale_basis_orthonormal(rng):
    Y = rng.normal(size=(6940, 90)) * np.linspace(3, 0.1, 90)
    m = core.pca_fit(Y, 5)
    assert np.allclose(m.basis.T @ m.basis, np.eye(5), atol=1e-8)
    assert np.all(np.diff(m.eigenvalues) <= 0)
    assert np.all(m.eigenvalues >= 0)


def test_encode_first_direction(rng):
    m = core.pca_fit(rng.normal(size=(40, 5)) * [5, 3, 2, 1, 0.5], 3)
    x = core.encode(m, m.mean + 2 * m.basis[:, 0])
    assert np.allclose(x, [2, 0, 0], atol=1e-12)


def test_reconstruction_error_nonincreasing_in_dim(rng):
    Y = rng.normal(size=(60, 8)) * np.arange(8, 0, -1)
    errs = []
    for d in range(1, 9):
        m = core.pca_fit(Y, d)
        errs.append(np.mean((core.decode(m, core.encode(m, Y)) - Y) ** 2))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_decode_encode_error_bounded_by_dropped_eigenvalues(rng):
    Y = rng.normal(size=(200, 7)) * np.arange(7, 0, -1)
    m = core.pca_fit(Y, 3)
    rec = core.decode(m, core.encode(m, Y))
    # full-rank oracle: the dropped eigenvalues sum to the mean squared residual
    resid = np.sum((rec - Y) ** 2) / (Y.shape[0] - 1)
    assert resid == pytest.approx(m.residual_eigenvalues.sum(), rel=1e-9)


def test_pca_rank_deficient():
    with pytest.raises(ValueError, match="rank deficient"):
        core.pca_fit(np.ones((10, 4)), 2)


def test_dimension_mismatch(rng):
    m = core.pca_fit(rng.normal(size=(20, 4)), 2)
    with pytest.raises(ValueError, match="dimension"):
        core.encode(m, np.zeros(3))
    with pytest.raises(ValueError, match="dimension"):
        core.decode(m, np.zeros(3))


@given(arrays(np.float64, 3, elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_encode_decode_identity(x):
    m = core.pca_fit(np.random.default_rng(0).normal(size=(30, 6)), 3)
    assert np.allclose(core.encode(m, core.decode(m, x)), x, atol=1e-9)


@given(arrays(np.float64, 2, elements=st.floats(-10, 10)),
       arrays(np.float64, 2, elements=st.floats(-10, 10)))
@settings(max_examples=30, deadline=None)
def test_decode_affine(a, b):
    m = core.pca_fit(np.random.default_rng(1).normal(size=(30, 5)), 2)
    assert np.allclose(core.decode(m, a + b), core.decode(m, a) + core.decode(m, b) - m.mean)


def test_latent_model_roundtrip(rng):
    m = core.pca_fit(rng.normal(size=(20, 4)), 2)
    m2 = core.LatentModel.loads(m.dumps())
    assert m2.dumps() == m.dumps()
    doc = m.to_dict()
    assert set(doc) >= {"version", "d_ambient", "d_latent", "mean", "basis", "eigenvalues"}


# -- weights ------------------------------------------------------------------


@pytest.mark.parametrize("w, expect", [((2, 2), (0.5, 0.5)), ((0, 3, 1), (0, 0.75, 0.25))])
def test_normalize_examples(w, expect):
    ps = core.normalize_weights(ParticleSet(np.zeros((len(w), 1)), w))
    assert np.allclose(ps.weights, expect)


def test_normalize_all_zero():
    with pytest.raises(core.DegenerateWeightsError, match="degenerate weights"):
        core.normalize_weights(ParticleSet(np.zeros((3, 1)), np.zeros(3)))


@given(weights_st)
def test_normalize_preserves_ratios_and_argmax(w):
    ps = core.normalize_weights(ParticleSet(np.zeros((w.size, 1)), w))
    assert ps.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.argmax(ps.weights) == np.argmax(w)
    assert np.allclose(ps.weights * w.sum(), w, rtol=1e-9, atol=1e-12)


def test_ess_examples():
    def ess(w):
        return core.effective_sample_size(ParticleSet(np.zeros((len(w), 1)), w))
    assert ess(np.full(7, 1 / 7)) == pytest.approx(7)
    assert ess([1, 0, 0, 0]) == pytest.approx(1)
    assert ess([0.5, 0.25, 0.25]) == pytest.approx(2.667, abs=1e-3)
    with pytest.raises(ValueError):
        ess([1, 1])


@given(weights_st)
def test_ess_range(w):
    ps = core.normalize_weights(ParticleSet(np.zeros((w.size, 1)), w))
    e = core.effective_sample_size(ps)
    assert 1 - 1e-9 <= e <= w.size + 1e-9


# -- resampling ---------------------------------------------------------------


def test_resample_point_mass():
    w = np.zeros(10)
    w[3] = 1
    ps = ParticleSet(np.arange(10.0)[:, None], w)
    out = core.systematic_resample(ps, 0)
    assert np.all(out.states[:, 0] == 3)
    assert np.allclose(out.weights, 0.1)


def test_resample_deterministic(rng):
    ps = core.normalize_weights(ParticleSet(rng.normal(size=(50, 2)), rng.random(50)))
    a = core.systematic_resample(ps, 9)
    b = core.systematic_resample(ps, 9)
    assert np.array_equal(a.states, b.states)


def test_resample_unbiased_monte_carlo(rng):
    n, trials = 8, 10_000
    w = rng.random(n)
    w /= w.sum()
    counts = np.zeros((trials, n))
    for s in range(trials):
        idx = core.systematic_indices(w, np.random.default_rng(s))
        counts[s] = np.bincount(idx, minlength=n)
    mean = counts.mean(axis=0)
    se = counts.std(axis=0) / np.sqrt(trials) + 1e-12
    assert np.all(np.abs(mean - n * w) <= 3 * se + 1e-9)


def test_resample_uniform_copies_once():
    ps = ParticleSet.uniform(np.arange(20.0)[:, None])
    for s in range(20):
        out = core.systematic_resample(ps, s)
        assert sorted(out.states[:, 0]) == list(range(20))


def test_resample_degenerate():
    with pytest.raises(ValueError):
        core.systematic_resample(ParticleSet(np.zeros((3, 1)), np.zeros(3)), 0)


def test_resample_inherits_origins():
    ps = ParticleSet(np.zeros((2, 1)), [0.0, 1.0], [Origin.DYN, Origin.BU])
    out = core.systematic_resample(ps, 0)
    assert np.all(out.origins == Origin.BU)


def test_make_rng_streams_independent_and_reproducible():
    a = core.make_rng(5, 1).random(4)
    assert np.array_equal(a, core.make_rng(5, 1).random(4))
    assert not np.array_equal(a, core.make_rng(5, 2).random(4))


def test_particle_set_validation():
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((2, 1)), [1.0, -1.0])
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((2, 1)), [1.0])
    ps = ParticleSet.from_particles([core.Particle(np.zeros(2), 1.0, Origin.BU)])
    assert list(ps)[0].origin is Origin.BU

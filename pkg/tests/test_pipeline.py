import numpy as np
import pytest

from hybridpf import pipeline as P
from hybridpf import synthbench as S


@pytest.fixture(scope="module")
def spec():
    return S.ChainSpec()


def test_dataset_roundtrip(spec):
    seqs = [S.generate_sequence(spec, 10, seed=i) for i in range(3)]
    text = P.dataset_dumps(seqs)
    back = P.dataset_loads(text)
    assert P.dataset_dumps(back) == text
    Y, O, V = P.stack(back)
    assert Y.shape == (30, spec.d_ambient) and O.shape == (30, spec.d_obs) and V.shape == (30,)
    with pytest.raises(ValueError):
        P.dataset_loads('{"format": "other"}')
    with pytest.raises(ValueError):
        P.dataset_dumps([])


def test_angle_error_in_degrees(spec):
    t = np.array([0.3, 0.1, 0.2, -0.1, 0.6])
    e = t.copy()
    e[1:] += np.radians(4.0)
    e[0] += 1.0                      # orientation is not a joint
    assert P.joint_angle_error(spec, e, t)[0] == pytest.approx(4.0)


def test_mode_aware_errors(spec):
    t = np.array([0.3, 0.1, 0.2, -0.1, 0.6])
    m = t.copy()
    m[4] = -0.6
    assert P.joint_angle_error(spec, m, t)[0] == pytest.approx(0.0)
    assert P.joint_angle_error(spec, m, t, mode_aware=False)[0] == pytest.approx(np.degrees(1.2 / 4))
    assert P.joint_position_error(spec, m, t)[0] == pytest.approx(0.0, abs=1e-12)
    assert P.joint_position_error(spec, m, t, mode_aware=False)[0] > 0.01
    none = S.ChainSpec(ambiguity="none")
    assert P.joint_angle_error(none, m, t)[0] > 0
    with pytest.raises(ValueError):
        P.joint_angle_error(spec, m[:3], t)


def test_angle_error_wraps(spec):
    t = np.array([0.0, np.pi - 0.01, 0, 0, 0.6])
    e = np.array([0.0, -np.pi + 0.01, 0, 0, 0.6])
    assert P.joint_angle_error(spec, e, t)[0] == pytest.approx(np.degrees(0.02 / 4))


def test_mirror_poses(spec):
    ys = np.array([[0.3, 0.1, 0.2, -0.1, 0.6], [0.3, 0.1, 0.2, -0.1, 0.0]])
    m = P.mirror_poses(spec, ys)
    assert len(m[0]) == 1 and m[0][0][4] == -0.6
    assert m[1] == []


def test_train_config_validation():
    with pytest.raises(ValueError):
        P.TrainConfig(validation_fraction=0.0)
    with pytest.raises(ValueError):
        P.TrainConfig(width_grid=())


def test_train_roundtrip_and_score(spec):
    seqs = S.training_set(spec, 8, 25, seed=0)
    cb = S.training_set(spec, 8, 25, seed=5)
    cfg = P.TrainConfig(codebook_size=40, coverage_k_in=30, coverage_k_out=6,
                        width_grid=(1.0,), train_cbme=False)
    models = P.quiet_train(seqs, cfg, codebook_sequences=cb)
    assert models.cbme is None and models.report["validation"]["n_held_out"] == 20
    back = P.TrainedModels.loads(models.dumps())
    assert back.dumps() == models.dumps()
    b = back.bundle()
    assert b.hbme is not None and b.coverage is not None
    from hybridpf import filters as F
    test = S.generate_sequence(spec, 8, seed=9)
    res = F.run_sequence(b, test.observations, F.FilterConfig(n_particles=40))
    err = P.score_track(back, res, test)
    assert err["angle_error_deg"].shape == (8,) and np.all(np.isfinite(err["position_error"]))

import numpy as np
import pytest

from otta import prototypes
from otta.errors import IndexOutOfRange, InvalidTemperature, ZeroVector

from oracles import softmax_columns_oracle


def _random_bank(rng, d=32, k=10, m=8):
    return prototypes.build_bank(rng.standard_normal((d, k, m)))


def _unit_columns(rng, d, n):
    z = rng.standard_normal((d, n))
    return z / np.linalg.norm(z, axis=0, keepdims=True)


def test_build_bank_single_template_average_is_identity():
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((6, 3, 1))
    bank = prototypes.build_bank(raw)
    np.testing.assert_allclose(bank.averaged, bank.per_template[:, :, 0], atol=1e-12)


def test_build_bank_orthonormal_pair_average():
    raw = np.zeros((3, 2, 2))
    raw[:, 0, 0] = (1.0, 0.0, 0.0)
    raw[:, 0, 1] = (0.0, 1.0, 0.0)
    raw[:, 1, 0] = (0.0, 0.0, 1.0)
    raw[:, 1, 1] = (0.0, 0.0, 2.0)
    bank = prototypes.build_bank(raw)
    expected = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    np.testing.assert_allclose(bank.averaged[:, 0], expected, atol=1e-12)
    np.testing.assert_allclose(bank.averaged[:, 1], (0.0, 0.0, 1.0), atol=1e-12)


def test_build_bank_normalizes_everything():
    rng = np.random.default_rng(1)
    bank = _random_bank(rng)
    per_norms = np.linalg.norm(bank.per_template, axis=0)
    avg_norms = np.linalg.norm(bank.averaged, axis=0)
    assert np.abs(per_norms - 1.0).max() < 1e-9
    assert np.abs(avg_norms - 1.0).max() < 1e-9


def test_build_bank_rejects_zero_column():
    raw = np.ones((4, 2, 2))
    raw[:, 1, 0] = 0.0
    with pytest.raises(ZeroVector):
        prototypes.build_bank(raw)


def test_similarity_self_column_is_one():
    rng = np.random.default_rng(2)
    bank = _random_bank(rng, d=8, k=4, m=2)
    z = bank.averaged[:, 2:3]
    sim = prototypes.similarity(bank, None, z)
    assert abs(sim.values[2, 0] - 1.0) < 1e-9


def test_similarity_orthogonal_column_is_zero():
    raw = np.zeros((4, 2, 1))
    raw[0, 0, 0] = 1.0
    raw[1, 1, 0] = 1.0
    bank = prototypes.build_bank(raw)
    z = np.zeros((4, 1))
    z[3, 0] = 1.0
    sim = prototypes.similarity(bank, 0, z)
    np.testing.assert_allclose(sim.values[:, 0], 0.0, atol=1e-12)


def test_similarity_entries_bounded_by_cauchy_schwarz():
    rng = np.random.default_rng(3)
    bank = _random_bank(rng, d=16, k=5, m=3)
    for _ in range(1000):
        z = _unit_columns(rng, 16, 4)
        m_idx = int(rng.integers(0, 3))
        sim = prototypes.similarity(bank, m_idx, z)
        assert np.abs(sim.values).max() <= 1.0 + 1e-6


def test_similarity_template_index_out_of_range():
    rng = np.random.default_rng(4)
    bank = _random_bank(rng, d=8, k=3, m=2)
    z = _unit_columns(rng, 8, 2)
    with pytest.raises(IndexOutOfRange):
        prototypes.similarity(bank, 2, z)


def test_predict_uniform_similarities_give_uniform_columns():
    raw = np.zeros((4, 3, 1))
    raw[0, :, 0] = 1.0
    bank = prototypes.build_bank(raw)
    z = np.zeros((4, 2))
    z[0, :] = 1.0
    pred = prototypes.predict(bank, z, tau=0.5)
    np.testing.assert_allclose(pred.p, 1.0 / 3.0, atol=1e-12)


def test_predict_large_tau_approaches_uniform():
    rng = np.random.default_rng(5)
    bank = _random_bank(rng, d=8, k=4, m=2)
    z = _unit_columns(rng, 8, 3)
    pred = prototypes.predict(bank, z, tau=1e4)
    assert np.abs(pred.p - 0.25).max() < 1e-3


def test_predict_small_tau_sharpens_to_near_one_hot():
    # 0.1 similarity gap at tau 0.01 leaves under e^-10 on the runner-up
    scores = np.array([[0.8], [0.7], [0.1]])
    ref = softmax_columns_oracle(scores / 0.01)
    assert ref.max() > 1.0 - 1e-4
    rng = np.random.default_rng(6)
    bank = _random_bank(rng, d=8, k=3, m=1)
    z = _unit_columns(rng, 8, 5)
    pred = prototypes.predict(bank, z, tau=0.01)
    sims = prototypes.similarity(bank, None, z)
    np.testing.assert_allclose(pred.p, softmax_columns_oracle(sims.values / 0.01), atol=1e-12)


def test_predict_two_class_closed_form():
    raw = np.zeros((2, 2, 1))
    raw[0, 0, 0] = 1.0
    raw[1, 1, 0] = 1.0
    bank = prototypes.build_bank(raw)
    z = np.array([[1.0], [0.0]])
    pred = prototypes.predict(bank, z, tau=1.0)
    e = np.exp(1.0)
    np.testing.assert_allclose(pred.p[:, 0], [e / (e + 1.0), 1.0 / (e + 1.0)], atol=1e-4)


def test_predict_rejects_nonpositive_temperature():
    rng = np.random.default_rng(7)
    bank = _random_bank(rng, d=4, k=2, m=1)
    z = _unit_columns(rng, 4, 1)
    with pytest.raises(InvalidTemperature):
        prototypes.predict(bank, z, tau=0.0)
    with pytest.raises(InvalidTemperature):
        prototypes.predict(bank, z, tau=-1.0)


def test_prediction_columns_sum_to_one():
    rng = np.random.default_rng(8)
    for _ in range(50):
        bank = _random_bank(rng, d=8, k=int(rng.integers(2, 7)), m=2)
        z = _unit_columns(rng, 8, int(rng.integers(1, 6)))
        tau = float(rng.uniform(0.01, 2.0))
        pred = prototypes.predict(bank, z, tau)
        np.testing.assert_allclose(pred.p.sum(axis=0), 1.0, atol=1e-9)
        assert (pred.p >= 0.0).all() and (pred.p <= 1.0).all()


def test_softmax_shift_invariance():
    rng = np.random.default_rng(9)
    scores = rng.standard_normal((5, 7))
    base = prototypes.softmax_columns(scores)
    shifted = prototypes.softmax_columns(scores + 3.17)
    np.testing.assert_allclose(base, shifted, atol=1e-10)


def test_predict_argmax_matches_similarity_argmax():
    rng = np.random.default_rng(10)
    for _ in range(30):
        bank = _random_bank(rng, d=8, k=5, m=2)
        z = _unit_columns(rng, 8, 6)
        pred = prototypes.predict(bank, z, tau=0.3)
        sims = prototypes.similarity(bank, None, z)
        assert (pred.p.argmax(axis=0) == sims.values.argmax(axis=0)).all()


def test_subset_bank_reaverages_prefix():
    rng = np.random.default_rng(11)
    bank = _random_bank(rng, d=8, k=3, m=4)
    sub = prototypes.subset_bank(bank, 2)
    assert sub.per_template.shape[2] == 2
    mean = bank.per_template[:, :, :2].mean(axis=2)
    mean /= np.linalg.norm(mean, axis=0, keepdims=True)
    np.testing.assert_allclose(sub.averaged, mean, atol=1e-12)
    with pytest.raises(IndexOutOfRange):
        prototypes.subset_bank(bank, 5)

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from scipy.stats import kstest

from mpbt import ModelParams
from mpbt.edge_process import (
    EdgeRealization,
    absorption_probs,
    joint_parent_density,
    sample_edge,
    sample_speciation,
    speciation_cdf,
    speciation_density,
    transition_matrix,
)

from .conftest import random_params_list


def test_transition_identity_at_zero(fig1):
    np.testing.assert_array_equal(transition_matrix(fig1, 0.0), np.eye(4))


def test_transition_single_type():
    p = ModelParams.from_rates([0.3])
    e = np.exp(-0.6)
    np.testing.assert_allclose(transition_matrix(p, 2.0), [[e, 1 - e], [0, 1]], atol=1e-15)


def test_transition_fig1_against_dense(fig1):
    P = transition_matrix(fig1, 1.0)
    np.testing.assert_allclose(P, scipy.linalg.expm(fig1.derived.Q), atol=1e-14)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(P[:2, 2:] > 0)


def test_transition_negative_tau(fig1):
    with pytest.raises(ValueError):
        transition_matrix(fig1, -1.0)


def test_cdf_basic(fig1):
    np.testing.assert_array_equal(speciation_cdf(fig1, 0.0), [0.0, 0.0])
    p = ModelParams.from_rates([0.3])
    taus = np.array([0.5, 2.0, 10.0])
    np.testing.assert_allclose(speciation_cdf(p, taus)[:, 0], 1 - np.exp(-0.3 * taus), rtol=1e-13)
    small = speciation_cdf(fig1, 1e-3)
    assert small[1] > small[0]
    np.testing.assert_allclose(small, fig1.lam * 1e-3, rtol=1e-3)


def test_density_basic(fig1):
    np.testing.assert_allclose(speciation_density(fig1, 0.0), fig1.lam)
    p = ModelParams.from_rates([0.3])
    assert speciation_density(p, 2.0)[0] == pytest.approx(0.3 * np.exp(-0.6), rel=1e-13)


@pytest.mark.parametrize("params", random_params_list(11, 8))
def test_density_is_cdf_derivative(params):
    h = 1e-5
    for tau in (0.3, 2.0, 7.5):
        fd = (speciation_cdf(params, tau + h) - speciation_cdf(params, tau - h)) / (2 * h)
        np.testing.assert_allclose(speciation_density(params, tau), fd, atol=1e-6)


def test_absorption_single_type():
    np.testing.assert_allclose(absorption_probs(ModelParams.from_rates([2.0])), [[1.0]])


def test_absorption_fig1(fig1):
    np.testing.assert_allclose(absorption_probs(fig1), [[7 / 12, 5 / 12], [1 / 6, 5 / 6]], atol=1e-12)


def test_absorption_fast_mixing():
    s = np.full((3, 3), 1e3)
    P = absorption_probs(ModelParams.from_rates([0.2, 1.0, 3.0], s))
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(P[i], P[j], atol=1e-2)


def test_joint_parent_density(fig1):
    np.testing.assert_allclose(joint_parent_density(fig1, 0.0), np.diag(fig1.lam))
    for tau in (0.5, 4.0):
        np.testing.assert_allclose(joint_parent_density(fig1, tau).sum(axis=1), speciation_density(fig1, tau), atol=1e-15)
    P = absorption_probs(fig1)
    for i in range(2):
        for j in range(2):
            val, _ = scipy.integrate.quad(lambda x: joint_parent_density(fig1, x)[i, j], 0, np.inf, epsabs=1e-11)
            assert val == pytest.approx(P[i, j], abs=1e-8)


def test_edge_realization_type_at_and_roundtrip():
    e = EdgeRealization(3.0, 1, True, ((0, 1.0), (1, 2.0)))
    assert e.start_type == 0
    assert e.type_at(0.5) == 0
    assert e.type_at(1.0) == 1
    assert e.type_at(3.0) == 1
    assert EdgeRealization.from_dict(e.to_dict()) == e


def test_sample_edge_segments_consistent(fig1):
    rng = np.random.default_rng(0)
    for _ in range(200):
        e = sample_edge(fig1, 0, 20.0, rng)
        assert sum(d for _, d in e.segments) == pytest.approx(e.length)
        assert e.segments[-1][0] == e.end_type
        types = [t for t, _ in e.segments]
        assert all(a != b for a, b in zip(types, types[1:]))
        if not e.speciated:
            assert e.length == 20.0


def test_sample_edge_exponential_mean():
    p = ModelParams.from_rates([0.3])
    lengths, _ = sample_speciation(p, np.zeros(10**6, dtype=int), np.random.default_rng(1))
    assert lengths.mean() == pytest.approx(1 / 0.3, abs=0.01)


def test_sample_edge_cdf_and_end_types(fig1):
    rng = np.random.default_rng(2)
    edges = [sample_edge(fig1, 0, rng=rng) for _ in range(10**5)]
    lengths = np.array([e.length for e in edges])
    stat = kstest(lengths, lambda x: speciation_cdf(fig1, x)[..., 0]).statistic
    assert stat < 0.01
    freq = np.bincount([e.end_type for e in edges], minlength=2) / len(edges)
    np.testing.assert_allclose(freq, absorption_probs(fig1)[0], atol=0.01)


def test_vectorized_sampler_agrees(fig1):
    rng = np.random.default_rng(3)
    lengths, ends = sample_speciation(fig1, np.ones(10**5, dtype=int), rng)
    assert kstest(lengths, lambda x: speciation_cdf(fig1, x)[..., 1]).statistic < 0.01
    np.testing.assert_allclose(np.bincount(ends) / ends.size, absorption_probs(fig1)[1], atol=0.01)


def test_sample_edge_bad_start(fig1):
    with pytest.raises(ValueError):
        sample_edge(fig1, 2)

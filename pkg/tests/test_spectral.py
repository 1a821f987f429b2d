import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramscope.checkpoint_io import as_weight_matrix
from paramscope.errors import AllZeroSpectrum
from paramscope.spectral import (
    Esd,
    SpectralConfig,
    effective_feature_number,
    effective_rank,
    esd,
    layer_spectral_stats,
    mp_spikes,
    singular_values,
    tracy_widom_scale,
)
from paramscope.synth import (
    PlantedSpectrumSpec,
    Rng,
    gen_matrix_with_spectrum,
    gen_mp_bulk,
    jacobi_eigvalsh,
    plant_spikes,
    random_orthonormal,
)


def test_singular_values_trivial():
    np.testing.assert_allclose(singular_values(np.eye(4)), [1, 1, 1, 1], rtol=1e-15)
    np.testing.assert_allclose(singular_values(np.diag([3.0, 2.0, 1.0])), [3, 2, 1], rtol=1e-15)
    np.testing.assert_allclose(singular_values(np.diag([1.0, 3.0, 2.0])), [3, 2, 1], rtol=1e-15)


def test_singular_values_against_jacobi_oracle():
    w = Rng(7).normal((50, 80))
    reference = np.sqrt(jacobi_eigvalsh(w @ w.T))
    got = singular_values(w)
    assert got.shape == (50,)
    np.testing.assert_allclose(got, reference, rtol=1e-8)


def test_jacobi_oracle_on_known_matrix():
    a = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(jacobi_eigvalsh(a), [3.0, 1.0], rtol=1e-14)


def test_transpose_and_permutation_are_bit_identical():
    w = Rng(3).normal((9, 14))
    base = singular_values(w)
    assert np.array_equal(base, singular_values(w.T))
    perm = w[Rng(4).uniform(9).argsort()][:, Rng(5).uniform(14).argsort()]
    assert np.array_equal(base, singular_values(perm))
    sq = Rng(6).normal((12, 12))
    assert np.array_equal(singular_values(sq), singular_values(sq.T))


def test_permutation_canonical_form_with_tied_keys():
    # rows share min and max, forcing the full lexicographic fallback
    w = np.array([[0.0, 0.3, 1.0, 0.5], [0.0, 0.7, 1.0, 0.2], [0.0, 0.1, 1.0, 0.9]])
    perm = w[[2, 0, 1]][:, [3, 1, 0, 2]]
    assert np.array_equal(singular_values(w), singular_values(perm))


def test_esd_examples():
    np.testing.assert_allclose(esd(np.diag([3.0, 2.0, 1.0])).eigenvalues, [9, 4, 1], rtol=1e-15)
    e = esd(np.eye(5))
    np.testing.assert_allclose(e.eigenvalues, np.ones(5), rtol=1e-15)
    assert (e.rows, e.cols, len(e)) == (5, 5, 5)
    w = Rng(1).normal((6, 10))
    np.testing.assert_allclose(esd(2.5 * w).eigenvalues, 6.25 * esd(w).eigenvalues, rtol=1e-12)


def test_effective_rank_examples():
    assert effective_rank([1, 1, 1, 1]) == pytest.approx(4.0, abs=1e-12)
    assert effective_rank([5, 0, 0]) == 1.0
    oracle = math.exp(math.log(3) - (2 / 3) * math.log(2))
    assert effective_rank([2, 1]) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(1.889882, abs=1e-6)
    with pytest.raises(AllZeroSpectrum):
        effective_rank([0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=40).filter(lambda v: sum(v) > 0))
def test_effective_rank_bounds(values):
    s = sorted(values, reverse=True)
    r = effective_rank(s)
    positive = sum(1 for v in s if v > 0)
    assert 1 - 1e-9 <= r <= positive + 1e-9


def test_mp_uniform_spectrum_has_no_spikes():
    assert effective_feature_number(esd(np.diag(np.full(8, 3.0)))) == 0
    assert effective_feature_number(esd(np.eye(64)), edge_margin_tw=0.0) == 0


def test_mp_small_case_runs():
    n = effective_feature_number(esd(gen_mp_bulk(16, 16, 1.0, seed=0)))
    assert 0 <= n <= 16


def test_mp_edge_formula_by_hand():
    # normalized eigenvalues [20, 1 x 8] with M = N = 9, so gamma = 1 and the edge is 4 s^2
    lam = 9.0 * np.array([20.0] + [1.0] * 8)
    r = mp_spikes(Esd(lam, 9, 9), edge_margin_tw=0.0)
    # pass 1: s^2 = 28/9, edge 12.4 drops 20; pass 2: s^2 = 1, edge 4; fixpoint
    assert r.n_spikes == 1
    assert r.bulk_variance == pytest.approx(1.0)
    assert r.bulk_edge == pytest.approx(36.0)
    assert mp_spikes(Esd(9.0 * np.array([10.0, 1, 1, 1]), 4, 4), edge_margin_tw=0.0).n_spikes == 0


def test_tracy_widom_scale_value():
    m, n = 512, 1024
    expected = (math.sqrt(1024) + math.sqrt(512)) * (1 / math.sqrt(1024) + 1 / math.sqrt(512)) ** (1 / 3) / 1024
    assert tracy_widom_scale(m, n) == pytest.approx(expected)
    assert tracy_widom_scale(n, m) == tracy_widom_scale(m, n)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mp_null_and_planted_spikes_single_seeds(seed):
    std = 1 / math.sqrt(1024)
    w = gen_mp_bulk(512, 1024, std, seed)
    # the null rate is a population property; a single draw may show one edge straggler
    null = effective_feature_number(esd(w))
    assert null <= 1
    spiked = effective_feature_number(esd(plant_spikes(w, 5, 10.0, std, seed)))
    assert 5 <= spiked <= 5 + null


def test_layer_stats_identity():
    st_ = layer_spectral_stats(as_weight_matrix(np.eye(64), "model.layers.0.self_attn.v_proj.weight"))
    assert st_.effective_rank == pytest.approx(64.0, rel=1e-12)
    assert st_.effective_feature_number == 0
    assert st_.fit is None and st_.fit_status.startswith("DegenerateTail")
    assert st_.meta.layer_index == 0


def test_layer_stats_planted_pareto():
    spec = PlantedSpectrumSpec(1000, 2000, alpha=3.0, xmin=1.0, seed=21)
    st_ = layer_spectral_stats(gen_matrix_with_spectrum(spec))
    assert abs(st_.fit.alpha - 3.0) <= 0.15
    assert st_.fit.lambda_min in set(st_.esd.eigenvalues)


def test_layer_stats_transpose_identical():
    w = gen_matrix_with_spectrum(PlantedSpectrumSpec(30, 50, alpha=3.5, seed=2)).data
    a, b = layer_spectral_stats(w), layer_spectral_stats(w.T)
    assert a.fit == b.fit
    assert a.effective_rank == b.effective_rank
    assert a.effective_feature_number == b.effective_feature_number


def _summary(s):
    return np.array([s.fit.alpha, s.fit.ks_distance, s.effective_rank, s.effective_feature_number, s.fit.lambda_min])


def _planted(seed, rows=24, cols=40):
    return gen_matrix_with_spectrum(PlantedSpectrumSpec(rows, cols, alpha=3.0, xmin=1.0, seed=seed)).data


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100.0))
def test_scale_invariance(seed, c):
    w = _planted(seed)
    a, b = layer_spectral_stats(w), layer_spectral_stats(c * w)
    assert b.fit.alpha == pytest.approx(a.fit.alpha, rel=1e-9)
    assert b.fit.ks_distance == pytest.approx(a.fit.ks_distance, rel=1e-9, abs=1e-12)
    assert b.fit.lambda_min == pytest.approx(c * c * a.fit.lambda_min, rel=1e-9)
    assert b.effective_rank == pytest.approx(a.effective_rank, rel=1e-12)
    assert b.effective_feature_number == a.effective_feature_number


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(-8, 8))
def test_power_of_two_scale_is_exact(seed, k):
    w = _planted(seed)
    a, b = layer_spectral_stats(w), layer_spectral_stats(2.0**k * w)
    assert b.fit.alpha == a.fit.alpha
    assert b.fit.ks_distance == a.fit.ks_distance
    assert b.fit.lambda_min == 4.0**k * a.fit.lambda_min


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_orthogonal_invariance(seed):
    w = _planted(seed)
    rng = Rng(seed, 99)
    u, v = random_orthonormal(24, 24, rng), random_orthonormal(40, 40, rng)
    a, b = layer_spectral_stats(w), layer_spectral_stats(u @ w @ v)
    np.testing.assert_allclose(_summary(b), _summary(a), rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_invariance_exact(seed):
    w = _planted(seed)
    rng = Rng(seed, 7)
    p = w[rng.uniform(24).argsort()][:, rng.uniform(40).argsort()]
    assert np.array_equal(_summary(layer_spectral_stats(p)), _summary(layer_spectral_stats(w)))


def test_config_margin_changes_edge_only():
    w = gen_mp_bulk(64, 128, 0.1, seed=3)
    loose = layer_spectral_stats(w, SpectralConfig(edge_margin_tw=0.0))
    tight = layer_spectral_stats(w, SpectralConfig(edge_margin_tw=2.0))
    assert tight.mp_bulk_edge > loose.mp_bulk_edge
    assert tight.effective_feature_number <= loose.effective_feature_number

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramscope.errors import DegenerateTail, TooFewEigenvalues
from paramscope.spectral import Esd, FitConfig, fit_power_law
from paramscope.synth import Rng, brute_force_pl_fit, pareto_samples


def test_hill_closed_form():
    lam = [1.0, math.e, math.e**2]
    fit = fit_power_law(lam, FitConfig(min_tail=3, xmin=1.0))
    assert fit.alpha == pytest.approx(2.0, abs=1e-12)
    assert fit.lambda_min == 1.0 and fit.n_tail == 3
    brute = brute_force_pl_fit(lam, min_tail=3)
    assert brute.alpha == pytest.approx(2.0, abs=1e-12) and brute.lambda_min == 1.0


def test_search_on_closed_form_case():
    fit = fit_power_law([1.0, math.e, math.e**2], FitConfig(min_tail=3))
    assert fit.lambda_min == 1.0
    assert fit.alpha == pytest.approx(2.0, abs=1e-12)


def test_constant_spectrum_is_degenerate():
    with pytest.raises(DegenerateTail):
        fit_power_law(np.full(20, 2.0))
    with pytest.raises(DegenerateTail):
        brute_force_pl_fit([2.0] * 20)
    with pytest.raises(DegenerateTail):
        fit_power_law(np.full(20, 2.0), FitConfig(xmin=2.0))


def test_too_few_eigenvalues():
    with pytest.raises(TooFewEigenvalues):
        fit_power_law([1.0, 2.0, 3.0])
    # zeros and numerical noise do not count
    with pytest.raises(TooFewEigenvalues):
        fit_power_law([0.0] * 10 + [1.0, 2.0, 3.0])
    with pytest.raises(TooFewEigenvalues):
        fit_power_law([1e-30] * 10 + [1.0, 2.0, 3.0])


def test_accepts_esd():
    lam = pareto_samples(3.0, 1.0, 100, Rng(1))
    e = Esd(np.sort(lam)[::-1], 100, 200)
    assert fit_power_law(e) == fit_power_law(lam)


def test_pareto_recovery_single_seed():
    fit = fit_power_law(pareto_samples(3.5, 1.0, 2000, Rng(2024)))
    assert abs(fit.alpha - 3.5) <= 0.15


def _random_esd(seed):
    rng = Rng(8080, seed)
    n = 30 + int(rng.uniform(1)[0] * 171)
    kind = seed % 3
    if kind == 0:
        return pareto_samples(2.0 + 4.0 * rng.uniform(1)[0], 0.5, n, rng)
    if kind == 1:
        return np.exp(rng.normal(n))
    # bulk plus tail, like a trained layer
    return np.concatenate([rng.uniform(n // 2), pareto_samples(3.0, 1.0, n - n // 2, rng)])


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force(seed):
    x = _random_esd(seed)
    fast, brute = fit_power_law(x), brute_force_pl_fit(x)
    assert fast.lambda_min == brute.lambda_min
    assert fast.n_tail == brute.n_tail
    assert fast.alpha == pytest.approx(brute.alpha, abs=1e-9)
    assert fast.ks_distance == pytest.approx(brute.ks_distance, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 1e4, allow_nan=False), min_size=8, max_size=60))
def test_matches_brute_force_property(values):
    if len(set(values)) == 1:
        with pytest.raises(DegenerateTail):
            fit_power_law(values)
        return
    try:
        brute = brute_force_pl_fit(values)
    except DegenerateTail:
        with pytest.raises(DegenerateTail):
            fit_power_law(values)
        return
    fast = fit_power_law(values)
    assert fast.lambda_min == brute.lambda_min
    assert fast.alpha == pytest.approx(brute.alpha, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 1e4, allow_nan=False), min_size=8, max_size=200).filter(lambda v: len(set(v)) > 8))
def test_fit_bounds(values):
    try:
        fit = fit_power_law(values)
    except DegenerateTail:
        return
    assert fit.alpha > 1 and math.isfinite(fit.alpha)
    assert 0 <= fit.ks_distance <= 1
    assert fit.lambda_min in values
    assert fit.n_tail >= 8
    assert fit.n_tail == sum(1 for v in values if v >= fit.lambda_min)


def test_candidate_thinning():
    x = pareto_samples(3.0, 1.0, 500, Rng(5))
    full = fit_power_law(x)
    thin = fit_power_law(x, FitConfig(max_xmin_candidates=10))
    assert thin.ks_distance >= full.ks_distance
    assert thin.lambda_min in set(x)
    one = fit_power_law(x, FitConfig(max_xmin_candidates=1))
    assert one.lambda_min == x.min()


def test_bad_config():
    with pytest.raises(ValueError):
        FitConfig(min_tail=1)
    with pytest.raises(ValueError):
        FitConfig(max_xmin_candidates=0)

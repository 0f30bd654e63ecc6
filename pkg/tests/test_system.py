import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dichotomy_lab.errors import ConfigError, DomainError
from dichotomy_lab.system import (DelaySystem, GridFunction, PerturbationProfile,
                                  coefficients_at, omega, op_norm, shift_factor, vec_norm,
                                  weight_eval, weight_rate, weighted_norm)

finite_t = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("t, expected", [(0.0, (1.0, 0.0)), (1.0, (0.5, -1.0)),
                                         (2.0, (0.2, -0.8))])
def test_weight_eval_closed_form(t, expected):
    assert weight_eval(t) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("bad", [np.inf, -np.inf, np.nan])
def test_weight_eval_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        weight_eval(bad)


@pytest.mark.parametrize("t, r, sign, expected", [(0.0, 1.0, 1, 0.5), (0.0, 0.0, 1, 1.0),
                                                  (0.0, 0.0, -1, 1.0), (3.0, 1.0, -1, 2.0)])
def test_shift_factor_values(t, r, sign, expected):
    assert shift_factor(t, r, sign) == pytest.approx(expected, abs=1e-15)


def test_shift_factor_rejects_bad_sign():
    with pytest.raises(DomainError):
        shift_factor(0.0, 1.0, 0)


@given(finite_t, st.floats(0.0, 10.0), st.sampled_from([1, -1]))
def test_shift_identity_is_exact(t, r, sign):
    assert abs(omega(t + sign * r) - shift_factor(t, r, sign) * omega(t)) <= 1e-14


@given(finite_t)
def test_weight_in_unit_interval(t):
    assert 0.0 < omega(t) <= 1.0


def test_weight_derivative_matches_rate_on_grid():
    step = 1e-3
    t = np.arange(-20, 20, step)
    fd = (omega(t[2:]) - omega(t[:-2])) / (2 * step)
    gap = np.abs(fd - weight_rate(t[1:-1]) * omega(t[1:-1]))
    assert gap.max() <= 10 * step ** 2


def test_norm_conventions():
    a = np.array([[1.0, -2.0], [0.5, 0.5]])
    assert op_norm(a) == 3.0
    assert vec_norm(np.array([1.0, -4.0, 2.0])) == 4.0


# ---------------------------------------------------------------------------
# perturbation profiles
# ---------------------------------------------------------------------------

def test_profile_families():
    amp = [[2.0]]
    rat = PerturbationProfile("rational_decay", amp)
    assert rat(np.array(3.0))[0, 0] == pytest.approx(0.2)
    exp = PerturbationProfile("exponential_decay", amp, rate=0.5)
    assert exp(np.array(-2.0))[0, 0] == pytest.approx(2 * math.exp(-1.0))
    bump = PerturbationProfile("compact_bump", amp, width=1.5, center=2.0)
    t = np.array([0.4, 0.5, 3.5, 3.6])
    assert np.all(bump(t) == 0.0)
    assert bump(np.array(2.0))[0, 0] == pytest.approx(2.0)
    assert np.all(PerturbationProfile.zero(2)(np.linspace(-5, 5, 7)) == 0.0)


@given(st.sampled_from(["rational_decay", "exponential_decay", "compact_bump"]),
       st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3))
def test_profile_sup_norm_bounds_samples(kind, c):
    prof = PerturbationProfile(kind, [[c, 0.0], [0.0, -c]], rate=1.3, width=2.0, center=0.7)
    t = np.linspace(-30, 30, 6001)
    assert op_norm(prof(t)).max() <= prof.sup_norm() * (1 + 1e-12)
    assert prof.sup_norm() == pytest.approx(abs(c), rel=1e-6)


def test_profile_validation():
    with pytest.raises(ConfigError):
        PerturbationProfile("linear_growth", [[1.0]])
    with pytest.raises(ConfigError):
        PerturbationProfile("rational_decay", [1.0, 2.0])
    with pytest.raises(ConfigError):
        PerturbationProfile("exponential_decay", [[1.0]], rate=0.0)


# ---------------------------------------------------------------------------
# delay systems
# ---------------------------------------------------------------------------

def test_coefficients_without_perturbation_are_constant():
    sys = DelaySystem.autonomous([0.0, 1.0], [-1.0, 0.5])
    for t in (-7.0, 0.0, 3.3):
        np.testing.assert_array_equal(coefficients_at(sys, t), sys.limit_plus)


@pytest.mark.parametrize("t, expected", [(0.0, -1.0 + 0.4), (3.0, -1.0 + 0.04)])
def test_coefficients_with_rational_perturbation(t, expected):
    perts = [PerturbationProfile("rational_decay", [[0.4]]), PerturbationProfile.zero(1)]
    sys = DelaySystem.autonomous([0.0, 1.0], [-1.0, 0.0], perts)
    assert coefficients_at(sys, t)[0, 0, 0] == pytest.approx(expected)


def test_branches_anchor_half_lines():
    sys = DelaySystem(1, [0.0], [[[-1.0]]], [[[-3.0]]])
    assert sys.coefficients(np.array(0.0))[0, 0, 0] == -1.0
    assert sys.coefficients(np.array(-1e-9))[0, 0, 0] == -3.0
    assert coefficients_at(sys, 5.0, "-")[0, 0, 0] == -3.0
    assert not sys.same_limits


@pytest.mark.parametrize("delays", [[0.5, 1.0], [0.0, 1.0, 1.0], [0.0, 2.0, 1.0]])
def test_delays_validated(delays):
    k = len(delays)
    with pytest.raises(ConfigError) as err:
        DelaySystem.autonomous(delays, [0.0] * k)
    assert err.value.path == "delays"


def test_matrix_shapes_validated():
    with pytest.raises(ConfigError) as err:
        DelaySystem(2, [0.0, 1.0], np.zeros((2, 2, 2)), np.zeros((1, 2, 2)))
    assert err.value.path == "limit_minus"


def test_non_decaying_perturbation_rejected():
    class Stuck(PerturbationProfile):
        @property
        def horizon(self):
            return 10.0

        def scalar_factor(self, t):
            return np.ones_like(np.asarray(t, dtype=float))

    with pytest.raises(ConfigError):
        DelaySystem.autonomous([0.0], [-1.0], [Stuck("rational_decay", [[1.0]])])


def test_beta_sums_sups():
    sys = DelaySystem.autonomous([0.0, 1.0], [0.0, -1.0],
                                 [PerturbationProfile("rational_decay", [[-0.1]]),
                                  PerturbationProfile.zero(1)])
    assert sys.beta() == pytest.approx(1.1)
    assert sys.perturbation_sup() == pytest.approx(0.1)


@given(st.integers(1, 3), st.lists(st.floats(0.1, 2.0), min_size=0, max_size=2),
       st.integers(0, 2**31 - 1))
def test_dict_round_trip(n, gaps, seed):
    rng = np.random.default_rng(seed)
    delays = np.concatenate([[0.0], np.cumsum(gaps)])
    mats = rng.standard_normal((delays.size, n, n))
    perts = [PerturbationProfile("exponential_decay", rng.standard_normal((n, n)), rate=2.0)
             for _ in delays]
    sys = DelaySystem(n, delays, mats, -mats, tuple(perts), "rt")
    back = DelaySystem.from_dict(sys.to_dict())
    np.testing.assert_array_equal(back.limit_plus, sys.limit_plus)
    np.testing.assert_array_equal(back.limit_minus, sys.limit_minus)
    np.testing.assert_array_equal(back.delays, sys.delays)
    t = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(back.coefficients(t), sys.coefficients(t))


def test_nominal_history_span():
    assert DelaySystem.autonomous([0.0], [-1.0]).history_span == 1.0
    assert DelaySystem.autonomous([0.0, 2.5], [-1.0, 0.0]).history_span == 2.5


# ---------------------------------------------------------------------------
# grid functions and weighted norms
# ---------------------------------------------------------------------------

def test_grid_function_interpolates_linearly():
    g = GridFunction.from_callable(lambda t: t ** 2, 0.0, 2.0, 0.5)
    assert g(np.array(0.25))[0] == pytest.approx(0.125)
    assert g.t_max == 2.0 and g.num_nodes == 5


def test_grid_function_extension_policy():
    g = GridFunction(0.0, 1.0, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(DomainError):
        g(np.array(3.5))
    assert g.with_extension("zero")(np.array([-1.0, 5.0])).ravel().tolist() == [0.0, 0.0]
    assert g.with_extension("constant")(np.array([-1.0, 5.0])).ravel().tolist() == [1.0, 3.0]


def test_grid_function_rejects_bad_input():
    with pytest.raises(DomainError):
        GridFunction(0.0, 1.0, np.zeros((0, 1)))
    with pytest.raises(DomainError):
        GridFunction(0.0, 1.0, np.array([1.0, np.nan]))


def test_weighted_norm_of_constant_approaches_pi():
    errs = []
    for t_max in (50.0, 100.0, 200.0):
        f = GridFunction.from_callable(np.ones_like, -t_max, t_max, 1.0 / 64)
        errs.append(math.pi - weighted_norm(f, 1))
    # the missing tail is 2 / t_max to leading order
    for e, t_max in zip(errs, (50.0, 100.0, 200.0)):
        assert e == pytest.approx(2.0 / t_max, rel=0.02)


@pytest.mark.parametrize("p", [1, 2, 3, np.inf])
def test_weighted_norm_of_zero(p):
    f = GridFunction.from_callable(np.zeros_like, -5, 5, 0.1)
    assert weighted_norm(f, p) == 0.0


def test_weighted_sup_of_inverse_weight():
    f = GridFunction.from_callable(lambda t: 1 + t * t, -30, 30, 0.25)
    assert weighted_norm(f, np.inf) == pytest.approx(1.0, abs=1e-15)

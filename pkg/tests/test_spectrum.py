import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dichotomy_lab.errors import NotHyperbolicError
from dichotomy_lab.spectrum import (analyze, char_det, char_derivative, char_matrix,
                                    count_roots_rectangle, imaginary_axis_margin,
                                    is_asymptotically_hyperbolic, refine_root,
                                    root_window_bound, spectral_gap, unstable_root_count)
from dichotomy_lab.system import AutonomousSystem, DelaySystem

ODE = AutonomousSystem.scalar([-1.0], [0.0])
DELAYED = AutonomousSystem.scalar([0.0, -1.0], [0.0, 1.0])
CRITICAL = AutonomousSystem.scalar([0.0, -np.pi / 2], [0.0, 1.0])


def test_char_matrix_examples():
    assert char_matrix(ODE, 2.0)[0, 0] == pytest.approx(3.0)
    assert char_matrix(DELAYED, 0.0)[0, 0] == pytest.approx(1.0)
    assert abs(char_matrix(CRITICAL, 0.5j * np.pi)[0, 0]) < 1e-15


@given(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False))
def test_char_derivative_matches_finite_difference(s):
    h = 1e-6
    fd = (char_matrix(DELAYED, s + h) - char_matrix(DELAYED, s - h)) / (2 * h)
    np.testing.assert_allclose(char_derivative(DELAYED, s), fd, atol=1e-7)


def test_axis_margin():
    assert imaginary_axis_margin(ODE, 10.0) == pytest.approx(1.0)
    assert imaginary_axis_margin(CRITICAL, 10.0) < 1e-8
    # dense scan of |iz + exp(-iz)| on [-20, 20]
    z = np.linspace(-20, 20, 400001)
    oracle = np.abs(1j * z + np.exp(-1j * z)).min()
    assert imaginary_axis_margin(DELAYED, 20.0) == pytest.approx(oracle, rel=1e-3)
    assert oracle > 0.1


def test_root_window_bound():
    assert root_window_bound(ODE, 1.0) == pytest.approx(2.0)
    assert root_window_bound(DELAYED, 1.0) == pytest.approx(np.e + 1)
    two = AutonomousSystem.scalar([0.0, 1.0, -1.0], [0.0, 1.0, 2.0])
    assert root_window_bound(two, 0.5) == pytest.approx(np.exp(0.5) + np.e + 0.5)


def test_count_roots_rectangle():
    assert count_roots_rectangle(ODE, (-2, 0), (-1, 1)) == 1
    assert count_roots_rectangle(ODE, (1, 2), (-1, 1)) == 0
    assert count_roots_rectangle(DELAYED, (-1, 0), (0, 2)) == 1


def test_newton_refinement_hits_lambert_root(oracles):
    re, im = oracles["dominant_root_s_plus_exp"]
    s = refine_root(DELAYED, -0.3 + 1.3j)
    assert abs(s - complex(re, im)) < 1e-12
    assert abs(char_det(DELAYED, s)) < 1e-12


@pytest.mark.parametrize("case", range(7))
def test_dominant_root_of_scalar_delay_equation(oracles, case):
    c = oracles["scalar_delay_roots"][case]
    limit = AutonomousSystem.scalar([0.0, c["a"]], [0.0, c["r"]])
    rep = analyze(limit)
    assert rep.hyperbolic
    dom = rep.dominant_root().value
    assert dom.real == pytest.approx(c["dominant"][0], abs=1e-9)
    assert abs(dom.imag) == pytest.approx(c["dominant"][1], abs=1e-9)
    assert rep.gap == pytest.approx(min(0.9 * abs(c["dominant"][0]), 0.9))


def test_roots_come_in_conjugate_pairs():
    rep = analyze(DELAYED)
    vals = np.array([r.value for r in rep.roots])
    for v in vals:
        assert np.min(np.abs(vals - np.conj(v))) < 1e-9
    assert rep.winding_count == len(vals)


def test_spectral_gap_examples(oracles):
    assert spectral_gap(ODE) == pytest.approx(0.9)
    d = abs(oracles["dominant_root_s_plus_exp"][0])
    assert spectral_gap(DELAYED) == pytest.approx(0.9 * d, abs=1e-9)
    with pytest.raises(NotHyperbolicError) as err:
        spectral_gap(CRITICAL)
    assert err.value.z == pytest.approx(np.pi / 2, abs=1e-6)


def test_axis_root_reported_without_raising():
    rep = analyze(CRITICAL)
    assert not rep.hyperbolic
    assert rep.axis_root == pytest.approx(np.pi / 2, abs=1e-6)
    assert rep.to_dict()["hyperbolic"] is False


def test_asymptotic_hyperbolicity_per_branch(oracles):
    same = DelaySystem.autonomous([0.0, 1.0], [-1.0, 0.0])
    assert is_asymptotically_hyperbolic(same) == pytest.approx((0.9, 0.9))
    mixed = DelaySystem(1, [0.0, 1.0], [[[-1.0]], [[0.0]]], [[[0.0]], [[-1.0]]])
    d = abs(oracles["dominant_root_s_plus_exp"][0])
    assert is_asymptotically_hyperbolic(mixed) == pytest.approx((0.9, 0.9 * d), abs=1e-9)
    bad = DelaySystem(1, [0.0, 1.0], [[[-1.0]], [[0.0]]], [[[0.0]], [[-np.pi / 2]]])
    with pytest.raises(NotHyperbolicError) as err:
        is_asymptotically_hyperbolic(bad)
    assert err.value.branch == "-"


def test_unstable_root_count():
    saddle = AutonomousSystem(np.array([0.0]), np.array([np.diag([-1.0, 1.0])]))
    assert unstable_root_count(saddle, spectral_gap(saddle)) == 1
    assert unstable_root_count(DELAYED, spectral_gap(DELAYED)) == 0
    # x' = 0.5 x(t - 1) has exactly one real unstable root
    grow = AutonomousSystem.scalar([0.0, 0.5], [0.0, 1.0])
    assert unstable_root_count(grow, spectral_gap(grow)) == 1


@given(st.floats(-1.5, -0.05), st.floats(0.2, 1.5))
def test_located_roots_solve_the_characteristic_equation(a, r):
    limit = AutonomousSystem.scalar([0.0, a], [0.0, r])
    rep = analyze(limit)
    for root in rep.roots:
        s = root.value
        assert abs(s - a * np.exp(-s * r)) < 1e-9 * (1 + abs(s))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dichotomy_lab import checks
from dichotomy_lab.checks import random_smooth
from dichotomy_lab.dichotomy import (Collocation, WholeLineProblem, build_forcing,
                                     extend_history, fit_decay, forcing_grid,
                                     fredholm_diagnostics, gamma0_estimate, inf_norm,
                                     numerical_rank, project, projector_matrix,
                                     required_half_width, solve_whole_line, verify_dichotomy)
from dichotomy_lab.errors import DomainError, NotHyperbolicError
from dichotomy_lab.evolution import HistorySegment
from dichotomy_lab.system import DelaySystem, GridFunction

from conftest import critical_delay, delayed_scalar, perturbed_scalar, saddle, stable_scalar

STEP = 1.0 / 64


@pytest.fixture(scope="module")
def stable_col():
    return Collocation(stable_scalar(), 30.0, STEP)


@pytest.fixture(scope="module")
def saddle_col():
    return Collocation(saddle(), 30.0, STEP)


def saddle_segment(f0, f1):
    return HistorySegment.from_callable(lambda th: np.stack([f0(th), f1(th)], axis=-1),
                                        1.0, 64)


# ---------------------------------------------------------------------------
# history extension and forcing
# ---------------------------------------------------------------------------

def test_extension_is_plateau_outside_the_segment():
    phi = HistorySegment.from_callable(lambda th: 2 + th, 1.0, 8, 0.0)
    psi = extend_history(phi, 3.0)
    np.testing.assert_allclose(psi(np.array([1.0, 2.0, 2.5, 3.0, 9.0]))[:, 0],
                               [1.0, 1.0, 1.5, 2.0, 2.0])


def test_direction_validated():
    phi = HistorySegment.constant([1.0], 1.0, 8)
    with pytest.raises(DomainError):
        extend_history(phi, 0.0, "sideways")


@pytest.mark.parametrize("direction, active", [("forward", [0, 0, 1, 1]),
                                               ("backward", [1, 1, 1, 0])])
def test_forcing_is_one_sided(direction, active):
    sys = stable_scalar()
    phi = HistorySegment.constant([1.0], 1.0, 8)
    t = np.array([-2.0, -0.5, 0.0, 3.0])
    g = build_forcing(sys, 0.0, extend_history(phi, 0.0, direction), direction, t)
    np.testing.assert_array_equal(g[:, 0], -np.array(active, dtype=float))


def test_forcing_grid_layout():
    g = forcing_grid(delayed_scalar(), 0.0, HistorySegment.constant([1.0], 1.0, 8), "forward",
                     -4.0, 4.0, 0.125)
    assert g.num_nodes == 65 and g.t_min == -4.0
    assert np.all(g.values[g.times >= 0] == -1.0)


# ---------------------------------------------------------------------------
# whole-line solves
# ---------------------------------------------------------------------------

def test_problem_geometry():
    p = WholeLineProblem(2.0, 0.25, 1.0)
    assert p.num_nodes == 17 and p.span_nodes == 4
    assert p.node(0.0) == 8
    with pytest.raises(DomainError):
        p.node(0.1)


def test_required_half_width():
    assert required_half_width(stable_scalar(), [0.0, -3.0], 20.0) == pytest.approx(
        3.0 + 20.0 + 1.0 + 20.0 / 0.9)


def test_scalar_forward_solution(stable_col):
    # v' + v = -1 on t >= 0, v = 0 before: v = exp(-t) - 1
    t = stable_col.problem.times
    g = forcing_grid(stable_scalar(), 0.0, HistorySegment.constant([1.0], 1.0, 64), "forward",
                     t[0], t[-1], STEP)
    gl_vals = g.values.copy()
    gl_vals[stable_col.problem.node(0.0)] = 0.0  # the forcing jumps at s
    v = solve_whole_line(stable_scalar(), g, collocation=stable_col, right=-1.0,
                         g_left=GridFunction(g.t_min, g.step, gl_vals))
    exact = np.where(t >= 0, np.exp(-t) - 1, 0.0)
    assert np.max(np.abs(v.values[:, 0] - exact)) <= 1e-4
    assert stable_col.problem.leakage <= 1e-4


def test_saddle_unstable_mode_solved_backward(saddle_col):
    # v2' - v2 = 1 on t >= 0, bounded: v2 = -1 there and -exp(t) before
    phi = saddle_segment(np.zeros_like, np.exp)
    p_phi, q_phi = project(saddle(), 0.0, phi, saddle_col)
    assert np.max(np.abs(p_phi.values)) <= 1e-4
    np.testing.assert_allclose(q_phi.values[:, 1], np.exp(phi.theta), atol=1e-4)


def test_saddle_complementary_projection_closed_form(saddle_col):
    phi = saddle_segment(np.cos, lambda th: np.sin(3 * th) + 0.5)
    p_phi, q_phi = project(saddle(), 0.0, phi, saddle_col)
    np.testing.assert_allclose(q_phi.values[:, 1], 0.5 * np.exp(phi.theta), atol=1e-4)
    assert np.max(np.abs(q_phi.values[:, 0])) <= 1e-12
    np.testing.assert_allclose(p_phi.values + q_phi.values, phi.values, atol=1e-15)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_saddle_projection_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    f = random_smooth(rng, 2, support=0.5)
    phi = HistorySegment.from_callable(f, 1.0, 64)
    col = Collocation(saddle(), 30.0, STEP)
    p_phi, _ = project(saddle(), 0.0, phi, col)
    expected = phi.values.copy()
    expected[:, 1] -= phi.values[-1, 1] * np.exp(phi.theta)
    np.testing.assert_allclose(p_phi.values, expected, atol=1e-4 * (1 + phi.sup_norm()))


def test_solve_rejects_mismatched_grid(stable_col):
    g = GridFunction.from_callable(np.zeros_like, -10, 10, STEP)
    with pytest.raises(DomainError):
        solve_whole_line(stable_scalar(), g, collocation=stable_col)


# ---------------------------------------------------------------------------
# projector matrices
# ---------------------------------------------------------------------------

def test_stable_projector_is_identity():
    mat = projector_matrix(stable_scalar(), 0.0, 32)
    np.testing.assert_allclose(mat, np.eye(33), atol=1e-12)


def test_delayed_projector_is_idempotent_full_rank():
    mat = projector_matrix(delayed_scalar(), 0.0, 32)
    assert np.max(np.abs(mat @ mat - mat)) <= 1e-10
    assert numerical_rank(mat) == 33


def test_saddle_projector_rank_and_norm():
    mat = projector_matrix(saddle(), 0.0, 32)
    assert np.max(np.abs(mat @ mat - mat)) <= 1e-10
    assert numerical_rank(np.eye(66) - mat) == 1
    assert inf_norm(mat) == pytest.approx(2.0, abs=0.05)


def test_rank_and_norm_helpers():
    assert inf_norm(np.array([[1.0, -2.0], [0.0, 1.0]])) == 3.0
    assert numerical_rank(np.diag([1.0, 0.0, 1.0])) == 2
    assert numerical_rank(np.zeros((0, 0))) == 0


# ---------------------------------------------------------------------------
# gamma_0 and decay fits
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("factory", [stable_scalar, delayed_scalar, perturbed_scalar])
def test_gamma0_constants(factory):
    sys = factory()
    col = Collocation(sys, 30.0, STEP)
    gam = gamma0_estimate(sys, col)
    assert gam.gamma0 >= 1.0
    assert gam.beta == pytest.approx(sys.beta())
    assert gam.lambda_theory == pytest.approx(np.log(2) / gam.l)


def test_stable_gamma0_is_two():
    gam = gamma0_estimate(stable_scalar(), Collocation(stable_scalar(), 30.0, STEP))
    assert gam.gamma0 == pytest.approx(2.0, rel=0.05)
    assert gam.beta == 1.0


def test_fit_decay_exact_exponential():
    lags = np.linspace(0, 10, 101)
    d, lam = fit_decay(lags, 3 * np.exp(-0.7 * lags), 1.0)
    assert lam == pytest.approx(0.7) and d == pytest.approx(3.0)
    assert fit_decay(lags, np.zeros_like(lags), 1.0) == (0.0, float("inf"))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def test_verify_refuses_axis_root():
    with pytest.raises(NotHyperbolicError):
        verify_dichotomy(critical_delay(), [0.0], m=16)


def test_verify_rejects_short_horizon():
    with pytest.raises(DomainError):
        verify_dichotomy(DelaySystem.autonomous([0.0, 2.0], [-1.0, 0.0]), [0.0], horizon=5.0,
                         m=16)


def test_stable_scalar_verdict():
    rep = verify_dichotomy(stable_scalar(), [0.0, 2.0], m=32)
    assert rep.verdict == "dichotomy"
    for sl in rep.slices:
        np.testing.assert_allclose(sl.projector, np.eye(33), atol=1e-3)
        assert 0.9 <= sl.forward_fit[1] <= 1.1
        assert sl.rank_q == 0
    assert rep.to_dict()["s_list"] == [0.0, 2.0]
    assert rep.variation == [pytest.approx(0.0, abs=1e-6)]
    assert checks.dichotomy_verdict(rep)["passed"]


def test_decay_rate_stable_under_refinement(oracles):
    coarse = verify_dichotomy(delayed_scalar(), [0.0], m=32).slices[0].forward_fit[1]
    fine = verify_dichotomy(delayed_scalar(), [0.0], m=64).slices[0].forward_fit[1]
    assert abs(coarse - fine) <= 0.05 * fine
    # and within 10% of the dominant root's real part
    assert fine == pytest.approx(abs(oracles["dominant_root_s_plus_exp"][0]), rel=0.1)


# ---------------------------------------------------------------------------
# Fredholm diagnostics
# ---------------------------------------------------------------------------

def test_fredholm_hyperbolic_scalar():
    rep = fredholm_diagnostics(stable_scalar())
    assert rep.as_tuple() == (0, 0, 0, 0.0)
    assert rep.hypotheses_met
    assert rep.sigma_min_doubled == pytest.approx(rep.sigma_min, rel=0.1)


def test_fredholm_flags_neutral_equation():
    rep = fredholm_diagnostics(DelaySystem.autonomous([0.0], [0.0]))
    assert not rep.hypotheses_met
    assert rep.sigma_min_doubled < 0.6 * rep.sigma_min
    assert any("shrinks" in note for note in rep.notes)


def test_fredholm_flags_axis_root():
    rep = fredholm_diagnostics(critical_delay())
    assert not rep.hypotheses_met
    assert rep.to_dict()["notes"]

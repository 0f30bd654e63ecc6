"""Numerical checks shared by the ``all`` command and the acceptance tests.

Each check returns a plain dict with the measured quantities, the tolerance
it was held to and a boolean ``passed``.
"""

from __future__ import annotations

import math

import numpy as np

from .dichotomy import DichotomyReport
from .evolution import HistorySegment, adjoint_pairing_residual, convolve_solve, integrate
from .green import GreenKernel, fit_exponential_bound, neumann_green, small_gain
from .spectrum import RootReport, unstable_root_count
from .system import DelaySystem, GridFunction, PerturbationProfile, omega, shift_factor, weight_rate


def _result(passed: bool, **values) -> dict:
    return {"passed": bool(passed), **values}


def bump(t, center: float = 0.0, width: float = 1.0):
    """Smooth bump ``exp(1 - 1 / (1 - u^2))`` with ``u = (t - center) / width``."""
    u = (np.asarray(t, dtype=float) - center) / width
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


# ---------------------------------------------------------------------------
# weights and spectrum
# ---------------------------------------------------------------------------

def weight_identities(sys: DelaySystem, samples: int = 10_000, seed: int = 0,
                      h: float = 1e-4) -> dict:
    """``omega' = k omega`` by centred differences and ``omega(t +/- r_j) =
    M_j^{+/-}(t) omega(t)`` on random ``t`` in ``[-1e6, 1e6]``."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1e6, 1e6, samples)
    t[: min(samples, 64)] = rng.uniform(-5, 5, min(samples, 64))  # where omega has curvature
    fd = (omega(t + h) - omega(t - h)) / (2 * h)
    fd_res = float(np.max(np.abs(fd - weight_rate(t) * omega(t))))
    shift_res = 0.0
    for r in sys.delays:
        for sign in (1, -1):
            gap = np.abs(omega(t + sign * r) - shift_factor(t, r, sign) * omega(t))
            shift_res = max(shift_res, float(np.max(gap)))
    return _result(fd_res <= 1e-8 and shift_res <= 1e-14, fd_residual=fd_res,
                   shift_residual=shift_res, samples=samples)


def hyperbolicity(report: RootReport) -> dict:
    dom = report.dominant_root()
    return _result(report.hyperbolic, axis_root=report.axis_root, gap=report.gap,
                   dominant_root=None if dom is None else [dom.value.real, dom.value.imag])


# ---------------------------------------------------------------------------
# Green's function and convolution
# ---------------------------------------------------------------------------

def green_check(kernel: GreenKernel, report: RootReport) -> dict:
    """Jump ``G0(0+) - G0(0-) = I`` and the fitted decay against the dominant root."""
    jump_err = float(np.max(np.abs(kernel.jump - np.eye(kernel.dim))))
    _, a = fit_exponential_bound(kernel)
    dom = report.dominant_root()
    target = abs(dom.value.real) if dom is not None else None
    rel = abs(a - target) / target if target else None
    ok = jump_err <= 1e-6 and (rel is None or rel <= 0.1)
    return _result(ok, jump_error=jump_err, fit_a=a, dominant_rate=target,
                   fit_relative_error=rel)


def _forcing(sys: DelaySystem, half: float, step: float) -> GridFunction:
    n = sys.dim

    def h(t):
        cols = [bump(t, 0.0, 2.0)] + [0.5 * bump(t, 0.5 * (j + 1), 1.5) for j in range(n - 1)]
        return np.stack(cols, axis=-1)

    return GridFunction.from_callable(h, -half, half, step)


def convolution_check(sys: DelaySystem, kernel: GreenKernel, gap: float,
                      half: float = 20.0) -> dict:
    """Residual of ``G0 * h`` and agreement with the integrator for a bump ``h``.

    The integrator restarts from the convolution solution at ``t = -3`` and
    runs to ``t = 6``.  Quadrature errors in unstable modes grow like
    ``e^t`` under forward integration, so agreement is only measured when the
    limit has no roots with positive real part.
    """
    step = kernel.step
    h = _forcing(sys, half, step)
    x = convolve_solve(kernel, h)
    rel = x.relative_residual
    agreement = None
    limit = kernel.limit
    if unstable_root_count(limit, gap) == 0:
        s0, t1 = -3.0, 6.0
        m = int(round(sys.history_span / step))
        phi = HistorySegment.from_callable(lambda th: x(s0 + th), sys.history_span, m, s0)
        limit_sys = DelaySystem.autonomous(limit.delays, limit.matrices)
        traj = integrate(limit_sys, s0, phi, t1, h=h)
        tt = x.times[(x.times >= s0) & (x.times <= t1)]
        agreement = float(np.max(np.abs(traj(tt) - x(tt))))
    ok = rel <= 1e-3 and (agreement is None or agreement <= 1e-4)
    return _result(ok, relative_residual=rel, integrator_gap=agreement,
                   warnings=list(x.warnings))


# ---------------------------------------------------------------------------
# Neumann series
# ---------------------------------------------------------------------------

def neumann_check(sys: DelaySystem, g0: GreenKernel, scale: float | None = None,
                  order: int = 4, half: float = 8.0, step: float = 1.0 / 16) -> dict:
    """Iterated-kernel contraction and the decay of the perturbed kernel.

    With ``scale`` the perturbation is rescaled so that its sup-norm equals
    ``scale`` times the small-gain threshold (amplitude shape kept).
    """
    eps, thr, _ = small_gain(sys, g0)
    if scale is not None:
        if eps == 0:
            raise ValueError("cannot rescale a zero perturbation")
        factor = scale * thr / eps
        perts = [PerturbationProfile(p.kind, p.amplitude * factor, p.rate, p.width, p.center)
                 for p in sys.perturbations]
        sys = DelaySystem(sys.dim, sys.delays, sys.limit_plus, sys.limit_minus, tuple(perts),
                          sys.name)
    grid = -half + step * np.arange(int(round(2 * half / step)) + 1)
    pk = neumann_green(sys, g0, order, grid, grid)
    _, a = pk.fit()
    a1 = pk.constants[1]
    ok = pk.ratio < 1 and a >= 0.9 * a1
    return _result(ok, ratio=pk.ratio, fit_a=a, a1=a1, term_norms=pk.term_norms,
                   epsilon=pk.epsilon, threshold=pk.threshold)


# ---------------------------------------------------------------------------
# adjoint pairing
# ---------------------------------------------------------------------------

def random_smooth(rng: np.random.Generator, n: int, support: float = 4.0):
    """Sum of three random bumps per component, supported in ``[-support-3, support+3]``."""
    centers = rng.uniform(-support, support, (3, n))
    widths = rng.uniform(1.0, 3.0, (3, n))
    amps = rng.standard_normal((3, n))

    def f(t):
        t = np.asarray(t, dtype=float)
        cols = [sum(amps[k, c] * bump(t, centers[k, c], widths[k, c]) for k in range(3))
                for c in range(n)]
        return np.stack(cols, axis=-1)

    return f


def pairing_table(sys: DelaySystem, steps, pairs: int = 20, seed: int = 0,
                  half: float = 12.0) -> dict:
    """Weighted adjoint pairing residual for ``pairs`` random smooth pairs at
    each step; the ratio compares consecutive steps of the ladder."""
    rng = np.random.default_rng(seed)
    funcs = [(random_smooth(rng, sys.dim), random_smooth(rng, sys.dim)) for _ in range(pairs)]
    steps = [float(s) for s in steps]
    rows = []
    for st in steps:
        res = [adjoint_pairing_residual(sys, GridFunction.from_callable(fx, -half, half, st),
                                        GridFunction.from_callable(fy, -half, half, st))
               for fx, fy in funcs]
        rows.append({"step": st, "max_residual": float(max(res)),
                     "mean_residual": float(np.mean(res))})
    ratios = [a["max_residual"] / b["max_residual"] if b["max_residual"] > 0 else math.inf
              for a, b in zip(rows[:-1], rows[1:])]
    finest = rows[-1]["max_residual"]
    ok = finest <= 1e-4 and (not ratios or 3.0 <= ratios[-1] <= 5.0)
    return _result(ok, table=rows, halving_ratios=ratios, pairs=pairs)


# ---------------------------------------------------------------------------
# dichotomy
# ---------------------------------------------------------------------------

def projection_algebra(report: DichotomyReport) -> dict:
    """Idempotence, ``||P phi|| <= gamma0 ||phi||`` and commutation per slice."""
    g0 = report.gamma0
    idem = max((sl.idempotence for sl in report.slices), default=0.0)
    probe = max((sl.probe_p_ratio for sl in report.slices), default=0.0)
    comm = max((max(sl.commutation.values(), default=0.0) for sl in report.slices),
               default=0.0)
    ok = idem <= 1e-3 and probe <= g0 and comm <= 1e-2
    return _result(ok, idempotence=idem, max_probe_ratio=probe, gamma0=g0, commutation=comm)


def dichotomy_verdict(report: DichotomyReport) -> dict:
    """Positive fitted rates both ways, forward rates at least ``lambda_theory``."""
    fwd = [sl.forward_fit[1] for sl in report.slices]
    back = [sl.backward_fit[1] for sl in report.slices if sl.backward_fit is not None]
    lam_th = report.gamma.lambda_theory
    ok = (report.verdict == "dichotomy" and all(x > 0 for x in fwd + back)
          and all(x >= lam_th for x in fwd))
    return _result(ok, verdict=report.verdict, forward_lambda=fwd, backward_lambda=back,
                   lambda_theory=lam_th)


def fredholm_check(report) -> dict:
    d = report.as_tuple()
    ok = d[0] == 0 and d[1] == 0 and d[2] == 0 and d[3] <= 1e-6 and report.hypotheses_met
    return _result(ok, diagnostics=list(d), hypotheses_met=report.hypotheses_met)


def theory_bound(report: DichotomyReport) -> dict:
    """``||T(t, s) P(s)|| <= 2 gamma0^2 exp(-lambda_theory (t - s))`` along the forward curves."""
    margin = max((sl.theory_margin for sl in report.slices), default=0.0)
    return _result(margin <= 1.0, max_ratio_to_bound=margin,
                   lambda_theory=report.gamma.lambda_theory)

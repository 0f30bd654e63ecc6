"""Method-of-steps integration, solution operators on history segments,
convolution solves and the weighted adjoint pairing.

The integrator is classical RK4 on a uniform grid whose step never exceeds the
smallest positive delay, so every delayed argument lies in already computed
territory.  Delayed values inside the computed region come from the cubic
Hermite interpolant of stored values and derivatives; inside the initial
history the segment is read as a piecewise-linear function of its nodes (the
nodal hat basis used by :func:`operator_matrix`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

from .errors import BlowUpError, DomainError, PreconditionError
from .green import GreenKernel, PerturbedKernel
from .system import DelaySystem, GridFunction, omega, shift_factor, weight_rate

log = logging.getLogger(__name__)

BLOW_UP = 1e12


def default_resolution(sys: DelaySystem) -> int:
    """History nodes per segment: 64 per unit of delay, at least 64."""
    return int(math.ceil(64 * max(1.0, sys.max_delay)))


@dataclass(frozen=True)
class HistorySegment:
    """Samples of ``phi`` on ``base_time + [-span, 0]`` at ``m + 1`` nodes.

    ``values`` has shape ``(m + 1, n)`` or ``(m + 1, n, batch)``.  Segments cut
    from a computed trajectory also carry the derivatives at the nodes; the
    integrator then reads them as the same cubic Hermite interpolant it used
    when producing them, so restarting reproduces the original run.
    """

    base_time: float
    span: float
    values: np.ndarray
    derivs: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] < 2:
            raise DomainError("a history segment needs at least two nodes")
        if not np.all(np.isfinite(v)):
            raise DomainError("history segment has non-finite samples")
        object.__setattr__(self, "values", v)
        if self.derivs is not None:
            d = np.asarray(self.derivs, dtype=float).reshape(v.shape)
            object.__setattr__(self, "derivs", d)

    @classmethod
    def from_callable(cls, phi: Callable, span: float, m: int, base_time: float = 0.0):
        theta = -span + span / m * np.arange(m + 1)
        vals = np.asarray(phi(theta), dtype=float)
        return cls(base_time, span, vals[:, None] if vals.ndim == 1 else vals)

    @classmethod
    def constant(cls, value, span: float, m: int, base_time: float = 0.0):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(base_time, span, np.broadcast_to(v, (m + 1,) + v.shape).copy())

    @property
    def m(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return -self.span + self.span / self.m * np.arange(self.m + 1)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def flat(self) -> np.ndarray:
        """Node-major coefficient vector (index ``node * n + component``)."""
        return self.values.reshape((self.m + 1) * self.dim, *self.values.shape[2:])


@dataclass
class Trajectory:
    """Dense solution on ``[s - span, t_end]`` at the integration step."""

    s: float
    t_end: float
    step: float
    span: float
    offset: int  # index of t = s in the arrays
    values: np.ndarray  # (K, n[, B])
    derivs: np.ndarray  # right derivatives at the nodes (zero in a plain history part)
    settings: dict = field(default_factory=dict)
    smooth_history: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.s + self.step * (np.arange(self.values.shape[0]) - self.offset)

    def __call__(self, t) -> np.ndarray:
        """Evaluate: linear in the history part, cubic Hermite afterwards."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = (t - self.s) / self.step + self.offset
        last = self.values.shape[0] - 1
        if np.any(x < -1e-9) or np.any(x > last + 1e-9):
            raise DomainError("time outside the trajectory", t_min=self.times[0],
                              t_max=self.times[-1])
        x = np.clip(x, 0, last)
        k = np.clip(np.floor(x + 1e-9).astype(int), 0, max(last - 1, 0))
        th = np.clip(x - k, 0.0, 1.0)
        out = np.empty((t.size,) + self.values.shape[1:])
        for i in range(t.size):
            out[i] = _lookup(self.values, self.derivs, k[i], th[i], self._linear_until,
                             self.step)
        return out

    @property
    def _linear_until(self) -> int:
        return -1 if self.smooth_history else self.offset

    def segment(self, tau: float, m: int | None = None) -> HistorySegment:
        """History segment at ``tau``; node derivatives are attached when ``tau``
        is a grid node and the segment only covers Hermite territory."""
        m = m or int(round(self.settings.get("m", 64)))
        theta = -self.span + self.span / m * np.arange(m + 1)
        x = (tau - self.s) / self.step + self.offset
        k = int(round(x))
        sub = self.span / m / self.step
        isub = int(round(sub))
        if abs(x - k) < 1e-9 and abs(sub - isub) < 1e-9 and 0 <= k < self.values.shape[0]:
            idx = k - isub * np.arange(m, -1, -1)
            if idx[0] >= 0:
                derivs = self.derivs[idx] if idx[0] >= self._linear_until else None
                return HistorySegment(tau, self.span, self.values[idx], derivs)
        return HistorySegment(tau, self.span, self(tau + theta))


def _lookup(x, f, k: int, th: float, linear_until: int, dt: float):
    """Value at fractional index ``k + th``; linear below ``linear_until``."""
    if th == 0.0:
        return x[k]
    if k + 1 <= linear_until:
        return (1 - th) * x[k] + th * x[k + 1]
    h00 = 2 * th ** 3 - 3 * th ** 2 + 1
    h10 = th ** 3 - 2 * th ** 2 + th
    h01 = -2 * th ** 3 + 3 * th ** 2
    h11 = th ** 3 - th ** 2
    return h00 * x[k] + h10 * dt * f[k] + h01 * x[k + 1] + h11 * dt * f[k + 1]


def _hermite_slope(x, f, k: int, th: float, dt: float):
    d00 = 6 * th ** 2 - 6 * th
    d10 = 3 * th ** 2 - 4 * th + 1
    d01 = -6 * th ** 2 + 6 * th
    d11 = 3 * th ** 2 - 2 * th
    return (d00 * x[k] + d01 * x[k + 1]) / dt + d10 * f[k] + d11 * f[k + 1]


def _forcing_values(h, times: np.ndarray, n: int) -> np.ndarray:
    if h is None:
        return None
    if isinstance(h, GridFunction):
        tol = 1e-9 * max(1.0, h.step)
        if times.min() < h.t_min - tol or times.max() > h.t_max + tol:
            raise DomainError("forcing grid does not cover the integration interval",
                              t_min=h.t_min, t_max=h.t_max)
        vals = h(np.clip(times, h.t_min, h.t_max))
    else:
        vals = np.asarray(h(times), dtype=float)
    vals = vals.reshape(times.shape + (n,) + vals.shape[len(times.shape) + 1:])
    return vals


def integrate(sys: DelaySystem, s: float, phi: HistorySegment, t_end: float,
              h=None, step: float | None = None) -> Trajectory:
    """Solve ``x' = sum_j A_j(t) x(t - r_j) + h(t)`` on ``[s, t_end]``, ``x_s = phi``.

    ``h`` may be a :class:`GridFunction` or a callable of time.  The step is
    the history node spacing, refined so that it divides it and does not
    exceed the smallest positive delay.
    """
    if t_end < s:
        raise DomainError("t_end must not precede s", s=s, t_end=t_end)
    span = sys.history_span
    if abs(phi.span - span) > 1e-12 * span:
        raise DomainError("history span does not match the system", span=phi.span,
                          expected=span)
    if phi.dim != sys.dim:
        raise DomainError("history dimension does not match the system")
    m = phi.m
    node_gap = span / m
    pos = sys.delays[sys.delays > 0]
    sub = 1
    target = node_gap if step is None else step
    if pos.size:
        target = min(target, float(pos.min()))
    sub = max(1, int(math.ceil(node_gap / target - 1e-9)))
    dt = node_gap / sub
    n_hist = m * sub
    n_steps = int(math.ceil((t_end - s) / dt - 1e-9))
    total = n_hist + n_steps + 1
    batch = phi.values.shape[2:]
    x = np.zeros((total, sys.dim) + batch)
    f = np.zeros_like(x)
    smooth = phi.derivs is not None
    linear_until = -1 if smooth else n_hist
    fine = np.arange(n_hist + 1) / sub
    lo = np.minimum(np.floor(fine).astype(int), m - 1)
    if smooth:
        x[: n_hist + 1: sub] = phi.values
        f[: n_hist + 1: sub] = phi.derivs
        for i in range(n_hist + 1):
            if i % sub:
                x[i] = _lookup(phi.values, phi.derivs, lo[i], fine[i] - lo[i], -1, node_gap)
                f[i] = _hermite_slope(phi.values, phi.derivs, lo[i], fine[i] - lo[i], node_gap)
    else:
        # history on the fine grid is the linear interpolant of the nodes
        w = (fine - lo).reshape((-1,) + (1,) * (x.ndim - 1))
        x[: n_hist + 1] = (1 - w) * phi.values[lo] + w * phi.values[lo + 1]
    settings = {"m": m, "substeps": sub, "method": "rk4-hermite"}
    if n_steps == 0:
        return Trajectory(s, t_end, dt, span, n_hist, x, f, settings, smooth)

    t_nodes = s + dt * np.arange(n_steps + 1)
    stage_t = np.stack([t_nodes[:-1], t_nodes[:-1] + 0.5 * dt, t_nodes[1:]], axis=1)
    coef = sys.coefficients(stage_t)  # (K, 3, N+1, n, n)
    node_coef = sys.coefficients(t_nodes)
    hv = _forcing_values(h, stage_t, sys.dim)
    h_nodes = _forcing_values(h, t_nodes, sys.dim)
    # delayed lookups: fractional index offsets are the same at every step
    looks = []
    for c in (0.0, 0.5, 1.0):
        row = []
        for r in sys.delays[1:]:
            pos_f = c - r / dt
            k = math.floor(pos_f + 1e-9)
            th = pos_f - k
            row.append((k, 0.0 if abs(th) < 1e-9 else th))
        looks.append(row)

    def rhs(i, stage, state, base):
        a = coef[i, stage]
        out = np.tensordot(a[0], state, axes=(1, 0))
        for j, (k, th) in enumerate(looks[stage]):
            out += np.tensordot(a[j + 1], _lookup(x, f, base + k, th, linear_until, dt),
                                axes=(1, 0))
        if hv is not None:
            out = out + hv[i, stage]
        return out

    def node_rhs(i, base):
        a = node_coef[i]
        out = np.tensordot(a[0], x[base], axes=(1, 0))
        for j, (k, th) in enumerate(looks[2]):
            out += np.tensordot(a[j + 1], _lookup(x, f, base - 1 + k, th, linear_until, dt),
                                axes=(1, 0))
        if h_nodes is not None:
            out = out + h_nodes[i]
        return out

    f[n_hist] = node_rhs(0, n_hist)
    for i in range(n_steps):
        b = n_hist + i
        xn = x[b]
        k1 = f[b]
        k2 = rhs(i, 1, xn + 0.5 * dt * k1, b)
        k3 = rhs(i, 1, xn + 0.5 * dt * k2, b)
        k4 = rhs(i, 2, xn + dt * k3, b)
        x[b + 1] = xn + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        f[b + 1] = node_rhs(i + 1, b + 1)
        if not np.all(np.abs(x[b + 1]) < BLOW_UP):
            raise BlowUpError("solution norm exceeded 1e12", t=float(t_nodes[i + 1]))
    return Trajectory(s, s + n_steps * dt, dt, span, n_hist, x, f, settings, smooth)


def solution_operator(sys: DelaySystem, s: float, t: float, phi: HistorySegment,
                      h=None) -> HistorySegment:
    """``T(t, s) phi = x_t`` on the same node layout as ``phi``."""
    if t < s:
        raise DomainError("t must not precede s", s=s, t=t)
    if t == s:
        return HistorySegment(t, phi.span, phi.values.copy())
    traj = integrate(sys, s, phi, t, h)
    return traj.segment(t, phi.m)


def operator_matrix(sys: DelaySystem, s: float, t: float, m: int | None = None) -> np.ndarray:
    """Matrix of ``T(t, s)`` on the nodal hat basis, node-major ordering."""
    m = m or default_resolution(sys)
    n = sys.dim
    size = (m + 1) * n
    if t == s:
        return np.eye(size)
    basis = np.eye(size).reshape(m + 1, n, size)
    seg = solution_operator(sys, s, t, HistorySegment(s, sys.history_span, basis))
    return seg.values.reshape(size, size)


# ---------------------------------------------------------------------------
# convolution solves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvolutionResult(GridFunction):
    """Grid solution of a convolution solve plus its finite-difference residual."""

    residual: float = float("nan")
    relative_residual: float = float("nan")
    tail_bound: float = 0.0
    warnings: tuple = ()


def operator_residual(sys: DelaySystem, x: GridFunction, h: GridFunction | None = None):
    """``x' - sum_j A_j(t) x(t - r_j) - h`` at interior nodes by centred differences.

    Returns ``(times, residual values)``; interior means the delayed and
    neighbouring nodes stay inside the grid.
    """
    t = x.times
    dt = x.step
    lo = x.t_min + sys.max_delay + dt
    keep = np.flatnonzero((t >= lo - 1e-9) & (t <= x.t_max - dt + 1e-9))
    tk = t[keep]
    dx = (x.values[keep + 1] - x.values[keep - 1]) / (2 * dt)
    a = sys.coefficients(tk)
    res = dx.copy()
    for j, r in enumerate(sys.delays):
        res -= np.einsum("tab,tb...->ta...", a[:, j], x(tk - r))
    if h is not None:
        res -= h(tk)
    return tk, res


def convolve_solve(kernel, h: GridFunction, sys: DelaySystem | None = None) -> ConvolutionResult:
    """``x(t) = int G(t - z) h(z) dz`` (or ``int G(t, z) h(z) dz``) by the trapezoid rule.

    With a :class:`GreenKernel` the solution lives on the grid of ``h``; with a
    :class:`PerturbedKernel` ``h`` must live on its ``z_grid`` and the solution
    on its ``t_grid``.  The residual of the delay equation is computed for the
    autonomous limit of the kernel (or for ``sys`` when given).
    """
    warnings = []
    top = float(np.max(np.abs(h.values))) if h.values.size else 0.0
    ends = float(max(np.max(np.abs(h.values[0])), np.max(np.abs(h.values[-1]))))
    tail = 0.0
    if top > 0 and ends > 1e-8 * top:
        tail = ends
        warnings.append(f"forcing does not decay at the grid ends (|h| = {ends:.3g}); "
                        "the convolution is truncated")
    w = np.full(h.num_nodes, h.step)
    w[[0, -1]] *= 0.5
    if isinstance(kernel, PerturbedKernel):
        zg = kernel.z_grid
        if zg.size != h.num_nodes or not np.allclose(zg, h.times, atol=1e-9):
            raise DomainError("forcing must be sampled on the kernel's z grid")
        vals = np.einsum("tzab,zb,z->ta", kernel.total, h.values, w)
        t0, step = float(kernel.t_grid[0]), float(kernel.t_grid[1] - kernel.t_grid[0])
        sys = sys or kernel.system
    else:
        nh = h.num_nodes
        offsets = h.step * np.arange(-(nh - 1), nh)
        gk = kernel(offsets)  # (2nh-1, n, n), mean value at 0
        hw = h.values * w[:, None]
        n = kernel.dim
        vals = np.zeros((nh, n))
        for a in range(n):
            for b in range(n):
                vals[:, a] += fftconvolve(gk[:, a, b], hw[:, b])[nh - 1: 2 * nh - 1]
        t0, step = h.t_min, h.step
        if sys is None and kernel.limit is not None:
            sys = DelaySystem.autonomous(kernel.limit.delays, kernel.limit.matrices)
    x = GridFunction(t0, step, vals, "zero")
    res = rel = float("nan")
    if sys is not None:
        hh = h.with_extension("zero")
        _, r = operator_residual(sys, x, hh)
        if r.size:
            res = float(np.max(np.abs(r)))
            rel = res / top if top > 0 else (0.0 if res == 0 else float("inf"))
    for msg in warnings:
        log.warning(msg)
    return ConvolutionResult(t0, step, vals, "zero", res, rel, tail, tuple(warnings))


def weighted_convolution(kernel: GreenKernel, h: GridFunction) -> GridFunction:
    """Diagnostic ``int G0(t - z) h(z) dmu(z)``: the convolution against the
    finite measure, which solves the equation with forcing ``h * omega``."""
    hw = GridFunction(h.t_min, h.step, h.values * omega(h.times)[:, None], h.extension)
    out = convolve_solve(kernel, hw)
    return GridFunction(out.t_min, out.step, out.values, out.extension)


# ---------------------------------------------------------------------------
# adjoint
# ---------------------------------------------------------------------------

def adjoint_matrices(sys: DelaySystem, t: float) -> np.ndarray:
    """``B_0 = k(t) I + A_0(t)`` and ``B_j = M_j^+(t) A_j(t + r_j)``; shape (N+1, n, n)."""
    t = float(t)
    out = np.empty((sys.num_terms, sys.dim, sys.dim))
    out[0] = weight_rate(t) * np.eye(sys.dim) + sys.coefficients(t)[0]
    for j in range(1, sys.num_terms):
        r = sys.delays[j]
        out[j] = shift_factor(t, r, 1) * sys.coefficients(t + r)[j]
    return out


def _adjoint_stack(sys: DelaySystem, t: np.ndarray) -> np.ndarray:
    out = np.empty(t.shape + (sys.num_terms, sys.dim, sys.dim))
    out[..., 0, :, :] = weight_rate(t)[..., None, None] * np.eye(sys.dim) + sys.coefficients(t)[..., 0, :, :]
    for j in range(1, sys.num_terms):
        r = sys.delays[j]
        out[..., j, :, :] = shift_factor(t, r, 1)[..., None, None] * sys.coefficients(t + r)[..., j, :, :]
    return out


def _centred(v: np.ndarray, dt: float) -> np.ndarray:
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    d[0] = (v[1] - v[0]) / dt
    d[-1] = (v[-1] - v[-2]) / dt
    return d


def apply_operator(sys: DelaySystem, x: GridFunction) -> np.ndarray:
    """``(Lambda x)(t) = x' - sum_j A_j(t) x(t - r_j)`` on the nodes of ``x``
    (zero outside its grid)."""
    xz = x.with_extension("zero")
    t = x.times
    a = sys.coefficients(t)
    out = _centred(x.values, x.step)
    for j, r in enumerate(sys.delays):
        out -= np.einsum("tab,tb->ta", a[:, j], xz(t - r))
    return out


def apply_adjoint(sys: DelaySystem, y: GridFunction) -> np.ndarray:
    """``(Lambda* y)(t) = -y' - sum_j B_j(t)^T y(t + r_j)`` (zero outside the grid)."""
    yz = y.with_extension("zero")
    t = y.times
    b = _adjoint_stack(sys, t)
    out = -_centred(y.values, y.step)
    for j, r in enumerate(sys.delays):
        out -= np.einsum("tba,tb->ta", b[:, j], yz(t + r))
    return out


def _weighted_inner(u: np.ndarray, v: np.ndarray, t: np.ndarray, dt: float) -> float:
    integrand = np.sum(u * v, axis=1) * omega(t)
    return float(dt * (integrand.sum() - 0.5 * (integrand[0] + integrand[-1])))


def adjoint_pairing_residual(sys: DelaySystem, x: GridFunction, y: GridFunction) -> float:
    """``|<Lambda x, y>_mu - <x, Lambda* y>_mu| / (||x|| ||y||)`` with weighted L2 norms."""
    if x.num_nodes != y.num_nodes or abs(x.t_min - y.t_min) > 1e-12 or x.step != y.step:
        raise DomainError("x and y must share a grid")
    for name, g in (("x", x), ("y", y)):
        scale = max(1.0, float(np.max(np.abs(g.values))))
        if max(np.max(np.abs(g.values[0])), np.max(np.abs(g.values[-1]))) >= 1e-10 * scale:
            raise PreconditionError(f"{name} is not compactly supported inside its grid")
    t, dt = x.times, x.step
    nx = math.sqrt(_weighted_inner(x.values, x.values, t, dt))
    ny = math.sqrt(_weighted_inner(y.values, y.values, t, dt))
    if nx == 0 or ny == 0:
        return 0.0
    lhs = _weighted_inner(apply_operator(sys, x), y.values, t, dt)
    rhs = _weighted_inner(x.values, apply_adjoint(sys, y), t, dt)
    return abs(lhs - rhs) / (nx * ny)

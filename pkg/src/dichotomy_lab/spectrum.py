"""Characteristic matrix, hyperbolicity certification and root location.

Roots are counted with the argument principle on ``det Delta(s)`` along
rectangle boundaries (adaptive phase tracking), located by rectangle
bisection and polished with Newton's method using the closed-form
derivative ``Delta'(s) = I + sum_j r_j A_j exp(-s r_j)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import NotHyperbolicError, RectangleOnRootError
from .system import AutonomousSystem, DelaySystem, op_norm

log = logging.getLogger(__name__)

AXIS_THRESHOLD = 1e-8
MAX_PHASE_JUMP = np.pi / 4
ROOT_DIAMETER = 1e-3
NEWTON_TOL = 1e-12


@dataclass(frozen=True)
class CharPoint:
    s: complex
    delta: np.ndarray
    det: complex
    smin: float


@dataclass(frozen=True)
class Root:
    value: complex
    residual: float
    multiplicity: int = 1


@dataclass
class RootReport:
    strip_halfwidth: float
    roots: list[Root]
    winding_count: int
    scan_window: float
    gap: float | None = None
    axis_margin: float | None = None
    hyperbolic: bool = True
    axis_root: float | None = None
    warnings: list[str] = field(default_factory=list)

    def dominant_root(self) -> Root | None:
        """Root nearest to the imaginary axis."""
        if not self.roots:
            return None
        return min(self.roots, key=lambda r: (abs(r.value.real), -r.value.imag))

    def to_dict(self) -> dict:
        return {
            "hyperbolic": self.hyperbolic,
            "gap": self.gap,
            "axis_margin": self.axis_margin,
            "axis_root": self.axis_root,
            "strip_halfwidth": self.strip_halfwidth,
            "scan_window": self.scan_window,
            "winding_count": self.winding_count,
            "roots": [{"re": float(r.value.real), "im": float(r.value.imag),
                       "residual": float(r.residual),
                       "multiplicity": r.multiplicity} for r in self.roots],
            "warnings": list(self.warnings),
        }


class _BoundaryTooClose(Exception):
    pass


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def char_matrix(limit: AutonomousSystem, s):
    """``sI - sum_j A_j exp(-s r_j)``; vectorized over ``s``."""
    s = np.asarray(s, dtype=complex)
    n = limit.dim
    ex = np.exp(-s[..., None] * limit.delays)  # (..., N+1)
    out = s[..., None, None] * np.eye(n) - np.einsum("...j,jab->...ab", ex, limit.matrices)
    return out


def char_derivative(limit: AutonomousSystem, s):
    s = np.asarray(s, dtype=complex)
    ex = np.exp(-s[..., None] * limit.delays) * limit.delays
    return np.eye(limit.dim) + np.einsum("...j,jab->...ab", ex, limit.matrices)


def char_det(limit: AutonomousSystem, s):
    return np.linalg.det(char_matrix(limit, s))


def _smin(mats: np.ndarray) -> np.ndarray:
    if mats.shape[-1] == 1:
        return np.abs(mats[..., 0, 0])
    return np.linalg.svd(mats, compute_uv=False)[..., -1]


def char_point(limit: AutonomousSystem, s: complex) -> CharPoint:
    d = char_matrix(limit, s)
    return CharPoint(complex(s), d, complex(np.linalg.det(d)), float(_smin(d)))


# ---------------------------------------------------------------------------
# imaginary axis
# ---------------------------------------------------------------------------

def _axis_scan(limit: AutonomousSystem, z_max: float, step: float) -> tuple[float, float]:
    z = np.arange(-z_max, z_max + 0.5 * step, step)
    sm = _smin(char_matrix(limit, 1j * z))
    best_m, best_z = float(sm.min()), float(z[np.argmin(sm)])
    # polish the deepest local minima of the sampled profile
    interior = np.flatnonzero((sm[1:-1] <= sm[:-2]) & (sm[1:-1] <= sm[2:])) + 1
    cand = interior[np.argsort(sm[interior])[:6]]
    for i in cand:
        res = minimize_scalar(lambda y: float(_smin(char_matrix(limit, 1j * y))),
                              bounds=(z[i] - step, z[i] + step), method="bounded",
                              options={"xatol": 1e-13})
        if res.fun < best_m:
            best_m, best_z = float(res.fun), float(res.x)
    return best_m, best_z


def imaginary_axis_margin(limit: AutonomousSystem, z_max: float, step: float = 1e-2) -> float:
    """Minimum over ``z in [-z_max, z_max]`` of the smallest singular value of
    ``Delta(iz)``; values below 1e-8 mean a (numerically) singular axis."""
    return _axis_scan(limit, z_max, step)[0]


def root_window_bound(limit: AutonomousSystem, c: float) -> float:
    """Radius containing every characteristic root with ``|Re s| <= c``."""
    norms = op_norm(limit.matrices)
    return float(np.sum(norms * np.exp(limit.delays * c)) + c)


# ---------------------------------------------------------------------------
# argument principle
# ---------------------------------------------------------------------------

def _edge_winding(limit: AutonomousSystem, a: complex, b: complex, n0: int) -> float:
    """Total phase change of det Delta along the segment [a, b]."""
    t = np.linspace(0.0, 1.0, n0 + 1)
    vals = char_det(limit, a + (b - a) * t)
    mats_check = char_matrix(limit, a + (b - a) * t)
    if np.min(_smin(mats_check)) <= AXIS_THRESHOLD:
        raise _BoundaryTooClose
    for _ in range(60):
        jumps = np.angle(vals[1:] / vals[:-1])
        bad = np.flatnonzero(np.abs(jumps) >= MAX_PHASE_JUMP)
        if bad.size == 0:
            return float(jumps.sum())
        if np.min(t[bad + 1] - t[bad]) * abs(b - a) < 1e-13:
            raise _BoundaryTooClose
        mid = 0.5 * (t[bad] + t[bad + 1])
        mid_s = a + (b - a) * mid
        mm = char_matrix(limit, mid_s)
        if np.min(_smin(mm)) <= AXIS_THRESHOLD:
            raise _BoundaryTooClose
        t = np.insert(t, bad + 1, mid)
        vals = np.insert(vals, bad + 1, np.linalg.det(mm))
    raise _BoundaryTooClose


def _winding(limit: AutonomousSystem, re_range, im_range) -> int:
    x0, x1 = re_range
    y0, y1 = im_range
    corners = [complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1)]
    total = 0.0
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        n0 = max(16, int(np.ceil(abs(b - a) / 0.05)))
        total += _edge_winding(limit, a, b, n0)
    w = total / (2 * np.pi)
    count = int(round(w))
    if abs(w - count) > 0.1:
        raise _BoundaryTooClose
    return count


def count_roots_rectangle(limit: AutonomousSystem, re_range, im_range) -> int:
    """Number of characteristic roots (with multiplicity) in the rectangle.

    A rectangle whose boundary passes too close to a root is grown outward by
    one sampling step and retried, up to three times.
    """
    x0, x1 = map(float, re_range)
    y0, y1 = map(float, im_range)
    grow = 0.05
    for attempt in range(4):
        e = grow * attempt
        try:
            return _winding(limit, (x0 - e, x1 + e), (y0 - e, y1 + e))
        except _BoundaryTooClose:
            continue
    raise RectangleOnRootError("rectangle boundary passes through a characteristic root",
                               re_range=[x0, x1], im_range=[y0, y1])


def refine_root(limit: AutonomousSystem, s0: complex, maxiter: int = 60) -> complex:
    """Newton iteration on det Delta with step ``1 / tr(Delta^{-1} Delta')``."""
    s = complex(s0)
    for _ in range(maxiter):
        d = char_matrix(limit, s)
        dp = char_derivative(limit, s)
        try:
            step = 1.0 / np.trace(np.linalg.solve(d, dp))
        except np.linalg.LinAlgError:
            return s
        s = s - step
        if abs(step) < NEWTON_TOL * (1.0 + abs(s)):
            break
    return s


def _residual(limit: AutonomousSystem, s: complex) -> float:
    return float(abs(char_det(limit, s)))


def locate_roots(limit: AutonomousSystem, re_range, im_range,
                 warnings: list[str] | None = None) -> tuple[list[Root], int]:
    """Find all roots in a rectangle by bisection to diameter 1e-3 plus Newton.

    Returns the roots and the winding count of the (possibly grown) rectangle.
    """
    warnings = warnings if warnings is not None else []
    x0, x1 = map(float, re_range)
    y0, y1 = map(float, im_range)
    total = None
    for attempt in range(4):
        e = 0.05 * attempt
        try:
            rect = (x0 - e, x1 + e, y0 - e, y1 + e)
            total = _winding(limit, rect[:2], rect[2:])
            break
        except _BoundaryTooClose:
            continue
    if total is None:
        raise RectangleOnRootError("scan rectangle passes through a root",
                                   re_range=[x0, x1], im_range=[y0, y1])
    roots: list[Root] = []
    stack = [(rect, total)] if total > 0 else []
    while stack:
        (a0, a1, b0, b1), k = stack.pop()
        diam = np.hypot(a1 - a0, b1 - b0)
        if diam <= ROOT_DIAMETER:
            s = refine_root(limit, complex(0.5 * (a0 + a1), 0.5 * (b0 + b1)))
            roots.append(Root(s, _residual(limit, s), k))
            if k > 1:
                warnings.append(f"rectangle near {s:.6g} holds {k} roots; refinement "
                                "returns a single point (multiple root or cluster)")
            continue
        horizontal = (a1 - a0) >= (b1 - b0)
        for frac in (0.5, 0.47, 0.53, 0.41, 0.59, 0.33):
            if horizontal:
                cut = a0 + frac * (a1 - a0)
                halves = [(a0, cut, b0, b1), (cut, a1, b0, b1)]
            else:
                cut = b0 + frac * (b1 - b0)
                halves = [(a0, a1, b0, cut), (a0, a1, cut, b1)]
            try:
                counts = [_winding(limit, h[:2], h[2:]) for h in halves]
            except _BoundaryTooClose:
                continue
            break
        else:
            raise RectangleOnRootError("could not split rectangle away from roots",
                                       rect=[a0, a1, b0, b1])
        if sum(counts) != k:
            warnings.append(f"partition count mismatch {counts} vs {k} in rectangle "
                            f"[{a0:.4g},{a1:.4g}]x[{b0:.4g},{b1:.4g}]")
        for h, c in zip(halves, counts):
            if c > 0:
                stack.append((h, c))
    roots.sort(key=lambda r: (round(r.value.real, 9), r.value.imag))
    return roots, total


def analyze(limit: AutonomousSystem, strip: float = 1.0, axis_step: float = 1e-2) -> RootReport:
    """Hyperbolicity check, root location in ``|Re s| <= strip`` and gap.

    Never raises for a non-hyperbolic system; the verdict is in the report.
    """
    warnings: list[str] = []
    z_max = root_window_bound(limit, 0.0) + 1.0
    margin, z_star = _axis_scan(limit, z_max, axis_step)
    bound = root_window_bound(limit, strip)
    if margin < AXIS_THRESHOLD:
        s = refine_root(limit, 1j * z_star)
        z = s.imag if abs(s.real) < 1e-6 and abs(s.imag - z_star) < 1e-3 else z_star
        if np.isrealobj(limit.matrices):
            z = abs(z)  # roots pair up with their conjugates
        warnings.append("near-singular imaginary axis")
        return RootReport(strip, [], 0, bound, None, margin, False, float(z), warnings)
    roots, count = locate_roots(limit, (-strip, strip), (-bound, bound), warnings)
    in_strip = [r for r in roots if abs(r.value.real) <= strip + 0.2]
    d = min((abs(r.value.real) for r in in_strip), default=np.inf)
    gap = float(min(0.9 * d, 0.9))
    recheck = count_roots_rectangle(limit, (-gap, gap), (-bound, bound))
    if recheck != 0:
        warnings.append(f"certified strip re-check found {recheck} roots")
        raise NotHyperbolicError("root detected inside the certified strip", z=float("nan"),
                                 margin=margin)
    _check_conjugates(limit, roots, warnings)
    return RootReport(strip, roots, count, bound, gap, margin, True, None, warnings)


def _check_conjugates(limit: AutonomousSystem, roots: list[Root], warnings: list[str]) -> None:
    if np.iscomplexobj(limit.matrices):
        return
    vals = np.array([r.value for r in roots])
    for v in vals:
        if vals.size and np.min(np.abs(vals - np.conj(v))) > 1e-9 * (1 + abs(v)):
            warnings.append(f"root {v:.6g} has no conjugate partner in the list")


def spectral_gap(limit: AutonomousSystem) -> float:
    """Half-width ``a0`` of a certified root-free strip around the imaginary axis,
    ``a0 = min(0.9 d, 0.9)`` with ``d`` the distance of the nearest root."""
    rep = analyze(limit)
    if not rep.hyperbolic:
        raise NotHyperbolicError(f"characteristic root on the imaginary axis at z={rep.axis_root:.12g}",
                                 z=rep.axis_root, margin=rep.axis_margin)
    return rep.gap


def is_asymptotically_hyperbolic(sys: DelaySystem) -> tuple[float, float]:
    """Gaps ``(a0_plus, a0_minus)`` of both limiting systems."""
    gaps = []
    for branch in ("+", "-"):
        try:
            gaps.append(spectral_gap(sys.limit(branch)))
        except NotHyperbolicError as exc:
            raise NotHyperbolicError(f"{branch} limit: {exc.message}", z=exc.z,
                                     branch=branch, margin=exc.margin) from exc
    return gaps[0], gaps[1]


def unstable_root_count(limit: AutonomousSystem, gap: float) -> int:
    """Number of roots with ``Re s > gap`` (with multiplicity).

    Roots in the right half-plane satisfy ``|s| <= sum_j ||A_j||``, so a
    finite rectangle holds all of them.
    """
    bound = root_window_bound(limit, 0.0) + 1.0
    return count_roots_rectangle(limit, (gap, bound), (-bound, bound))

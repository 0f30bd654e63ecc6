"""Delay systems, perturbation profiles, the weight of the finite measure, and
grid functions.

A system is ``x'(t) = sum_j A_j(t) x(t - r_j)`` with ``A_j(t)`` equal to a
limiting matrix plus a decaying perturbation ``C_j(t)``.  Vector norms are the
max norm and matrix norms the induced (max row sum) norm throughout the
package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError

PROFILE_KINDS = ("zero", "rational_decay", "exponential_decay", "compact_bump")


def vec_norm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.max(np.abs(x), axis=axis)


def op_norm(a: np.ndarray) -> np.ndarray:
    """Induced max-norm of a matrix (or a stack of matrices)."""
    return np.max(np.sum(np.abs(a), axis=-1), axis=-1)


# ---------------------------------------------------------------------------
# weight of dmu = dt / (1 + t^2)
# ---------------------------------------------------------------------------

def omega(t):
    t = np.asarray(t, dtype=float)
    return 1.0 / (1.0 + t * t)


def weight_rate(t):
    """k(t) = -2t / (1 + t^2), the logarithmic derivative of omega."""
    t = np.asarray(t, dtype=float)
    return -2.0 * t / (1.0 + t * t)


def weight_eval(t: float) -> tuple[float, float]:
    """Return ``(omega(t), k(t))``."""
    if not np.isfinite(t):
        raise DomainError("weight_eval needs a finite time", t=float(t))
    return float(omega(t)), float(weight_rate(t))


def shift_factor(t, delay: float, sign: int):
    """M_j^{+/-}(t) = (1 + t^2) / (1 + (t +/- r_j)^2).

    ``omega(t + sign * delay) == shift_factor(t, delay, sign) * omega(t)``.
    """
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1", sign=sign)
    t = np.asarray(t, dtype=float)
    u = t + sign * delay
    return (1.0 + t * t) / (1.0 + u * u)


# ---------------------------------------------------------------------------
# perturbation profiles
# ---------------------------------------------------------------------------

def _as_matrix(a, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0 and dim == 1:
        arr = arr.reshape(1, 1)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{what} must be a {dim}x{dim} matrix, got shape {arr.shape}",
                          path=what)
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} has non-finite entries", path=what)
    return arr


@dataclass(frozen=True)
class PerturbationProfile:
    """A decaying matrix function ``C(t)``.

    kinds: ``zero``; ``rational_decay`` = amplitude / (1 + t^2);
    ``exponential_decay`` = amplitude * exp(-rate |t|); ``compact_bump`` = a
    smooth bump with peak ``amplitude`` at ``center`` vanishing outside
    ``[center - width, center + width]``.
    """

    kind: str
    amplitude: np.ndarray
    rate: float = 1.0
    width: float = 1.0
    center: float = 0.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}", path="kind")
        amp = np.array(self.amplitude, dtype=float)
        if amp.ndim != 2 or amp.shape[0] != amp.shape[1]:
            raise ConfigError("amplitude must be a square matrix", path="amplitude")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitude", amp)
        if self.rate <= 0 or self.width <= 0:
            raise ConfigError("rate and width must be positive", path="rate")

    @classmethod
    def zero(cls, dim: int) -> "PerturbationProfile":
        return cls("zero", np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.amplitude.shape[0]

    def scalar_factor(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(t)
        if self.kind == "rational_decay":
            return 1.0 / (1.0 + t * t)
        if self.kind == "exponential_decay":
            return np.exp(-self.rate * np.abs(t))
        u = (t - self.center) / self.width
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
        return out

    def __call__(self, t) -> np.ndarray:
        """Matrix value(s); shape ``t.shape + (n, n)``."""
        f = self.scalar_factor(t)
        return f[..., None, None] * self.amplitude

    @property
    def horizon(self) -> float:
        """|t| beyond which the profile is negligible (used by decay checks)."""
        if self.kind == "rational_decay":
            return 1e6
        if self.kind == "exponential_decay":
            return 60.0 / self.rate
        if self.kind == "compact_bump":
            return abs(self.center) + self.width
        return 0.0

    def sup_norm(self, samples: int = 20001) -> float:
        """Sup over a dense grid of the operator norm (||M||_sup)."""
        if self.kind == "zero":
            return 0.0
        lo, hi = -self.horizon, self.horizon
        if self.kind == "compact_bump":
            lo, hi = self.center - self.width, self.center + self.width
        if self.kind == "rational_decay":
            lo, hi = -50.0, 50.0
        t = np.concatenate([np.linspace(lo, hi, samples), [0.0, self.center]])
        f = np.abs(self.scalar_factor(t)).max()
        return float(f * op_norm(self.amplitude))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "amplitude": self.amplitude.tolist(),
            "rate": self.rate,
            "width": self.width,
            "center": self.center,
        }


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AutonomousSystem:
    """Constant-coefficient system ``x' = sum_j A_j x(t - r_j)``."""

    delays: np.ndarray
    matrices: np.ndarray  # shape (N+1, n, n)

    def __post_init__(self):
        d = np.array(self.delays, dtype=float)
        a = np.array(self.matrices, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, 1, 1)
        if a.ndim != 3 or a.shape[0] != d.size or a.shape[1] != a.shape[2]:
            raise ConfigError("need one square matrix per delay", path="matrices")
        d.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "matrices", a)

    @classmethod
    def scalar(cls, coeffs: Sequence[float], delays: Sequence[float]) -> "AutonomousSystem":
        return cls(np.asarray(delays, float), np.asarray(coeffs, float).reshape(-1, 1, 1))

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    @property
    def max_delay(self) -> float:
        return float(self.delays[-1])


@dataclass(frozen=True)
class DelaySystem:
    """``x'(t) = sum_j (A_{+/-, j} + C_j(t)) x(t - r_j)``.

    The limiting matrices ``limit_plus`` anchor ``t >= 0`` and ``limit_minus``
    anchor ``t < 0``; perturbations are shared.
    """

    dim: int
    delays: np.ndarray
    limit_plus: np.ndarray
    limit_minus: np.ndarray
    perturbations: tuple = field(default=())
    name: str = "system"

    def __post_init__(self):
        n = int(self.dim)
        if n < 1:
            raise ConfigError("dim must be a positive integer", path="dim")
        d = np.array(self.delays, dtype=float).ravel()
        if d.size == 0 or d[0] != 0.0:
            raise ConfigError("delays must start with r_0 = 0", path="delays")
        if np.any(np.diff(d) <= 0) or not np.all(np.isfinite(d)):
            raise ConfigError("delays must be finite and strictly increasing", path="delays")
        lp = np.array(self.limit_plus, dtype=float)
        lm = np.array(self.limit_minus, dtype=float)
        for arr, what in ((lp, "limit_plus"), (lm, "limit_minus")):
            if arr.shape != (d.size, n, n):
                raise ConfigError(
                    f"{what} must hold {d.size} matrices of shape {n}x{n}, got {arr.shape}",
                    path=what)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{what} has non-finite entries", path=what)
        perts = tuple(self.perturbations) or tuple(PerturbationProfile.zero(n) for _ in d)
        if len(perts) != d.size:
            raise ConfigError("need one perturbation profile per delay", path="perturbations")
        for j, p in enumerate(perts):
            if p.dim != n:
                raise ConfigError(f"perturbation {j} has wrong shape", path=f"perturbations.{j}")
            h = p.horizon
            for t in (-h, h):
                c = op_norm(p(np.array(t)))
                if not np.isfinite(c) or c > 1e-6 * (1.0 + op_norm(p.amplitude)):
                    raise ConfigError(f"perturbation {j} does not decay at |t|={h}",
                                      path=f"perturbations.{j}")
        for arr in (d, lp, lm):
            arr.setflags(write=False)
        object.__setattr__(self, "dim", n)
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "limit_plus", lp)
        object.__setattr__(self, "limit_minus", lm)
        object.__setattr__(self, "perturbations", perts)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def autonomous(cls, delays, matrices, perturbations=(), name="system") -> "DelaySystem":
        a = np.asarray(matrices, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, 1, 1)
        return cls(a.shape[1], delays, a, a, tuple(perturbations), name)

    @classmethod
    def from_dict(cls, cfg: dict, name: str = "system") -> "DelaySystem":
        n = cfg["dim"]
        delays = cfg["delays"]
        lp = [_as_matrix(m, n, f"limit_plus.{j}") for j, m in enumerate(cfg["limit_plus"])]
        lm = [_as_matrix(m, n, f"limit_minus.{j}") for j, m in enumerate(cfg["limit_minus"])]
        perts = []
        for j, p in enumerate(cfg.get("perturbations") or []):
            kind = p.get("kind", "zero")
            amp = _as_matrix(p.get("amplitude", np.zeros((n, n))), n,
                             f"perturbations.{j}.amplitude")
            perts.append(PerturbationProfile(kind, amp, float(p.get("rate", 1.0)),
                                             float(p.get("width", 1.0)),
                                             float(p.get("center", 0.0))))
        if perts and len(perts) != len(delays):
            raise ConfigError("need one perturbation entry per delay", path="perturbations")
        return cls(n, delays, np.array(lp), np.array(lm), tuple(perts), cfg.get("name", name))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "delays": self.delays.tolist(),
            "limit_plus": self.limit_plus.tolist(),
            "limit_minus": self.limit_minus.tolist(),
            "perturbations": [p.to_dict() for p in self.perturbations],
        }

    # -- structure ------------------------------------------------------------
    @property
    def num_terms(self) -> int:
        return self.delays.size

    @property
    def max_delay(self) -> float:
        return float(self.delays[-1])

    @property
    def history_span(self) -> float:
        """Length of the history segment; 1 for delay-free systems."""
        return self.max_delay if self.max_delay > 0 else 1.0

    def limit(self, branch: str = "+") -> AutonomousSystem:
        mats = self.limit_plus if branch == "+" else self.limit_minus
        if branch not in ("+", "-"):
            raise DomainError("branch must be '+' or '-'", branch=branch)
        return AutonomousSystem(self.delays, mats)

    @property
    def same_limits(self) -> bool:
        return bool(np.array_equal(self.limit_plus, self.limit_minus))

    def perturbation_values(self, t) -> np.ndarray:
        """``C_j(t)`` stacked: shape ``t.shape + (N+1, n, n)``."""
        t = np.asarray(t, dtype=float)
        return np.stack([p(t) for p in self.perturbations], axis=-3)

    def coefficients(self, t) -> np.ndarray:
        """Actual ``A_j(t)``; the ``+`` limit anchors ``t >= 0``, ``-`` anchors ``t < 0``."""
        t = np.asarray(t, dtype=float)
        base = np.where((t >= 0)[..., None, None, None], self.limit_plus, self.limit_minus)
        return base + self.perturbation_values(t)

    def perturbation_sup(self) -> float:
        """epsilon = sup_t sum_j |C_j(t)| sampled on a dense grid."""
        hs = [p.horizon for p in self.perturbations if p.kind != "zero"]
        if not hs:
            return 0.0
        centers = [p.center for p in self.perturbations]
        t = np.concatenate([np.linspace(-60, 60, 24001), centers])
        vals = op_norm(self.perturbation_values(t)).sum(axis=-1)
        return float(vals.max())

    def beta(self) -> float:
        """sum_j sup_t |A_j(t)| (sampled), an upper bound of sup_t ||L(t)||."""
        t = np.concatenate([np.linspace(-60, 60, 24001),
                            [p.center for p in self.perturbations], [1e9, -1e9]])
        norms = op_norm(self.coefficients(t))  # (T, N+1)
        return float(norms.max(axis=0).sum())


def coefficients_at(sys: DelaySystem, t: float, branch: str = "+") -> np.ndarray:
    """``A_{branch, j} + C_j(t)`` for j = 0..N."""
    if not np.isfinite(t):
        raise DomainError("coefficients_at needs a finite time", t=float(t))
    lim = sys.limit(branch).matrices
    return lim + sys.perturbation_values(np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# grid functions
# ---------------------------------------------------------------------------

def grid_size(t_min: float, t_max: float, step: float) -> int:
    return int(math.floor((t_max - t_min) / step + 1e-9)) + 1


@dataclass(frozen=True)
class GridFunction:
    """Samples of an R^n (or C^n) valued function on a uniform grid.

    ``values`` has shape ``(num_nodes, n)`` (or ``(num_nodes, n, batch)``).
    Evaluation between nodes is piecewise linear; outside the grid it raises
    unless ``extension`` is ``"zero"`` or ``"constant"``.
    """

    t_min: float
    step: float
    values: np.ndarray
    extension: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] == 0:
            raise DomainError("empty grid")
        if self.step <= 0:
            raise DomainError("grid step must be positive", step=self.step)
        if not np.all(np.isfinite(v)):
            raise DomainError("grid function has non-finite values")
        if self.extension not in (None, "zero", "constant"):
            raise DomainError("unknown extension policy", extension=self.extension)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, f: Callable, t_min: float, t_max: float, step: float,
                      extension: str | None = None) -> "GridFunction":
        t = t_min + step * np.arange(grid_size(t_min, t_max, step))
        vals = np.asarray(f(t))
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(t_min, step, vals, extension)

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def t_max(self) -> float:
        return self.t_min + self.step * (self.num_nodes - 1)

    @property
    def times(self) -> np.ndarray:
        return self.t_min + self.step * np.arange(self.num_nodes)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def with_extension(self, extension: str | None) -> "GridFunction":
        return GridFunction(self.t_min, self.step, self.values, extension)

    def index_of(self, t: float) -> int:
        """Index of the node at ``t`` (must be a node up to 1e-9 steps)."""
        x = (t - self.t_min) / self.step
        i = int(round(x))
        if abs(x - i) > 1e-6 or not 0 <= i < self.num_nodes:
            raise DomainError("time is not a grid node", t=float(t))
        return i

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        x = (t - self.t_min) / self.step
        last = self.num_nodes - 1
        tol = 1e-9
        outside = (x < -tol) | (x > last + tol)
        if np.any(outside) and self.extension is None:
            raise DomainError("evaluation outside the grid without an extension policy",
                              t_min=self.t_min, t_max=self.t_max)
        xc = np.clip(x, 0.0, last)
        i = np.clip(np.floor(xc).astype(int), 0, max(last - 1, 0))
        w = (xc - i)[..., None] if self.values.ndim == 2 else (xc - i)[..., None, None]
        if last == 0:
            out = np.broadcast_to(self.values[0], t.shape + self.values.shape[1:]).copy()
        else:
            out = (1 - w) * self.values[i] + w * self.values[i + 1]
        if self.extension == "zero" and np.any(outside):
            out[outside] = 0.0
        return out

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def weighted_norm(f: GridFunction, p: float = 2) -> float:
    """Norm of ``f`` in L^p(dmu) by the trapezoid rule; ``p = inf`` gives the
    weighted sup ``max |f(t)| omega(t)``."""
    if f.num_nodes == 0:
        raise DomainError("empty grid")
    absf = np.abs(f.values).reshape(f.num_nodes, -1).max(axis=1)
    w = omega(f.times)
    if np.isinf(p):
        return float(np.max(absf * w))
    if p < 1:
        raise DomainError("p must be >= 1", p=p)
    if f.num_nodes == 1:
        return 0.0
    integrand = absf ** p * w
    total = f.step * (integrand.sum() - 0.5 * (integrand[0] + integrand[-1]))
    return float(total ** (1.0 / p))

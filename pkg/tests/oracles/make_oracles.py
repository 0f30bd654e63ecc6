"""Regenerate ``values.json``: reference numbers from methods independent of the package.

Characteristic roots of ``x' = a x(t - r)`` come from Lambert W branches
(``s = W_k(a r) / r``).  Green's functions of causal scalar systems with
integer delays come from exact method-of-steps integration in sympy: with
``x = exp(c0 t) y`` the function ``y`` is a polynomial on every unit
interval.  Run with ``python tests/oracles/make_oracles.py``.
"""

import json
from pathlib import Path

import mpmath as mp
import numpy as np
import sympy as sp
from scipy.special import lambertw

OUT = Path(__file__).with_name("values.json")


def lambert_roots(a, r, branches=range(-3, 4)):
    roots = []
    for k in branches:
        s = complex(lambertw(a * r, k)) / r
        if abs(s - a * np.exp(-s * r)) < 1e-9 * (1 + abs(s)):
            roots.append(s)
    return roots


def fundamental_solution(c0, coeffs, t_end):
    """Exact ``x`` with ``x' = c0 x + sum_j c_j x(t - j)``, ``x(0) = 1``, zero history.

    ``coeffs[j - 1]`` multiplies the delay ``j``.  Returns a callable.
    """
    t = sp.symbols("t")
    c0 = sp.nsimplify(c0)
    scaled = [sp.nsimplify(c) * sp.exp(-c0 * j) for j, c in enumerate(coeffs, start=1)]
    pieces = []  # y on [k, k + 1]
    for k in range(int(t_end) + 1):
        rhs = sp.Integer(0)
        for j, c in enumerate(scaled, start=1):
            if k - j >= 0:
                rhs += c * pieces[k - j].subs(t, t - j)
        start = 1 if k == 0 else pieces[k - 1].subs(t, k)
        tau = sp.symbols("tau")
        pieces.append(sp.expand(start + sp.integrate(rhs.subs(t, tau), (tau, k, t))))

    def x(tv):
        k = int(np.floor(tv))
        return float(sp.N(sp.exp(c0 * tv) * pieces[k].subs(t, tv), 30))

    return x


def main():
    out = {}
    dom = mp.lambertw(-1)
    out["dominant_root_s_plus_exp"] = [float(dom.real), float(dom.imag)]

    cases = []
    for a, r in [(-1.0, 1.0), (-0.5, 1.0), (-1.5, 0.8), (-0.2, 1.0), (-1.2, 1.0), (0.5, 1.0),
                 (-2.0, 0.6)]:
        roots = lambert_roots(a, r)
        dominant = min(roots, key=lambda s: (abs(s.real), -s.imag))
        cases.append({"a": a, "r": r, "dominant": [dominant.real, abs(dominant.imag)]})
    out["scalar_delay_roots"] = cases

    ts = [0.5, 1.5, 2.5, 3.7, 6.2, 9.1]
    g = fundamental_solution(0, [-1], 10)
    out["green_delayed_scalar"] = {"t": ts, "G": [g(t) for t in ts]}

    ts2 = [0.25, 1.25, 2.5, 4.0, 7.5]
    g2 = fundamental_solution(-0.5, [-0.3, -0.2], 8)
    out["green_two_delays"] = {"delays": [0.0, 1.0, 2.0], "coeffs": [-0.5, -0.3, -0.2],
                               "t": ts2, "G": [g2(t) for t in ts2]}
    OUT.write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()

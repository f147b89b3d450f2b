"""Two-time kernels, iterated kernels and the resolvent.

The resolvent ``Psi`` of a Volterra kernel ``Phi`` on ``0 <= t <= s`` is
built two ways that check each other:

* :func:`resolvent_series` sums the Neumann series of iterated kernels,
* :func:`resolvent_nystrom` solves ``Psi = Phi + Psi * Phi`` row by row.

Both discretise the Volterra integral with the same
:class:`~bsvie.timegrid.VolterraRule`, so on a given grid they agree to the
series truncation tolerance.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import ContractionViolated, InvalidParameter, NumericError, SingularSystem
from .parallel import pmap
from .timegrid import VolterraRule, interp_row, tail_weights

log = logging.getLogger(__name__)

CONTRACTION_THRESHOLD = 0.5

_SPOT_T = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0])
_SPOT_D = np.array([0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0])


@dataclass(frozen=True)
class TwoTimeKernel:
    """A kernel ``Phi(t, s)`` on ``t <= s`` with decay bound ``C_phi * exp(-alpha (s - t))``.

    ``eval`` must broadcast over numpy arrays.  ``iterated_exact(n, t, s)``
    and ``resolvent_exact(t, s)`` are optional closed forms used as oracles.
    """

    eval: Callable
    C_phi: float
    alpha: float
    label: str = "kernel"
    resolvent_exact: Optional[Callable] = field(default=None, compare=False)
    iterated_exact: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.C_phi >= 0 or not self.alpha >= 0:
            raise InvalidParameter("decay metadata C_phi, alpha must be non-negative")
        t = np.repeat(_SPOT_T, len(_SPOT_D))
        s = t + np.tile(_SPOT_D, len(_SPOT_T))
        self._check_bound(t, s)

    def __call__(self, t, s):
        return self.eval(t, s)

    def _check_bound(self, t, s):
        vals = np.asarray(self.eval(t, s), dtype=float) * np.ones_like(t)
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"{self.label}: non-finite kernel values")
        bound = self.C_phi * np.exp(-self.alpha * (s - t))
        bad = np.abs(vals) > bound * (1 + 1e-9) + 1e-300
        if np.any(bad):
            j = int(np.argmax(bad))
            raise InvalidParameter(
                f"{self.label}: |Phi({t[j]:g},{s[j]:g})|={abs(vals[j]):.3g} exceeds "
                f"C_phi*exp(-alpha(s-t))={bound[j]:.3g}"
            )

    def check_decay(self, grid):
        """Check the decay bound on every grid pair ``t <= s``."""
        jj, kk = np.triu_indices(grid.n_nodes)
        self._check_bound(grid.nodes[jj], grid.nodes[kk])


def zero_kernel():
    return TwoTimeKernel(
        lambda t, s: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s))),
        0.0, 1.0, "zero",
        resolvent_exact=lambda t, s: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s))),
    )


def make_example1_kernel(alpha, gamma):
    """``Phi(t, s) = alpha * exp(-gamma (s - t))`` with its closed-form companions.

    Iterated kernels are ``alpha^n e^{-gamma d} d^{n-1} / (n-1)!`` and the
    resolvent is ``alpha * exp(-(gamma - alpha) d)``, ``d = s - t``.
    """
    if not (alpha > 0 and gamma > 0):
        raise InvalidParameter(f"alpha and gamma must be positive, got {alpha}, {gamma}")
    a, g = float(alpha), float(gamma)

    def phi(t, s):
        return a * np.exp(-g * (np.asarray(s) - np.asarray(t)))

    def iterated(n, t, s):
        d = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
        return a**n * np.exp(-g * d) * d ** (n - 1) / math.factorial(n - 1)

    def psi(t, s):
        return a * np.exp(-(g - a) * (np.asarray(s) - np.asarray(t)))

    return TwoTimeKernel(phi, a, g, f"example1(alpha={a:g},gamma={g:g})",
                         resolvent_exact=psi, iterated_exact=iterated)


def make_separable_kernel(phi, C=None, rate=0.0, antiderivative=None, label="separable"):
    """Kernel ``Phi(t, s) = phi(s)`` that ignores its first argument.

    The companion resolvent is ``phi(s) * exp(int_t^s phi(r) dr)``; the
    integral uses ``antiderivative`` when given and adaptive quadrature
    otherwise.  ``C`` and ``rate`` are the decay metadata
    (``|phi(s)| <= C exp(-rate s)``); ``rate = 0`` declares a bounded ``phi``
    whose admissibility rests on the contraction check.
    """
    if C is None:
        probe = np.abs(np.asarray(phi(np.linspace(0.0, 50.0, 2001)), dtype=float))
        C = float(np.max(probe)) if probe.size else 0.0
        C = C if C > 0 else 1.0

    def ev(t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(np.asarray(phi(s), dtype=float), np.broadcast_shapes(t.shape, s.shape))

    if antiderivative is not None:
        def int_phi(t, s):
            return np.asarray(antiderivative(s)) - np.asarray(antiderivative(t))
    else:
        def _one(a, b):
            return integrate.quad(lambda r: float(phi(np.float64(r))), a, b,
                                  epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        int_phi = np.vectorize(_one, otypes=[float])

    def psi(t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        return np.asarray(phi(s), dtype=float) * np.exp(int_phi(t, s))

    return TwoTimeKernel(ev, float(C), float(rate), label, resolvent_exact=psi)


# --------------------------------------------------------------------- norms
def _row_tail_bound(kernel, lam, grid, i, exponent=0.5):
    """Bound on ``int_T^inf e^{-exponent lam s} |Phi(x_i, s)| ds`` from the decay metadata."""
    c = kernel.alpha + exponent * lam
    x = grid.nodes[i]
    return kernel.C_phi * math.exp(kernel.alpha * x - c * grid.T_max) / c


def weighted_row_norms(values, grid, lam, exponent=0.5):
    """Per-row ``int_t^T e^{-exponent lam s} |v(t, s)| ds`` for a node table ``v``.

    ``values[i, j]`` holds ``v(x_i, x_j)`` for ``j >= i``.
    """
    x = grid.nodes
    w = np.exp(-exponent * lam * x)
    out = np.empty(grid.n_nodes)
    for i in range(grid.n_nodes):
        out[i] = tail_weights(grid, i) @ (w[i:] * np.abs(values[i, i:]))
    return out


def weighted_norm_L(kernel, lam, grid, exponent=0.5):
    """Contraction constant ``L(lam) = sup_t int_t^inf e^{-lam s/2} |Phi(t, s)| ds``.

    Quadrature over ``[t, T_max]`` plus the decay-metadata tail bound, maximised
    over grid rows.
    """
    if not lam > 0:
        raise InvalidParameter(f"lambda must be positive, got {lam}")
    x = grid.nodes
    n = grid.n_nodes
    w = np.exp(-exponent * lam * x)
    best = 0.0
    for i in range(n):
        vals = np.asarray(kernel.eval(x[i], x[i:]), dtype=float) * np.ones(n - i)
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"{kernel.label}: non-finite kernel values")
        row = tail_weights(grid, i) @ (w[i:] * np.abs(vals))
        best = max(best, row + _row_tail_bound(kernel, lam, grid, i, exponent))
    return float(best)


def check_contraction(L, relaxed=False):
    """Raise unless ``L < 1/2`` (or ``L < 1`` with ``relaxed``, which only warns)."""
    if L < CONTRACTION_THRESHOLD:
        return
    if relaxed and L < 1.0:
        warnings.warn(f"L(lambda)={L:.6g} >= 1/2: outside A2, continuing (relaxed_contraction)",
                      RuntimeWarning, stacklevel=3)
        return
    raise ContractionViolated(L, 1.0 if relaxed else CONTRACTION_THRESHOLD)


# ---------------------------------------------------------- iterated kernels
def iterated_kernel_rows(kernel, n_max, grid, i, rule=None):
    """``[Phi^(1)(x_i, .), ..., Phi^(n_max)(x_i, .)]`` on the nodes ``>= x_i``."""
    rule = rule or VolterraRule(grid, kernel.eval)
    W = rule.row(i)
    term = rule.kmat[i, i:].copy()
    rows = [term]
    for _ in range(n_max - 1):
        term = W @ term
        rows.append(term)
    return rows


def iterated_kernel(kernel, n, t, s, grid, rule=None):
    """``Phi^(n)(t, s)`` by recursive product integration on the grid.

    ``t`` must be a grid node; ``s`` may be any point of ``[t, T_max]``.
    """
    if int(n) != n or n < 1:
        raise InvalidParameter(f"n must be an integer >= 1, got {n}")
    if t > s:
        raise InvalidParameter(f"need t <= s, got t={t}, s={s}")
    if n == 1:
        return float(kernel.eval(t, s))
    if s == t:
        return 0.0
    i = grid.index_of(t)
    row = iterated_kernel_rows(kernel, int(n), grid, i, rule)[-1]
    return float(interp_row(grid, i, row, s)[0])


# ------------------------------------------------------------------ resolvent
@dataclass(frozen=True)
class ResolventTable:
    """Tabulated resolvent ``values[i, j] = Psi(x_i, x_j)`` for ``j >= i`` (zero below)."""

    grid: object
    values: np.ndarray
    series_terms_used: int
    tail_estimate: float
    L_lambda: float
    method: str
    kernel_label: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericError("resolvent table has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, t, s):
        """``Psi(t, s)`` for a node ``t`` and any ``s`` in ``[t, T_max]``."""
        i = self.grid.index_of(t)
        return interp_row(self.grid, i, self.values[i, i:], s)

    def row(self, i):
        return self.values[i, i:]

    def weighted_norms(self, lam=None, exponent=0.5):
        lam = self.grid.lam if lam is None else lam
        return weighted_row_norms(self.values, self.grid, lam, exponent)

    def to_csv(self, path, kernel, residuals=None):
        """Write ``t, s, psi, phi, residual`` for every grid pair ``t <= s``."""
        x = self.grid.nodes
        if residuals is None:
            residuals = resolvent_residual_table(self, kernel)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["t", "s", "psi", "phi", "residual"])
            for i in range(len(x)):
                phi = np.asarray(kernel.eval(x[i], x[i:]), dtype=float) * np.ones(len(x) - i)
                for j in range(i, len(x)):
                    out.writerow([_fmt(x[i]), _fmt(x[j]), _fmt(self.values[i, j]),
                                  _fmt(phi[j - i]), _fmt(residuals[i, j])])


def _fmt(v):
    return format(float(v), ".17g")


def _row_blocks(grid, i):
    """Block partition of the unknowns ``i..n-1`` for forward substitution in ``s``."""
    n = grid.n_nodes
    q = grid.pts_per_panel
    P = grid.panel_of(i)
    end_P = grid.panel_start(P) + q + 1
    if i == grid.panel_start(P) or P == grid.n_panels - 1:
        stop = end_P
    else:
        stop = end_P + q + 1
    blocks = [(i, min(stop, n - 1) + 1)]
    j = blocks[0][1]
    while j < n:
        blocks.append((j, min(j + q + 1, n)))
        j = blocks[-1][1]
    return [(a - i, b - i) for a, b in blocks]


def _nystrom_row(rule, i):
    grid = rule.grid
    W = rule.row(i)
    phi = rule.kmat[i, i:]
    psi = np.zeros_like(phi)
    for a, b in _row_blocks(grid, i):
        rhs = phi[a:b] + W[a:b, :a] @ psi[:a]
        A = np.eye(b - a) - W[a:b, a:b]
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"row {i}: singular block [{a}, {b})") from exc
        if not np.all(np.isfinite(sol)):
            raise SingularSystem(f"row {i}: non-finite pivot in block [{a}, {b})")
        psi[a:b] = sol
    return psi


def resolvent_nystrom(kernel, grid, lam=None, relaxed_contraction=False, threads=None, rule=None):
    """Solve ``Psi(t, s) = Phi(t, s) + int_t^s Psi(t, u) Phi(u, s) du`` on the grid.

    Each row ``t = x_i`` is a block lower-triangular system in the ``s``
    nodes, solved panel by panel.
    """
    lam = grid.lam if lam is None else lam
    L = weighted_norm_L(kernel, lam, grid)
    check_contraction(L, relaxed_contraction)
    rule = rule or VolterraRule(grid, kernel.eval)
    n = grid.n_nodes
    rows = pmap(lambda i: _nystrom_row(rule, i), range(n), threads)
    values = np.zeros((n, n))
    for i, r in enumerate(rows):
        values[i, i:] = r
    return ResolventTable(grid, values, 0, 0.0, L, "nystrom", kernel.label)


def _series_row(rule, i, L, tol, max_terms):
    W = rule.row(i)
    term = rule.kmat[i, i:].copy()
    total = term.copy()
    N = 1
    while True:
        a_priori = L ** (N + 1) / (1.0 - L)
        if a_priori < tol and np.all(np.abs(term) <= tol * np.abs(total) + 1e-300):
            return total, N
        if N >= max_terms:
            return total, -N
        term = W @ term
        total += term
        N += 1


def resolvent_series(kernel, lam, tol, grid, relaxed_contraction=False, threads=None,
                     rule=None, max_terms=400):
    """Sum ``Psi = sum_n Phi^(n)`` on the grid.

    Stops at the first ``N`` with ``L^(N+1) / (1 - L) < tol`` (the weighted
    a-priori tail) once, in addition, the last term is below ``tol`` relative
    to the partial sum at every node, so the pointwise truncation error is
    also controlled.
    """
    if not tol > 0:
        raise InvalidParameter(f"tol must be positive, got {tol}")
    L = weighted_norm_L(kernel, lam, grid)
    check_contraction(L, relaxed_contraction)
    rule = rule or VolterraRule(grid, kernel.eval)
    n = grid.n_nodes
    rows = pmap(lambda i: _series_row(rule, i, L, tol, max_terms), range(n), threads)
    values = np.zeros((n, n))
    N = 1
    for i, (r, used) in enumerate(rows):
        values[i, i:] = r
        if used < 0:
            warnings.warn(f"series row {i} hit max_terms={max_terms}", RuntimeWarning, stacklevel=2)
        N = max(N, abs(used))
    tail = L ** (N + 1) / (1.0 - L)
    return ResolventTable(grid, values, N, tail, L, "series", kernel.label)


def resolvent_residual_table(table, kernel, rule=None):
    """``Psi(t,s) - Phi(t,s) - int_t^s Psi(t,u) Phi(u,s) du`` at every grid pair."""
    grid = table.grid
    rule = rule or VolterraRule(grid, kernel.eval)
    n = grid.n_nodes
    out = np.zeros((n, n))
    for i in range(n):
        psi = table.values[i, i:]
        out[i, i:] = psi - rule.kmat[i, i:] - rule.row(i) @ psi
    return out


def resolvent_residual(table, kernel, rule=None):
    """Max absolute residual of the resolvent equation over grid pairs."""
    return float(np.max(np.abs(resolvent_residual_table(table, kernel, rule))))

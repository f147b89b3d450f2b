"""Linear BSVIE solution pipeline.

The first component follows from the resolvent ``Psi`` of the kernel:

    Y(t) = E_Q[ int_t^inf G(t, s) f(s) ds | F_t ],
    G(t, s) = a(t, s) + int_t^s Psi(t, u) a(u, s) du,

for drivers of the form ``h(t, s, omega) = a(t, s) f(s, omega)``.  ``G`` is
deterministic, so only the outer integral involves the paths.  ``U``, ``Z``
and ``K`` are then obtained from the definition of ``U`` and finite-difference
Clark-Ocone integrands.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (AssumptionViolated, ContractionViolated, Divergent, InvalidParameter,
                     MeasureDegenerate, NoConvergence)
from .kernels import check_contraction, weighted_norm_L
from .malliavin import (BasisSpec, PathFunctional, clark_ocone_integrands, fit_regression,
                        node_gradient_fd, representation_residual)
from .stochastics import expect_Q, novikov_exponent, q_shifted_increments, simulate_paths
from .timegrid import VolterraRule, h2_norm, tail_weights

DETERMINISTIC_REQUIRED = "deterministic coefficients required for Z/K extraction"


# -------------------------------------------------------------------- problem
@dataclass(frozen=True)
class Driver:
    """Driver ``h(t, s, omega) = a(t, s) * f(s, omega)``.

    ``f(paths)`` returns the per-path values at every grid node, shape
    ``(n_paths, n_nodes)``; ``f=None`` means ``f == 1`` (deterministic ``h = a``).
    ``C_h, mu`` is optional decay metadata ``|h(t, s)| <= C_h exp(-mu s)``.
    ``local=True`` declares that ``f(s, .)`` depends on the path only through
    ``(B(s), N(s))``, which enables chain-rule Malliavin derivatives.
    """

    a: Callable
    f: Optional[Callable] = None
    C_h: Optional[float] = None
    mu: Optional[float] = None
    label: str = "h"
    local: bool = False

    @property
    def stochastic(self):
        return self.f is not None

    def f_values(self, paths):
        if self.f is None:
            return np.ones((paths.n_paths, paths.grid.n_nodes))
        return np.asarray(self.f(paths), dtype=float)


def deterministic_driver(h, C_h=None, mu=None, label="h"):
    return Driver(h, None, C_h, mu, label)


def zero_driver():
    return Driver(lambda t, s: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s))),
                  None, 0.0, 1.0, "zero")


@dataclass(frozen=True, eq=False)
class BSVIEProblem:
    """Linear BSVIE data.  Passing ``grid`` validates A1-A3 immediately."""

    kernel: object
    driver: Driver
    xi: object = None
    jump_spec: object = None
    lam: float = 2.0
    relaxed_contraction: bool = False
    random_coefficients: bool = False
    grid: object = None

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidParameter(f"lambda must be positive, got {self.lam}")
        if self.grid is not None:
            self.validate(self.grid)

    @property
    def deterministic(self):
        return not self.driver.stochastic

    def xi_fn(self):
        xi = self.xi
        if xi is None:
            return lambda s: np.zeros_like(np.asarray(s, dtype=float))
        if callable(xi):
            return lambda s: np.asarray(xi(np.asarray(s, dtype=float)), dtype=float) * np.ones_like(s, dtype=float)
        return lambda s: np.full_like(np.asarray(s, dtype=float), float(xi))

    def validate(self, grid):
        """Check A1 (decay, bounded xi, beta > -1 + eps), A2 (L < 1/2) and A3 (Novikov).

        Raises :class:`AssumptionViolated` (or :class:`ContractionViolated` for
        A2) and returns a report dict on success.
        """
        report = {}
        try:
            self.kernel.check_decay(grid)
        except InvalidParameter as exc:
            raise AssumptionViolated("A1", f"kernel decay: {exc}") from exc
        self._check_driver(grid)
        xv = self.xi_fn()(grid.nodes)
        if not np.all(np.isfinite(xv)):
            raise AssumptionViolated("A1", "xi is not bounded on the grid")
        report["xi_sup"] = float(np.max(np.abs(xv)))
        if self.jump_spec is not None:
            try:
                self.jump_spec.check(self.jump_spec.beta_grid(grid.nodes))
            except MeasureDegenerate as exc:
                raise AssumptionViolated("A1", str(exc)) from exc
        L = weighted_norm_L(self.kernel, self.lam, grid)
        report["L_lambda"] = L
        check_contraction(L, self.relaxed_contraction)
        if not self.random_coefficients:
            try:
                report["novikov"] = novikov_exponent(self.xi, self.jump_spec, grid)
            except Divergent as exc:
                raise AssumptionViolated("A3", str(exc)) from exc
        if self.driver.stochastic:
            check_adapted(self.driver, grid)
        return report

    def _check_driver(self, grid):
        x = grid.nodes
        jj, kk = np.triu_indices(len(x))
        vals = np.asarray(self.driver.a(x[jj], x[kk]), dtype=float) * np.ones(len(jj))
        if not np.all(np.isfinite(vals)):
            raise AssumptionViolated("A1", "driver is not finite on the grid")
        d = self.driver
        if d.C_h is not None and d.mu is not None and not d.stochastic:
            bound = d.C_h * np.exp(-d.mu * x[kk])
            if np.any(np.abs(vals) > bound * (1 + 1e-9) + 1e-300):
                raise AssumptionViolated("A1", f"|h(t,s)| exceeds C_h exp(-mu s) with C_h={d.C_h:g}, mu={d.mu:g}")


def check_adapted(driver, grid, n_paths=8, seed=12345, probes=4):
    """Spot check: ``f(s, .)`` must not change when increments after ``s`` change."""
    paths = simulate_paths(grid, n_paths, None, seed)
    base = driver.f_values(paths)
    rng = np.random.default_rng(seed)
    for k in rng.integers(0, grid.n_intervals, size=probes):
        dB = np.array(paths.dB)
        dB[:, k:] += rng.standard_normal(dB[:, k:].shape)
        pert = driver.f_values(paths.with_dB(dB))
        if not np.array_equal(base[:, : k + 1], pert[:, : k + 1]):
            raise AssumptionViolated("adaptedness", f"driver at s <= {grid.nodes[k]:g} depends on later increments")


# ----------------------------------------------------------- deterministic Y
def g_rows(problem, resolvent, grid=None):
    """Rows ``G(x_i, x_j)``, ``j >= i``, of the deterministic effective driver."""
    grid = grid or resolvent.grid
    rule = VolterraRule(grid, problem.driver.a)
    return [rule.kmat[i, i:] + rule.row(i) @ resolvent.values[i, i:] for i in range(grid.n_nodes)]


def solve_y_deterministic(problem, resolvent, grid=None):
    """Explicit ``Y(x_i) = int_{x_i}^{T_max} G(x_i, s) ds`` for a deterministic driver."""
    if problem.driver.stochastic:
        raise InvalidParameter("solve_y_deterministic needs a deterministic driver")
    grid = grid or resolvent.grid
    G = g_rows(problem, resolvent, grid)
    return np.array([tail_weights(grid, i) @ G[i] for i in range(grid.n_nodes)])


@dataclass(frozen=True, eq=False)
class PicardResult:
    Y: np.ndarray
    history: list
    ratios: list
    converged: bool


def picard_iterate(problem, grid, k_max=200, tol=1e-8):
    """Iterate ``Y_{k+1}(t) = int_t^T (Phi(t, s) Y_k(s) + h(t, s)) ds`` from ``Y_0 = 0``.

    ``history`` holds the H^2_lambda norms of successive differences.
    """
    if problem.driver.stochastic:
        raise InvalidParameter("Picard iteration is defined for deterministic drivers")
    x = grid.nodes
    n = grid.n_nodes
    tw = [tail_weights(grid, i) for i in range(n)]
    phi = [np.asarray(problem.kernel.eval(x[i], x[i:]), dtype=float) * np.ones(n - i) for i in range(n)]
    hint = np.array([tw[i] @ (np.asarray(problem.driver.a(x[i], x[i:]), dtype=float) * np.ones(n - i))
                     for i in range(n)])
    Y = np.zeros(n)
    history = []
    for _ in range(int(k_max)):
        new = hint + np.array([tw[i] @ (phi[i] * Y[i:]) for i in range(n)])
        err = h2_norm(new - Y, grid, problem.lam)
        history.append(err)
        Y = new
        if err < tol:
            break
    ratios = [history[k] / history[k - 1] for k in range(1, len(history)) if history[k - 1] > 0]
    converged = bool(history and history[-1] < tol)
    if not converged:
        raise NoConvergence(f"Picard iteration did not reach tol={tol:g} in {k_max} steps", history)
    return PicardResult(Y, history, ratios, converged)


# ------------------------------------------------------------- stochastic Y
@dataclass(frozen=True, eq=False)
class MCSolution:
    """Per-path ``Y`` from regression; ``fits[i]`` maps the state at ``x_i`` to ``Y(x_i)``."""

    Y0: float
    Y0_ci: float
    Y_paths: np.ndarray
    fits: list
    basis: BasisSpec
    G: list

    def predict(self, paths, start=0):
        out = np.zeros((paths.n_paths, paths.grid.n_nodes))
        for i in range(start, paths.grid.n_nodes):
            out[:, i] = self.fits[i].predict(self.basis.state(paths, i))
        return out


def _inner_integrals(G, f, grid, i):
    return f[:, i:] @ (tail_weights(grid, i) * G[i])


def solve_y_mc(problem, resolvent, paths, weights, basis=None):
    """``Y(0)`` by density-weighted MC and ``Y(x_i)`` per path by weighted regression."""
    basis = basis or BasisSpec()
    grid = paths.grid
    G = g_rows(problem, resolvent, grid)
    f = problem.driver.f_values(paths)
    wT = weights.terminal
    Yp = np.zeros((paths.n_paths, grid.n_nodes))
    fits = []
    Y0 = ci = None
    for i in range(grid.n_nodes):
        I = _inner_integrals(G, f, grid, i)
        if i == 0:
            Y0, ci = expect_Q(I, paths, weights)
        fit = fit_regression(I, basis.state(paths, i), wT, basis.degree)
        fits.append(fit)
        Yp[:, i] = fit.predict(basis.state(paths, i))
    return MCSolution(Y0, ci, Yp, fits, basis, G)


# ------------------------------------------------------------------ U, Z, K
def _u_terms(problem, grid, i, Y, f):
    """Node contributions to ``U(x_i)``; their sum over the last axis is ``U``."""
    x = grid.nodes
    n = grid.n_nodes
    phi = np.asarray(problem.kernel.eval(x[i], x[i:]), dtype=float) * np.ones(n - i)
    a = np.asarray(problem.driver.a(x[i], x[i:]), dtype=float) * np.ones(n - i)
    out = (phi * Y[..., i:] + a * f[..., i:]) * tail_weights(grid, i)
    out[..., 0] -= Y[..., i]
    return out


def _u_row(problem, grid, i, Y, f):
    return _u_terms(problem, grid, i, Y, f).sum(axis=-1)


def compute_U(problem, Y, grid, paths=None):
    """``U(t) = int_t^T (Phi(t, s) Y(s) + h(t, s)) ds - Y(t)`` on every node.

    ``Y`` is a node curve (deterministic case) or a per-path array together
    with ``paths``; the result has the same shape.
    """
    Y = np.asarray(Y, dtype=float)
    f = np.ones(grid.n_nodes) if paths is None else problem.driver.f_values(paths)
    out = np.zeros_like(Y)
    for i in range(grid.n_nodes):
        out[..., i] = _u_row(problem, grid, i, Y, f)
    return out


def u_functional(problem, grid, i, mc=None, Y=None):
    """``U(x_i)`` as a :class:`PathFunctional`; ``Y`` re-evaluated on each bundle.

    With a deterministic or ``local`` driver the functional is node separable
    and carries a chain-rule ``node_gradient``.
    """
    def terms(paths):
        f = problem.driver.f_values(paths)
        if mc is not None:
            Yp = mc.predict(paths, start=i)
        else:
            Yp = np.broadcast_to(np.asarray(Y, dtype=float), (paths.n_paths, grid.n_nodes))
        return _u_terms(problem, grid, i, Yp, f)

    def ev(paths):
        return terms(paths).sum(axis=1)

    grad = None
    if problem.driver.local or not problem.driver.stochastic:
        def grad(paths):
            out = np.zeros((paths.n_paths, grid.n_nodes))
            out[:, i:] = node_gradient_fd(terms, paths)
            return out
    return PathFunctional(ev, f"U({grid.nodes[i]:g})", grad)


@dataclass(frozen=True, eq=False)
class ZKResult:
    """``Z[i]`` (``n_paths x n_intervals``) and ``K[i]`` (``... x n_marks``) for selected rows ``x_i``.

    Entry ``k`` refers to ``s = x_{k+1}``; entries with ``k < i`` are zero.
    """

    Z: dict
    K: dict
    U: dict


def solve_zk(problem, paths, weights, t_indices, mc=None, Y=None, basis=None, eps=None):
    """Clark-Ocone integrands of ``U(x_i)`` for each requested row.

    Requires deterministic ``xi`` and ``beta``.
    """
    if problem.random_coefficients:
        raise AssumptionViolated("deterministic-coefficients", DETERMINISTIC_REQUIRED)
    grid = paths.grid
    basis = basis or (mc.basis if mc is not None else BasisSpec())
    Z, K, U = {}, {}, {}
    for i in t_indices:
        F = u_functional(problem, grid, i, mc, Y)
        co = clark_ocone_integrands(F, paths, weights, basis, start=i, eps=eps)
        Z[i], K[i], U[i] = co.z, co.k, F(paths)
    return ZKResult(Z, K, U)


def _rms(r):
    r = np.asarray(r, dtype=float)
    sq = r**2
    rms = math.sqrt(float(np.mean(sq)))
    ci = 1.96 * float(np.std(sq, ddof=1)) / math.sqrt(len(sq)) / (2 * rms) if rms > 0 and len(sq) > 1 else 0.0
    return rms, ci


def verify_martingale_representation(U, Z, K, qpaths, i):
    """RMS of ``U(x_i) - sum Z dB_Q - (sum_jumps K - sum K * compensator)``.

    ``qpaths`` carries the Q increments (:func:`q_shifted_increments`).
    """
    class _CO:
        z = Z
        k = K if K is not None else np.zeros(Z.shape + (0,))
    r = representation_residual(U, 0.0, _CO, qpaths, start=i)
    rms, ci = _rms(r)
    rms_u = math.sqrt(float(np.mean(np.asarray(U) ** 2)))
    return {"t": float(qpaths.grid.nodes[i]), "rms": rms, "rms_ci": ci, "rms_U": rms_u,
            "relative": rms / rms_u if rms_u > 0 else 0.0}


def verify_m_solution(Y_paths, Z, K, paths, weights, t1, t2, problem=None, basis=None):
    """Residual of ``Y(t1) = E[Y(t1) | F_t2] + int_t2 Z(t1, s) dB + int int K dN~``.

    ``Z``, ``K`` are the row ``t1`` integrands.  The identity is evaluated
    both with P (plain regression, ``dB``, P-compensator) and with Q
    (density-weighted regression, ``dB_Q``, Q-compensator); both are reported.
    """
    grid = paths.grid
    i1, i2 = grid.index_of(t1), grid.index_of(t2)
    if i1 > i2:
        raise InvalidParameter("t1 must not exceed t2")
    basis = basis or BasisSpec()
    Yp = np.broadcast_to(np.asarray(Y_paths, dtype=float), (paths.n_paths, grid.n_nodes))
    y = Yp[:, i1]
    X = basis.state(paths, i2)
    Kz = K if K is not None else np.zeros(np.shape(Z) + (0,))

    class _CO:
        z = np.asarray(Z)
        k = Kz
    out = {"t1": float(t1), "t2": float(t2)}
    qp = (q_shifted_increments(paths, problem.xi, problem.jump_spec) if problem is not None
          else q_shifted_increments(paths))
    for name, w, pp in (("P", None, paths), ("Q", weights.terminal, qp)):
        cond = fit_regression(y, X, w, basis.degree).predict(X)
        r = representation_residual(y - cond, 0.0, _CO, pp, start=i2)
        rms, ci = _rms(r)
        out[name] = {"rms": rms, "rms_ci": ci}
    return out


# -------------------------------------------------------------------- export
@dataclass(frozen=True, eq=False)
class SolutionTriple:
    """``Y`` curve (node values; Q-mean for stochastic problems), ``Z``/``K`` surfaces and diagnostics.

    ``Z[i, j]`` is ``Z(x_i, x_j)`` for ``j > i`` (Q-mean over paths in the
    stochastic case); ``K[i, j, m]`` likewise per mark.
    """

    grid: object
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    marks: tuple = ()
    Y0: Optional[float] = None
    Y0_ci: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def check_finite(self):
        ok = all(np.all(np.isfinite(a)) for a in (self.Y, self.Z, self.K))
        return ok and math.isfinite(h2_norm(self.Y, self.grid, self.diagnostics.get("lam", self.grid.lam)))

    def z_at(self, t, s):
        """Bilinear interpolation of the ``Z`` surface on the triangle ``t <= s``."""
        x = self.grid.nodes
        if not (0 <= t <= s <= x[-1]):
            raise InvalidParameter("need 0 <= t <= s <= T_max")
        i = min(int(np.searchsorted(x, t, side="right")) - 1, len(x) - 2)
        j = min(int(np.searchsorted(x, s, side="right")) - 1, len(x) - 2)
        a = (t - x[i]) / (x[i + 1] - x[i])
        b = (s - x[j]) / (x[j + 1] - x[j])
        Zs = self.Z
        return float((1 - a) * (1 - b) * Zs[i, j] + a * (1 - b) * Zs[i + 1, j]
                     + (1 - a) * b * Zs[i, j + 1] + a * b * Zs[i + 1, j + 1])


def zk_surfaces(zk, grid, weights, n_marks):
    """Q-mean surfaces from per-path :class:`ZKResult` rows."""
    n = grid.n_nodes
    Zs = np.zeros((n, n))
    Ks = np.zeros((n, n, n_marks))
    wT = weights.terminal / np.sum(weights.terminal)
    for i, z in zk.Z.items():
        Zs[i, 1:] = wT @ z
        Zs[i, : i + 1] = 0.0
        if n_marks:
            Ks[i, 1:] = np.einsum("p,pkm->km", wT, zk.K[i])
            Ks[i, : i + 1] = 0.0
    return Zs, Ks


def _fmt(v):
    return format(float(v), ".17g")


def write_solution_csv(sol, outdir):
    """Write ``Y.csv`` (t, Y), ``Z.csv`` (t, s, Z) and ``K.csv`` (t, s, zeta, K)."""
    import os
    x = sol.grid.nodes
    files = {}
    p = os.path.join(outdir, "Y.csv")
    with open(p, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["t", "Y"])
        out.writerows([[_fmt(t), _fmt(y)] for t, y in zip(x, sol.Y)])
    files["Y"] = p
    p = os.path.join(outdir, "Z.csv")
    with open(p, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["t", "s", "Z"])
        for i in range(len(x)):
            for j in range(i, len(x)):
                out.writerow([_fmt(x[i]), _fmt(x[j]), _fmt(sol.Z[i, j])])
    files["Z"] = p
    if sol.marks:
        p = os.path.join(outdir, "K.csv")
        with open(p, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["t", "s", "zeta", "K"])
            for i in range(len(x)):
                for j in range(i, len(x)):
                    for m, z in enumerate(sol.marks):
                        out.writerow([_fmt(x[i]), _fmt(x[j]), _fmt(z), _fmt(sol.K[i, j, m])])
        files["K"] = p
    return files


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")

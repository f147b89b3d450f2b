"""Finite-difference Hida-Malliavin derivatives and Clark-Ocone integrands.

Brownian derivatives perturb the increment of one grid interval; the jump
derivative inserts an extra jump.  Conditional expectations under Q are
estimated by density-weighted least squares on a polynomial basis of the
path state ``(B(s), N(s))``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParameter, NumericError, RegressionSingular

_CBRT_EPS = np.finfo(float).eps ** (1.0 / 3.0)


@dataclass(frozen=True)
class PathFunctional:
    """``eval(paths) -> per-path values``; must be finite on every admissible path.

    ``node_gradient(paths)``, when given, returns ``dF/dB(x_j)`` per path and
    node (shape ``(n_paths, n_nodes)``); the increment derivatives then follow
    by the chain rule without one bump per interval.
    """

    eval: Callable
    description: str = "F"
    node_gradient: Optional[Callable] = None

    def __call__(self, paths):
        out = np.asarray(self.eval(paths), dtype=float)
        if out.shape != (paths.n_paths,):
            out = np.broadcast_to(out, (paths.n_paths,)).copy()
        return out


def terminal_functional(g, T, description=None):
    """``F = g(B(T))`` for a grid node ``T``."""
    def ev(paths):
        return g(paths.B[:, paths.grid.index_of(T)])
    return PathFunctional(ev, description or f"g(B({T:g}))")


def interval_of(grid, s):
    """Index ``k`` of the interval ``(x_k, x_{k+1}]`` containing ``s``."""
    s = float(s)
    if not 0.0 < s <= grid.T_max:
        raise InvalidParameter(f"s={s:g} must lie in (0, T_max]")
    return int(np.searchsorted(grid.nodes, s, side="left")) - 1


def shift_all(paths, h):
    """Bundle with ``B(x_j) + h`` for every ``j >= 1`` (first increment shifted)."""
    dB = np.array(paths.dB)
    dB[:, 0] += h
    return paths.with_dB(dB)


def node_gradient_fd(terms, paths, eps=None):
    """Per-node derivative of a node-separable functional ``F = sum_j terms_j(B(x_j), N(x_j))``.

    ``terms(paths)`` returns the per-path, per-node contributions.
    """
    eps = _CBRT_EPS if eps is None else float(eps)
    up = terms(shift_all(paths, eps))
    dn = terms(shift_all(paths, -eps))
    if not (np.all(np.isfinite(up)) and np.all(np.isfinite(dn))):
        raise NumericError("non-finite bumped evaluation")
    return (up - dn) / (2.0 * eps)


def default_eps(grid, k):
    return _CBRT_EPS * max(1.0, float(np.sqrt(grid.dt[k])))


def _bumped(F, paths, k, h):
    dB = np.array(paths.dB)
    dB[:, k] += h
    return F(paths.with_dB(dB))


def brownian_malliavin_fd(F, paths, s, eps=None):
    """Central difference of ``F`` in the Brownian increment of the interval containing ``s``."""
    k = interval_of(paths.grid, s)
    eps = default_eps(paths.grid, k) if eps is None else float(eps)
    if not eps > 0:
        raise InvalidParameter("eps must be positive")
    up = _bumped(F, paths, k, eps)
    dn = _bumped(F, paths, k, -eps)
    if not (np.all(np.isfinite(up)) and np.all(np.isfinite(dn))):
        raise NumericError(f"non-finite bumped evaluation of {getattr(F, 'description', 'F')}")
    return (up - dn) / (2.0 * eps)


def jump_difference(F, paths, s, mark):
    """``F(paths with an extra jump (s, mark)) - F(paths)``; ``mark`` is a mark index."""
    if not 0.0 <= s <= paths.grid.T_max:
        raise InvalidParameter(f"s={s:g} outside [0, T_max]")
    if paths.jump_spec is None or not 0 <= mark < paths.jump_spec.n_marks:
        raise InvalidParameter("mark index not in the jump specification")
    return F(paths.with_jump(s, mark)) - F(paths)


def density_malliavin(xi, weights, paths, s, t):
    """``D_s M(t) = M(t) xi(s) 1_{s <= t}`` per path, for deterministic ``xi``."""
    if s > t:
        return np.zeros(paths.n_paths)
    x = 0.0 if xi is None else (float(xi(np.float64(s))) if callable(xi) else float(xi))
    return weights.M[:, paths.grid.index_of(t)] * x


# ----------------------------------------------------------------- regression
@dataclass(frozen=True)
class BasisSpec:
    """Total-degree polynomial basis in the standardised state variables."""

    degree: int = 2
    use_jumps: bool = True
    extra: tuple = ()  # callables (paths, node_index) -> per-path state

    def state(self, paths, i):
        cols = [paths.B[:, i]]
        if self.use_jumps and paths.jump_spec is not None:
            cols.append(paths.jump_counts()[:, i])
        cols.extend(np.asarray(f(paths, i), dtype=float) for f in self.extra)
        return np.column_stack(cols)


def _powers(d, degree):
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(itertools.combinations_with_replacement(range(d), deg))
    return out


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Polynomial predictor in standardised state variables (constant columns dropped)."""

    mu: np.ndarray
    sd: np.ndarray
    keep: np.ndarray
    degree: int
    coef: np.ndarray

    def design(self, X):
        X = np.asarray(X, dtype=float).reshape(np.shape(X)[0], -1)
        Z = (X[:, self.keep] - self.mu[self.keep]) / self.sd[self.keep]
        cols = [np.prod(Z[:, list(c)], axis=1) if c else np.ones(len(X))
                for c in _powers(Z.shape[1], self.degree)]
        return np.column_stack(cols)

    def predict(self, X):
        return self.design(X) @ self.coef


def fit_regression(values, X, w=None, degree=2):
    """Weighted least squares of ``values`` on a total-degree polynomial basis of ``X``.

    A rank deficient design triggers :class:`RegressionSingular` and the
    degree is lowered until the design has full rank.
    """
    values = np.asarray(values, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(values), -1)
    w = np.ones(len(values)) if w is None else np.asarray(w, dtype=float)
    sw = np.sqrt(w / w.mean())
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    sd = np.where(keep, sd, 1.0)
    for deg in range(int(degree), -1, -1):
        fit = RegressionFit(mu, sd, keep, deg, np.zeros(0))
        A = fit.design(X)
        coef, _, rank, _ = np.linalg.lstsq(A * sw[:, None], values * sw, rcond=None)
        if rank == A.shape[1]:
            return RegressionFit(mu, sd, keep, deg, coef)
        warnings.warn(f"regression design rank {rank} < {A.shape[1]} at degree {deg}; lowering degree",
                      RegressionSingular, stacklevel=2)
    raise NumericError("regression failed even at degree 0")


def conditional_expectation(values, X, w=None, degree=2):
    """Fitted values of :func:`fit_regression` and the degree actually used."""
    fit = fit_regression(values, X, w, degree)
    return fit.predict(X), fit.degree


@dataclass(frozen=True, eq=False)
class ClarkOconeResult:
    """``z[p, k]`` and ``k[p, k, m]``: integrands on interval ``(x_k, x_{k+1}]`` per path."""

    z: np.ndarray
    k: np.ndarray
    degree_used: list = field(default_factory=list)


def clark_ocone_integrands(F, paths, weights, basis=None, start=0, stop=None, eps=None,
                           xi_deterministic=True):
    """Regression estimates of ``z = E_Q[D_s F | F_s]`` and ``k = E_Q[D_{s,zeta} F | F_s]``.

    For interval ``k`` the derivative is taken at ``s = x_{k+1}`` and
    conditioned on the state at the left node ``x_k``, which keeps the
    integrand predictable.  Intervals before ``start`` are left at zero.
    """
    if not xi_deterministic:
        raise InvalidParameter("deterministic coefficients required for Z/K extraction")
    basis = basis or BasisSpec()
    grid = paths.grid
    n_int = grid.n_intervals
    stop = n_int if stop is None else stop
    n_marks = paths.jump_spec.n_marks if paths.jump_spec is not None else 0
    z = np.zeros((paths.n_paths, n_int))
    kk = np.zeros((paths.n_paths, n_int, n_marks))
    wT = weights.terminal
    used = []
    suffix = None
    if getattr(F, "node_gradient", None) is not None:
        g = np.asarray(F.node_gradient(paths), dtype=float)
        suffix = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
    for k in range(start, stop):
        s = grid.nodes[k + 1]
        X = basis.state(paths, k)
        d = suffix[:, k + 1] if suffix is not None else brownian_malliavin_fd(F, paths, s, eps)
        z[:, k], deg = conditional_expectation(d, X, wT, basis.degree)
        used.append(deg)
        for m in range(n_marks):
            dj = jump_difference(F, paths, s, m)
            kk[:, k, m], _ = conditional_expectation(dj, X, wT, basis.degree)
    return ClarkOconeResult(z, kk, used)


def representation_residual(F_values, mean, co, qpaths, start=0):
    """Per-path ``F - mean - sum z dB_Q - (sum k at jumps - sum k * compensator)``.

    ``qpaths`` carries the Q increments and compensator (see
    :func:`bsvie.stochastics.q_shifted_increments`).
    """
    r = np.asarray(F_values, dtype=float) - mean
    r = r - np.sum(co.z[:, start:] * qpaths.dB[:, start:], axis=1)
    if co.k.shape[2] and qpaths.compensator is not None:
        idx = qpaths.jump_node_index() - 1
        ok = idx >= start
        r -= np.bincount(qpaths.jump_path[ok], weights=co.k[qpaths.jump_path[ok], idx[ok], qpaths.jump_mark[ok]],
                         minlength=qpaths.n_paths)
        r += np.einsum("pkm,km->p", co.k[:, start:], qpaths.compensator[start:])
    return r


def general_z_correction(U_values, Dxi, qpaths, k):
    """Random-coefficient term ``-U(t) * sum_{r >= s} D_s xi(r) dB_Q(r)`` for interval ``k``.

    ``Dxi(k, qpaths)`` must return the per-path field ``D_s xi(r)`` on the
    intervals ``r = k .. end`` (shape ``(n_paths, n_int - k)``).
    """
    field_ = np.asarray(Dxi(k, qpaths), dtype=float)
    return -np.asarray(U_values) * np.sum(field_ * qpaths.dB[:, k:], axis=1)


def general_h_tilde(shift_jumps, beta_jumps, shift_grid, qpaths, k):
    """Random-coefficient factor ``H~_s`` from user-supplied ``D_{s,zeta} beta`` fields.

    ``shift_jumps`` and ``beta_jumps`` hold ``D_{s,zeta} beta`` and ``beta`` at
    each stored jump of ``qpaths`` (flat, aligned with ``qpaths.jump_time``);
    ``shift_grid[p, r, m]`` holds ``D_{s,zeta} beta`` on intervals ``k .. end``.
    Returns per path
    ``exp(sum_{jumps after x_k} [ln(1 + beta + shift) - ln(1 + beta)] - sum shift * compensator)``.
    """
    shift_jumps = np.asarray(shift_jumps, dtype=float)
    beta_jumps = np.asarray(beta_jumps, dtype=float)
    late = qpaths.jump_time > qpaths.grid.nodes[k]
    jump_part = np.bincount(qpaths.jump_path[late],
                            weights=(np.log1p(beta_jumps + shift_jumps) - np.log1p(beta_jumps))[late],
                            minlength=qpaths.n_paths)
    comp = np.einsum("prm,rm->p", np.asarray(shift_grid, dtype=float), qpaths.compensator[k:])
    return np.exp(jump_part - comp)

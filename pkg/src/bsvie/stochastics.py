"""Brownian and compound-Poisson path ensembles, Girsanov densities, Q-expectations.

Randomness comes from counter-based Philox streams.  Paths are generated in
fixed blocks of :data:`BLOCK` paths; block ``b`` draws from streams keyed by
``(seed, b, kind)``.  A path's draws therefore depend only on the seed and its
index, never on the number of worker threads.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import Divergent, InvalidParameter, MeasureDegenerate
from .parallel import pmap
from .timegrid import TimeGrid

BLOCK = 4096
_NORMAL, _JUMPS = 0, 1


def _as_time_fn(fn):
    """Accept a callable, a constant, or None (meaning zero) for a coefficient of time."""
    if fn is None:
        return lambda s: np.zeros_like(np.asarray(s, dtype=float))
    if callable(fn):
        return lambda s: np.asarray(fn(np.asarray(s, dtype=float)), dtype=float) * np.ones_like(s, dtype=float)
    c = float(fn)
    return lambda s: np.full_like(np.asarray(s, dtype=float), c)


@dataclass(frozen=True)
class JumpSpec:
    """Finite Levy measure ``nu = sum_k rates[k] delta_{marks[k]}`` and jump coefficient ``beta``.

    ``beta(s, zeta)`` must broadcast; ``beta >= -1 + eps`` is checked on each
    grid it is used with.
    """

    marks: tuple
    rates: tuple
    beta: Callable
    eps: float = 1e-9

    def __post_init__(self):
        marks = tuple(float(m) for m in np.atleast_1d(self.marks))
        rates = tuple(float(r) for r in np.atleast_1d(self.rates))
        if len(marks) != len(rates) or not marks:
            raise InvalidParameter("marks and rates must be non-empty and of equal length")
        if any(not r > 0 for r in rates):
            raise InvalidParameter("jump rates must be positive")
        if not self.eps > 0:
            raise InvalidParameter("eps must be positive")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def constant(cls, beta0, marks=(1.0,), rates=(1.0,)):
        b = float(beta0)
        return cls(marks, rates, lambda s, z: np.full(np.broadcast_shapes(np.shape(s), np.shape(z)), b))

    @property
    def n_marks(self):
        return len(self.marks)

    @property
    def total_rate(self):
        return float(sum(self.rates))

    def beta_at(self, s, mark_index):
        s = np.asarray(s, dtype=float)
        z = np.asarray(self.marks)[np.asarray(mark_index)]
        vals = np.asarray(self.beta(s, z), dtype=float) * np.ones(np.broadcast_shapes(s.shape, z.shape))
        return vals

    def beta_grid(self, s):
        """``beta(s_k, zeta_m)`` with shape ``(len(s), n_marks)``."""
        s = np.asarray(s, dtype=float)
        return self.beta_at(s[:, None], np.arange(self.n_marks)[None, :])

    def check(self, values):
        if np.any(~np.isfinite(values)) or np.any(1.0 + values <= 0):
            raise MeasureDegenerate("1 + beta <= 0 encountered: jump density not positive")
        if np.any(values < -1.0 + self.eps):
            raise MeasureDegenerate(f"beta < -1 + eps (eps={self.eps:g}) encountered")


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Seeded ensemble of discretised paths on a :class:`TimeGrid`.

    ``dB[p, k]`` is the Brownian increment over ``(x_k, x_{k+1}]``.  Jumps are
    stored flat, sorted by path then time: ``jump_path``, ``jump_time``,
    ``jump_mark`` (mark index).  ``compensator[k, m]`` is the compensator mass
    of mark ``m`` on interval ``k`` for the measure the increments refer to
    (``nu_m dt_k`` under P).
    """

    grid: TimeGrid
    dB: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray
    seed: int
    jump_spec: Optional[JumpSpec] = None
    compensator: Optional[np.ndarray] = None
    measure: str = "P"

    def __post_init__(self):
        for name in ("dB", "jump_time"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("jump_path", "jump_mark"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.compensator is None and self.jump_spec is not None:
            comp = np.outer(self.grid.dt, self.jump_spec.rates)
            object.__setattr__(self, "compensator", comp)

    @property
    def n_paths(self):
        return self.dB.shape[0]

    @functools.cached_property
    def B(self):
        """Brownian values at the nodes, shape ``(n_paths, n_nodes)``."""
        out = np.zeros((self.n_paths, self.grid.n_nodes))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    def jump_node_index(self):
        """Index of the first node at or after each jump time."""
        return np.searchsorted(self.grid.nodes, self.jump_time, side="left")

    @functools.cached_property
    def _all_counts(self):
        out = self._counts(slice(None))
        out.setflags(write=False)
        return out

    def _counts(self, sel):
        flat = self.jump_path[sel] * self.grid.n_nodes + self.jump_node_index()[sel]
        out = np.bincount(flat, minlength=self.n_paths * self.grid.n_nodes).astype(float)
        return np.cumsum(out.reshape(self.n_paths, self.grid.n_nodes), axis=1)

    def jump_counts(self, mark=None):
        """``N(x_k)`` per path: jumps with time ``<= x_k`` (all marks or one mark)."""
        if mark is None:
            return self._all_counts
        return self._counts(self.jump_mark == mark)

    def jump_totals(self):
        """Total number of jumps per path."""
        return np.bincount(self.jump_path, minlength=self.n_paths).astype(float)

    def jump_size_sums(self):
        if self.jump_spec is None:
            return np.zeros(self.n_paths)
        marks = np.asarray(self.jump_spec.marks)
        return np.bincount(self.jump_path, weights=marks[self.jump_mark], minlength=self.n_paths)

    def with_dB(self, dB):
        out = replace(self, dB=dB)
        return out

    def with_jump(self, time, mark_index):
        """Bundle with one extra jump ``(time, mark)`` inserted on every path."""
        n = self.n_paths
        path = np.concatenate([self.jump_path, np.arange(n)])
        t = np.concatenate([self.jump_time, np.full(n, float(time))])
        m = np.concatenate([self.jump_mark, np.full(n, int(mark_index))])
        order = np.lexsort((t, path))
        return replace(self, jump_path=path[order], jump_time=t[order], jump_mark=m[order])

    def subset(self, index):
        """Bundle restricted to the paths ``index`` (renumbered from 0)."""
        index = np.asarray(index)
        keep = np.isin(self.jump_path, index)
        remap = np.full(self.n_paths, -1)
        remap[index] = np.arange(len(index))
        return replace(self, dB=self.dB[index], jump_path=remap[self.jump_path[keep]],
                       jump_time=self.jump_time[keep], jump_mark=self.jump_mark[keep])


def _stream(seed, block, kind):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block), kind))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_block(grid, jump_spec, seed, block, size):
    sd = np.sqrt(grid.dt)
    dB = _stream(seed, block, _NORMAL).standard_normal((size, grid.n_intervals)) * sd
    if jump_spec is None:
        return dB, np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64)
    rng = _stream(seed, block, _JUMPS)
    lam = jump_spec.total_rate
    counts = rng.poisson(lam * grid.T_max, size=size)
    total = int(counts.sum())
    times = rng.uniform(0.0, grid.T_max, size=total)
    p = np.asarray(jump_spec.rates) / lam
    marks = rng.choice(len(p), size=total, p=p)
    path = np.repeat(np.arange(size), counts) + block * BLOCK
    return dB, path, times, marks


def simulate_paths(grid, n_paths, jump_spec=None, seed=0, threads=None):
    """Simulate ``n_paths`` Brownian paths (plus compound-Poisson jumps) on the grid nodes.

    Deterministic in ``(grid, n_paths, jump_spec, seed)`` and independent of
    the thread count.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidParameter(f"n_paths must be a positive integer, got {n_paths}")
    n_paths = int(n_paths)
    blocks = [(b, min(BLOCK, n_paths - b * BLOCK)) for b in range(-(-n_paths // BLOCK))]
    parts = pmap(lambda bs: _simulate_block(grid, jump_spec, seed, *bs), blocks, threads)
    dB = np.concatenate([p[0] for p in parts])
    path = np.concatenate([p[1] for p in parts])
    times = np.concatenate([p[2] for p in parts])
    marks = np.concatenate([p[3] for p in parts])
    order = np.lexsort((times, path))
    return PathBundle(grid, dB, path[order], times[order], marks[order], int(seed), jump_spec)


@dataclass(frozen=True, eq=False)
class GirsanovWeight:
    """Density ``M(x_k) = dQ/dP`` along each path, stored as ``log_M``.

    The change of measure is truncated at ``T_max`` of the grid; ``M[:, -1]``
    is the weight used for expectations of ``F_{T_max}``-measurable quantities.
    """

    log_M: np.ndarray
    truncated_at: float
    meta: dict = field(default_factory=dict)

    @functools.cached_property
    def M(self):
        return np.exp(self.log_M)

    @property
    def terminal(self):
        return self.M[:, -1]


def girsanov_weights(paths, xi=None, jump_spec=None):
    """Exponential martingale ``M`` along each path of ``paths``.

    ``log M(t) = int xi dB - 1/2 int xi^2 ds + sum_{jumps <= t} ln(1 + beta) - int int beta nu ds``

    with left-point sums for the ``ds`` integrals and the Ito sum for ``dB``.
    ``xi`` is a deterministic function of time (or a constant).
    """
    grid = paths.grid
    x, dt = grid.nodes, grid.dt
    xi_fn = _as_time_fn(xi)
    xi_k = xi_fn(x[:-1])
    inc = paths.dB * xi_k - 0.5 * xi_k**2 * dt
    log_M = np.zeros((paths.n_paths, grid.n_nodes))
    np.cumsum(inc, axis=1, out=log_M[:, 1:])
    if jump_spec is not None:
        bg = jump_spec.beta_grid(x)
        jump_spec.check(bg)
        comp = np.concatenate([[0.0], np.cumsum((bg[:-1] * np.asarray(jump_spec.rates)).sum(axis=1) * dt)])
        log_M -= comp
        if len(paths.jump_time):
            bj = jump_spec.beta_at(paths.jump_time, paths.jump_mark)
            jump_spec.check(bj)
            J = np.zeros_like(log_M)
            np.add.at(J, (paths.jump_path, paths.jump_node_index()), np.log1p(bj))
            log_M += np.cumsum(J, axis=1)
    return GirsanovWeight(log_M, grid.T_max, {"truncated_at": grid.T_max})


def novikov_exponent(xi, jump_spec, grid, cap=50.0, tail_tol=1e-10):
    """``1/2 int xi^2 ds + int int (ln(1 + beta) - beta) nu ds`` for deterministic coefficients.

    The integral is taken over ``[0, T_max]``.  Raises :class:`Divergent` when
    ``xi^2`` has not decayed below ``tail_tol`` at ``T_max`` (finiteness cannot
    be certified) or the value exceeds ``cap``.  The jump part is never
    positive, so it cannot cause divergence.
    """
    xi_fn = _as_time_fn(xi)
    mask = grid.gauss_mask
    s = grid.nodes[mask]
    w = grid.weights[mask]
    sq = 0.5 * xi_fn(s) ** 2
    value = float(w @ sq)
    end = 0.5 * float(xi_fn(np.array([grid.T_max]))[0]) ** 2
    if end > tail_tol:
        raise Divergent(f"xi^2/2 = {end:.3g} at T_max={grid.T_max:g}: tail not negligible")
    if value > cap:
        raise Divergent(f"Novikov exponent {value:.6g} exceeds cap {cap:g}")
    if jump_spec is not None:
        bg = jump_spec.beta_grid(s)
        jump_spec.check(bg)
        value += float(w @ ((np.log1p(bg) - bg) @ np.asarray(jump_spec.rates)))
    return value


def expect_Q(functional, paths, weights, at=None):
    """Density-weighted mean ``E_P[M(at) F]`` with a 95% CI half-width.

    ``functional`` is an array of per-path values or a callable on ``paths``.
    ``at`` defaults to ``T_max``.
    """
    F = functional(paths) if callable(functional) else np.asarray(functional, dtype=float)
    if not np.all(np.isfinite(F)):
        raise InvalidParameter("functional must be finite on all paths")
    idx = paths.grid.n_nodes - 1 if at is None else paths.grid.index_of(at)
    v = weights.M[:, idx] * F
    n = len(v)
    half = 1.96 * float(np.std(v, ddof=1)) / math.sqrt(n) if n > 1 else float("inf")
    return float(np.mean(v)), half


def q_shifted_increments(paths, xi=None, jump_spec=None):
    """Increments of ``B_Q = B - int xi ds`` and the Q-compensator ``(1 + beta) nu dt``."""
    grid = paths.grid
    xi_k = _as_time_fn(xi)(grid.nodes[:-1])
    dBq = paths.dB - xi_k * grid.dt
    comp = None
    spec = jump_spec or paths.jump_spec
    if spec is not None:
        bg = spec.beta_grid(grid.nodes[:-1]) if jump_spec is not None else 0.0
        comp = (1.0 + bg) * np.asarray(spec.rates) * grid.dt[:, None]
    return replace(paths, dB=dBq, compensator=comp, measure="Q")


def dump_paths_csv(path, paths, weights=None, max_paths=None):
    """Debug dump: one row per (path, node) with B, M and the jump count."""
    n = paths.n_paths if max_paths is None else min(max_paths, paths.n_paths)
    B = paths.B
    N = paths.jump_counts()
    M = weights.M if weights is not None else np.ones_like(B)
    x = paths.grid.nodes
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id", "t", "B", "M", "jumps"])
        for p in range(n):
            for k in range(len(x)):
                out.writerow([p, format(x[k], ".17g"), format(B[p, k], ".17g"),
                              format(M[p, k], ".17g"), int(N[p, k])])

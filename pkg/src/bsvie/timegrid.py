"""Composite Gauss-Legendre grids on a truncated half-line.

A :class:`TimeGrid` is a sequence of panels ``[b_0, b_1], ..., [b_{P-1}, b_P]``
with ``b_0 = 0`` and ``b_P = T_max``.  Panel widths grow geometrically.  The
node set of the grid is the union of the panel boundaries and the
Gauss-Legendre points of every panel, so ``nodes[0] == 0`` and
``nodes[-1] == T_max``.  Boundary nodes carry zero quadrature weight; they are
there so that ``t = 0`` (and every panel edge) is an addressable grid time.

Besides plain quadrature the module provides :class:`VolterraRule`, the
product-integration rule used for every integral of the form

    int_{x_i}^{s} f(u) k(u, s) du

where ``f`` is known only at grid nodes ``>= x_i`` and ``k`` may only be
evaluated on the Volterra triangle ``u <= s``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, NumericError


@functools.lru_cache(maxsize=64)
def gauss_legendre(n):
    """Gauss-Legendre nodes and weights on [-1, 1] (read-only arrays)."""
    x, w = np.polynomial.legendre.leggauss(int(n))
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def lagrange_matrix(xn, u):
    """Evaluate the Lagrange basis of the nodes ``xn`` at the points ``u``.

    ``xn`` has shape ``(..., m)`` and must broadcast against ``u[..., None]``.
    Returns an array of shape ``u.shape + (m,)``.
    """
    xn = np.asarray(xn, dtype=float)
    u = np.asarray(u, dtype=float)
    m = xn.shape[-1]
    num = u[..., None, None] - xn[..., None, :]            # (..., j, a): u - x_a
    den = xn[..., :, None] - xn[..., None, :]              # x_j - x_a
    eye = np.eye(m, dtype=bool)
    den = np.where(eye, 1.0, den)
    ratio = np.where(eye, 1.0, num / den)
    return np.prod(ratio, axis=-1)


@dataclass(frozen=True)
class TimeGrid:
    """Immutable composite quadrature grid on ``[0, T_max]``.

    Attributes
    ----------
    nodes : ndarray
        Strictly increasing grid times; panel boundaries are included.
    weights : ndarray
        Composite Gauss-Legendre weights per node (zero on panel boundaries).
    breaks : ndarray
        Panel boundaries ``b_0 = 0 < ... < b_P = T_max``.
    pts_per_panel : int
        Gauss points per panel.
    grading_rate : float
        Ratio of consecutive panel widths.
    lam : float
        Weight parameter of the exponentially weighted norms.
    """

    nodes: np.ndarray
    weights: np.ndarray
    breaks: np.ndarray
    pts_per_panel: int
    grading_rate: float
    lam: float
    _meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("nodes", "weights", "breaks"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        x, w = self.nodes, self.weights
        if not self.lam > 0:
            raise InvalidParameter(f"lambda must be positive, got {self.lam}")
        if x[0] != 0.0 or x[-1] != self.breaks[-1] or not self.breaks[-1] > 0:
            raise InvalidParameter("grid must start at 0 and end at T_max > 0")
        if np.any(np.diff(x) <= 0):
            raise InvalidParameter("grid nodes must be strictly increasing")
        gauss = self.gauss_mask
        if np.any(w[gauss] <= 0) or np.any(w[~gauss] != 0):
            raise InvalidParameter("Gauss weights must be positive, boundary weights zero")
        if abs(w.sum() - self.T_max) > 1e-12 * self.T_max:
            raise InvalidParameter("quadrature weights do not integrate constants")

    # ------------------------------------------------------------------ layout
    @property
    def T_max(self):
        return float(self.breaks[-1])

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_panels(self):
        return len(self.breaks) - 1

    @property
    def n_intervals(self):
        return len(self.nodes) - 1

    @property
    def dt(self):
        """Lengths of the intervals between consecutive nodes."""
        return np.diff(self.nodes)

    @property
    def panel_widths(self):
        return np.diff(self.breaks)

    @property
    def gauss_mask(self):
        mask = np.ones(len(self.nodes), dtype=bool)
        mask[:: self.pts_per_panel + 1] = False
        return mask

    def panel_start(self, p):
        return p * (self.pts_per_panel + 1)

    def panel_nodes(self, p):
        """Absolute node indices of panel ``p`` including both boundaries."""
        s = self.panel_start(p)
        return np.arange(s, s + self.pts_per_panel + 2)

    def panel_of(self, i):
        """Panel whose half-open node range ``[start, end)`` contains node ``i``."""
        return min(i // (self.pts_per_panel + 1), self.n_panels - 1)

    def stencil(self, i):
        """Interpolation stencil for functions defined on ``[x_i, inf)``.

        The ``pts_per_panel + 2`` consecutive nodes starting at ``i`` (fewer
        near ``T_max``).  For a panel's left boundary it is the panel itself.
        """
        return np.arange(i, min(i + self.pts_per_panel + 2, self.n_nodes))

    def index_of(self, t, atol=1e-12):
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        j = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[j] - t) > atol * max(1.0, abs(t)):
            raise InvalidParameter(f"t={t} is not a grid node")
        return j

    def spec(self):
        """JSON-friendly description used in run metadata."""
        return {
            "T_max": self.T_max,
            "n_panels": self.n_panels,
            "pts_per_panel": self.pts_per_panel,
            "grading_rate": self.grading_rate,
            "lambda": self.lam,
            "n_nodes": self.n_nodes,
        }

    def refined(self, factor=2):
        """Same horizon with ``factor`` times as many panels."""
        return build_graded_grid(
            self.T_max,
            self.n_panels * factor,
            self.pts_per_panel,
            self.grading_rate ** (1.0 / factor),
            self.lam,
        )


def build_graded_grid(T_max, n_panels, pts_per_panel, grading_rate, lam):
    """Composite Gauss-Legendre grid with geometrically growing panels.

    Panel ``k`` has width ``w0 * grading_rate**k`` and the widths sum to
    ``T_max``.  Each panel contributes its ``pts_per_panel`` Gauss points; the
    panel boundaries are included as zero-weight nodes.
    """
    if not T_max > 0:
        raise InvalidParameter(f"T_max must be positive, got {T_max}")
    if int(n_panels) != n_panels or n_panels < 1:
        raise InvalidParameter(f"n_panels must be an integer >= 1, got {n_panels}")
    if int(pts_per_panel) != pts_per_panel or pts_per_panel < 2:
        raise InvalidParameter(f"pts_per_panel must be an integer >= 2, got {pts_per_panel}")
    if not grading_rate >= 1:
        raise InvalidParameter(f"grading_rate must be >= 1, got {grading_rate}")
    if not lam > 0:
        raise InvalidParameter(f"lambda must be positive, got {lam}")
    n_panels, q = int(n_panels), int(pts_per_panel)
    T_max, r = float(T_max), float(grading_rate)

    if r == 1.0:
        widths = np.full(n_panels, T_max / n_panels)
    else:
        w0 = T_max * (r - 1.0) / (r**n_panels - 1.0)
        widths = w0 * r ** np.arange(n_panels)
    breaks = np.concatenate([[0.0], np.cumsum(widths)])
    breaks[-1] = T_max

    gx, gw = gauss_legendre(q)
    nodes = np.empty(n_panels * (q + 1) + 1)
    weights = np.zeros_like(nodes)
    for p in range(n_panels):
        a, b = breaks[p], breaks[p + 1]
        s = p * (q + 1)
        nodes[s] = a
        nodes[s + 1 : s + q + 1] = a + 0.5 * (b - a) * (gx + 1.0)
        weights[s + 1 : s + q + 1] = 0.5 * (b - a) * gw
    nodes[-1] = T_max
    return TimeGrid(nodes, weights, breaks, q, r, float(lam))


def truncation_horizon(decay_rate, prefactor, tol):
    """Smallest ``T`` with ``int_T^inf prefactor * exp(-decay_rate s) ds <= tol``."""
    if not decay_rate > 0:
        raise InvalidParameter(f"decay_rate must be positive, got {decay_rate}")
    if not prefactor > 0:
        raise InvalidParameter(f"prefactor must be positive, got {prefactor}")
    if not 0 < tol < prefactor:
        raise InvalidParameter(f"need 0 < tol < prefactor, got tol={tol}")
    return max(0.0, math.log(prefactor / (tol * decay_rate)) / decay_rate)


def _checked(values, what):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values while evaluating {what}")
    return values


def integrate_semi_infinite(f, grid, tail_prefactor, tail_rate):
    """Integrate ``f`` over ``[0, inf)``.

    Returns ``(value, tail_bound)`` where ``value`` is the quadrature over
    ``[0, T_max]`` and ``tail_bound = tail_prefactor * exp(-tail_rate T_max) / tail_rate``
    bounds the neglected part, given ``|f(s)| <= tail_prefactor * exp(-tail_rate s)``
    beyond ``T_max``.
    """
    mask = grid.gauss_mask
    vals = _checked(f(grid.nodes[mask]), "integrand") * np.ones(mask.sum())
    value = float(np.dot(grid.weights[mask], vals))
    tail = tail_prefactor * math.exp(-tail_rate * grid.T_max) / tail_rate
    return value, tail


def clipped_rule(grid, a, b, order=None):
    """Composite Gauss rule on ``[a, b]`` split at the grid's panel boundaries."""
    q = grid.pts_per_panel if order is None else int(order)
    if b <= a:
        return np.empty(0), np.empty(0)
    cuts = grid.breaks[(grid.breaks > a) & (grid.breaks < b)]
    edges = np.concatenate([[a], cuts, [b]])
    gx, gw = gauss_legendre(q)
    half = 0.5 * np.diff(edges)
    x = (edges[:-1] + half)[:, None] + half[:, None] * gx
    w = half[:, None] * gw
    return x.ravel(), w.ravel()


def integrate_triangle(g, t, grid, order=None):
    """Integrate ``g(u, s)`` over ``{t <= u <= s <= T_max}``.

    Outer rule: the grid's panels clipped to ``[t, T_max]``.  Inner rule, for
    each outer node ``s``: the panels clipped to ``[t, s]``.  ``g`` is only
    called inside the triangle and must accept broadcast arrays.
    """
    if not 0 <= t <= grid.T_max:
        raise InvalidParameter(f"t={t} outside [0, T_max]")
    xs, ws = clipped_rule(grid, t, grid.T_max, order)
    us, wus, ss, owner = [], [], [], []
    for q, s in enumerate(xs):
        xu, wu = clipped_rule(grid, t, s, order)
        us.append(xu)
        wus.append(wu)
        ss.append(np.full(len(xu), s))
        owner.append(np.full(len(xu), q))
    if not us:
        return 0.0
    u = np.concatenate(us)
    s = np.concatenate(ss)
    vals = _checked(g(u, s) * np.ones_like(u), "triangle integrand")
    inner = np.bincount(np.concatenate(owner), weights=np.concatenate(wus) * vals,
                        minlength=len(xs))
    return float(np.dot(ws, inner))


def exp_weights(grid, lam, exponent=0.5):
    """``exp(-exponent * lam * x)`` at the nodes.

    The contraction constant uses ``exponent = 1/2``; the H^2 norms use 1.
    """
    return np.exp(-exponent * lam * grid.nodes)


def h2_norm(values, grid, lam=None):
    """Discrete ``(int_0^T e^{-lam t} |v(t)|^2 dt)^{1/2}`` for node values."""
    lam = grid.lam if lam is None else lam
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.dot(grid.weights * exp_weights(grid, lam, 1.0), v * v)))


def tail_weights(grid, i):
    """Weights ``v`` with ``int_{x_i}^{T_max} f(u) du ~= sum_j v[j] f(x_{i+j})``.

    The first, possibly partial, panel is integrated by interpolation on the
    forward stencil of ``i``; later panels use their Gauss weights.
    """
    cache = grid._meta.setdefault("tail_weights", {})
    if i in cache:
        return cache[i]
    n = grid.n_nodes
    v = np.zeros(n - i)
    if i == n - 1:
        v.setflags(write=False)
        cache[i] = v
        return v
    P = grid.panel_of(i)
    end_P = grid.panel_start(P) + grid.pts_per_panel + 1
    st = grid.stencil(i)
    a, b = grid.nodes[i], grid.breaks[P + 1]
    gx, gw = gauss_legendre(grid.pts_per_panel + 4)
    half = 0.5 * (b - a)
    L = lagrange_matrix(grid.nodes[st], a + half * (gx + 1.0))
    v[st - i] += half * (gw @ L)
    v[end_P + 1 - i :] += grid.weights[end_P + 1 :]
    v.setflags(write=False)
    cache[i] = v
    return v


def interp_row(grid, i, values, s):
    """Interpolate a function known at nodes ``i, i+1, ...`` at the points ``s``.

    ``values[j]`` is the value at node ``i + j``.  Points in the first panel
    of the row use the forward stencil of ``i``; later points use the nodes
    of their own panel.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    x = grid.nodes
    if np.any(s < x[i] - 1e-12) or np.any(s > grid.T_max + 1e-12):
        raise InvalidParameter("interpolation point outside [x_i, T_max]")
    values = np.asarray(values, dtype=float)
    out = np.empty(len(s))
    P = grid.panel_of(i)
    first = s <= grid.breaks[P + 1]
    if np.any(first):
        st = grid.stencil(i)
        out[first] = lagrange_matrix(x[st], s[first]) @ values[st - i]
    R = np.clip(np.searchsorted(grid.breaks, s, side="left") - 1, 0, grid.n_panels - 1)
    for r in np.unique(R[~first]):
        sel = (~first) & (R == r)
        idx = grid.panel_nodes(r)
        out[sel] = lagrange_matrix(x[idx], s[sel]) @ values[idx - i]
    return out


class VolterraRule:
    """Product-integration weights for Volterra integrals on a grid.

    For a row start ``x_i`` and target ``s`` the rule approximates

        int_{x_i}^{s} f(u) kern(u, s) du ~= sum_j W[s, j] f(x_j)

    where ``f`` is interpolated from its node values (forward stencil on the
    first, possibly partial, panel; the panel's own nodes elsewhere) and the
    product is integrated with Gauss points on each piece.  ``kern`` is only
    evaluated with ``u <= s``.  ``kern=None`` means ``kern == 1``.
    """

    def __init__(self, grid, kern=None, order=None):
        self.grid = grid
        self.kern = kern
        self.order = grid.pts_per_panel + 4 if order is None else int(order)
        x = grid.nodes
        n = len(x)
        q = grid.pts_per_panel
        m = q + 2
        self._gx, self._gw = gauss_legendre(self.order)

        kmat = np.zeros((n, n))
        jj, kk = np.triu_indices(n)
        kmat[jj, kk] = self._eval(x[jj], x[kk])
        self.kmat = kmat  # kmat[j, k] = kern(x_j, x_k), j <= k

        # End piece [a_R, x_k] for every node k >= 1, R the panel with k in (start, end].
        k = np.arange(1, n)
        R = (k - 1) // (q + 1)
        starts = R * (q + 1)
        a = grid.breaks[R]
        half = 0.5 * (x[k] - a)
        u = a[:, None] + half[:, None] * (self._gx + 1.0)
        pan = x[starts[:, None] + np.arange(m)]
        L = lagrange_matrix(pan[:, None, :], u)
        K = self._eval(u, x[k][:, None])
        end = np.zeros((n, m))
        end[1:] = np.einsum("kf,kfm->km", half[:, None] * self._gw * K, L)
        self._end = end
        self._end_start = np.concatenate([[0], starts])

    def _eval(self, u, s):
        u = np.asarray(u, dtype=float)
        if self.kern is None:
            return np.ones(np.broadcast_shapes(u.shape, np.shape(s)))
        vals = np.asarray(self.kern(u, s), dtype=float)
        vals = np.broadcast_to(vals, np.broadcast_shapes(u.shape, np.shape(s)))
        if not np.all(np.isfinite(vals)):
            raise NumericError("non-finite kernel values")
        return vals

    def row(self, i):
        """Dense weights ``W[k - i, j - i]`` for all node targets ``k >= i``."""
        g = self.grid
        x = g.nodes
        n = len(x)
        q = g.pts_per_panel
        W = np.zeros((n - i, n - i))
        if i == n - 1:
            return W
        P = g.panel_of(i)
        end_P = g.panel_start(P) + q + 1
        bP = g.breaks[P + 1]
        st = g.stencil(i)
        xst = x[st]
        gx, gw = self._gx, self._gw
        t0 = x[i]

        # targets inside the first panel: single piece [x_i, x_k]
        near = np.arange(i + 1, end_P + 1)
        half = 0.5 * (x[near] - t0)
        u = t0 + half[:, None] * (gx + 1.0)
        L = lagrange_matrix(xst, u)
        K = self._eval(u, x[near][:, None])
        W[np.ix_(near - i, st - i)] = np.einsum("kf,kfm->km", half[:, None] * gw * K, L)

        far = np.arange(end_P + 1, n)
        if len(far) == 0:
            return W
        # start piece [x_i, b_P]
        half0 = 0.5 * (bP - t0)
        u0 = t0 + half0 * (gx + 1.0)
        L0 = lagrange_matrix(xst, u0)
        K0 = self._eval(u0[None, :], x[far][:, None])
        W[np.ix_(far - i, st - i)] += (K0 * (half0 * gw)) @ L0
        # full panels strictly between P and the target's panel
        cols = np.arange(end_P + 1, n)
        start_R = self._end_start[far]
        mask = (cols[None, :] < start_R[:, None]) & (g.weights[cols] > 0)[None, :]
        block = self.kmat[np.ix_(cols, far)].T * g.weights[cols][None, :]
        W[np.ix_(far - i, cols - i)] += np.where(mask, block, 0.0)
        # end piece on the target's own panel
        ecols = start_R[:, None] + np.arange(q + 2) - i
        W[(far - i)[:, None], ecols] += self._end[far]
        return W

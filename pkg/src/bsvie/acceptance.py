"""Acceptance suite: eleven closed-form and property checks, runnable via ``bsvie selftest``.

Each ``criterion_N`` returns a :class:`Outcome`; :func:`run_all` prints one
line per criterion.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .apps import ControlProblem, control_demo, example2_report, ou_cost_closed_form
from .kernels import (iterated_kernel_rows, make_example1_kernel, resolvent_nystrom, resolvent_series,
                      weighted_norm_L, weighted_row_norms)
from .malliavin import (BasisSpec, PathFunctional, brownian_malliavin_fd, density_malliavin,
                        jump_difference, terminal_functional)
from .solver import (BSVIEProblem, Driver, compute_U, deterministic_driver, picard_iterate,
                     solve_y_deterministic, solve_y_mc, solve_zk, verify_martingale_representation,
                     zero_driver)
from .stochastics import (JumpSpec, girsanov_weights, novikov_exponent, q_shifted_increments,
                          simulate_paths)
from .timegrid import VolterraRule, build_graded_grid


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_short(v)}" for k, v in self.detail.items())
        return f"[{status}] criterion {self.number:2d} {self.title} ({self.seconds:.1f}s): {info}"


def _short(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return f"{v:.3g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out.seconds = time.perf_counter() - t0
        return out
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _ex1(alpha=0.5, gamma=2.0):
    return make_example1_kernel(alpha, gamma)


def _exp_driver(mu=1.0):
    return deterministic_driver(lambda t, s: np.exp(-mu * s) * np.ones_like(t), 1.0, mu, "exp(-mu s)")


# ---------------------------------------------------------------- criteria
@_timed
def criterion_1():
    """Example-1 resolvent by both methods against the closed form."""
    t0 = time.perf_counter()
    grid = build_graded_grid(16.0, 32, 8, 1.0, 2.0)
    k = _ex1()
    rule = VolterraRule(grid, k.eval)
    ny = resolvent_nystrom(k, grid, 2.0, rule=rule)
    se = resolvent_series(k, 2.0, 1e-12, grid, rule=rule)
    runtime = time.perf_counter() - t0
    x = grid.nodes
    jj, kk = np.triu_indices(grid.n_nodes)
    ex = k.resolvent_exact(x[jj], x[kk])
    rel_ny = float(np.max(np.abs(ny.values[jj, kk] - ex) / np.abs(ex)))
    rel_se = float(np.max(np.abs(se.values[jj, kk] - ex) / np.abs(ex)))
    cross = float(np.max(np.abs(ny.values - se.values)))
    ok = rel_ny <= 1e-6 and rel_se <= 1e-6 and cross <= 1e-8 and runtime <= 30
    return Outcome(1, "example-1 resolvent", ok,
                   {"rel_nystrom": rel_ny, "rel_series": rel_se, "cross": cross, "runtime_s": runtime})


@_timed
def criterion_2():
    """Weighted norms of iterated kernels bounded by L^n; L matches alpha/(gamma + lambda/2)."""
    grid = build_graded_grid(16.0, 32, 8, 1.0, 2.0)
    k = _ex1()
    lam = 2.0
    L = weighted_norm_L(k, lam, grid)
    L_exact = 0.5 / (2.0 + lam / 2)
    rule = VolterraRule(grid, k.eval)
    n_nodes = grid.n_nodes
    table = np.zeros((6, n_nodes, n_nodes))
    for i in range(n_nodes):
        for n, row in enumerate(iterated_kernel_rows(k, 6, grid, i, rule)):
            table[n, i, i:] = row
    norms = [float(np.max(weighted_row_norms(table[n], grid, lam))) for n in range(6)]
    bounds = [L**n + n * 1e-8 for n in range(1, 7)]
    ok = abs(L - L_exact) <= 1e-10 and all(a <= b for a, b in zip(norms, bounds))
    return Outcome(2, "iterated-kernel bound", ok,
                   {"L": L, "L_err": abs(L - L_exact), "norms": norms,
                    "max_excess": max(a - b for a, b in zip(norms, bounds))})


def _ex1_solution():
    grid = build_graded_grid(20.0, 40, 8, 1.0, 2.0)
    k = _ex1()
    problem = BSVIEProblem(k, _exp_driver(), lam=2.0, grid=grid)
    res = resolvent_nystrom(k, grid, 2.0)
    Y = solve_y_deterministic(problem, res)
    return grid, problem, Y, 1.2 * np.exp(-grid.nodes)


@_timed
def criterion_3():
    """Explicit Y for Example 1: Y(0) = 1.2 and the full curve."""
    grid, _, Y, exact = _ex1_solution()
    e0 = abs(Y[0] - 1.2)
    sup = float(np.max(np.abs(Y - exact)))
    return Outcome(3, "explicit Y", e0 <= 1e-6 and sup <= 1e-6, {"Y0": float(Y[0]), "Y0_err": e0, "sup_err": sup})


@_timed
def criterion_4():
    """Picard iteration reaches the explicit Y; error ratios bounded by L + 0.05."""
    grid, problem, Y, exact = _ex1_solution()
    tol = 1e-8
    pic = picard_iterate(problem, grid, 200, tol)
    quad = float(np.max(np.abs(Y - exact)))
    diff = float(np.max(np.abs(pic.Y - Y)))
    L = weighted_norm_L(problem.kernel, problem.lam, grid)
    worst = max(pic.ratios) if pic.ratios else 0.0
    ok = diff <= tol + quad and worst <= L + 0.05
    return Outcome(4, "Picard agreement and rate", ok,
                   {"iterations": len(pic.history), "diff": diff, "allowed": tol + quad,
                    "max_ratio": worst, "L": L})


@_timed
def criterion_5():
    """Example 2: Y(0) = 0.5 by formula, resolvent pipeline and backward ODE."""
    rep = example2_report()
    y0 = rep["Y0"]
    vals = [y0["formula"], y0["resolvent"], y0["ode"]]
    pair = max(abs(a - b) for a in vals for b in vals)
    ok = pair <= 1e-6 and all(abs(v - 0.5) <= 1e-6 for v in vals)
    return Outcome(5, "example-2 triple agreement", ok, {**y0, "max_pair_diff": pair})


@_timed
def criterion_6():
    """Martingale property of M at 1e5 paths for three coefficient sets; Novikov exponent."""
    t0 = time.perf_counter()
    grid = build_graded_grid(5.0, 10, 4, 1.0, 2.0)
    beta = JumpSpec.constant(0.5)
    configs = {"xi=0.3": (0.3, None), "beta0=0.5": (None, beta),
               "xi=exp(-s/2),beta0=0.5": (lambda s: np.exp(-0.5 * s), beta)}
    z = {}
    for seed, (name, (xi, js)) in enumerate(configs.items(), start=101):
        paths = simulate_paths(grid, 100_000, js, seed)
        M = girsanov_weights(paths, xi, js).terminal
        z[name] = float((M.mean() - 1.0) / (M.std(ddof=1) / math.sqrt(len(M))))
    long = build_graded_grid(40.0, 80, 4, 1.0, 2.0)
    nov = novikov_exponent(lambda s: np.exp(-0.5 * s), None, long)
    runtime = time.perf_counter() - t0
    ok = all(abs(v) <= 3 for v in z.values()) and abs(nov - 0.5) <= 1e-8 and runtime <= 60
    return Outcome(6, "Girsanov suite", ok, {**{f"z[{k}]": v for k, v in z.items()},
                                              "novikov_err": abs(nov - 0.5), "runtime_s": runtime})


@_timed
def criterion_7():
    """Finite-difference Malliavin oracles."""
    grid = build_graded_grid(2.0, 8, 2, 1.0, 2.0)
    T = 1.0
    s_in, s_out = float(grid.nodes[5]), float(grid.nodes[-3])
    paths = simulate_paths(grid, 10_000, JumpSpec.constant(0.5), 11)
    F = terminal_functional(lambda b: b, T)
    d_in = brownian_malliavin_fd(F, paths, s_in)
    d_out = brownian_malliavin_fd(F, paths, s_out)
    # exact up to floating-point rounding of the bumped sums
    e_lin = max(float(np.max(np.abs(d_in - 1.0))), float(np.max(np.abs(d_out))))
    F2 = terminal_functional(lambda b: b**2, T)
    e_sq = float(np.max(np.abs(brownian_malliavin_fd(F2, paths, s_in) - 2 * paths.B[:, grid.index_of(T)])))
    count = PathFunctional(lambda p: p.jump_totals(), "jump count")
    e_jump = float(np.max(np.abs(jump_difference(count, paths, 1.0, 0) - 1.0)))
    w = girsanov_weights(paths, 0.3)
    Mt = PathFunctional(lambda p: girsanov_weights(p, 0.3).M[:, p.grid.index_of(T)], "M(t)")
    d_M = brownian_malliavin_fd(Mt, paths, s_in)
    rms_M = float(np.sqrt(np.mean((d_M - density_malliavin(0.3, w, paths, s_in, T)) ** 2)))
    ok = e_lin <= 1e-9 and e_sq <= 1e-6 and e_jump == 0.0 and rms_M <= 1e-4
    return Outcome(7, "Malliavin unit oracles", ok,
                   {"B(T)_err": e_lin, "B(T)^2_err": e_sq, "jump_err": e_jump, "M_rms": rms_M})


def cos_driver():
    """``h(t, s) = exp(-s) cos(B(s))``."""
    return Driver(lambda t, s: np.ones(np.broadcast_shapes(np.shape(t), np.shape(s))),
                  lambda p: np.exp(-p.grid.nodes) * np.cos(p.B), 1.0, 1.0, "exp(-s)cos(B(s))", local=True)


def representation_level(grid, degree, n_paths=20_000, seed=7, t=0.0):
    """Relative RMS of ``U(t) - sum Z dB_Q`` for the no-jump cosine problem on one grid."""
    k = _ex1()
    problem = BSVIEProblem(k, cos_driver(), lam=2.0, grid=grid)
    res = resolvent_nystrom(k, grid, 2.0)
    paths = simulate_paths(grid, n_paths, None, seed)
    w = girsanov_weights(paths)
    mc = solve_y_mc(problem, res, paths, w, BasisSpec(degree))
    i = grid.index_of(t)
    zk = solve_zk(problem, paths, w, [i], mc=mc)
    return verify_martingale_representation(zk.U[i], zk.Z[i], None, q_shifted_increments(paths), i)


@_timed
def criterion_8():
    """Representation residual shrinks under refinement; fine level below 10% of RMS(U)."""
    t0 = time.perf_counter()
    coarse = build_graded_grid(6.0, 128, 2, 1.02**2, 2.0)
    fine = coarse.refined(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = representation_level(coarse, 2)
        b = representation_level(fine, 4)
    runtime = time.perf_counter() - t0
    ok = b["rms"] < a["rms"] and b["relative"] <= 0.10 and runtime <= 300
    return Outcome(8, "representation residual", ok,
                   {"coarse_rel": a["relative"], "fine_rel": b["relative"], "coarse_rms": a["rms"],
                    "fine_rms": b["rms"], "runtime_s": runtime})


@_timed
def criterion_9():
    """Deterministic driver gives U = Z = K = 0; zero driver gives Y = 0 exactly."""
    grid = build_graded_grid(8.0, 16, 8, 1.0, 2.0)
    k = _ex1()
    js = JumpSpec.constant(0.5)
    xi = lambda s: 0.3 * np.exp(-2.0 * s)  # noqa: E731
    problem = BSVIEProblem(k, _exp_driver(), xi=xi, jump_spec=js, lam=2.0, grid=grid)
    res = resolvent_nystrom(k, grid, 2.0)
    Y = solve_y_deterministic(problem, res)
    U = compute_U(problem, Y, grid)
    paths = simulate_paths(grid, 2000, js, 5)
    w = girsanov_weights(paths, xi, js)
    zk = solve_zk(problem, paths, w, [0, grid.index_of(grid.breaks[4])], Y=Y)
    z_max = max(float(np.max(np.abs(z))) for z in zk.Z.values())
    k_max = max(float(np.max(np.abs(v))) for v in zk.K.values())
    zero = BSVIEProblem(k, zero_driver(), lam=2.0, grid=grid)
    Y0 = solve_y_deterministic(zero, res)
    zk0 = solve_zk(zero, paths, w, [0], Y=Y0)
    exact_zero = bool(np.all(Y0 == 0.0) and np.all(zk0.Z[0] == 0.0) and np.all(zk0.K[0] == 0.0))
    u_max = float(np.max(np.abs(U)))
    ok = u_max <= 1e-6 and z_max <= 1e-6 and k_max <= 1e-6 and exact_zero
    return Outcome(9, "degenerate exactness", ok,
                   {"U_max": u_max, "Z_max": z_max, "K_max": k_max, "zero_driver_exact": exact_zero})


@_timed
def criterion_10():
    """Control demo closed forms: deterministic limit and the OU cost."""
    t0 = time.perf_counter()
    det = control_demo(ControlProblem(a=-1.0, rho=1.0, sigma=0.0, x0=1.0, n_paths=4, seed=1))
    e_det = abs(det["J"] - ou_cost_closed_form(-1.0, 1.0, 0.0, 1.0))
    sto = control_demo(ControlProblem(a=-1.0, rho=1.0, sigma=1.0, x0=1.0, n_paths=100_000, seed=2))
    z = (sto["J"] - 2.0 / 3.0) / sto["std_err"]
    runtime = time.perf_counter() - t0
    ok = e_det <= 1e-8 and abs(z) <= 3 and runtime <= 120
    return Outcome(10, "control demo oracles", ok,
                   {"det_err": e_det, "J_ou": sto["J"], "z": z, "runtime_s": runtime})


def _digest(folder):
    out = {}
    for name in sorted(os.listdir(folder)):
        with open(os.path.join(folder, name), "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


REPRO_RUNS = {
    "solve": ["--set", "driver.type=cos_brownian", "--set", "grid.T_max=6", "--set", "grid.n_panels=24",
              "--set", "grid.pts_per_panel=3", "--set", "mc.n_paths=1500", "--set", "zk=true",
              "--set", "jumps.beta0=0.5", "--set", "xi.type=constant", "--set", "xi.xi0=0.0"],
    "control": ["--set", "n_paths=3000", "--set", "compare=true"],
    "example2": ["--set", "mc.n_paths=800"],
}


@_timed
def criterion_11():
    """Same seed gives byte-identical outputs for 1 and 3 threads."""
    from . import cli

    mismatched = []
    old = os.environ.pop("BSVIE_THREADS", None)
    try:
        with tempfile.TemporaryDirectory() as tmp:
            for cmd, extra in REPRO_RUNS.items():
                digests = []
                for run, threads in enumerate((1, 1, 3)):
                    out = os.path.join(tmp, f"{cmd}-{run}")
                    args = [cmd, "--out", out, "--set", f"threads={threads}", *extra]
                    code = cli.main(args, quiet=True)
                    if code not in (0, 4):
                        mismatched.append(f"{cmd}: exit {code}")
                    digests.append(_digest(out))
                if not (digests[0] == digests[1] == digests[2]):
                    mismatched.append(cmd)
    finally:
        if old is not None:
            os.environ["BSVIE_THREADS"] = old
    return Outcome(11, "reproducibility", not mismatched,
                   {"commands": sorted(REPRO_RUNS), "mismatched": mismatched or "none"})


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


def run_all(only=None, echo=print):
    """Run the selected criteria (all by default); returns the outcomes."""
    outcomes = []
    for n, fn in enumerate(CRITERIA, start=1):
        if only and n not in only:
            continue
        try:
            out = fn()
        except Exception as exc:  # report and carry on with the remaining criteria
            out = Outcome(n, fn.__name__, False, {"error": f"{type(exc).__name__}: {exc}"})
        echo(out.line())
        outcomes.append(out)
    return outcomes

"""Command-line front end.

Every run is driven by one JSON document (``--config``) plus dotted
``--set key=value`` overrides.  Unknown keys are rejected.  Array data goes
to CSV, scalars and diagnostics to JSON with sorted keys; neither contains
timestamps or the thread count, so reruns are byte-identical.

Exit codes: 0 success, 1 configuration or parameter error, 2 violated
assumption, 3 numeric failure, 4 failed check or verifier.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__
from .errors import (AssumptionViolated, ContractionViolated, Divergent, InstabilityDetected, InvalidParameter,
                     MeasureDegenerate, NoConvergence, NumericError, RegressionSingular)
from .kernels import (TwoTimeKernel, make_example1_kernel, make_separable_kernel, resolvent_nystrom,
                      resolvent_residual_table, resolvent_series)
from .malliavin import BasisSpec
from .parallel import ENV_VAR
from .solver import (DETERMINISTIC_REQUIRED, BSVIEProblem, Driver, SolutionTriple, picard_iterate,
                     solve_y_deterministic, solve_y_mc, solve_zk, verify_m_solution,
                     verify_martingale_representation, write_json, write_solution_csv, zk_surfaces)
from .stochastics import GirsanovWeight, JumpSpec, girsanov_weights, q_shifted_increments, simulate_paths
from .timegrid import VolterraRule, build_graded_grid

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------- schema
class Leaf:
    def __init__(self, types, default, check=None, doc=""):
        self.types = types if isinstance(types, tuple) else (types,)
        self.default = default
        self.check = check
        self.doc = doc

    def validate(self, value, path):
        if value is None and type(None) in self.types:
            return None
        ok = False
        for t in self.types:
            if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
                value, ok = float(value), True
                break
            if t is int and isinstance(value, int) and not isinstance(value, bool):
                ok = True
                break
            if t not in (float, int) and isinstance(value, t):
                ok = True
                break
        if not ok:
            names = "/".join("null" if t is type(None) else t.__name__ for t in self.types)
            raise ConfigError(f"{path}: expected {names}, got {json.dumps(value)}")
        if self.check is not None:
            msg = self.check(value)
            if msg:
                raise ConfigError(f"{path}: {msg}")
        return value


class Block:
    """Nested object; ``nullable`` blocks default to null and are filled in when given."""

    def __init__(self, fields, nullable=False):
        self.fields = fields
        self.nullable = nullable

    @property
    def default(self):
        return None if self.nullable else {k: _default(v) for k, v in self.fields.items()}

    def validate(self, value, path):
        if value is None and self.nullable:
            return None
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        unknown = sorted(set(value) - set(self.fields))
        if unknown:
            raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
        out = {}
        for k, spec in self.fields.items():
            sub = f"{path}.{k}" if path else k
            out[k] = spec.validate(value[k], sub) if k in value else _fill(spec)
        return out


def _default(spec):
    return copy.deepcopy(spec.default)


def _fill(spec):
    if isinstance(spec, Block) and not spec.nullable:
        return spec.validate({}, "")
    return _default(spec)


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be non-negative"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n}"


def _one_of(*choices):
    return lambda v: None if v in choices else f"must be one of {', '.join(choices)}"


def _list_of(kind, allowed=None):
    def check(v):
        if not all(isinstance(x, kind) and not isinstance(x, bool) for x in v):
            return f"entries must be {kind.__name__ if isinstance(kind, type) else 'numbers'}"
        if allowed and any(x not in allowed for x in v):
            return f"entries must be among {', '.join(allowed)}"
        return None
    return check


NUMBER = (int, float)


def grid_block(T_max=20.0, n_panels=40, pts_per_panel=8, grading_rate=1.0):
    return Block({
        "T_max": Leaf(float, T_max, _positive),
        "n_panels": Leaf(int, n_panels, _at_least(1)),
        "pts_per_panel": Leaf(int, pts_per_panel, _at_least(2)),
        "grading_rate": Leaf(float, grading_rate, _positive),
    })


COMMON = {
    "seed": Leaf(int, 7, _nonneg),
    "threads": Leaf((int, type(None)), None, _at_least(1)),
    "output": Leaf((str, type(None)), None),
}

KERNEL = Block({
    "type": Leaf(str, "example1", _one_of("example1", "separable", "tabulated")),
    "alpha": Leaf(float, 0.5),
    "gamma": Leaf(float, 2.0),
    "phi_c": Leaf(float, -1.0),
    "phi_rate": Leaf(float, 0.0, _nonneg),
    "table": Leaf((list, str, type(None)), None),
    "C_phi": Leaf((float, type(None)), None),
    "decay": Leaf((float, type(None)), None),
})

DRIVER = Block({
    "type": Leaf(str, "exponential", _one_of("exponential", "zero", "cos_brownian")),
    "scale": Leaf(float, 1.0),
    "mu": Leaf(float, 1.0, _positive),
})

XI = Block({
    "type": Leaf(str, "zero", _one_of("zero", "constant", "exponential", "random")),
    "xi0": Leaf(float, 0.0),
    "delta": Leaf(float, 0.5, _positive),
})

JUMPS = Block({
    "marks": Leaf(list, [1.0], _list_of(NUMBER)),
    "rates": Leaf(list, [1.0], _list_of(NUMBER)),
    "beta0": Leaf(float, 0.5),
}, nullable=True)

VERIFIERS = ("finite", "picard", "martingale_representation", "m_solution")

SCHEMAS = {
    "resolvent": Block({
        **COMMON,
        "kernel": KERNEL,
        "lam": Leaf(float, 2.0, _positive),
        "grid": grid_block(16.0, 32, 8),
        "series_tol": Leaf(float, 1e-12, _positive),
        "relaxed_contraction": Leaf(bool, False),
    }),
    "solve": Block({
        **COMMON,
        "kernel": KERNEL,
        "driver": DRIVER,
        "xi": XI,
        "jumps": JUMPS,
        "lam": Leaf(float, 2.0, _positive),
        "grid": grid_block(),
        "relaxed_contraction": Leaf(bool, False),
        "mc": Block({"n_paths": Leaf(int, 4000, _at_least(2)), "degree": Leaf(int, 3, _nonneg)}),
        "zk": Leaf(bool, False),
        "zk_rows": Leaf(list, [0.0], _list_of(NUMBER)),
        "verifiers": Leaf(list, ["finite"], _list_of(str, VERIFIERS)),
        "tolerances": Block({
            "picard": Leaf(float, 1e-6, _positive),
            "representation_relative": Leaf(float, 0.5, _positive),
            "m_solution_rms": Leaf(float, 0.1, _positive),
        }),
    }),
    "example1": Block({
        **COMMON,
        "alpha": Leaf(float, 0.5, _positive),
        "gamma": Leaf(float, 2.0, _positive),
        "mu": Leaf(float, 1.0, _positive),
        "lam": Leaf(float, 2.0, _positive),
        "tol": Leaf(float, 1e-6, _positive),
        "grid": grid_block(),
    }),
    "example2": Block({
        **COMMON,
        "lam": Leaf(float, 5.0, _positive),
        "tol": Leaf(float, 1e-6, _positive),
        "grid": grid_block(),
        "mc": Block({"n_paths": Leaf(int, 2000, _at_least(2)), "degree": Leaf(int, 3, _nonneg),
                     "row_tol": Leaf(float, 1e-6, _positive)}, nullable=True),
    }),
    "control": Block({
        **COMMON,
        "a": Leaf(float, -1.0),
        "b0": Leaf(float, 0.0),
        "kappa": Leaf(float, 1.0, _positive),
        "c": Leaf(float, 0.0),
        "rho": Leaf(float, 1.0, _positive),
        "sigma": Leaf(float, 1.0, _nonneg),
        "x0": Leaf(float, 1.0),
        "n_paths": Leaf(int, 100_000, _at_least(2)),
        "explosion_cap": Leaf(float, 1e8, _positive),
        "grid": grid_block(30.0, 60, 8),
        "control": Block({"type": Leaf(str, "zero", _one_of("zero", "feedback")), "gain": Leaf(float, 0.0)}),
        "compare": Leaf(bool, False),
        "h0": Leaf((float, type(None)), None),
        "mu": Leaf((float, type(None)), None),
        "adjoint_lam": Leaf(float, 4.0, _positive),
    }),
    "selftest": Block({**COMMON, "only": Leaf(list, [], _list_of(int))}),
}


def default_config(command):
    return SCHEMAS[command].validate({}, "")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    """Apply one ``a.b.c=value`` override (value parsed as JSON, else taken as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not an object")
    node[parts[-1]] = _parse_value(text)


def load_config(command, path=None, overrides=()):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for o in overrides:
        apply_override(raw, o)
    return SCHEMAS[command].validate(raw, "")


def config_hash(cfg):
    """sha256 of the canonical JSON config without run-local keys (threads, output)."""
    canon = {k: v for k, v in cfg.items() if k not in ("threads", "output")}
    text = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _meta(command, cfg, grid):
    return {"command": command, "seed": cfg["seed"], "grid": grid.spec() if grid is not None else None,
            "config_hash": config_hash(cfg), "version": __version__}


def _threads(cfg):
    env = os.environ.get(ENV_VAR)
    return int(env) if env else cfg.get("threads")


def _grid(g, lam):
    return build_graded_grid(g["T_max"], g["n_panels"], g["pts_per_panel"], g["grading_rate"], lam)


def _fmt(v):
    return format(float(v), ".17g")


def _write_curves(path, columns):
    names = list(columns)
    data = [np.asarray(columns[n], dtype=float) for n in names]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(names)
        for row in zip(*data):
            out.writerow([_fmt(v) for v in row])


# -------------------------------------------------------------------- builders
def _read_table(spec):
    if isinstance(spec, str):
        with open(spec, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        spec = [[float(a), float(b)] for a, b in rows]
    arr = np.asarray(spec, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ConfigError("kernel.table: need at least two [d, phi] pairs")
    if np.any(np.diff(arr[:, 0]) <= 0) or arr[0, 0] != 0.0:
        raise ConfigError("kernel.table: lags must start at 0 and increase strictly")
    return arr


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def build_kernel(k):
    kind = k["type"]
    if kind == "example1":
        return make_example1_kernel(k["alpha"], k["gamma"])
    if kind == "separable":
        c, r = k["phi_c"], k["phi_rate"]
        anti = (lambda s: c * s) if r == 0 else (lambda s: -c / r * np.exp(-r * s))
        return make_separable_kernel(lambda s: c * np.exp(-r * np.asarray(s, dtype=float)), abs(c), r, anti,
                                     f"separable({c:g}exp(-{r:g}s))")
    if k["table"] is None:
        raise ConfigError("kernel.table is required for a tabulated kernel")
    tab = _read_table(k["table"])
    d, v = tab[:, 0], tab[:, 1]
    C = k["C_phi"] if k["C_phi"] is not None else float(np.max(np.abs(v)))
    decay = k["decay"] if k["decay"] is not None else 0.0

    def ev(t, s):
        lag = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
        return np.interp(lag, d, v, right=0.0)

    try:
        return TwoTimeKernel(ev, C, decay, "tabulated")
    except InvalidParameter as exc:
        if "exceeds" in str(exc):
            raise AssumptionViolated("A1", f"kernel decay: {exc}") from exc
        raise


def build_driver(d):
    scale, mu = d["scale"], d["mu"]
    if d["type"] == "zero" or scale == 0.0:
        return Driver(lambda t, s: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s))), None, 0.0, mu, "zero")
    a = (lambda t, s: scale * np.exp(-mu * np.asarray(s, dtype=float)) * np.ones_like(t))
    if d["type"] == "exponential":
        return Driver(a, None, abs(scale), mu, f"{scale:g}exp(-{mu:g}s)")
    return Driver(a, lambda p: np.cos(p.B), abs(scale), mu, f"{scale:g}exp(-{mu:g}s)cos(B(s))", local=True)


def build_xi(x):
    kind, xi0, delta = x["type"], x["xi0"], x["delta"]
    if kind == "zero":
        return None
    if kind == "constant":
        return xi0
    return lambda s: xi0 * np.exp(-delta * np.asarray(s, dtype=float))


def random_xi_weights(paths, xi0, delta):
    """Density for the path-dependent ``xi(s) = xi0 exp(-delta s) tanh(B(s))`` (no jumps)."""
    g = paths.grid
    xi_k = xi0 * np.exp(-delta * g.nodes[:-1]) * np.tanh(paths.B[:, :-1])
    log_M = np.zeros((paths.n_paths, g.n_nodes))
    np.cumsum(paths.dB * xi_k - 0.5 * xi_k**2 * g.dt, axis=1, out=log_M[:, 1:])
    return GirsanovWeight(log_M, g.T_max, {"truncated_at": g.T_max, "xi": "random"})


# -------------------------------------------------------------------- commands
def cmd_resolvent(cfg, out):
    threads = _threads(cfg)
    grid = _grid(cfg["grid"], cfg["lam"])
    kernel = build_kernel(cfg["kernel"])
    try:
        kernel.check_decay(grid)
    except InvalidParameter as exc:
        raise AssumptionViolated("A1", f"kernel decay: {exc}") from exc
    rule = VolterraRule(grid, kernel.eval)
    rc = cfg["relaxed_contraction"]
    ny = resolvent_nystrom(kernel, grid, cfg["lam"], rc, threads, rule)
    se = resolvent_series(kernel, cfg["lam"], cfg["series_tol"], grid, rc, threads, rule=rule)
    res = resolvent_residual_table(ny, kernel, rule)
    ny.to_csv(os.path.join(out, "resolvent.csv"), kernel, res)
    diag = {
        "L_lambda": ny.L_lambda,
        "residual": float(np.max(np.abs(res))),
        "series_terms_used": se.series_terms_used,
        "series_tail_estimate": se.tail_estimate,
        "cross_method_max_diff": float(np.max(np.abs(ny.values - se.values))),
        "kernel": kernel.label,
    }
    if kernel.resolvent_exact is not None and cfg["kernel"]["type"] == "example1":
        x = grid.nodes
        jj, kk = np.triu_indices(grid.n_nodes)
        ex = kernel.resolvent_exact(x[jj], x[kk])
        diag["closed_form_max_rel_err"] = float(np.max(np.abs(ny.values[jj, kk] - ex) / np.abs(ex)))
    write_json(os.path.join(out, "diagnostics.json"), {"meta": _meta("resolvent", cfg, grid), "diagnostics": diag})
    return EXIT_OK, diag


def _problem(cfg, grid):
    x = cfg["xi"]
    random_xi = x["type"] == "random"
    if random_xi and cfg["zk"]:
        raise AssumptionViolated("deterministic-coefficients", DETERMINISTIC_REQUIRED)
    j = cfg["jumps"]
    js = None
    if j is not None:
        if len(j["marks"]) != len(j["rates"]) or not j["marks"]:
            raise ConfigError("jumps.marks and jumps.rates need the same non-zero length")
        if random_xi:
            raise ConfigError("random xi is only available without jumps")
        js = JumpSpec.constant(j["beta0"], tuple(j["marks"]), tuple(j["rates"]))
    return BSVIEProblem(build_kernel(cfg["kernel"]), build_driver(cfg["driver"]),
                        None if random_xi else build_xi(x), js, cfg["lam"], cfg["relaxed_contraction"],
                        random_xi, grid)


def cmd_solve(cfg, out):
    threads = _threads(cfg)
    grid = _grid(cfg["grid"], cfg["lam"])
    problem = _problem(cfg, grid)
    validation = problem.validate(grid)
    res = resolvent_nystrom(problem.kernel, grid, cfg["lam"], cfg["relaxed_contraction"], threads)
    n_marks = problem.jump_spec.n_marks if problem.jump_spec is not None else 0
    marks = tuple(problem.jump_spec.marks) if n_marks else ()
    rows = sorted({grid.index_of(grid.nodes[int(np.argmin(np.abs(grid.nodes - t)))]) for t in cfg["zk_rows"]})
    needs_paths = problem.driver.stochastic or cfg["zk"]
    diag = {"validation": validation, "L_lambda": res.L_lambda, "driver": problem.driver.label,
            "kernel": problem.kernel.label}
    paths = weights = mc = Y_det = zk = None
    if needs_paths:
        paths = simulate_paths(grid, cfg["mc"]["n_paths"], problem.jump_spec, cfg["seed"], threads)
        if problem.random_coefficients:
            weights = random_xi_weights(paths, cfg["xi"]["xi0"], cfg["xi"]["delta"])
        else:
            weights = girsanov_weights(paths, problem.xi, problem.jump_spec)
    basis = BasisSpec(cfg["mc"]["degree"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RegressionSingular)
        if problem.driver.stochastic:
            mc = solve_y_mc(problem, res, paths, weights, basis)
            wT = weights.terminal / weights.terminal.sum()
            Y = wT @ mc.Y_paths
            Y0, Y0_ci = mc.Y0, mc.Y0_ci
        else:
            Y = Y_det = solve_y_deterministic(problem, res)
            Y0, Y0_ci = float(Y[0]), 0.0
        Zs = np.zeros((grid.n_nodes, grid.n_nodes))
        Ks = np.zeros((grid.n_nodes, grid.n_nodes, n_marks))
        if cfg["zk"]:
            zk = solve_zk(problem, paths, weights, rows, mc=mc, Y=Y_det, basis=basis)
            Zs, Ks = zk_surfaces(zk, grid, weights, n_marks)
    diag["regression_warnings"] = sorted({str(w.message) for w in caught})
    diag.update({"Y0": Y0, "Y0_ci": Y0_ci, "zk_rows": [float(grid.nodes[i]) for i in rows] if cfg["zk"] else []})
    if paths is not None:
        diag["n_paths"] = paths.n_paths
    sol = SolutionTriple(grid, Y, Zs, Ks, marks, Y0, Y0_ci, {"lam": cfg["lam"]})
    verdicts = run_verifiers(cfg, problem, grid, sol, paths, weights, mc, zk, rows, basis)
    diag["verifiers"] = verdicts
    write_solution_csv(sol, out)
    write_json(os.path.join(out, "diagnostics.json"), {"meta": _meta("solve", cfg, grid), "diagnostics": diag})
    failed = [v["name"] for v in verdicts if not v["pass"]]
    return (EXIT_CHECK if failed else EXIT_OK), diag


def run_verifiers(cfg, problem, grid, sol, paths, weights, mc, zk, rows, basis):
    tol = cfg["tolerances"]
    out = []
    for name in cfg["verifiers"]:
        if name == "finite":
            out.append({"name": name, "pass": bool(sol.check_finite())})
        elif name == "picard":
            if problem.driver.stochastic:
                raise ConfigError("verifier picard needs a deterministic driver")
            pic = picard_iterate(problem, grid, 500, tol["picard"] * 1e-2)
            err = float(np.max(np.abs(pic.Y - sol.Y)))
            out.append({"name": name, "error": err, "tol": tol["picard"], "iterations": len(pic.history),
                        "max_ratio": max(pic.ratios) if pic.ratios else 0.0, "pass": err <= tol["picard"]})
        elif name in ("martingale_representation", "m_solution"):
            if zk is None:
                raise ConfigError(f"verifier {name} needs zk=true")
            qp = q_shifted_increments(paths, problem.xi, problem.jump_spec)
            for i in rows:
                K = zk.K[i] if zk.K[i].shape[2] else None
                if name == "martingale_representation":
                    r = verify_martingale_representation(zk.U[i], zk.Z[i], K, qp, i)
                    out.append({"name": name, **r, "tol": tol["representation_relative"],
                                "pass": r["relative"] <= tol["representation_relative"]})
                else:
                    Yp = mc.Y_paths if mc is not None else sol.Y
                    t = float(grid.nodes[i])
                    r = verify_m_solution(Yp, zk.Z[i], K, paths, weights, t, t, problem, basis)
                    out.append({"name": name, **r, "tol": tol["m_solution_rms"],
                                "pass": r["Q"]["rms"] <= tol["m_solution_rms"]})
    return out


def cmd_example1(cfg, out):
    from .apps import example1_report
    grid = _grid(cfg["grid"], cfg["lam"])
    rep = example1_report(cfg["alpha"], cfg["gamma"], cfg["mu"], cfg["lam"], grid, cfg["tol"],
                          threads=_threads(cfg))
    curves = rep.pop("curves")
    _write_curves(os.path.join(out, "curves.csv"), curves)
    write_json(os.path.join(out, "report.json"), {"meta": _meta("example1", cfg, grid), "report": rep})
    return (EXIT_OK if rep["pass"] else EXIT_CHECK), rep


def cmd_example2(cfg, out):
    from .apps import example2_report
    grid = _grid(cfg["grid"], cfg["lam"])
    mc = cfg["mc"]
    mc_cfg = None if mc is None else {**mc, "seed": cfg["seed"]}
    rep = example2_report(grid=grid, lam=cfg["lam"], tol=cfg["tol"], mc_config=mc_cfg, threads=_threads(cfg))
    curves = rep.pop("curves")
    _write_curves(os.path.join(out, "curves.csv"), curves)
    write_json(os.path.join(out, "report.json"), {"meta": _meta("example2", cfg, grid), "report": rep})
    return (EXIT_OK if rep["pass"] else EXIT_CHECK), rep


def cmd_control(cfg, out):
    from .apps import ControlProblem, control_comparison, control_demo, ou_cost_closed_form
    grid = _grid(cfg["grid"], 2.0)
    prob = ControlProblem(cfg["a"], cfg["b0"], cfg["kappa"], cfg["c"], cfg["rho"], cfg["sigma"], cfg["x0"],
                          grid, cfg["n_paths"], cfg["seed"], cfg["explosion_cap"])
    threads = _threads(cfg)
    gain = cfg["control"]["gain"]
    zero = cfg["control"]["type"] == "zero"
    control = None if zero else (lambda t, x, m: -gain * x)
    demo = control_demo(prob, control, threads)
    checks = []
    if zero and cfg["b0"] == 0.0 and cfg["rho"] > 2 * cfg["a"]:
        exact = ou_cost_closed_form(cfg["a"], cfg["rho"], cfg["sigma"], cfg["x0"])
        if cfg["sigma"] == 0.0:
            err = abs(demo["J"] - exact)
            checks.append({"name": "deterministic_closed_form", "error": err, "tol": 1e-8, "exact": exact,
                           "pass": err <= 1e-8})
        elif cfg["a"] < 0:
            z = (demo["J"] - exact) / demo["std_err"] if demo["std_err"] > 0 else math.inf
            checks.append({"name": "ou_closed_form", "z": z, "tol": 3.0, "exact": exact, "pass": abs(z) <= 3.0})
    rep = {"J": demo["J"], "ci": demo["ci"], "std_err": demo["std_err"], "tail_estimate": demo["tail_estimate"],
           "n_paths": demo["n_paths"], "checks": checks}
    if cfg["compare"]:
        rep["comparison"] = control_comparison(prob, cfg["h0"], cfg["mu"], cfg["adjoint_lam"], threads=threads)
    rep["pass"] = all(c["pass"] for c in checks)
    _write_curves(os.path.join(out, "moments.csv"),
                  {"t": grid.nodes, "X_mean": demo["X_mean"], "X_sq_mean": demo["X_sq_mean"]})
    write_json(os.path.join(out, "report.json"), {"meta": _meta("control", cfg, grid), "report": rep})
    return (EXIT_OK if rep["pass"] else EXIT_CHECK), rep


def cmd_selftest(cfg, out, echo=print):
    from .acceptance import run_all
    outcomes = run_all(set(cfg["only"]) or None, echo=echo)
    payload = {"meta": _meta("selftest", cfg, None),
               "criteria": [{"number": o.number, "title": o.title, "pass": o.passed, "detail": o.detail}
                            for o in outcomes]}
    write_json(os.path.join(out, "selftest.json"), payload)
    return (EXIT_OK if all(o.passed for o in outcomes) else EXIT_CHECK), payload


COMMANDS = {"resolvent": cmd_resolvent, "solve": cmd_solve, "example1": cmd_example1,
            "example2": cmd_example2, "control": cmd_control, "selftest": cmd_selftest}


# ------------------------------------------------------------------------ main
def build_parser():
    p = argparse.ArgumentParser(prog="bsvie", description="Linear infinite-horizon BSVIE solver.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a (dotted) config key; the value is parsed as JSON")
        sp.add_argument("--out", help="output directory (default: config 'output' or ./bsvie-<command>)")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return p


def _summary(command, code, result):
    if command == "resolvent":
        keys = ("L_lambda", "cross_method_max_diff", "residual")
    elif command == "solve":
        keys = ("Y0", "Y0_ci", "L_lambda")
    else:
        keys = ("Y0", "J", "ci", "pass")
    parts = [f"{k}={result[k]}" for k in keys if isinstance(result, dict) and k in result]
    return f"{command}: exit {code}" + (": " + ", ".join(parts) if parts else "")


def main(argv=None, quiet=False):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    echo = (lambda *a, **k: None) if quiet else print
    err = (lambda msg: None) if quiet else (lambda msg: print(f"error: {msg}", file=sys.stderr))
    try:
        cfg = load_config(args.command, args.config, args.overrides)
        if args.print_config:
            echo(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        out = args.out or cfg["output"] or f"bsvie-{args.command}"
        os.makedirs(out, exist_ok=True)
        if args.command == "selftest":
            code, result = cmd_selftest(cfg, out, echo)
        else:
            code, result = COMMANDS[args.command](cfg, out)
    except (ConfigError, InvalidParameter) as exc:
        err(str(exc))
        return EXIT_CONFIG
    except (AssumptionViolated, ContractionViolated, MeasureDegenerate, Divergent) as exc:
        err(str(exc))
        return EXIT_ASSUMPTION
    except (NumericError, NoConvergence, InstabilityDetected) as exc:
        err(f"{type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        err(str(exc))
        return EXIT_CONFIG
    echo(_summary(args.command, code, result))
    if code == EXIT_CHECK:
        err("one or more checks failed; see the JSON output")
    return code


if __name__ == "__main__":
    sys.exit(main())

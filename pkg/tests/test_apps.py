import math

import numpy as np
import pytest
from scipy import integrate

from bsvie import ContractionViolated, InvalidParameter, build_graded_grid
from bsvie.apps import (ControlProblem, adjoint_candidate, control_comparison, control_demo, example1_report,
                        example2_report, formula_oracle, ode_oracle, ou_cost_closed_form)
from bsvie.errors import InstabilityDetected


@pytest.fixture(scope="module")
def ex1_report():
    return example1_report()


def test_example1_all_checks_pass(ex1_report):
    failing = [c["name"] for c in ex1_report["checks"] if not c["pass"]]
    assert not failing
    assert ex1_report["Y0"] == pytest.approx(1.2, abs=1e-6)
    assert ex1_report["L_lambda"] == pytest.approx(1 / 6, abs=1e-10)


def test_example1_is_bit_reproducible(ex1_report):
    again = example1_report()
    assert np.array_equal(again["curves"]["Y"], ex1_report["curves"]["Y"])
    assert again["checks"] == ex1_report["checks"]


def test_example1_rejects_gamma_below_alpha():
    with pytest.raises(ContractionViolated):
        example1_report(alpha=2.0, gamma=1.0)
    with pytest.raises(InvalidParameter):
        example1_report(mu=0.0)


def test_example2_three_routes():
    rep = example2_report()
    assert rep["pass"]
    for v in rep["Y0"].values():
        assert v == pytest.approx(0.5, abs=1e-6)
    # Y(t) = e^{-t} / 2 for phi = -1, h = e^{-s}
    t = rep["curves"]["t"]
    assert np.max(np.abs(rep["curves"]["Y_resolvent"] - 0.5 * np.exp(-t))) <= 1e-6


def test_example2_z_rows_agree():
    rep = example2_report(mc_config={"n_paths": 1000, "seed": 3})
    assert rep["pass"]
    assert rep["mc"]["max_row_diff"] <= 1e-6
    assert len(rep["mc"]["rows"]) == 3


def test_example2_time_dependent_phi():
    phi = lambda s: -np.exp(-np.asarray(s, dtype=float))  # noqa: E731
    h = lambda s: np.exp(-np.asarray(s, dtype=float))  # noqa: E731
    g = build_graded_grid(20.0, 40, 8, 1.0, 4.0)
    rep = example2_report(phi, h, grid=g, lam=4.0, phi_antiderivative=lambda s: np.exp(-np.asarray(s, dtype=float)),
                          phi_bound=1.0, psi_grid=build_graded_grid(10.0, 20, 8, 1.0, 4.0))
    assert rep["pass"]
    # closed form: int_0^inf exp(e^{-s} - 1) e^{-s} ds = 1 - e^{-1}
    assert rep["Y0"]["formula"] == pytest.approx(1 - math.exp(-1), abs=1e-10)


def test_oracles_agree_on_simple_case():
    phi = lambda s: -2.0 * np.ones_like(s)  # noqa: E731
    h = lambda s: np.exp(-s)  # noqa: E731
    # y' = 2y - e^{-t}, bounded solution y = e^{-t}/3
    x = np.linspace(0, 5, 11)
    assert np.allclose(ode_oracle(phi, h, x), np.exp(-x) / 3, atol=1e-10)
    assert formula_oracle(phi, h, 1.0) == pytest.approx(math.exp(-1) / 3, rel=1e-10)


def test_control_deterministic_limit():
    out = control_demo(ControlProblem(a=-1.0, rho=1.0, sigma=0.0, x0=1.0, n_paths=4, seed=1))
    assert ou_cost_closed_form(-1.0, 1.0, 0.0, 1.0) == pytest.approx(1 / 3)
    assert out["J"] == pytest.approx(1 / 3, abs=1e-8)
    assert out["ci"] == 0.0


def test_control_ou_cost_within_three_sigma():
    out = control_demo(ControlProblem(a=-1.0, rho=1.0, sigma=1.0, x0=1.0, n_paths=40_000, seed=2))
    assert ou_cost_closed_form(-1.0, 1.0, 1.0, 1.0) == pytest.approx(2 / 3)
    assert abs(out["J"] - 2 / 3) <= 3 * out["std_err"]


def test_control_memory_against_ode():
    # dX = (a X + m) dt, dm = (b0 X - kappa m) dt; cost int e^{-rho t} X^2 dt
    a, b0, kappa, rho = -2.0, 0.5, 1.0, 1.0
    g = build_graded_grid(30.0, 120, 8, 1.0, 2.0)
    out = control_demo(ControlProblem(a=a, b0=b0, kappa=kappa, rho=rho, sigma=0.0, grid=g, n_paths=2, seed=0))

    def rhs(t, y):
        X, m, _ = y
        return [a * X + m, b0 * X - kappa * m, math.exp(-rho * t) * X**2]

    sol = integrate.solve_ivp(rhs, (0, 60.0), [1.0, 0.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    assert out["J"] == pytest.approx(sol.y[2, -1], rel=2e-2)


def test_control_reproducibility_and_guards():
    p = ControlProblem(sigma=1.0, n_paths=500, seed=4)
    assert control_demo(p)["J"] == control_demo(p)["J"]
    assert control_demo(p)["J"] != control_demo(ControlProblem(sigma=1.0, n_paths=500, seed=5))["J"]
    with pytest.raises(InstabilityDetected):
        control_demo(ControlProblem(a=3.0, sigma=0.0, n_paths=2, explosion_cap=1e3))
    for bad in (dict(rho=0.0), dict(kappa=0.0), dict(sigma=-1.0)):
        with pytest.raises(InvalidParameter):
            ControlProblem(**bad)


def test_adjoint_candidate_and_comparison():
    p = ControlProblem(a=-1.0, c=1.0, rho=1.0, sigma=0.5, n_paths=2000, seed=3)
    Y, u = adjoint_candidate(p, h0=0.0)
    assert np.all(Y == 0.0) and np.all(u == 0.0)
    Y, u = adjoint_candidate(p)
    assert np.allclose(u, -Y)
    cmp = control_comparison(p, probe_eps=(1e-1,))
    assert set(cmp["ranking"]) == {"zero", "adjoint_candidate", "random_bounded"}
    costs = [cmp["costs"][k]["J"] for k in cmp["ranking"]]
    assert costs == sorted(costs)
    assert not cmp["candidate_trivial"]
    assert len(cmp["stationarity_probes"]) == 2

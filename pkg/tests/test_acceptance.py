"""Acceptance criteria 1-13, one test each.

Every test prints a single ``[criterion k] PASS|FAIL ...`` line (visible
without ``-s``) before asserting, so a full run doubles as a scorecard.
"""

import numpy as np
import pytest

from conftest import gaussian_u0, make_case
from weightedfp.config import initial_field
from weightedfp.model import Potential, norm_l1_rho
from weightedfp.mckean_vlasov import (
    compare_marginals,
    field_moments,
    gaussian_l1_error,
    linearized_flow_check,
    moments,
    ou_exact_marginal,
    sample_from_field,
    self_sampling_baseline,
    simulate_pde_driven,
)
from weightedfp.resolvent import ResolventConfig
from weightedfp.semigroup import (
    bump_test_function,
    check_semigroup_property,
    evolve,
    gaussian_test_function,
    weak_form_residual,
)
from weightedfp.validation import consistency_check, identity_checks, resolvent_trials, sbp_checks

POT = Potential("quadratic", (1.0,), 1)


@pytest.fixture
def report(capsys):
    def emit(k: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {k:2d}] {'PASS' if passed else 'FAIL'}  {detail}")

    return emit


def orders(errs):
    e = np.asarray(errs)
    return np.log2(e[:-1] / e[1:])


def test_c01_sbp_duality_and_symmetry(report):
    rng = np.random.default_rng(1)
    worst = {"sbp_duality": 0.0, "L_symmetry": 0.0}
    ok = True
    for n, d in ((64, 1), (256, 1), (32, 2)):
        _, ops = make_case("pm", n, d=d)
        for chk in sbp_checks(ops, rng, pairs=50):
            worst[chk.name] = max(worst[chk.name], chk.value)
            ok &= chk.passed
    report(1, ok, f"duality {worst['sbp_duality']:.2e} (<=1e-13), symmetry {worst['L_symmetry']:.2e} (<=1e-12)")
    assert ok


@pytest.fixture(scope="module")
def trials():
    out = {}
    for kind in ("pm", "ou_drift"):
        _, ops = make_case(kind, 128)
        out[kind] = resolvent_trials(ops, np.random.default_rng(2), 100)
    return out


def test_c02_resolvent_contraction(trials, report):
    fails = sum(t["failures"]["contraction"] for t in trials.values())
    worst = max(t["worst"]["contraction"] for t in trials.values())
    report(2, fails == 0, f"200 trials (pm, ou+drift), worst ratio {worst:.12f} (<=1+1e-8)")
    assert fails == 0


def test_c03_resolvent_identity(report):
    _, ops = make_case("pm", 128)
    chk = identity_checks(ops, np.random.default_rng(3), 20)
    report(3, chk.passed, f"20 trials, worst residual/tol {chk.value:.2e} (<=10)")
    assert chk.passed


def test_c04_linf_positivity_mass(trials, report):
    f = {k: sum(t["failures"][k] for t in trials.values()) for k in ("linf", "positivity", "mass")}
    w = {k: max(t["worst"][k] for t in trials.values()) for k in f}
    ok = not any(f.values())
    report(4, ok, f"linf excess {w['linf']:.2e}, negativity {w['positivity']:.2e}, mass drift {w['mass']:.2e}")
    assert ok


def test_c05_resolvent_consistency(report):
    ok = True
    details = []
    for kind in ("pm", "ou_drift"):
        _, ops = make_case(kind, 128)
        chk = consistency_check(ops)
        ok &= chk.passed
        details.append(f"{kind} spread {chk.value:.3f}")
    report(5, ok, ", ".join(details) + " (<=0.5)")
    assert ok


def test_c06_exponential_formula_convergence(report):
    ok = True
    details = []
    for kind, u0_args in (("ou", ("gaussian", (1.0, 0.04))), ("pm", ("bump", (0.5, 1.0)))):
        prob, ops = make_case(kind, 128)
        u0 = initial_field(prob, *u0_args)
        finals = {n: evolve(ops, u0, 1.0, n).final for n in (16, 32, 64, 128, 256)}
        diffs = [norm_l1_rho(finals[2 * n] - finals[n], prob.grid, prob.weight) for n in (16, 32, 64, 128)]
        p = orders(diffs)
        good = bool(np.all(np.diff(diffs) < 0) and np.all(p >= 0.8))
        ok &= good
        details.append(f"{kind} orders " + "/".join(f"{x:.3f}" for x in p))
    report(6, ok, ", ".join(details) + " (>=0.8, monotone)")
    assert ok


def test_c07_ou_oracle(report):
    prob, ops = make_case("ou", 512)
    u0 = gaussian_u0(prob, 1.0, 0.04)
    traj = evolve(ops, u0, 1.0, 256)
    errs = []
    for t in (0.25, 0.5, 1.0):
        k = int(np.argmin(np.abs(traj.times - t)))
        m, v = ou_exact_marginal(1.0, 0.04, 1.0, t, theta=0.5)  # beta = r/2: theta = 1/2, sigma = 1
        errs.append(gaussian_l1_error(prob.grid, prob.weight, traj.fields[k], m, v))
    ok = max(errs) <= 2e-2
    report(7, ok, "L1 errors " + "/".join(f"{e:.2e}" for e in errs) + " (<=2e-2)")
    assert ok


def test_c08_stationarity(report):
    prob, ops = make_case("ou", 256)
    u0 = initial_field(prob, "stationary", ())
    drift = norm_l1_rho(evolve(ops, u0, 1.0, 64).final - u0, prob.grid, prob.weight)
    report(8, drift <= 1e-9, f"|u(1) - u0| = {drift:.2e} (<=1e-9)")
    assert drift <= 1e-9


def test_c09_semigroup_property(report):
    ok = True
    details = []
    for kind in ("ou", "pm"):
        prob, ops = make_case(kind, 128)
        u0 = initial_field(prob, "bump", (0.5, 1.0))
        matched = check_semigroup_property(ops, u0, 0.5, 0.5, 32)
        # s-leg at twice the step of the t-leg
        mism = [check_semigroup_property(ops, u0, 0.5, 0.5, n, n_s=n // 4, n_t=n // 2) for n in (16, 32, 64, 128)]
        p = orders(mism)
        good = matched <= 1e-10 and bool(np.all(np.diff(mism) < 0) and np.all(p >= 0.8))
        ok &= good
        details.append(f"{kind} matched {matched:.1e}, mismatched orders " + "/".join(f"{x:.2f}" for x in p))
    report(9, ok, "; ".join(details))
    assert ok


def test_c10_weak_form_residual(report):
    phis = (gaussian_test_function(0.0, 1.0), bump_test_function(0.5, 3.0))
    res = {i: [] for i in range(len(phis))}
    for n, steps in ((64, 16), (128, 32), (256, 64), (512, 128)):
        prob, ops = make_case("ou", n)
        traj = evolve(ops, gaussian_u0(prob, 1.0, 0.04), 1.0, steps)
        for i, phi in enumerate(phis):
            res[i].append(weak_form_residual(traj, ops, POT, phi))
    p = [orders(r) for r in res.values()]
    ok = all(np.all(q >= 1.0) for q in p)
    report(10, ok, "orders " + "; ".join("/".join(f"{x:.3f}" for x in q) for q in p) + " (>=1)")
    assert ok


def test_c11_particle_superposition(report):
    prob, ops = make_case("ou", 256)
    g, w = prob.grid, prob.weight
    u0 = gaussian_u0(prob, 1.0, 0.04)
    traj = evolve(ops, u0, 1.0, 128)
    x0 = sample_from_field(g, w, u0, 100_000, np.random.default_rng([0, 1]))
    run = simulate_pde_driven(ops, POT, x0, traj, traj.h, 1.0, seed=0)
    ens = run.ensembles[-1]
    pm, fm = moments(ens.positions), field_moments(g, w, traj.final)
    z_mean = float(abs(pm["mean"][0] - fm["mean"][0]) / pm["se_mean"][0])
    z_var = float(abs(pm["var"][0] - fm["var"][0]) / pm["se_var"][0])
    _, w1 = compare_marginals(ens, g, w, traj.final)
    base = self_sampling_baseline(g, w, traj.final, ens.N, seed=0)
    ok = z_mean <= 3 and z_var <= 3 and w1 <= 3 * base
    report(11, ok, f"z_mean {z_mean:.2f}, z_var {z_var:.2f} (<=3), w1 {w1:.2e} vs 3x baseline {3 * base:.2e}")
    assert ok


def test_c12_linearized_flow(report):
    ok = True
    details = []
    s, t = 0.25, 1.0
    for kind in ("ou", "pm"):
        prob, ops = make_case(kind, 256)
        g, wt = prob.grid, prob.weight
        u0 = initial_field(prob, "bump", (0.5, 1.0))
        coarse, fine = evolve(ops, u0, t, 32), evolve(ops, u0, t, 64)
        e_imp = norm_l1_rho(coarse.final - fine.final, g, wt)
        lin = linearized_flow_check(ops, coarse, s, t)
        lin_half = linearized_flow_check(ops, coarse, s, t, dt=lin.dt / 2)
        e_exp = norm_l1_rho(lin.zeta - lin_half.zeta, g, wt)
        ratio = lin.residual / (e_imp + e_exp)
        ok &= ratio <= 5.0
        details.append(f"{kind} residual {lin.residual:.2e}, e_imp {e_imp:.2e}, e_exp {e_exp:.2e}, ratio {ratio:.2f}")
    report(12, ok, "; ".join(details) + " (ratio <=5)")
    assert ok


def test_c13_mutation_sensitivity(report):
    _, ops = make_case("pm", 128, upwind=False)
    res = resolvent_trials(ops, np.random.default_rng(2), 100, ResolventConfig())
    fails = res["failures"]["contraction"]
    report(13, fails >= 1, f"central fluxes: {fails}/100 contraction failures, "
           f"{res['failures']['positivity']} positivity failures (need >=1 contraction)")
    assert fails >= 1

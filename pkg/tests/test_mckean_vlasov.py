import math

import numpy as np
import pytest

from conftest import gaussian_u0, make_case
from weightedfp.model import Potential
from weightedfp.mckean_vlasov import (
    CFLViolation,
    ParticleEscape,
    compare_marginals,
    explicit_dt_limit,
    field_moments,
    kde_on_grid,
    linearized_flow_check,
    moments,
    ou_exact_marginal,
    ou_rates,
    reflect,
    sample_from_field,
    self_sampling_baseline,
    simulate_pde_driven,
    simulate_self_consistent,
    wasserstein1_samples,
    wasserstein1_to_field,
)
from weightedfp.semigroup import evolve

POT = Potential("quadratic", (1.0,), 1)


def test_ou_exact_marginal_examples():
    m, v = ou_exact_marginal(1.0, 0.04, 1.0, 0.0)
    assert m == 1.0 and v == 0.04
    m, v = ou_exact_marginal(1.0, 0.04, 1.0, 60.0)
    assert abs(m) < 1e-20 and v == pytest.approx(0.5)
    m, v = ou_exact_marginal(1.0, 0.0, 1.0, math.log(2.0))
    assert m == pytest.approx(0.5) and v == pytest.approx(0.375)
    assert ou_rates(0.5) == (0.5, 1.0)


def test_ou_marginal_against_em_oracle():
    # plain Euler-Maruyama, independent of the package's loop
    rng = np.random.default_rng(7)
    N, dt, T = 50_000, 1e-3, math.log(2.0)
    x = np.ones(N)
    for _ in range(int(round(T / dt))):
        x += -x * dt + math.sqrt(dt) * rng.standard_normal(N)
    m, v = ou_exact_marginal(1.0, 0.0, 1.0, T)
    assert abs(x.mean() - m) < 5 * math.sqrt(v / N) + 1e-3
    assert abs(x.var() - v) < 0.01


def test_w1_examples():
    assert wasserstein1_samples([-1.0], [1.0]) == pytest.approx(2.0)
    assert wasserstein1_samples([0.0, 1.0], [0.0, 1.0]) == 0.0


def test_w1_to_field_matches_quadrature():
    prob, _ = make_case("ou", 64)
    g, w = prob.grid, prob.weight
    u = gaussian_u0(prob, 0.0, 1.0)
    x = np.array([0.0])
    # W1(delta_0, v) = int |x| v dx for a piecewise-constant v: integrate each cell exactly
    v = u * w.cells
    a, b = g.faces[:-1], g.faces[1:]
    absint = np.where(a >= 0, (b**2 - a**2) / 2, np.where(b <= 0, (a**2 - b**2) / 2, (a**2 + b**2) / 2))
    assert wasserstein1_to_field(x, g, w, u) == pytest.approx(np.sum(v * absint) / np.sum(v * g.dx), rel=1e-10)


def test_compare_marginals_rejects_empty():
    prob, _ = make_case("ou", 32)
    with pytest.raises(ValueError):
        compare_marginals(np.empty((0, 1)), prob.grid, prob.weight, np.ones(32))


def test_sampling_and_baseline():
    prob, _ = make_case("ou", 256)
    g, w = prob.grid, prob.weight
    u = gaussian_u0(prob, 0.5, 0.25)
    x = sample_from_field(g, w, u, 100_000, np.random.default_rng(0))
    assert x.shape[0] == 100_000
    mom = moments(x)
    fm = field_moments(g, w, u)
    assert abs(mom["mean"][0] - fm["mean"][0]) < 5 * mom["se_mean"][0]
    assert self_sampling_baseline(g, w, u, 100_000, seed=1) < 5e-3
    l1, w1 = compare_marginals(x, g, w, u)
    assert l1 < 0.1 and w1 < 5e-3


def test_reflection():
    np.testing.assert_allclose(reflect(np.array([1.5, -1.25, 0.3]), 1.0), [0.5, -0.75, 0.3])
    with pytest.raises(ParticleEscape):
        reflect(np.array([5.5]), 1.0)  # still outside after both folds


def test_pde_driven_run_reproducible():
    prob, ops = make_case("ou", 128)
    u0 = gaussian_u0(prob)
    traj = evolve(ops, u0, 0.25, 8)
    x0 = sample_from_field(prob.grid, prob.weight, u0, 2000, np.random.default_rng(3))
    a = simulate_pde_driven(ops, POT, x0, traj, traj.h, 0.25, seed=11, record=(0.125,))
    b = simulate_pde_driven(ops, POT, x0, traj, traj.h, 0.25, seed=11, record=(0.125,))
    np.testing.assert_array_equal(a.ensembles[-1].positions, b.ensembles[-1].positions)
    np.testing.assert_allclose(a.times, [0.0, 0.125, 0.25])
    c = simulate_pde_driven(ops, POT, x0, traj, traj.h, 0.25, seed=12)
    assert not np.array_equal(a.ensembles[-1].positions, c.ensembles[-1].positions)
    assert a.diffusion_min == pytest.approx(1.0)  # 2 beta(u)/u = 1 for beta = r/2


def test_pde_driven_argument_checks():
    prob, ops = make_case("ou", 64)
    traj = evolve(ops, gaussian_u0(prob), 0.25, 4)
    x0 = np.zeros((10, 1))
    with pytest.raises(ValueError):
        simulate_pde_driven(ops, POT, x0, traj, traj.h, 0.5, seed=0)
    with pytest.raises(ValueError):
        simulate_pde_driven(ops, POT, x0, traj, 2 * traj.h, 0.25, seed=0)


def test_self_consistent_single_particle():
    _, ops = make_case("pm", 64)
    run = simulate_self_consistent(ops, POT, np.array([[0.3]]), None, 0.01, 0.05, seed=4)
    assert run.ensembles[-1].N == 1
    assert np.all(np.isfinite(run.ensembles[-1].positions))
    with pytest.raises(ValueError):
        simulate_self_consistent(ops, POT, np.array([[0.3]]), -1.0, 0.01, 0.05, seed=4)


def test_ou_particles_match_exact_law():
    prob, ops = make_case("ou", 128)
    u0 = gaussian_u0(prob, 1.0, 0.04)
    traj = evolve(ops, u0, 0.5, 16)
    rng = np.random.default_rng([5, 1])
    x0 = 1.0 + 0.2 * rng.standard_normal((20_000, 1))
    run = simulate_pde_driven(ops, POT, x0, traj, traj.h / 4, 0.5, seed=5)
    m, v = ou_exact_marginal(1.0, 0.04, 1.0, 0.5, theta=0.5)
    mom = moments(run.ensembles[-1].positions)
    assert abs(mom["mean"][0] - m) < 5 * mom["se_mean"][0] + 0.01
    assert abs(mom["var"][0] - v) < 5 * mom["se_var"][0] + 0.01


def test_kde_is_normalized():
    prob, _ = make_case("ou", 128)
    x = np.random.default_rng(2).normal(0, 1, (5000, 1))
    v = kde_on_grid(prob.grid, x)
    assert np.sum(v) * prob.grid.dx == pytest.approx(1.0, abs=1e-9)


def test_linearized_check_trivial_and_sensitive():
    prob, ops = make_case("pm", 128)
    traj = evolve(ops, gaussian_u0(prob, 0.5, 0.1), 0.5, 16)
    assert linearized_flow_check(ops, traj, 0.25, 0.25).residual == 0.0
    base = linearized_flow_check(ops, traj, 0.125, 0.5).residual
    pert = linearized_flow_check(ops, traj, 0.125, 0.5, frozen=lambda i, u: 1.5 * u).residual
    assert pert > 2 * base


def test_linearized_check_cfl():
    prob, ops = make_case("pm", 64)
    traj = evolve(ops, gaussian_u0(prob), 0.25, 4)
    limit = explicit_dt_limit(ops, traj.fields[1])
    with pytest.raises(CFLViolation):
        linearized_flow_check(ops, traj, 0.0, 0.25, dt=10 * limit)

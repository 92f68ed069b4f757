import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightedfp.model import (
    DEFAULT_MARGIN,
    Grid,
    HypothesisViolation,
    Potential,
    b_sup,
    build_problem,
    check_coefficients,
    default_radius,
    field_to_csv,
    h5_audit,
    inner_l2_rho,
    make_b,
    make_beta,
    make_coefficients,
    mass_rho,
    norm_l1_rho,
    norm_linf,
    normalize_probability,
    weight_from_potential,
)


def quad_weight(n=64, R=7.0):
    pot = Potential("quadratic", (1.0,), 1)
    g = Grid(1, R, n)
    return pot, g, weight_from_potential(pot, g)


def test_grid_geometry():
    g = Grid(1, 2.0, 8)
    assert g.dx == 0.5
    assert g.faces[0] == -2.0 and g.faces[-1] == 2.0
    np.testing.assert_allclose(g.centers, np.linspace(-1.75, 1.75, 8))
    g2 = Grid(2, 1.0, 4)
    assert g2.shape == (4, 4) and g2.size == 16 and g2.cell_volume == 0.25
    assert g2.cell_points().shape == (4, 4, 2)
    assert g2.face_points(0).shape == (5, 4, 2)


@pytest.mark.parametrize("args", [(1, 1.0, 3), (3, 1.0, 8), (1, -1.0, 8)])
def test_grid_rejects_bad_input(args):
    with pytest.raises(ValueError):
        Grid(*args)


def test_weight_values_at_points():
    pot = Potential("quadratic", (1.0,), 1)
    x = np.array([[0.0], [2.0]])
    np.testing.assert_allclose(np.exp(-pot.value(x)), [1.0, math.exp(-2.0)], rtol=1e-15)
    # cell centred at 0 exists for odd n
    g = Grid(1, 7.0, 7)
    w = weight_from_potential(pot, g)
    assert w.cells[3] == 1.0
    assert np.all((w.cells > 0) & (w.cells <= 1))


def test_face_weights_are_geometric_means():
    _, g, w = quad_weight(16)
    inner = w.faces[0][1:-1]
    np.testing.assert_allclose(inner, np.sqrt(w.cells[:-1] * w.cells[1:]), rtol=1e-14)


def test_face_weights_monotone_where_potential_is():
    _, g, w = quad_weight(32)
    f = w.faces[0]
    c = w.cells
    right = g.centers > 0
    # on x > 0 rho decreases: each interior face lies between its two cells
    for i in np.flatnonzero(right[:-1] & right[1:]):
        assert c[i + 1] <= f[i + 1] <= c[i]


def test_quartic_weight_builds_at_R3():
    pot = Potential("quartic", (1.0, 0.0), 1)
    assert float(pot.value(np.array([3.0]))) == 81.0
    w = weight_from_potential(pot, Grid(1, 3.0, 64))
    assert 0 < w.Z < np.inf


def test_total_mass_gaussian():
    _, _, w = quad_weight(512)
    assert abs(w.Z - math.sqrt(2 * math.pi)) < 1e-8


def test_default_radius_quadratic():
    pot = Potential("quadratic", (1.0,), 1)
    assert abs(default_radius(pot) - math.sqrt(2 * DEFAULT_MARGIN)) < 2e-6
    pot2 = Potential("quadratic", (1.0,), 2)
    assert abs(default_radius(pot2) - math.sqrt(2 * DEFAULT_MARGIN)) < 2e-6


def test_potential_gradient_and_laplacian_fd():
    rng = np.random.default_rng(0)
    for pot in (Potential("quadratic", (2.0,), 2), Potential("quartic", (0.5, 1.0), 2)):
        x = rng.uniform(-2, 2, (10, 2))
        h = 1e-5
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (pot.value(x + e) - pot.value(x - e)) / (2 * h)
            np.testing.assert_allclose(pot.gradient(x)[:, k], fd, rtol=1e-7, atol=1e-7)
        lap = sum(
            (pot.value(x + h * np.eye(2)[k]) - 2 * pot.value(x) + pot.value(x - h * np.eye(2)[k])) / h**2
            for k in range(2)
        )
        np.testing.assert_allclose(pot.laplacian(x), lap, rtol=1e-4, atol=1e-4)


def test_nonconvex_potential_rejected():
    pot = Potential("tabulated", (-10.0, 30.0, 0.0, 5.0, 1.0, 0.0, 10.0, 30.0), 1)
    with pytest.raises(HypothesisViolation) as err:
        weight_from_potential(pot, Grid(1, 9.0, 64))
    assert err.value.check == "convex"
    assert err.value.location is not None


def test_negative_potential_rejected():
    pot = Potential("tabulated", (-10.0, 30.0, 0.0, -1.0, 10.0, 30.0), 1)
    with pytest.raises(HypothesisViolation) as err:
        weight_from_potential(pot, Grid(1, 9.0, 64))
    assert err.value.check == "nonnegative"


def test_growth_margin_enforced():
    pot = Potential("quadratic", (1.0,), 1)
    with pytest.raises(HypothesisViolation) as err:
        weight_from_potential(pot, Grid(1, 3.0, 32))
    assert err.value.check == "growth"


def test_l1_norm_examples():
    _, g, w = quad_weight(32)
    assert norm_l1_rho(np.zeros(g.shape), g, w) == 0.0
    assert abs(norm_l1_rho(np.ones(g.shape), g, w) - w.Z) < 1e-15 * w.Z
    u = np.zeros(g.shape)
    u[5] = -3.0
    assert norm_l1_rho(u, g, w) == pytest.approx(3.0 * w.cells[5] * g.dx, rel=1e-15)


def test_shape_mismatch_raises():
    _, g, w = quad_weight(32)
    with pytest.raises(ValueError):
        norm_l1_rho(np.ones(31), g, w)
    with pytest.raises(ValueError):
        inner_l2_rho(np.ones(32), np.ones(30), g, w)


def test_linf_and_inner_products():
    _, g, w = quad_weight(32)
    assert norm_linf(np.full(g.shape, -3.0)) == 3.0
    e = np.eye(g.size)
    assert inner_l2_rho(e[2], e[7], g, w) == 0.0
    u = np.random.default_rng(1).standard_normal(g.shape)
    assert inner_l2_rho(u, u, g, w) >= 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_l1_norm_homogeneous_and_subadditive(seed, a):
    _, g, w = quad_weight(32)
    r = np.random.default_rng(seed)
    u, v = r.standard_normal((2, *g.shape))
    assert norm_l1_rho(a * u, g, w) == pytest.approx(abs(a) * norm_l1_rho(u, g, w), rel=1e-13, abs=1e-300)
    assert norm_l1_rho(u + v, g, w) <= norm_l1_rho(u, g, w) + norm_l1_rho(v, g, w) * (1 + 1e-14)


def test_normalize_probability():
    _, g, w = quad_weight(64)
    one = normalize_probability(np.ones(g.shape), g, w)
    np.testing.assert_allclose(one, 1.0 / w.Z, rtol=1e-14)
    bump = np.exp(-(g.centers - 0.3) ** 2)
    p = normalize_probability(bump, g, w)
    # independent re-summation
    assert abs(math.fsum(p * w.cells * g.dx) - 1.0) < 1e-14
    np.testing.assert_allclose(normalize_probability(p, g, w), p, rtol=1e-14)
    with pytest.raises(ValueError):
        normalize_probability(np.zeros(g.shape), g, w)
    with pytest.raises(ValueError):
        normalize_probability(-np.ones(g.shape), g, w)


def test_mass_is_signed():
    _, g, w = quad_weight(32)
    u = np.where(g.centers > 0, 1.0, -1.0)
    assert abs(mass_rho(u, g, w)) < 1e-14


def test_beta_families():
    for kind, params in [("linear", (0.5,)), ("porous_medium", (2.0, 1.0)), ("cubic", (1.0, 1.0))]:
        beta, dbeta, _ = make_beta(kind, params)
        r = np.linspace(-3, 3, 61)
        h = 1e-6
        np.testing.assert_allclose(dbeta(r), (beta(r + h) - beta(r - h)) / (2 * h), rtol=1e-6, atol=1e-6)
        assert beta(np.array(0.0)) == 0.0
    with pytest.raises(ValueError):
        make_beta("porous_medium", (1.0,))
    with pytest.raises(ValueError):
        make_beta("sine")


def test_saturating_b_derivative_and_sup():
    b, db = make_b("saturating", (1.0, 0.5))
    r = np.linspace(-4, 4, 81)
    h = 1e-6
    np.testing.assert_allclose(db(r), (b(r + h) - b(r - h)) / (2 * h), rtol=1e-6, atol=1e-8)
    pot = Potential("quadratic", (1.0,), 1)
    c = make_coefficients(pot, "linear", (1.0,), "saturating", (1.0, 0.5), "tanh", (1.0,))
    assert b_sup(c) == pytest.approx(1.5)
    assert b_sup(make_coefficients(pot)) == 0.0


def test_tanh_div_rho_matches_definition():
    pot = Potential("quadratic", (1.0,), 2)
    c = make_coefficients(pot, "linear", (1.0,), "constant", (1.0,), "tanh", (0.7,))
    x = np.random.default_rng(2).uniform(-3, 3, (20, 2))
    # div_rho D = div D - grad Phi . D
    h = 1e-6
    div = sum((c.D(x + h * np.eye(2)[k])[:, k] - c.D(x - h * np.eye(2)[k])[:, k]) / (2 * h) for k in range(2))
    expected = div - np.sum(pot.gradient(x) * c.D(x), axis=-1)
    np.testing.assert_allclose(c.div_rho_D(x), expected, rtol=1e-7, atol=1e-8)


def test_coefficient_checks():
    pot = Potential("quadratic", (1.0,), 1)
    check_coefficients(make_coefficients(pot, "porous_medium", (2.0, 1.0), "saturating", (1.0, 0.5)))
    with pytest.raises(HypothesisViolation):
        check_coefficients(make_coefficients(pot, "linear", (-1.0,)))
    with pytest.raises(HypothesisViolation):
        check_coefficients(make_coefficients(pot, "linear", (1.0,), "constant", (-1.0,)))


def test_h5_audit():
    pot = Potential("quadratic", (1.0,), 1)
    c = make_coefficients(pot, "linear", (1.0,), "constant", (2.0,))
    out = h5_audit(c, -3.0, 3.0)
    # |b' r + b| = 2, beta' = 1
    assert out["ok"] and out["alpha"] == pytest.approx(2.0)
    pm = make_coefficients(pot, "porous_medium", (2.0, 1.0), "constant", (1.0,))
    assert not h5_audit(pm, -1.0, 1.0)["ok"]  # beta'(0) = 0 while b(0) != 0


def test_build_problem_default_radius():
    pot = Potential("quadratic", (1.0,), 1)
    prob = build_problem(pot, make_coefficients(pot), 64)
    assert prob.grid.R == pytest.approx(math.sqrt(2 * DEFAULT_MARGIN), abs=2e-6)
    assert prob.weight.faces[0][0] / 1.0 <= 1e-8 * (1 + 1e-6)


def test_field_csv(tmp_path):
    _, g, w = quad_weight(8)
    u = np.arange(8.0)
    path = tmp_path / "f.csv"
    field_to_csv(path, u, g, w)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert path.read_text().splitlines()[0] == "x,rho,u,v"
    np.testing.assert_array_equal(data[:, 0], g.centers)
    np.testing.assert_array_equal(data[:, 2], u)
    np.testing.assert_allclose(data[:, 3], u * w.cells, rtol=1e-16)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zaremba import geometry
from zaremba.blocks import Base, BlockSet, Lateral, Slab
from zaremba.mesh import DIRICHLET, mesh_disk_annulus, mesh_strip
from zaremba.operators import CoefficientMap
from zaremba.solver import (DiscreteField, MixedProblem, NonConvergence, ball_problem, comparison_check,
                            energy_of, l2_error, lkappa_norm, pullback, pushforward, residual_vector, solve,
                            strip_problem)

LAPLACE = CoefficientMap.p_laplace(2.0)


def sine_exp(x):
    return np.exp(0.5 * np.pi * x[:, 1]) * np.sin(0.5 * np.pi * x[:, 0])


def height(x):
    return x[:, 1].copy()


@pytest.mark.parametrize("amap", [LAPLACE, CoefficientMap.p_laplace(1.5), CoefficientMap.exp_dir([0.4, 0.3])])
def test_constant_data(amap):
    r = solve(strip_problem(amap, 2.0, 0.2, lambda x: np.full(len(x), 3.25)))
    assert np.array_equal(r.field.values, np.full(r.field.mesh.n_vertices, 3.25))
    assert r.residual_norm == 0.0 and r.converged


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_linear_solution_is_reproduced(p):
    r = solve(strip_problem(CoefficientMap.p_laplace(p), 2.0, 0.1, height))
    assert r.converged and r.residual_norm <= 1e-10
    assert np.max(np.abs(r.field.values - r.field.mesh.vertices[:, 1])) <= 1e-6


def test_dirichlet_values_are_attained_exactly():
    prob = strip_problem(CoefficientMap.p_laplace(3.0), 2.0, 0.1, sine_exp)
    r = solve(prob)
    fixed = prob.fixed
    assert np.array_equal(r.field.values[fixed], prob.dirichlet_values[fixed])


@pytest.mark.parametrize("amap", [LAPLACE, CoefficientMap.p_laplace(1.5), CoefficientMap.p_laplace(3.0),
                                  CoefficientMap.exp_dir([0.5, 0.0])])
def test_residual_is_small_on_free_vertices(amap):
    prob = strip_problem(amap, 2.0, 0.1, lambda x: x[:, 0] ** 2 + np.sin(x[:, 1]))
    r = solve(prob)
    res = residual_vector(prob, r.field.values, eps=prob.eps_schedule[-1])
    assert np.max(np.abs(res[~prob.fixed])) <= prob.tol


def test_sine_exp_converges_at_second_order():
    errs = [l2_error(solve(strip_problem(LAPLACE, 2.0, h, sine_exp)).field, sine_exp) for h in (0.1, 0.05)]
    assert 3.2 <= errs[0] / errs[1] <= 4.8


@pytest.mark.parametrize("amap", [CoefficientMap.p_laplace(1.5), CoefficientMap.exp_dir([0.3, 0.3])])
def test_translation_invariance(amap):
    f = lambda x: x[:, 0] ** 2 + 0.3 * x[:, 1]
    r1 = solve(strip_problem(amap, 2.0, 0.1, f))
    r2 = solve(strip_problem(amap, 2.0, 0.1, lambda x: f(x) + 1.0))
    assert np.max(np.abs(r2.field.values - r1.field.values - 1.0)) < 1e-8


def test_comparison_examples():
    base = lambda x: x[:, 0] ** 2
    mk = lambda g: strip_problem(LAPLACE, 4.0, 0.1, g, lid="natural")
    r1, r1b = solve(mk(base)), solve(mk(base))
    assert comparison_check(r1, r1b) and comparison_check(r1b, r1)
    r2 = solve(mk(lambda x: base(x) + 0.5))
    assert comparison_check(r1, r2)
    with pytest.raises(ValueError):
        comparison_check(r2, r1)


def test_comparison_rejects_different_meshes():
    r1 = solve(strip_problem(LAPLACE, 2.0, 0.1, height))
    r2 = solve(strip_problem(LAPLACE, 2.0, 0.2, height))
    with pytest.raises(ValueError):
        comparison_check(r1, r2)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_comparison_ordering_nonlinear(p):
    mk = lambda g: strip_problem(CoefficientMap.p_laplace(p), 3.0, 0.1, g, lid="natural")
    r1 = solve(mk(lambda x: np.sin(3 * x[:, 0])))
    r2 = solve(mk(lambda x: np.sin(3 * x[:, 0]) + 0.1 * (1 + x[:, 0])))
    assert comparison_check(r1, r2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1e-1))
def test_solution_minimizes_discrete_energy(seed, size):
    prob = strip_problem(CoefficientMap.p_laplace(3.0), 1.0, 0.2, lambda x: x[:, 0] ** 3 + x[:, 1])
    r = solve(prob)
    v = r.field.values.copy()
    free = ~prob.fixed
    v[free] += size * np.random.default_rng(seed).normal(size=free.sum())
    assert energy_of(prob, v) >= r.energy - 1e-12


def test_energy_below_initial_guess():
    prob = strip_problem(CoefficientMap.p_laplace(1.5), 2.0, 0.1, sine_exp)
    r = solve(prob)
    lifted = np.where(prob.fixed, prob.dirichlet_values, np.mean(prob.dirichlet_values[prob.fixed]))
    assert r.energy <= energy_of(prob, lifted)


def test_nonconvergence_is_reported():
    with pytest.raises(NonConvergence) as exc:
        solve(strip_problem(CoefficientMap.p_laplace(3.0), 2.0, 0.1, sine_exp, max_iter=1))
    assert exc.value.iterations == 1 and exc.value.report is not None
    assert not exc.value.report.converged


def test_problem_validation():
    m = mesh_strip(1.0, 0.5)
    d = np.full(m.n_vertices, np.nan)
    with pytest.raises(ValueError):
        MixedProblem(LAPLACE, m, d)
    d[m.tagged_vertices(DIRICHLET)] = 0.0
    for kw in (dict(tol=0.0), dict(eps_schedule=(1e-2, 1e-3)), dict(eps_schedule=(1e-3, 1e-2, 1e-9))):
        with pytest.raises(ValueError):
            MixedProblem(LAPLACE, m, d, **kw)
    with pytest.raises(ValueError):
        MixedProblem(LAPLACE, m, d[:-1])


def test_interior_blocks_are_constrained():
    F = BlockSet((Base(), Lateral(1.0, 1.5), Slab(2.0, 2.0, 0.5)))
    prob = strip_problem(LAPLACE, 3.0, 0.25, lambda x: np.full(len(x), 1.0), blocks=F, lid="natural")
    x = prob.mesh.vertices
    assert np.array_equal(prob.fixed, F.contains(x))
    r = solve(prob)
    assert np.allclose(r.field.values, 1.0)


# ---------------------------------------------------------------- ball side

def test_radial_solution_in_the_ball():
    prob = ball_problem(LAPLACE, lambda x: np.zeros(len(x)), delta=math.exp(-2), inner="dirichlet",
                        inner_value=2.0, rings=64, sectors=64)
    r = solve(prob)
    rad = np.linalg.norm(prob.mesh.vertices, axis=1)
    on = np.isclose(rad, math.exp(-1), rtol=1e-12)
    assert on.any()
    assert np.max(np.abs(r.field.values[on] - 1.0)) < 1e-3


@pytest.mark.parametrize("amap", [CoefficientMap.p_laplace(3.0), CoefficientMap.exp_dir([0.5, 0.2])])
def test_ball_solution_is_exactly_mirror_symmetric(amap):
    prob = ball_problem(amap, sine_exp, L=2.0, rings=20, sectors=32)
    r = solve(prob)
    s = prob.mesh.symmetry_map
    assert np.array_equal(r.field.values[s], r.field.values)


def test_pullback_of_log_radius():
    kappa = 1.5
    params = geometry.TransformParams(kappa)
    m = mesh_disk_annulus(1.0, math.exp(-3 * kappa), rings=90, sectors=64)
    ball = DiscreteField(m, -np.log(np.linalg.norm(m.vertices, axis=1)) / kappa)
    strip = mesh_strip(3.0, 0.1)
    x = strip.vertices
    # base points sit on the unit circle, outside the inscribed polygon
    x = x[(x[:, 1] > 0.05) & (x[:, 1] < 2.95)]
    got = pullback(ball, x, params)
    common = np.isin(np.round(x[:, 0], 12), [-1.0, 0.0, 1.0])
    assert np.max(np.abs(got[common] - x[common, 1])) < 1e-12
    assert np.max(np.abs(got - x[:, 1])) < 1e-2


def test_pullback_of_constant_and_outside_refusal():
    m = mesh_disk_annulus(1.0, 0.1, sectors=16)
    c = DiscreteField(m, np.full(m.n_vertices, 4.0))
    assert np.allclose(pullback(c, np.array([[0.2, 0.5], [-1.0, 1.0]])), 4.0, atol=1e-14)
    with pytest.raises(ValueError):
        pullback(c, np.array([[0.0, 5.0]]))


def test_pushforward_of_height():
    strip = mesh_strip(3.0, 0.05)
    f = DiscreteField(strip, strip.vertices[:, 1].copy())
    rng = np.random.default_rng(0)
    ang = rng.uniform(0, 2 * np.pi, 50)
    r = rng.uniform(math.exp(-2.9), 1.0, 50)
    xi = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    assert np.allclose(pushforward(f, xi), -np.log(r), atol=1e-9)


def test_equivalence_improves_under_refinement():
    errs = []
    for h, sectors in ((0.2, 32), (0.1, 64)):
        cyl = solve(strip_problem(LAPLACE, 2.0, h, sine_exp))
        ball = solve(ball_problem(LAPLACE, sine_exp, L=2.0, rings=round(2.0 / h), sectors=sectors))
        x = cyl.field.mesh.vertices
        common = np.isin(np.round(x[:, 0], 12), [-1.0, 0.0, 1.0])
        errs.append(np.max(np.abs(pullback(ball.field, x[common]) - cyl.field.values[common])))
    assert errs[0] / errs[1] >= 1.5


# ---------------------------------------------------------------- norms

def test_lkappa_norm_examples():
    m = mesh_strip(1.0, 0.05)
    assert lkappa_norm(DiscreteField(m, np.zeros(m.n_vertices))) == 0.0
    one = lkappa_norm(DiscreteField(m, np.ones(m.n_vertices)))
    assert one == pytest.approx(math.sqrt(1 - math.exp(-2)), rel=1e-3)
    y = m.vertices[:, 1]
    zero_order = 2 * (1 / 4 - 5 / 4 * math.exp(-2))  # int_0^1 y^2 e^{-2y} dy times width 2
    assert lkappa_norm(DiscreteField(m, y.copy())) ** 2 == pytest.approx(zero_order + 2.0, rel=1e-3)


def test_l2_error_of_exact_interpolant_is_small():
    m = mesh_strip(1.0, 0.1)
    f = DiscreteField(m, m.vertices[:, 0] + 2 * m.vertices[:, 1])
    assert l2_error(f, lambda x: x[:, 0] + 2 * x[:, 1]) < 1e-14

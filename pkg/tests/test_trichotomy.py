import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zaremba.mesh import mesh_strip
from zaremba.operators import CoefficientMap
from zaremba.solver import DiscreteField, solve, strip_problem
from zaremba.trichotomy import (ConflictingFits, LinearGrowth, Limit, OffGrid, SectionStats, SignChanging,
                                TooFewSections, classify, holder_fit, mesh_line_heights, section_stats)

L = 8.0
MESH = mesh_strip(L, 0.1)
TAUS = np.arange(0, 81) * 0.1


def field(f):
    return DiscreteField(MESH, f(MESH.vertices[:, 0], MESH.vertices[:, 1]))


def stats_of(f, taus=TAUS):
    return section_stats(field(f), taus)


def sine_exp(x, y):
    return np.exp(0.5 * np.pi * y) * np.sin(0.5 * np.pi * x)


def test_section_examples():
    s = stats_of(lambda x, y: 0 * x + 3.0, [0.0, 4.0])
    assert all((t.min, t.max, t.mean) == (3.0, 3.0, 3.0) for t in s)
    (s,) = stats_of(lambda x, y: 2 * y + 1, [2.0])
    assert s.min == pytest.approx(5.0) and s.max == pytest.approx(5.0)
    for tau in (1.0, 3.0):
        (s,) = stats_of(sine_exp, [tau])
        assert s.max == pytest.approx(math.exp(0.5 * math.pi * tau))
        assert s.min == pytest.approx(-math.exp(0.5 * math.pi * tau))
        assert abs(s.mean) < 1e-9 * s.max


def test_section_mean_is_exact_for_linear_traces():
    (s,) = stats_of(lambda x, y: x + 2.0, [1.0])
    assert s.mean == pytest.approx(2.0, abs=1e-14)


def test_off_grid_section():
    with pytest.raises(OffGrid):
        stats_of(sine_exp, [0.05])


def test_section_stats_validation():
    with pytest.raises(ValueError):
        SectionStats(0.0, 1.0, 0.0, 0.5)


def test_mesh_line_heights():
    assert np.allclose(mesh_line_heights(field(sine_exp)), TAUS)


def test_constant_is_limit():
    rep = classify(stats_of(lambda x, y: 0 * x + 3.0))
    assert isinstance(rep.verdict, Limit)
    assert rep.verdict.u_inf == 3.0 and rep.verdict.alpha == 1.0


@pytest.mark.parametrize("a,b", [(2.0, 1.0), (-2.0, 1.0), (0.5, -3.0)])
def test_linear_is_linear_growth(a, b):
    rep = classify(stats_of(lambda x, y: a * y + b))
    v = rep.verdict
    assert isinstance(v, LinearGrowth)
    assert v.sign == (1 if a > 0 else -1)
    assert 0 < v.A_low <= v.A_high
    assert v.A_low == pytest.approx(abs(a), rel=0.10) and v.A_high == pytest.approx(abs(a), rel=0.10)


def test_linear_growth_bounds_enclose_sections():
    rep = classify(stats_of(lambda x, y: 2 * y + 0.3 * np.sin(5 * y) * np.cos(x) + 1))
    v = rep.verdict
    assert isinstance(v, LinearGrowth)
    tail = [s for s in stats_of(lambda x, y: 2 * y + 0.3 * np.sin(5 * y) * np.cos(x) + 1)
            if rep.tau_range[0] <= s.tau <= rep.tau_range[1]]
    for s in tail:
        assert v.M + v.sign * v.A_low * s.tau <= s.min + 1e-9
        assert s.max <= v.M0 + v.sign * v.A_high * s.tau + 1e-9


def test_sine_exp_is_sign_changing():
    rep = classify(stats_of(sine_exp))
    assert isinstance(rep.verdict, SignChanging) and rep.verdict.A > 0


def test_exponential_approach_is_limit():
    rep = classify(stats_of(lambda x, y: 4.0 + np.exp(-y) * np.cos(np.pi * x)))
    v = rep.verdict
    assert isinstance(v, Limit)
    assert v.u_inf == pytest.approx(4.0, abs=1e-3)
    assert v.alpha == pytest.approx(1.0, rel=0.15)


def test_too_few_sections():
    with pytest.raises(TooFewSections):
        classify(stats_of(sine_exp, TAUS[:5]))
    with pytest.raises(TooFewSections):
        classify(stats_of(sine_exp, TAUS[:10]), height_range=(0.0, L))


def test_conflicting_fits_are_withheld():
    # max grows linearly while min decays: no single verdict applies
    f = lambda x, y: np.where(x > 0, y * x, np.exp(-y) * x)
    with pytest.raises(ConflictingFits) as exc:
        classify(stats_of(f))
    assert "slope_max" in exc.value.diagnostics


def test_report_serializes_to_plain_types():
    d = classify(stats_of(lambda x, y: 2 * y + 1)).to_dict()
    assert d["verdict"]["kind"] == "LinearGrowth"
    assert isinstance(d["verdict"]["sign"], int)
    assert all(type(v) in (float, int, bool, str) for v in d["fit_diagnostics"].values())


@settings(max_examples=25, deadline=None)
@given(st.floats(-100, 100), st.floats(0.1, 50),
       st.sampled_from(["linear", "sine", "decay"]))
def test_verdict_invariant_under_shift_and_scale(shift, scale, kind):
    f = {"linear": lambda x, y: 2 * y + 1, "sine": sine_exp,
         "decay": lambda x, y: 1 + np.exp(-y) * np.cos(np.pi * x)}[kind]
    base = classify(stats_of(f)).verdict
    moved = classify(stats_of(lambda x, y: scale * f(x, y) + shift)).verdict
    assert type(moved) is type(base)


def test_holder_fit_synthetic_rate():
    for kappa in (1.0, 0.5):
        fit = holder_fit(field(lambda x, y: 2.0 + np.exp(-kappa * y) * x ** 2), kappa)
        assert fit.alpha == pytest.approx(1.0, rel=0.15)
        assert fit.oscillation_monotone


def test_holder_fit_clamps_fast_decay():
    fit = holder_fit(field(lambda x, y: np.exp(-2 * y) * x), 1.0)
    assert fit.alpha == 1.0 and fit.alpha_unclamped == pytest.approx(2.0, rel=0.05)


def test_holder_fit_constant_sentinel():
    fit = holder_fit(field(lambda x, y: 0 * x + 7.0))
    assert fit.alpha == 1.0 and fit.alpha_unclamped == math.inf


def test_holder_fit_growth_conflicts():
    with pytest.raises(ConflictingFits):
        holder_fit(field(sine_exp))


def test_laplace_strip_settles_to_a_limit():
    prob = strip_problem(CoefficientMap.p_laplace(2.0), L, 0.1, lambda x: x[:, 0] ** 2, lid="natural")
    fld = solve(prob).field
    rep = classify(section_stats(fld, mesh_line_heights(fld)), height_range=(0.0, L))
    assert isinstance(rep.verdict, Limit)
    fit = holder_fit(fld)
    assert fit.alpha > 0 and fit.oscillation_monotone
    # mean of x1^2 over (-1, 1) is conserved by the zero-flux sides and lid
    assert rep.verdict.u_inf == pytest.approx(1 / 3, abs=0.01)

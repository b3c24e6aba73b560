"""Behaviour at infinity of solutions that carry only the natural condition far
up the cylinder: a finite limit, roughly linear growth, or growth of both
signs.

The classifier only looks at cross-section statistics (min, max and mean of
the nodal values on horizontal mesh lines), never at the equation, and fits
the upper half of the available heights.
"""
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

MIN_SECTIONS = 6
SLOPE_SIGNIFICANCE = 1e-3
DECAY_FACTOR = 2.0
LINEAR_RESIDUAL = 0.10
ABSOLUTE_FLOOR = 1e-10
LINE_TOL = 1e-9


class TrichotomyError(ValueError):
    pass


class OffGrid(TrichotomyError):
    """A requested section height has no mesh vertices."""


class TooFewSections(TrichotomyError):
    pass


class ConflictingFits(TrichotomyError):
    """No single verdict fits the data; ``diagnostics`` holds every fit."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SectionStats:
    tau: float
    min: float
    max: float
    mean: float

    def __post_init__(self):
        if not self.min <= self.mean <= self.max:
            raise ValueError(f"inconsistent section at tau={self.tau}: need min <= mean <= max")


@dataclass(frozen=True)
class Limit:
    u_inf: float
    alpha: float
    name = "Limit"


@dataclass(frozen=True)
class LinearGrowth:
    sign: int
    A_low: float
    A_high: float
    M: float
    M0: float
    name = "LinearGrowth"


@dataclass(frozen=True)
class SignChanging:
    A: float
    name = "SignChanging"


Verdict = Union[Limit, LinearGrowth, SignChanging]


@dataclass
class TrichotomyReport:
    verdict: Verdict
    tau_range: tuple
    fit_diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        v = {"kind": self.verdict.name}
        v.update({k: _plain(getattr(self.verdict, k)) for k in self.verdict.__dataclass_fields__})
        return {"verdict": v, "tau_range": [float(t) for t in self.tau_range],
                "fit_diagnostics": {k: _plain(x) for k, x in self.fit_diagnostics.items()}}


def _plain(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


# ---------------------------------------------------------------- sections

def mesh_line_heights(fld, tol=LINE_TOL):
    """Distinct vertex heights of a structured strip mesh, ascending."""
    y = np.sort(fld.mesh.vertices[:, -1])
    keep = np.concatenate([[True], np.diff(y) > tol * np.maximum(1.0, np.abs(y[1:]))])
    return y[keep]


def section_stats(fld, tau_list, tol=LINE_TOL):
    """Min, max and mean of nodal values on each horizontal line ``x_n = tau``.

    The mean is the trapezoidal average along the line, which is the exact
    average of the P1 trace.
    """
    x = fld.mesh.vertices
    vals = np.asarray(fld.values, dtype=float)
    out = []
    for tau in tau_list:
        tau = float(tau)
        on = np.abs(x[:, -1] - tau) <= tol * max(1.0, abs(tau))
        if on.sum() < 2:
            raise OffGrid(f"no mesh line at tau={tau}")
        order = np.argsort(x[on, 0])
        s, v = x[on, 0][order], vals[on][order]
        mean = float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(s)) / (s[-1] - s[0]))
        lo, hi = float(v.min()), float(v.max())
        out.append(SectionStats(tau, lo, hi, min(max(mean, lo), hi)))
    return out


# ---------------------------------------------------------------- fitting

def _line_fit(t, y):
    """Least-squares ``y = a + b t``; returns ``(a, b, rms residual)``."""
    A = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res * res)))


def _decay(t, y, floor):
    """Decay assessment of a nonnegative sequence.

    Returns ``(decays, rate, monotone, residual)``; ``rate`` is ``inf`` when
    the sequence is already below ``floor`` on the window.
    """
    monotone = bool(np.all(np.diff(y) <= floor))
    above = y > floor
    if above.sum() == 0:
        return True, math.inf, monotone, 0.0
    if above.sum() < 2 or not above[0]:
        return False, float("nan"), monotone, float("nan")
    # once below the floor the sequence counts as settled
    last = len(y) - 1 if above.all() else int(np.argmin(above)) - 1
    if last < 1:
        return True, math.inf, monotone, 0.0
    decays = (not above.all()) or y[0] >= DECAY_FACTOR * y[last]
    _, b, res = _line_fit(t[:last + 1], np.log(y[:last + 1]))
    return bool(decays and b < 0), -b, monotone, res


def _tail(stats):
    stats = sorted(stats, key=lambda s: s.tau)
    if len(stats) < MIN_SECTIONS:
        raise TooFewSections(f"need at least {MIN_SECTIONS} sections, got {len(stats)}")
    lo, hi = stats[0].tau, stats[-1].tau
    mid = 0.5 * (lo + hi)
    tail = [s for s in stats if s.tau >= mid - 1e-12 * max(1.0, abs(mid))]
    if len(tail) < 3:
        raise TooFewSections("fewer than three sections in the upper half of the range")
    return stats, tail


def classify(stats, kappa=1.0, height_range=None):
    """Assign exactly one of Limit, LinearGrowth, SignChanging, or raise
    :class:`ConflictingFits`.

    ``height_range``, when given, is the meshed height interval and the
    sections must span at least half of it.
    """
    stats, tail = _tail(stats)
    if height_range is not None:
        span = stats[-1].tau - stats[0].tau
        if span < 0.5 * (height_range[1] - height_range[0]):
            raise TooFewSections("sections span less than half of the meshed height")
    t = np.array([s.tau for s in tail])
    mx = np.array([s.max for s in tail])
    mn = np.array([s.min for s in tail])
    me = np.array([s.mean for s in tail])
    values = np.concatenate([mx, mn])
    floor = ABSOLUTE_FLOOR * (1.0 + float(np.max(np.abs(values))))
    scale = max(float(values.max() - values.min()), floor)
    sig = SLOPE_SIGNIFICANCE * scale

    a_max, b_max, r_max = _line_fit(t, mx)
    a_min, b_min, r_min = _line_fit(t, mn)
    rel_max = r_max / max(abs(b_max) * (t[-1] - t[0]), floor)
    rel_min = r_min / max(abs(b_min) * (t[-1] - t[0]), floor)

    osc = mx - mn
    osc_decays, osc_rate, osc_monotone, osc_res = _decay(t, osc, sig)
    steps = np.abs(np.diff(me))
    mean_decays, mean_rate, _, mean_res = _decay(t[1:], steps, sig * (t[1] - t[0]))

    diag = {"slope_max": b_max, "slope_min": b_min, "intercept_max": a_max, "intercept_min": a_min,
            "relative_residual_max": rel_max, "relative_residual_min": rel_min,
            "slope_threshold": sig, "oscillation_first": float(osc[0]), "oscillation_last": float(osc[-1]),
            "oscillation_rate": osc_rate, "oscillation_fit_residual": osc_res,
            "oscillation_monotone": osc_monotone, "mean_step_rate": mean_rate,
            "mean_step_fit_residual": mean_res}

    candidates = []
    if b_max > sig and b_min < -sig:
        candidates.append(SignChanging(min(b_max, -b_min)))
    same_sign = (b_max > sig and b_min > sig) or (b_max < -sig and b_min < -sig)
    if same_sign and rel_max < LINEAR_RESIDUAL and rel_min < LINEAR_RESIDUAL:
        sign = 1 if b_max > 0 else -1
        # M + b_min tau <= u <= M0 + b_max tau on the window
        M = float(np.min(mn - b_min * t))
        M0 = float(np.max(mx - b_max * t))
        A = sorted((abs(b_min), abs(b_max)))
        candidates.append(LinearGrowth(sign, A[0], A[1], M, M0))
    if osc_decays and mean_decays:
        rates = [r for r in (osc_rate, mean_rate) if np.isfinite(r)]
        rate = min(rates) if rates else math.inf
        u_inf = _extrapolate_mean(t, me, rate)
        alpha_raw = rate / kappa
        diag["alpha_unclamped"] = alpha_raw
        if alpha_raw > 0:
            candidates.append(Limit(u_inf, min(alpha_raw, 1.0)))
        else:
            diag["limit_rejected"] = "nonpositive decay rate"

    tau_range = (float(t[0]), float(t[-1]))
    if len(candidates) != 1:
        names = [c.name for c in candidates] or ["none"]
        raise ConflictingFits(f"classification withheld: candidate verdicts {names}", diag)
    return TrichotomyReport(candidates[0], tau_range, diag)


def _extrapolate_mean(t, mean, rate):
    """Limit of the section means from a fit on ``(1, exp(-rate tau))``."""
    if not np.isfinite(rate) or rate * (t[-1] - t[0]) > 700:
        return float(mean[-1])
    A = np.column_stack([np.ones_like(t), np.exp(-rate * (t - t[0]))])
    coef, *_ = np.linalg.lstsq(A, mean, rcond=None)
    return float(coef[0])


@dataclass(frozen=True)
class HolderFit:
    alpha: float
    alpha_unclamped: float
    residual: float
    oscillation_monotone: bool
    tau_range: tuple


def holder_fit(data, kappa=1.0):
    """Exponent ``alpha`` in ``|u - u(inf)| <~ exp(-kappa alpha x_n)``.

    ``data`` is a list of :class:`SectionStats` or a field on a strip mesh,
    in which case every mesh line is used.  The decay rate of the section
    oscillation ``max - min`` is fitted on the upper half of the heights; a
    field that is already constant there gets ``alpha = 1`` with an infinite
    unclamped value.
    """
    if not isinstance(data, (list, tuple)):
        data = section_stats(data, mesh_line_heights(data))
    _, tail = _tail(data)
    t = np.array([s.tau for s in tail])
    osc = np.array([s.max - s.min for s in tail])
    vals = np.array([[s.min, s.max] for s in tail])
    floor = ABSOLUTE_FLOOR * (1.0 + float(np.max(np.abs(vals))))
    decays, rate, monotone, res = _decay(t, osc, floor)
    raw = rate / kappa
    if not raw > 0:
        raise ConflictingFits("nonpositive fitted decay exponent",
                              {"alpha_unclamped": raw, "residual": res})
    return HolderFit(min(raw, 1.0), raw, res, monotone, (float(t[0]), float(t[-1])))

"""Randomization inference from placebo estimates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dataset import round_half_up
from .errors import UndefinedAutocorrelationError
from .regress import t_pvalue, t_quantile

__all__ = [
    "InferenceResult", "NonparamP", "lag1_autocorr", "effective_sample_size", "nonparam_p",
    "parametric_ri", "ess_bounds_segments", "round_ess", "ROUNDING_MODES", "pooled_ess",
    "sweep_inference",
]

ROUNDING_MODES = ("half-up", "floor", "ceil", "half-even")


def round_ess(ess: float, mode: str = "half-up") -> int:
    if mode == "half-up":
        return round_half_up(ess)
    if mode == "floor":
        return math.floor(ess)
    if mode == "ceil":
        return math.ceil(ess)
    if mode == "half-even":
        return round(ess)
    raise ValueError(f"unknown rounding mode {mode!r}")


def lag1_autocorr(series) -> float:
    """Centred lag-1 autocorrelation with the full-series variance in the
    denominator."""
    x = np.asarray(series, dtype=float)
    if x.size < 3:
        raise ValueError("need at least 3 values")
    d = x - x.mean()
    den = float(d @ d)
    if den == 0 or den <= 1e-30 * x.size * max(1.0, float(np.max(np.abs(x)))) ** 2:
        raise UndefinedAutocorrelationError("series is constant")
    return float(d[1:] @ d[:-1]) / den


def effective_sample_size(m: int, rho1: float) -> float:
    """AR(1) effective sample size ``m (1 - rho) / (1 + rho)`` clamped to [1, m]."""
    if m < 2:
        raise ValueError("m must be at least 2")
    if not -1.0 < rho1 < 1.0:
        raise ValueError("|rho1| must be below 1")
    ess = m * (1.0 - rho1) / (1.0 + rho1)
    return float(min(max(ess, 1.0), m))


@dataclass(frozen=True)
class NonparamP:
    """Rank p-value; outside the placebo range only the bound ``p < 2/ESS``
    is available."""

    p: float
    inside_range: bool
    is_bound: bool
    rank: int
    m: int
    low_ess_warning: bool

    def __str__(self):
        return f"p < {self.p:.4g}" if self.is_bound else f"p = {self.p:.4g}"


def nonparam_p(tau_hat: float, placebo, ess: float) -> NonparamP:
    pl = np.asarray(placebo, dtype=float)
    if pl.size == 0:
        raise ValueError("placebo series is empty")
    m = pl.size
    i = int(np.sum(pl <= tau_hat))
    inside = pl.min() <= tau_hat <= pl.max()
    if not inside:
        return NonparamP(2.0 / ess, False, True, i, m, False)
    p = 2.0 * min(i, m - i) / m
    return NonparamP(min(p, 1.0), True, False, i, m, ess < m)


@dataclass(frozen=True)
class InferenceResult:
    tau_hat: float
    rho1: float
    m: int
    ess: float
    ess_rounded: int
    df: int
    se_ri: float
    t_stat: float
    p_param: float
    ci_low: float
    ci_high: float
    p_nonparam: float
    p_nonparam_is_bound: bool
    inside_range: bool

    def to_dict(self) -> dict:
        return asdict(self)


def parametric_ri(tau_hat: float, placebo, ess: float | None = None,
                  rounding: str = "half-up") -> InferenceResult:
    """t-based randomization inference: the placebo SD stands in for the
    estimator's standard error, with ``df = max(1, round(ESS) - 1)``.

    ``ess`` overrides the single-series AR(1) value (used when the series
    is pooled from independent groups or segments).
    """
    pl = np.asarray(placebo, dtype=float)
    if pl.size < 3:
        raise ValueError("need at least 3 placebo estimates")
    rho = lag1_autocorr(pl)
    if ess is None:
        ess = effective_sample_size(pl.size, rho)
    r = round_ess(ess, rounding)
    df = max(1, r - 1)
    se = float(np.std(pl, ddof=1))
    t = tau_hat / se
    q = t_quantile(0.975, df)
    npv = nonparam_p(tau_hat, pl, ess)
    return InferenceResult(
        tau_hat=float(tau_hat), rho1=rho, m=int(pl.size), ess=float(ess), ess_rounded=r, df=df,
        se_ri=se, t_stat=float(t), p_param=t_pvalue(t, df), ci_low=tau_hat - q * se,
        ci_high=tau_hat + q * se, p_nonparam=npv.p, p_nonparam_is_bound=npv.is_bound,
        inside_range=npv.inside_range,
    )


def ess_bounds_segments(segments: Sequence) -> tuple[float, float]:
    """Bounds on the ESS of a series made of separate segments.

    Lower: one AR(1) series of the total length with the length-weighted
    mean autocorrelation.  Upper: the sum of per-segment ESS values.
    """
    segs = [np.asarray(s, dtype=float) for s in segments]
    if not segs:
        raise ValueError("need at least one segment")
    lens = np.array([s.size for s in segs])
    if (lens < 3).any():
        raise ValueError("each segment needs at least 3 values")
    rhos = np.array([lag1_autocorr(s) for s in segs])
    m = int(lens.sum())
    rbar = float(np.dot(lens, rhos) / m)
    lower = effective_sample_size(m, rbar)
    upper = float(sum(effective_sample_size(int(n), float(r)) for n, r in zip(lens, rhos)))
    # Jensen keeps upper >= lower for unclamped values; clamping negative
    # autocorrelations can reverse them, in which case the smaller one is the
    # conservative lower bound
    return min(lower, upper), max(lower, upper)


def pooled_ess(pieces: Sequence[Sequence]) -> float:
    """ESS of independent groups, each a list of segment series.

    Groups add up.  Within a group, one segment uses its AR(1) ESS and
    several segments use the conservative (lower) segment bound.
    """
    total = 0.0
    for segs in pieces:
        segs = [np.asarray(s, dtype=float) for s in segs]
        if len(segs) == 1:
            total += effective_sample_size(segs[0].size, lag1_autocorr(segs[0]))
        else:
            total += ess_bounds_segments(segs)[0]
    return total


def sweep_inference(sr, index: int, tau_hat: float, rounding: str = "half-up") -> InferenceResult:
    """Randomization inference for candidate ``index`` of a placebo sweep."""
    ok = sr.skip[index] == 0
    pieces = []
    for g in np.unique(sr.groups):
        segs = []
        for s in np.unique(sr.segments):
            m = ok & (sr.groups == g) & (sr.segments == s)
            if m.sum() >= 3:
                segs.append(sr.tau[index, m])
        if segs:
            pieces.append(segs)
    if not pieces:
        raise ValueError("not enough placebo estimates for inference")
    series = np.concatenate([s for segs in pieces for s in segs])
    ess = pooled_ess(pieces) if len(pieces) > 1 or len(pieces[0]) > 1 else None
    return parametric_ri(tau_hat, series, ess=ess, rounding=rounding)

"""Placebo zones, the candidate x threshold sweep, scoring and selection."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .candidates import CandidateSpec, EstimateResult, estimate
from .dataset import Dataset, DensitySplitPlan, ShiftRule
from .errors import (ConfigError, DegenerateWindowError, SingularDesignError, ThinWindowError,
                     ZoneTooSmallError)
from .moments import NEEDS_DIRECT, OK, THIN, build_cells, sweep_moments
from .regress import Z975

__all__ = [
    "PlaceboZone", "SweepResult", "CandidateMetrics", "Selection", "WeightedAverage",
    "enumerate_thresholds", "sweep", "score", "select_best", "weighted_average_estimate",
    "weighted_average_placebo", "SKIP_REASONS",
]

SKIP_OK, SKIP_THIN, SKIP_SINGULAR, SKIP_DEGENERATE = 0, 1, 2, 3
SKIP_REASONS = {SKIP_OK: "", SKIP_THIN: "thin-window", SKIP_SINGULAR: "singular-design",
                SKIP_DEGENERATE: "degenerate-window"}
_EPS = 1e-9


@dataclass(frozen=True)
class PlaceboZone:
    """Placebo segments ``(lo, hi]`` of the running variable.

    A threshold ``k`` belongs to a segment when its widest window
    ``[k - bw_left, k + bw_right)`` fits strictly above ``lo`` and no
    higher than ``hi``; thresholds sit on the grid ``lo + j * spacing``.
    """

    segments: tuple[tuple[float, float], ...]
    spacing: float | None = None

    def __post_init__(self):
        segs = tuple((float(a), float(b)) for a, b in self.segments)
        if not segs:
            raise ConfigError("placebo zone has no segments")
        for a, b in segs:
            if not b > a:
                raise ConfigError(f"placebo segment ({a:g}, {b:g}] is empty")
        ordered = sorted(segs)
        for (a0, b0), (a1, b1) in zip(ordered, ordered[1:]):
            if a1 < b0:
                raise ConfigError("placebo segments overlap")
        if self.spacing is not None and not self.spacing > 0:
            raise ConfigError("threshold spacing must be positive")
        object.__setattr__(self, "segments", segs)

    def validate_real_threshold(self, k0: float = 0.0) -> None:
        """The real threshold may bound a segment but not fall inside one."""
        for a, b in self.segments:
            if a < k0 < b:
                raise ConfigError(f"real threshold {k0:g} lies inside placebo segment "
                                  f"({a:g}, {b:g}]")

    def with_spacing(self, spacing: float) -> "PlaceboZone":
        return PlaceboZone(self.segments, spacing)


def enumerate_thresholds(zone: PlaceboZone, max_bw_left: float, max_bw_right: float,
                         spacing: float | None = None, return_segments: bool = False):
    """Common placebo thresholds for candidates up to the given bandwidths."""
    sp = spacing or zone.spacing or 1.0
    ks, seg = [], []
    for i, (lo, hi) in enumerate(zone.segments):
        j0 = math.floor(max_bw_left / sp + _EPS) + 1
        j1 = math.floor((hi - lo - max_bw_right) / sp + _EPS)
        if j1 >= j0:
            k = lo + sp * np.arange(j0, j1 + 1)
            ks.append(k)
            seg.append(np.full(k.size, i))
    if not ks:
        longest = max(b - a for a, b in zone.segments)
        raise ZoneTooSmallError(
            f"no placebo threshold fits: longest segment is {longest:g} but the widest window "
            f"needs more than {max_bw_left:g} + {max_bw_right:g} (bw_left + bw_right)")
    k = np.concatenate(ks)
    return (k, np.concatenate(seg)) if return_segments else k


@dataclass(eq=False)
class SweepResult:
    """Placebo estimates, one row per candidate and one column per
    (group, threshold) evaluation."""

    specs: list[CandidateSpec]
    thresholds: np.ndarray      # per column
    groups: np.ndarray          # per column; 0 when no density split
    segments: np.ndarray        # per column; zone segment index
    tau: np.ndarray
    se: np.ndarray
    n_left: np.ndarray
    n_right: np.ndarray
    skip: np.ndarray            # int codes, see SKIP_REASONS

    @property
    def ci_low(self):
        return self.tau - Z975 * self.se

    @property
    def ci_high(self):
        return self.tau + Z975 * self.se

    def skip_share(self) -> np.ndarray:
        return (self.skip != SKIP_OK).mean(axis=1)

    @property
    def unreliable(self) -> np.ndarray:
        """Candidates skipped at more than half of the placebo evaluations."""
        return self.skip_share() > 0.5

    def series(self, i: int, group: int | None = None) -> np.ndarray:
        """Non-skipped placebo estimates of candidate ``i`` in threshold order."""
        mask = self.skip[i] == SKIP_OK
        if group is not None:
            mask &= self.groups == group
        return self.tau[i, mask]

    def segment_series(self, i: int) -> list[np.ndarray]:
        ok = self.skip[i] == SKIP_OK
        out = []
        for g in np.unique(self.groups):
            for s in np.unique(self.segments):
                m = ok & (self.groups == g) & (self.segments == s)
                if m.any():
                    out.append(self.tau[i, m])
        return out

    def iter_rows(self):
        """(candidate index, group, k, tau, se, skip reason) in a fixed order."""
        for i in range(len(self.specs)):
            for j in range(self.thresholds.size):
                yield (i, int(self.groups[j]), float(self.thresholds[j]), float(self.tau[i, j]),
                       float(self.se[i, j]), SKIP_REASONS[int(self.skip[i, j])])


def _direct(spec, ds, k, rule):
    try:
        r = estimate(spec, ds, k, rule)
    except ThinWindowError:
        return None, SKIP_THIN
    except DegenerateWindowError:
        return None, SKIP_DEGENERATE
    except SingularDesignError:
        return None, SKIP_SINGULAR
    return r, SKIP_OK


def _sweep_one(ds, specs, k, rule, pool, chunk_size, with_se):
    n, m = len(specs), k.size
    tau = np.full((n, m), np.nan)
    se = np.full((n, m), np.nan)
    nl = np.zeros((n, m))
    nr = np.zeros((n, m))
    skip = np.zeros((n, m), dtype=np.int8)
    fast = {True: [], False: []}
    slow = []
    for i, s in enumerate(specs):
        (slow if s.covariates else fast[s.use_row_weights]).append(i)
    todo = [(i, j) for i in slow for j in range(m)]
    for flag, members in fast.items():
        if not members:
            continue
        cells = build_cells(ds, flag, rule)
        t, s_, a, b, st = sweep_moments(cells, specs, k, members=members, chunk_size=chunk_size,
                                        pool=pool, with_se=with_se)
        rows = np.asarray(members)
        tau[rows], se[rows], nl[rows], nr[rows] = t[rows], s_[rows], a[rows], b[rows]
        skip[rows] = np.where(st[rows] == THIN, SKIP_THIN, SKIP_OK)
        ii, jj = np.nonzero(st[rows] == NEEDS_DIRECT)
        todo.extend(zip(rows[ii].tolist(), jj.tolist()))

    def run(ij):
        i, j = ij
        return _direct(specs[i], ds, float(k[j]), rule)

    todo.sort()
    results = list(pool.map(run, todo)) if pool is not None else [run(ij) for ij in todo]
    for (i, j), (r, code) in zip(todo, results):
        skip[i, j] = code
        if r is not None:
            tau[i, j] = r.tau
            se[i, j] = r.se if with_se else np.nan
            nl[i, j], nr[i, j] = r.n_left, r.n_right
        else:
            tau[i, j] = se[i, j] = np.nan
    return tau, se, nl, nr, skip


def sweep(ds: Dataset, specs: Sequence[CandidateSpec], zone: PlaceboZone,
          rule: ShiftRule | None = None, split: DensitySplitPlan | None = None,
          threads: int = 1, chunk_size: int = 128, with_se: bool = True,
          k0: float = 0.0) -> SweepResult:
    """Estimate every candidate at every common placebo threshold.

    With a density split each threshold is evaluated once per group on that
    group's rows (plus all rows outside the zone) and the group estimates
    are pooled as extra columns.  Output is identical for any ``threads``.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("no candidates to sweep")
    rule = rule or ShiftRule()
    rule.check(ds)
    zone.validate_real_threshold(k0)
    sp = zone.spacing or ds.x_spacing
    k, segs = enumerate_thresholds(zone, max(s.bw_left for s in specs),
                                   max(s.bw_right for s in specs), sp, return_segments=True)
    parts = [(0, ds)] if split is None else [
        (g, ds.subset(split.group_mask(g))) for g in range(1, split.g + 1)]
    pool = ThreadPoolExecutor(threads) if threads and threads > 1 else None
    try:
        out = [_sweep_one(d, specs, k, rule, pool, chunk_size, with_se) for _, d in parts]
    finally:
        if pool is not None:
            pool.shutdown()
    cat = [np.concatenate([o[q] for o in out], axis=1) for q in range(5)]
    groups = np.concatenate([np.full(k.size, g) for g, _ in parts])
    sr = SweepResult(specs=specs, thresholds=np.tile(k, len(parts)), groups=groups,
                     segments=np.tile(segs, len(parts)), tau=cat[0], se=cat[1], n_left=cat[2],
                     n_right=cat[3], skip=cat[4])
    bad = np.flatnonzero(sr.unreliable)
    if bad.size:
        warnings.warn(f"{bad.size} candidate(s) skipped at more than half of the placebo "
                      f"thresholds (e.g. {specs[bad[0]].label}); flagged unreliable-in-zone",
                      stacklevel=2)
    return sr


@dataclass(frozen=True)
class CandidateMetrics:
    spec: CandidateSpec
    index: int
    rmse: float
    bias: float
    coverage: float
    n_estimates: int
    unreliable: bool = False

    @property
    def mse(self) -> float:
        return self.rmse ** 2


def score(sr: SweepResult) -> list[CandidateMetrics]:
    """RMSE, bias and coverage of zero per candidate over its non-skipped
    placebo estimates.  All-skip candidates are left out with a warning."""
    out, dropped = [], []
    unreliable = sr.unreliable
    for i, spec in enumerate(sr.specs):
        ok = sr.skip[i] == SKIP_OK
        n = int(ok.sum())
        if n == 0:
            dropped.append(spec.label)
            continue
        t = sr.tau[i, ok]
        se = sr.se[i, ok]
        if np.isnan(se).all():
            cov = float("nan")
        else:
            # with se as NaN (inference unavailable) the CI cannot contain zero
            cov = float(np.mean(np.abs(t) <= Z975 * se))
        out.append(CandidateMetrics(spec, i, float(np.sqrt(np.mean(t * t))), float(np.mean(t)),
                                    cov, n, bool(unreliable[i])))
    if dropped:
        warnings.warn(f"excluded {len(dropped)} candidate(s) with no usable placebo estimate: "
                      + ", ".join(dropped[:5]) + (" ..." if len(dropped) > 5 else ""),
                      stacklevel=2)
    return out


def _rank_key(m: CandidateMetrics):
    return (m.rmse, -(m.spec.bw_left + m.spec.bw_right), m.spec.max_order, m.index)


@dataclass(frozen=True)
class Selection:
    best: CandidateMetrics
    ranking: list[CandidateMetrics]
    per_form: dict = field(default_factory=dict)   # model id -> best CandidateMetrics


def select_best(metrics: Sequence[CandidateMetrics], per_form: bool = False) -> Selection:
    """Lowest placebo RMSE; ties go to the larger total bandwidth, then the
    lower polynomial order, then enumeration order."""
    if not metrics:
        raise ValueError("no candidate metrics to select from")
    ranking = sorted(metrics, key=_rank_key)
    forms = {}
    if per_form:
        for m in ranking:
            forms.setdefault(m.spec.model_id, m)
        forms = dict(sorted(forms.items()))
    return Selection(ranking[0], ranking, forms)


def _inverse_mse_weights(mses):
    mses = np.asarray(mses, dtype=float)
    if (mses < 0).any() or np.isnan(mses).any():
        raise ValueError("MSEs must be non-negative numbers")
    zero = mses == 0
    w = np.empty_like(mses)
    w[~zero] = 1.0 / mses[~zero]
    if zero.any():
        cap = 1e6 * float(np.median(w[~zero])) if (~zero).any() else 1.0
        w[zero] = cap
        warnings.warn(f"{int(zero.sum())} candidate(s) have zero placebo MSE; "
                      "their weight is capped at 1e6 x the median weight", stacklevel=3)
    return w


@dataclass(frozen=True)
class WeightedAverage:
    estimate: EstimateResult      # se and CI are NaN: the variance is not derived
    weights: np.ndarray           # normalised
    components: list[EstimateResult]


def weighted_average_estimate(ds: Dataset, specs: Sequence[CandidateSpec], mses,
                              k0: float = 0.0, rule: ShiftRule | None = None) -> WeightedAverage:
    """Inverse-MSE weighted average of the per-form estimates at ``k0``."""
    specs = list(specs)
    if len(specs) != len(mses) or not specs:
        raise ValueError("need one MSE per spec")
    w = _inverse_mse_weights(mses)
    comps = [estimate(s, ds, k0, rule) for s in specs]
    w = w / w.sum()
    tau = float(np.dot(w, [c.tau for c in comps]))
    nan = float("nan")
    res = EstimateResult(tau=tau, se=nan, ci_low=nan, ci_high=nan,
                         n_left=max(c.n_left for c in comps),
                         n_right=max(c.n_right for c in comps), threshold=float(k0))
    return WeightedAverage(res, w, comps)


def weighted_average_placebo(sr: SweepResult, indices: Sequence[int], mses) -> tuple[float, int]:
    """Placebo RMSE of the weighted-average estimator, over the evaluations
    where every component has an estimate.  Returns ``(rmse, count)``."""
    idx = list(indices)
    w = _inverse_mse_weights(mses)
    w = w / w.sum()
    ok = (sr.skip[idx] == SKIP_OK).all(axis=0)
    if not ok.any():
        return float("nan"), 0
    comb = w @ sr.tau[np.ix_(idx, np.flatnonzero(ok))]
    return float(np.sqrt(np.mean(comb ** 2))), int(ok.sum())

"""Monte Carlo driver: per iteration, simulate, select on the placebo zone,
estimate at the true threshold and record error, choice and CI coverage."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .candidates import CandidateGrid, CandidateSpec, enumerate_candidates, estimate
from .dataset import Dataset
from .dgp import DgpSpec, StylizedKind, iteration_rng, sample_realistic, stylized_dgp
from .errors import ConfigError, DataError, NumericalError, PzmsError
from .inference import parametric_ri
from .placebo import PlaceboZone, score, select_best, sweep

__all__ = ["Scenario", "IterationRecord", "SimReport", "run_mc", "compare_external",
           "stylized_grid_spec", "INFERENCE_MODES", "MAX_FAILURE_SHARE"]

INFERENCE_MODES = ("conventional", "randomization")
MAX_FAILURE_SHARE = 0.01
TRACE_FIELDS = ("iteration", "status", "tau_hat", "bw_left", "bw_right", "model_id", "linear",
                "conventional_ci_low", "conventional_ci_high",
                "randomization_ci_low", "randomization_ci_high")


def stylized_grid_spec(max_bw: float, bw_min: float = 30.0, bw_step: float = 10.0,
                       left_cap: float = 100.0) -> CandidateGrid:
    """Local-linear and fully interacted quadratic RDD over bandwidths
    ``bw_min..max_bw``, symmetric until ``left_cap`` and then capped on the left."""
    bws = np.arange(bw_min, max_bw + bw_step / 2, bw_step)
    return CandidateGrid(models=(1, 3), bandwidths=tuple(float(b) for b in bws),
                         left_cap=left_cap)


@dataclass(frozen=True)
class Scenario:
    """One Monte Carlo design.

    For stylized DGPs the zone defaults to ``(0, 800]`` (long) or
    ``(0, 400]`` (short) with unit threshold spacing and the two-form RDD
    grid up to 300 or 200.  Realistic (DgpSpec) designs must supply a grid
    and a zone with explicit spacing, since their x is continuous.
    """

    dgp: StylizedKind | DgpSpec
    iterations: int = 1000
    seed: int = 0
    grid: CandidateGrid | None = None
    zone: PlaceboZone | None = None
    bw_min: float = 30.0
    bw_step: float = 10.0
    left_cap: float = 100.0
    modes: tuple[str, ...] = INFERENCE_MODES

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        for m in self.modes:
            if m not in INFERENCE_MODES:
                raise ConfigError(f"unknown inference mode {m!r}")
        if isinstance(self.dgp, DgpSpec):
            if self.grid is None or self.zone is None:
                raise ConfigError("realistic scenarios need an explicit candidate grid and zone")
            if self.zone.spacing is None:
                raise ConfigError("realistic scenarios need an explicit threshold spacing")
        elif not isinstance(self.dgp, StylizedKind):
            raise ConfigError("dgp must be a StylizedKind or a DgpSpec")
        # validates the grid early
        self.specs()
        self.placebo_zone().validate_real_threshold(0.0)

    @property
    def true_effect(self) -> float:
        return 0.3 if isinstance(self.dgp, StylizedKind) else float(self.dgp.jump)

    @property
    def max_bw(self) -> float:
        return max(s.bw_right for s in self.specs())

    def candidate_grid(self) -> CandidateGrid:
        if self.grid is not None:
            return self.grid
        return stylized_grid_spec(self.dgp.max_bw, self.bw_min, self.bw_step, self.left_cap)

    def specs(self) -> list[CandidateSpec]:
        return enumerate_candidates(self.candidate_grid())

    def placebo_zone(self) -> PlaceboZone:
        if self.zone is not None:
            return self.zone
        return PlaceboZone(((0.0, self.dgp.zone_end),), 1.0)

    def simulate(self, iteration: int) -> Dataset:
        rng = iteration_rng(self.seed, iteration)
        if isinstance(self.dgp, StylizedKind):
            return stylized_dgp(self.dgp, rng)
        return sample_realistic(self.dgp, rng)

    def to_dict(self) -> dict:
        specs = self.specs()
        return {
            "dgp": self.dgp.to_dict(),
            "iterations": self.iterations,
            "seed": self.seed,
            "zone": {"segments": [list(s) for s in self.placebo_zone().segments],
                     "spacing": self.placebo_zone().spacing},
            "candidates": len(specs),
            "models": sorted({s.model_id for s in specs}),
            "bandwidths": sorted({s.bw_right for s in specs}),
            "modes": list(self.modes),
        }


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    status: str                  # "ok" or the failure message
    tau_hat: float = math.nan
    bw_left: float = math.nan
    bw_right: float = math.nan
    model_id: int = 0
    linear: bool = False
    ci: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def trace_row(self) -> dict:
        row = {"iteration": self.iteration, "status": self.status, "tau_hat": self.tau_hat,
               "bw_left": self.bw_left, "bw_right": self.bw_right, "model_id": self.model_id,
               "linear": int(self.linear)}
        for m in INFERENCE_MODES:
            lo, hi = self.ci.get(m, (math.nan, math.nan))
            row[f"{m}_ci_low"], row[f"{m}_ci_high"] = lo, hi
        return row


def _run_iteration(scenario: Scenario, i: int) -> IterationRecord:
    try:
        ds = scenario.simulate(i)
        specs = scenario.specs()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            # placebo SEs are not needed for selection
            sr = sweep(ds, specs, scenario.placebo_zone(), with_se=False)
            sel = select_best(score(sr))
        spec = sel.best.spec
        est = estimate(spec, ds, 0.0)
        ci = {}
        if "conventional" in scenario.modes:
            ci["conventional"] = (est.ci_low, est.ci_high)
        if "randomization" in scenario.modes:
            ri = parametric_ri(est.tau, sr.series(sel.best.index))
            ci["randomization"] = (ri.ci_low, ri.ci_high)
        return IterationRecord(i, "ok", est.tau, spec.bw_left, spec.bw_right, spec.model_id,
                               spec.max_order == 1, ci)
    except (PzmsError, np.linalg.LinAlgError, ValueError) as e:
        return IterationRecord(i, f"{type(e).__name__}: {e}")


def _run_block(args):
    scenario, idx = args
    return [_run_iteration(scenario, i) for i in idx]


@dataclass(frozen=True)
class SimReport:
    rmse: float
    bias: float
    mean_bw: float               # right-side bandwidth of the chosen candidate
    mean_bw_left: float
    linear_share: float
    coverage: dict
    mean_ci_length: dict
    iterations_completed: int
    failures: int
    true_effect: float
    scenario: dict
    records: tuple[IterationRecord, ...] = field(repr=False, default=())

    def to_dict(self, stamp: Mapping | None = None) -> dict:
        d = {
            "rmse": self.rmse, "bias": self.bias, "mean_bw": self.mean_bw,
            "mean_bw_label": "right-side bandwidth", "mean_bw_left": self.mean_bw_left,
            "linear_share": self.linear_share, "coverage": dict(self.coverage),
            "mean_ci_length": dict(self.mean_ci_length),
            "iterations_completed": self.iterations_completed, "failures": self.failures,
            "true_effect": self.true_effect, "scenario": self.scenario,
            "version": __version__,
        }
        if stamp:
            d.update(stamp)
        return d

    def to_json(self, stamp: Mapping | None = None) -> str:
        return json.dumps(self.to_dict(stamp), indent=2) + "\n"

    def errors(self) -> np.ndarray:
        return np.array([r.tau_hat - self.true_effect for r in self.records if r.ok])

    def write_trace(self, path_or_buf) -> None:
        own = isinstance(path_or_buf, (str, os.PathLike))
        f = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.DictWriter(f, fieldnames=TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v)
                            for k, v in r.trace_row().items()})
        finally:
            if own:
                f.close()


def _aggregate(scenario: Scenario, records: list[IterationRecord]) -> SimReport:
    ok = [r for r in records if r.ok]
    if not ok:
        raise NumericalError("every Monte Carlo iteration failed: " + records[0].status)
    truth = scenario.true_effect
    err = np.array([r.tau_hat - truth for r in ok])
    cov, length = {}, {}
    for m in scenario.modes:
        ci = np.array([r.ci[m] for r in ok])
        cov[m] = float(np.mean((ci[:, 0] <= truth) & (truth <= ci[:, 1])))
        length[m] = float(np.mean(ci[:, 1] - ci[:, 0]))
    return SimReport(
        rmse=float(np.sqrt(np.mean(err ** 2))), bias=float(err.mean()),
        mean_bw=float(np.mean([r.bw_right for r in ok])),
        mean_bw_left=float(np.mean([r.bw_left for r in ok])),
        linear_share=float(np.mean([r.linear for r in ok])), coverage=cov,
        mean_ci_length=length, iterations_completed=len(ok),
        failures=len(records) - len(ok), true_effect=truth,
        scenario=scenario.to_dict(), records=tuple(records),
    )


def run_mc(scenario: Scenario, workers: int = 1, block: int = 10) -> SimReport:
    """Run all iterations and reduce them in iteration order.

    Each iteration draws from its own (seed, iteration) stream, so the
    report does not depend on ``workers``.  Failed iterations are recorded
    and skipped; more than 1% failures raises NumericalError.
    """
    n = scenario.iterations
    blocks = [range(a, min(a + block, n)) for a in range(0, n, block)]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_run_block, [(scenario, b) for b in blocks]))
    else:
        parts = [_run_block((scenario, b)) for b in blocks]
    records = [r for p in parts for r in p]
    failed = [r for r in records if not r.ok]
    if len(failed) > MAX_FAILURE_SHARE * n:
        sample = "; ".join(f"#{r.iteration}: {r.status}" for r in failed[:3])
        raise NumericalError(f"{len(failed)} of {n} iterations failed (limit "
                             f"{MAX_FAILURE_SHARE:.0%}): {sample}")
    return _aggregate(scenario, records)


_KEY_COLUMNS = ("iteration", "threshold", "key")
_EST_COLUMNS = ("tau_hat", "tau", "estimate")


def _read_external(source):
    # a string with a line break (or an empty one) is CSV text, otherwise a path
    is_text = isinstance(source, str) and ("\n" in source or not source)
    if isinstance(source, (str, os.PathLike)) and not is_text:
        with open(source, newline="") as f:
            text = f.read()
    elif hasattr(source, "read"):
        text = source.read()
    else:
        text = str(source)
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise DataError("external estimates file is empty")
    cols = rows[0].keys()
    key = next((c for c in _KEY_COLUMNS if c in cols), None)
    est = next((c for c in _EST_COLUMNS if c in cols), None)
    if key is None or est is None:
        raise DataError(f"external file needs a key column {_KEY_COLUMNS} and an estimate "
                        f"column {_EST_COLUMNS}")
    out = {}
    for r in rows:
        lo = float(r["ci_low"]) if r.get("ci_low") not in (None, "") else math.nan
        hi = float(r["ci_high"]) if r.get("ci_high") not in (None, "") else math.nan
        out[_norm_key(r[key])] = (float(r[est]), lo, hi)
    return key, out


def _norm_key(v):
    f = float(v)
    return int(f) if f.is_integer() else f


def _summary(method, est, truth):
    e = np.array([v[0] for v in est]) - truth
    ci = np.array([v[1:] for v in est])
    has_ci = not np.isnan(ci).any()
    return {"method": method, "n": int(e.size), "rmse": float(np.sqrt(np.mean(e ** 2))),
            "bias": float(e.mean()),
            "coverage": float(np.mean((ci[:, 0] <= truth) & (truth <= ci[:, 1])))
            if has_ci else math.nan}


def compare_external(internal, external, truth: float | None = None,
                     mode: str = "conventional") -> dict:
    """Join external estimates to ours by iteration (SimReport) or by key
    (a mapping key -> tau or key -> (tau, ci_low, ci_high)) and report RMSE,
    bias and coverage for both over the common keys.

    Mismatched keys are counted in the result rather than dropped silently.
    """
    if isinstance(internal, SimReport):
        truth = internal.true_effect if truth is None else truth
        ours = {r.iteration: (r.tau_hat, *r.ci.get(mode, (math.nan, math.nan)))
                for r in internal.records if r.ok}
    else:
        truth = 0.0 if truth is None else truth
        ours = {}
        for k, v in internal.items():
            v = tuple(np.atleast_1d(np.asarray(v, dtype=float)))
            ours[_norm_key(k)] = v if len(v) == 3 else (v[0], math.nan, math.nan)
    _, theirs = _read_external(external)
    common = sorted(set(ours) & set(theirs))
    if not common:
        raise DataError("no keys in common between internal and external estimates")
    rows = [_summary("internal", [ours[k] for k in common], truth),
            _summary("external", [theirs[k] for k in common], truth)]
    return {"rows": rows, "n_common": len(common),
            "internal_only": sorted(set(ours) - set(theirs)),
            "external_only": sorted(set(theirs) - set(ours))}

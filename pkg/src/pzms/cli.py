"""Command-line front end: ``pzms select | estimate | infer | sim | dgp-fit | profile``.

Settings come from an INI config (``--config``); flags override config keys
and ``--set section.key=value`` overrides anything.  Exit codes: 0 ok,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
import warnings
from types import SimpleNamespace

import numpy as np

from . import __version__
from .candidates import CandidateSpec, bandwidth_profile, enumerate_candidates, estimate, spec_from_model
from .config import OUTPUT_ENV, RunConfig, load_config, parse_range
from .dataset import Dataset, collapse_by_running, load_dataset, split_density_groups
from .dgp import DgpSpec, StylizedKind, fit_realistic_dgp
from .errors import ConfigError, DataError, PzmsError
from .harness import Scenario, run_mc
from .inference import sweep_inference
from .placebo import (SKIP_REASONS, score, select_best, sweep,
                      weighted_average_estimate, weighted_average_placebo)
from .regress import t_pvalue

METRIC_FIELDS = ("index", "label", "model_id", "family", "form", "bw_left", "bw_right", "kernel",
                 "use_row_weights", "covariates", "rmse", "bias", "coverage", "n_estimates",
                 "unreliable", "spec_hash")
ESTIMATE_FIELDS = ("index", "spec_hash", "group", "segment", "threshold", "tau", "se",
                   "n_left", "n_right", "skip")


# ----------------------------------------------------------------- output helpers

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n"


class AtomicOutputs:
    """Collect output files in a scratch directory and move them into place
    only when the command succeeds; on failure nothing is left behind."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.names: list[str] = []

    def __enter__(self):
        os.makedirs(self.out_dir, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".pzms-", dir=self.out_dir)
        return self

    def path(self, name: str) -> str:
        self.names.append(name)
        return os.path.join(self.tmp, name)

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as f:
            f.write(text)

    def write_csv(self, name: str, fields, rows) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(fields)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for n in self.names:
                    os.replace(os.path.join(self.tmp, n), os.path.join(self.out_dir, n))
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _stamp(cfg: RunConfig, seed=None) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": seed, "version": __version__}


# ----------------------------------------------------------------- shared steps

def _load_data(cfg: RunConfig) -> Dataset:
    path = cfg.data_path()
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    ds = load_dataset(path, cfg.schema(), cfg.delimiter())
    return collapse_by_running(ds) if cfg.collapse() else ds


def _split_plan(cfg: RunConfig, ds: Dataset):
    sp = cfg.split()
    if sp is None:
        return None
    pz, tz, seed = sp
    # the segment is (lo, hi]; the split uses half-open [lo, hi) intervals
    return split_density_groups(ds, pz, tz, seed)


def _metric_row(m) -> list:
    s = m.spec
    return [m.index, s.label, s.model_id, s.family, s.form, s.bw_left, s.bw_right, s.kernel,
            s.use_row_weights, "|".join(s.covariates), m.rmse, m.bias, m.coverage,
            m.n_estimates, m.unreliable, s.spec_hash()]


def _spec_from_args(args, cfg: RunConfig) -> CandidateSpec:
    if args.model is not None:
        if args.bw_left is None:
            raise ConfigError("--model needs --bw-left (and optionally --bw-right)")
        return spec_from_model(args.model, args.bw_left, args.bw_right, kernel=args.kernel)
    path = args.spec or os.path.join(cfg.output_dir(), "best_spec.json")
    if not os.path.exists(path):
        raise ConfigError(f"no spec given and {path} does not exist (run select or pass --model)")
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return CandidateSpec.from_dict(doc.get("spec", doc))


# ----------------------------------------------------------------- commands

def cmd_select(cfg: RunConfig, threads: int) -> dict:
    cfg.validate(("data", "zone", "candidates"))
    zone, rule, k0 = cfg.zone(), cfg.shift_rule(), cfg.k0()
    specs = enumerate_candidates(cfg.grid())
    ds = _load_data(cfg)
    split = _split_plan(cfg, ds)
    sr = sweep(ds, specs, zone, rule=rule, split=split, threads=threads, k0=k0)
    metrics = score(sr)
    if not metrics:
        raise DataError("no candidate produced a placebo estimate")
    sel = select_best(metrics, per_form=True)
    best = sel.best
    doc = {
        "spec": best.spec.to_dict(), "spec_hash": best.spec.spec_hash(), "label": best.spec.label,
        "rmse": best.rmse, "bias": best.bias, "coverage": best.coverage,
        "n_estimates": best.n_estimates, "candidates": len(specs),
        "thresholds": int(np.unique(sr.thresholds).size), "groups": int(np.unique(sr.groups).size),
    }
    forms = list(sel.per_form.values())
    if len(forms) >= 2:
        mses = [m.mse for m in forms]
        wa = weighted_average_estimate(ds, [m.spec for m in forms], mses, k0)
        rmse, count = weighted_average_placebo(sr, [m.index for m in forms], mses)
        doc["weighted_average"] = {
            "tau": wa.estimate.tau, "placebo_rmse": rmse, "placebo_count": count,
            "components": [{"spec_hash": m.spec.spec_hash(), "label": m.spec.label,
                            "weight": float(w), "tau": c.tau}
                           for m, w, c in zip(forms, wa.weights, wa.components)],
        }
    doc.update(_stamp(cfg, cfg.split()[2] if cfg.split() else None))
    hashes = [s.spec_hash() for s in specs]
    with AtomicOutputs(cfg.output_dir()) as out:
        out.write_csv("metrics.csv", METRIC_FIELDS, (_metric_row(m) for m in metrics))
        out.write_csv("best_per_form.csv", METRIC_FIELDS, (_metric_row(m) for m in forms))
        out.write_csv("estimates.csv", ESTIMATE_FIELDS, (
            [i, hashes[i], int(sr.groups[j]), int(sr.segments[j]), sr.thresholds[j],
             sr.tau[i, j], sr.se[i, j], sr.n_left[i, j], sr.n_right[i, j],
             SKIP_REASONS[int(sr.skip[i, j])] or "ok"]
            for i in range(len(specs)) for j in range(sr.thresholds.size)))
        out.write_text("best_spec.json", _dumps(doc))
    print(f"best: {best.spec.label} ({best.spec.description}) placebo RMSE {best.rmse:.6g} "
          f"over {best.n_estimates} estimates; {len(specs)} candidates")
    return doc


def _conventional(spec, ds, k0) -> dict:
    est = estimate(spec, ds, k0)
    p = t_pvalue(est.tau / est.se) if est.se > 0 else float("nan")
    return {"spec": spec.to_dict(), "spec_hash": spec.spec_hash(), "label": spec.label,
            **est.to_dict(), "p_conventional": p}


def _placebo_from_file(path: str, spec_hash: str):
    with open(path, newline="", encoding="utf-8") as f:
        rows = [r for r in csv.DictReader(f) if r["spec_hash"] == spec_hash]
    if not rows:
        return None
    ok = np.array([r["skip"] == "ok" for r in rows])
    return SimpleNamespace(
        tau=np.array([[float(r["tau"]) for r in rows]]), skip=np.where(ok, 0, 1)[None, :],
        groups=np.array([int(r["group"]) for r in rows]),
        segments=np.array([int(r["segment"]) for r in rows]))


def cmd_estimate(cfg: RunConfig, args, infer: bool, threads: int) -> dict:
    needs = ("data", "zone") if infer and cfg.has_zone() else ("data",)
    cfg.validate(needs)
    spec = _spec_from_args(args, cfg)
    ds = _load_data(cfg)
    k0 = cfg.k0()
    doc = _conventional(spec, ds, k0)
    name = "estimate.json"
    if infer:
        name = "inference.json"
        # placebo estimates: --placebo, else a prior select run, else a fresh sweep
        sr = None
        placebo = args.placebo or os.path.join(cfg.output_dir(), "estimates.csv")
        if args.placebo and not os.path.exists(placebo):
            raise DataError(f"placebo file not found: {placebo}")
        if os.path.exists(placebo):
            sr = _placebo_from_file(placebo, spec.spec_hash())
        if sr is None and cfg.has_zone():
            sr = sweep(ds, [spec], cfg.zone(), rule=cfg.shift_rule(), split=_split_plan(cfg, ds),
                       threads=threads, k0=k0)
        ri = None
        if sr is not None:
            try:
                ri = sweep_inference(sr, 0, doc["tau"], cfg.rounding())
            except (ValueError, PzmsError) as e:
                warnings.warn(f"randomization inference unavailable: {e}")
        else:
            warnings.warn("no placebo estimates for this spec; reporting conventional inference only")
        if ri is not None:
            r = ri.to_dict()
            if not cfg.nonparam():
                for k in ("p_nonparam", "p_nonparam_is_bound", "inside_range"):
                    r[k] = None
            doc["randomization"] = r
        else:
            doc["randomization"] = None
    doc.update(_stamp(cfg))
    with AtomicOutputs(cfg.output_dir()) as out:
        out.write_text(name, _dumps(doc))
    line = f"tau = {doc['tau']:.6g} (se {doc['se']:.4g}, p {doc['p_conventional']:.4g})"
    if infer and doc.get("randomization"):
        r = doc["randomization"]
        line += f"; RI se {r['se_ri']:.4g}, df {r['df']}, p {r['p_param']:.4g}"
    print(line)
    return doc


def _sim_scenario(cfg: RunConfig) -> tuple[Scenario, dict]:
    dgp_arg = cfg.get("sim", "dgp", "linear")
    extra = {}
    seed = int(cfg.get("sim", "seed", "0"))
    iters = int(cfg.get("sim", "iterations", "1000"))
    kw = dict(iterations=iters, seed=seed,
              bw_min=float(cfg.get("sim", "bw_min", "30")),
              bw_step=float(cfg.get("sim", "bw_step", "10")),
              left_cap=float(cfg.get("sim", "left_cap", "100")))
    if dgp_arg.endswith(".json") or os.path.isfile(dgp_arg):
        path = dgp_arg if os.path.isabs(dgp_arg) else os.path.join(cfg.base_dir, dgp_arg)
        with open(path, encoding="utf-8") as f:
            dgp = DgpSpec.from_json(f.read())
        extra["dgp_hash"] = dgp.spec_hash()
    else:
        dgp = StylizedKind(dgp_arg, float(cfg.get("sim", "sigma", "0.1")),
                           cfg.get("sim", "zone", "long"))
    grid = cfg.grid() if cfg.has_grid() else None
    zone = cfg.zone() if cfg.has_zone() else None
    return Scenario(dgp, grid=grid, zone=zone, **kw), extra


def cmd_sim(cfg: RunConfig, threads: int) -> dict:
    cfg.validate(())
    try:
        scenario, extra = _sim_scenario(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    report = run_mc(scenario, workers=threads)
    stamp = {**_stamp(cfg, scenario.seed), **extra}
    with AtomicOutputs(cfg.output_dir()) as out:
        out.write_text("sim_report.json", report.to_json(stamp))
        if cfg.trace():
            report.write_trace(out.path("trace.csv"))
    cov = ", ".join(f"{k} {v:.3f}" for k, v in report.coverage.items())
    print(f"rmse {report.rmse:.4f}  mean bw (right) {report.mean_bw:.2f}  linear share "
          f"{report.linear_share:.3f}  coverage: {cov}  ({report.iterations_completed} iterations)")
    return report.to_dict(stamp)


def cmd_dgp_fit(cfg: RunConfig, out_path: str | None) -> dict:
    cfg.validate(("data",))
    spec = fit_realistic_dgp(_load_data(cfg))
    doc = {**spec.to_dict(), "spec_hash": spec.spec_hash(), **_stamp(cfg)}
    out_dir, name = cfg.output_dir(), "dgp.json"
    if out_path:
        out_dir, name = os.path.dirname(os.path.abspath(out_path)), os.path.basename(out_path)
    with AtomicOutputs(out_dir) as out:
        out.write_text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"fitted DGP {spec.spec_hash()}: jump {spec.jump:.6g}, kink {spec.kink:.6g}, "
          f"sigma {spec.sigma:.6g}")
    return doc


def cmd_profile(cfg: RunConfig, args) -> list:
    cfg.validate(("data",))
    bws = parse_range(args.bandwidths)
    if not bws:
        raise ConfigError("--bandwidths is empty")
    ds = _load_data(cfg)
    try:
        rows, notes = bandwidth_profile(ds, args.family, args.form, bws, cfg.k0(),
                                        kernel=args.kernel)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for n in notes:
        print(f"note: {n}", file=sys.stderr)
    fields = ("bw_left", "bw_right", "tau", "ci_low", "ci_high")
    with AtomicOutputs(cfg.output_dir()) as out:
        out.write_csv("profile.csv", fields, rows)
    print(f"profile: {len(rows)} bandwidths written")
    return rows


# ----------------------------------------------------------------- argument parsing

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--out-dir", help=f"output directory (default: output.dir, then ${OUTPUT_ENV})")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker count; results do not depend on it (default: logical cores)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--data", help="data file (data.file)")
    common.add_argument("--schema", help='column roles, e.g. "y=out, x=run, w=n" (data.schema)')

    ap = argparse.ArgumentParser(prog="pzms", description="Placebo-zone model selection for "
                                 "discontinuity designs")
    ap.add_argument("--version", action="version", version=f"pzms {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common], help="score all candidates on the placebo zone")
    p.add_argument("--segments", help='placebo segments "lo:hi, ..." (zone.segments)')
    p.add_argument("--spacing", help="threshold spacing (zone.spacing)")
    p.add_argument("--models", help="model ids, e.g. 1,2,3 (candidates.models)")
    p.add_argument("--bandwidths", help='bandwidth range "30:300:10" (candidates.bandwidths)')

    for name, text in (("estimate", "estimate at the real threshold"),
                       ("infer", "estimate plus randomization inference")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--spec", help="spec JSON (default: <out>/best_spec.json)")
        p.add_argument("--model", type=int, help="explicit model id 1..14")
        p.add_argument("--bw-left", type=float)
        p.add_argument("--bw-right", type=float)
        p.add_argument("--kernel", default="uniform", choices=("uniform", "triangular"))
        if name == "infer":
            p.add_argument("--placebo", help="estimates.csv from a select run")
            p.add_argument("--segments", help="placebo segments when sweeping afresh")
            p.add_argument("--spacing")

    p = sub.add_parser("sim", parents=[common], help="Monte Carlo simulation")
    p.add_argument("--dgp", help="linear|quadratic|cubic|sine|cosine or a DGP JSON file")
    p.add_argument("--sigma", type=float)
    p.add_argument("--zone", choices=("long", "short"))
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", action="store_true", help="write a per-iteration trace.csv")

    p = sub.add_parser("dgp-fit", parents=[common], help="fit a quintic+jump+kink DGP to data")
    p.add_argument("--out", help="output JSON path (default: <out>/dgp.json)")

    p = sub.add_parser("profile", parents=[common], help="estimate across bandwidths at the threshold")
    p.add_argument("--family", default="RDD")
    p.add_argument("--form", default="linear")
    p.add_argument("--bandwidths", required=True, help='e.g. "10:300:10"')
    p.add_argument("--kernel", default="uniform", choices=("uniform", "triangular"))
    return ap


_FLAG_KEYS = {
    "data": "data.file", "schema": "data.schema", "segments": "zone.segments",
    "spacing": "zone.spacing", "models": "candidates.models", "dgp": "sim.dgp",
    "sigma": "sim.sigma", "zone": "sim.zone", "iters": "sim.iterations", "seed": "sim.seed",
    "out_dir": "output.dir",
}


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            # flag paths are relative to the working directory, not the config file
            overrides[key] = os.path.abspath(v) if attr == "data" else v
    if args.command == "select" and args.bandwidths is not None:
        overrides["candidates.bandwidths"] = args.bandwidths
    if getattr(args, "trace", False):
        overrides["output.trace"] = "true"
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    warnings.simplefilter("default")
    try:
        cfg = _config_from_args(args)
        threads = max(1, args.threads)
        if args.command == "select":
            cmd_select(cfg, threads)
        elif args.command in ("estimate", "infer"):
            cmd_estimate(cfg, args, args.command == "infer", threads)
        elif args.command == "sim":
            cmd_sim(cfg, threads)
        elif args.command == "dgp-fit":
            cmd_dgp_fit(cfg, args.out)
        elif args.command == "profile":
            cmd_profile(cfg, args)
    except PzmsError as e:
        print(f"pzms: error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"pzms: error: {e}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

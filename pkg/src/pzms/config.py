"""Run configuration: a sectioned key-value (INI) file with CLI overrides.

Precedence, lowest first: built-in defaults, the config file, then
command-line flags.  Everything is validated before any computation.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .candidates import FAMILIES, KERNELS, CandidateGrid
from .dataset import ShiftRule, parse_schema
from .errors import ConfigError
from .inference import ROUNDING_MODES
from .placebo import PlaceboZone

__all__ = ["RunConfig", "load_config", "parse_range", "parse_segments", "OUTPUT_ENV"]

OUTPUT_ENV = "PZMS_OUTPUT_DIR"

SECTIONS = {
    "data": ("file", "schema", "delimiter", "collapse"),
    "zone": ("segments", "spacing", "k0", "window_left", "window_right", "shift", "z0",
             "split", "treatment_zone", "split_seed"),
    "candidates": ("models", "families", "forms", "bandwidths", "bw_left", "bw_right",
                   "symmetric", "left_cap", "right_cap", "kernels", "row_weights",
                   "covariate_sets", "cohort_bin_width"),
    "inference": ("rounding", "nonparam"),
    "sim": ("dgp", "sigma", "zone", "iterations", "seed", "bw_min", "bw_step", "left_cap"),
    "output": ("dir", "trace"),
}


def parse_range(text: str) -> list[float]:
    """``"30:300:10"`` (inclusive) or a comma list ``"35, 50, 100"``."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad range {text!r} (expected start:stop[:step])")
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) == 3 else 1.0
        if not step > 0 or stop < start:
            raise ConfigError(f"bad range {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [float(v) for v in start + step * np.arange(n)]
    return [float(p) for p in text.split(",") if p.strip()]


def parse_segments(text: str) -> tuple[tuple[float, float], ...]:
    """``"0:800, 1000:2000"`` into ``((0, 800), (1000, 2000))``."""
    segs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lo, hi = (float(v) for v in part.split(":"))
        except ValueError:
            raise ConfigError(f"bad segment {part!r} (expected lo:hi)") from None
        segs.append((lo, hi))
    return tuple(segs)


def _list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _float(text: str, key: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


@dataclass
class RunConfig:
    """Raw string values per section plus typed accessors."""

    values: dict = field(default_factory=dict)   # section -> {key: str}
    base_dir: str = "."

    def get(self, section: str, key: str, default: str | None = None) -> str | None:
        v = self.values.get(section, {}).get(key)
        return default if v is None or v == "" else v

    def set(self, section: str, key: str, value) -> None:
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        if value is not None:
            self.values.setdefault(section, {})[key] = str(value)

    def config_hash(self) -> str:
        """Hash of the effective settings; output locations do not count."""
        vals = {s: dict(sorted(kv.items())) for s, kv in sorted(self.values.items())
                if s != "output"}
        blob = json.dumps(vals, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # ------------------------------------------------------------------ data
    def data_path(self) -> str:
        f = self.get("data", "file")
        if f is None:
            raise ConfigError("data.file is required")
        return f if os.path.isabs(f) else os.path.join(self.base_dir, f)

    def schema(self) -> dict:
        s = self.get("data", "schema")
        return parse_schema(s) if s else {"y": "y", "x": "x"}

    def delimiter(self) -> str | None:
        d = self.get("data", "delimiter")
        return "\t" if d in ("tab", "\\t") else d

    def collapse(self) -> bool:
        return _bool(self.get("data", "collapse", "false"), "data.collapse")

    # ------------------------------------------------------------------ zone
    def k0(self) -> float:
        return _float(self.get("zone", "k0", "0"), "zone.k0")

    def zone(self) -> PlaceboZone:
        s = self.get("zone", "segments")
        if s is None:
            raise ConfigError("zone.segments is required")
        sp = self.get("zone", "spacing")
        zone = PlaceboZone(parse_segments(s), _float(sp, "zone.spacing") if sp else None)
        k0 = self.k0()
        zone.validate_real_threshold(k0)
        wl, wr = self.get("zone", "window_left"), self.get("zone", "window_right")
        if wl is not None or wr is not None:
            lo = k0 - _float(wl or "0", "zone.window_left")
            hi = k0 + _float(wr or "0", "zone.window_right")
            for a, b in zone.segments:
                if a < hi and lo < b:
                    raise ConfigError(f"placebo segment ({a:g}, {b:g}] overlaps the real-threshold "
                                      f"window [{lo:g}, {hi:g})")
        return zone

    def has_zone(self) -> bool:
        return self.get("zone", "segments") is not None

    def shift_rule(self) -> ShiftRule:
        mode = self.get("zone", "shift", "sharp")
        z0 = self.get("zone", "z0")
        return ShiftRule(mode, _float(z0, "zone.z0") if z0 is not None else 0.0)

    def split(self) -> tuple[tuple[float, float], tuple[float, float], int] | None:
        if not _bool(self.get("zone", "split", "false"), "zone.split"):
            return None
        segs = parse_segments(self.get("zone", "segments", ""))
        tz = parse_segments(self.get("zone", "treatment_zone", ""))
        if len(segs) != 1 or len(tz) != 1:
            raise ConfigError("density splitting needs one placebo segment and zone.treatment_zone")
        return segs[0], tz[0], _int(self.get("zone", "split_seed", "0"), "zone.split_seed")

    # ------------------------------------------------------------ candidates
    def grid(self) -> CandidateGrid:
        g = lambda k, d=None: self.get("candidates", k, d)   # noqa: E731
        models = g("models")
        families = _list(g("families", "")) or None
        forms = _list(g("forms", "")) or None
        if models is None and forms is None:
            raise ConfigError("candidates.models or candidates.forms is required")
        if families:
            for f in families:
                if f not in FAMILIES:
                    raise ConfigError(f"unknown family {f!r}")
        kernels = tuple(_list(g("kernels", "uniform")))
        for k in kernels:
            if k not in KERNELS:
                raise ConfigError(f"unknown kernel {k!r}")
        covsets = [tuple(c for c in part.split("|") if c.strip()) if part.strip() != "none" else ()
                   for part in g("covariate_sets", "none").split(",")]
        symmetric = _bool(g("symmetric", "true"), "candidates.symmetric")
        grid = CandidateGrid(
            models=tuple(_int(m, "candidates.models") for m in _list(models)) if models else None,
            families=families, forms=forms,
            bandwidths=tuple(parse_range(g("bandwidths", ""))),
            bw_left=tuple(parse_range(g("bw_left", ""))),
            bw_right=tuple(parse_range(g("bw_right", ""))),
            symmetric=symmetric,
            left_cap=_float(g("left_cap"), "candidates.left_cap") if g("left_cap") else None,
            right_cap=_float(g("right_cap"), "candidates.right_cap") if g("right_cap") else None,
            kernels=kernels,
            row_weights=tuple(_bool(v, "candidates.row_weights")
                              for v in _list(g("row_weights", "true"))),
            covariate_sets=tuple(covsets),
            cohort_bin_width=_float(g("cohort_bin_width", "30"), "candidates.cohort_bin_width"),
        )
        if models:
            from .candidates import MODEL_IDS
            for m in grid.models:
                if m not in MODEL_IDS:
                    raise ConfigError(f"unknown model id {m} (expected 1..14)")
        if symmetric and not grid.bandwidths:
            raise ConfigError("candidates.bandwidths is required for a symmetric grid")
        if not symmetric and not (grid.bw_left and grid.bw_right):
            raise ConfigError("candidates.bw_left and candidates.bw_right are required")
        return grid

    def has_grid(self) -> bool:
        return "candidates" in self.values and bool(self.values["candidates"])

    # ------------------------------------------------------------- inference
    def rounding(self) -> str:
        r = self.get("inference", "rounding", "half-up")
        if r not in ROUNDING_MODES:
            raise ConfigError(f"inference.rounding must be one of {ROUNDING_MODES}")
        return r

    def nonparam(self) -> bool:
        return _bool(self.get("inference", "nonparam", "true"), "inference.nonparam")

    # ---------------------------------------------------------------- output
    def output_dir(self) -> str:
        d = self.get("output", "dir") or os.environ.get(OUTPUT_ENV) or "pzms_out"
        return d

    def trace(self) -> bool:
        return _bool(self.get("output", "trace", "false"), "output.trace")

    def validate(self, needs: tuple[str, ...]) -> None:
        """Type-check whatever the command will use, before it starts."""
        for s, kv in self.values.items():
            if s not in SECTIONS:
                raise ConfigError(f"unknown config section [{s}]")
            for k in kv:
                if k not in SECTIONS[s]:
                    raise ConfigError(f"unknown config key {s}.{k}")
        if "data" in needs:
            self.data_path()
            self.schema()
            self.collapse()
        if "zone" in needs:
            self.zone()
            rule = self.shift_rule()
            if rule.mode == "shifted-aux" and "z" not in self.schema():
                raise ConfigError("shifted-aux placebo treatment needs a z column in data.schema")
            self.split()
        if "candidates" in needs:
            grid = self.grid()
            if grid.covariate_sets and any(grid.covariate_sets):
                cov = set(self.schema().get("cov", []))
                for cs in grid.covariate_sets:
                    missing = set(cs) - cov
                    if missing:
                        raise ConfigError(f"covariates {sorted(missing)} are not in data.schema")
        self.rounding()
        self.nonparam()
        self.trace()


def load_config(path: str | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides`` keyed ``"section.key"``."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        for s in cp.sections():
            if s not in SECTIONS:
                raise ConfigError(f"unknown config section [{s}]")
            for k, v in cp.items(s):
                cfg.set(s, k, v)
        cfg.base_dir = os.path.dirname(os.path.abspath(path))
    for dotted, v in (overrides or {}).items():
        s, k = dotted.split(".", 1)
        cfg.set(s, k, v)
    return cfg

"""Tabular input: loading, collapsing to running-variable cells, cohort bins,
placebo treatments and density splitting."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError, SchemaError

__all__ = [
    "Dataset",
    "ShiftRule",
    "DensitySplitPlan",
    "load_dataset",
    "collapse_by_running",
    "assign_bins",
    "gen_placebo_treatment",
    "split_density_groups",
    "round_half_up",
]


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _readonly(a):
    if a is None:
        return None
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome ``y`` and running variable ``x`` (real threshold at 0), with
    positive row weights ``w`` and optional treatment ``t``, auxiliary
    ``z`` and covariate matrix ``cov``.

    Arrays are made read-only on construction so one instance can be shared
    across workers.
    """

    y: np.ndarray
    x: np.ndarray
    w: np.ndarray | None = None
    t: np.ndarray | None = None
    z: np.ndarray | None = None
    cov: np.ndarray | None = None
    cov_names: tuple[str, ...] = ()
    collapsed: bool = False

    def __post_init__(self):
        y = _readonly(self.y)
        x = _readonly(self.x)
        if y.ndim != 1 or x.shape != y.shape:
            raise SchemaError("y and x must be 1-d arrays of equal length")
        n = y.shape[0]
        w = np.ones(n) if self.w is None else self.w
        w = _readonly(w)
        if w.shape != (n,):
            raise SchemaError("w must match y in length")
        if n and not np.all(w > 0):
            raise SchemaError("row weights must be strictly positive")
        if np.isnan(y).any() or np.isnan(x).any():
            raise SchemaError("y and x may not contain missing values")
        cov = np.zeros((n, 0)) if self.cov is None else np.asarray(self.cov, float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.shape[0] != n:
            raise SchemaError("covariate matrix must have one row per observation")
        names = tuple(self.cov_names) or tuple(f"cov{i}" for i in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise SchemaError("cov_names does not match the covariate matrix")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "t", _readonly(self.t))
        object.__setattr__(self, "z", _readonly(self.z))
        object.__setattr__(self, "cov", _readonly(cov))
        object.__setattr__(self, "cov_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def __len__(self):
        return self.n

    @property
    def has_t(self) -> bool:
        return self.t is not None

    @property
    def has_z(self) -> bool:
        return self.z is not None

    @property
    def x_spacing(self) -> float:
        """Smallest positive gap between sorted distinct x values."""
        ux = np.unique(self.x)
        if ux.size < 2:
            return 1.0
        return float(np.min(np.diff(ux)))

    def covariates(self, names: Sequence[str]) -> np.ndarray:
        idx = []
        for nm in names:
            if nm not in self.cov_names:
                raise SchemaError(f"unknown covariate {nm!r}")
            idx.append(self.cov_names.index(nm))
        return self.cov[:, idx]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        pick = lambda a: None if a is None else a[mask]
        return Dataset(
            y=self.y[mask], x=self.x[mask], w=self.w[mask], t=pick(self.t), z=pick(self.z),
            cov=self.cov[mask], cov_names=self.cov_names, collapsed=self.collapsed,
        )

    def with_y(self, y) -> "Dataset":
        return replace(self, y=np.asarray(y, float))

    def to_csv(self, path_or_buf) -> None:
        """Dump as comma-delimited text (columns y, x, w, then t, z, covariates)."""
        cols = {"y": self.y, "x": self.x, "w": self.w}
        if self.t is not None:
            cols["t"] = self.t
        if self.z is not None:
            cols["z"] = self.z
        for j, nm in enumerate(self.cov_names):
            cols[nm] = self.cov[:, j]
        own = isinstance(path_or_buf, (str, os.PathLike))
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(list(cols))
            for i in range(self.n):
                wr.writerow([repr(float(c[i])) for c in cols.values()])
        finally:
            if own:
                fh.close()


# --------------------------------------------------------------------------- loading

_ROLES = ("y", "x", "w", "t", "z")


def parse_schema(text: str) -> dict:
    """Parse ``"y=crash1yr, x=dob_centered, cov=a|b"`` into a schema mapping."""
    schema: dict = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad schema entry {part!r} (expected role=column)")
        role, col = (s.strip() for s in part.split("=", 1))
        if role == "cov":
            schema["cov"] = [c.strip() for c in col.split("|") if c.strip()]
        elif role in _ROLES:
            schema[role] = col
        else:
            raise ConfigError(f"unknown schema role {role!r}")
    return schema


def load_dataset(source, schema: Mapping | None = None, delimiter: str | None = None) -> Dataset:
    """Read delimited text (comma or tab, header row) into a :class:`Dataset`.

    ``source`` is a path or an open text stream.  ``schema`` maps roles
    (``y``, ``x``, optional ``w``, ``t``, ``z`` and ``cov`` as a list) to
    column names; by default the columns are assumed to carry the role names.
    Data rows are reported 1-based, not counting the header.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    if not text.strip():
        raise EmptyInputError("input is empty")
    if delimiter is None:
        first = text.splitlines()[0]
        delimiter = "\t" if "\t" in first else ","
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise EmptyInputError("input has a header but no data rows")

    schema = dict(schema or {"y": "y", "x": "x"})
    for role in ("y", "x"):
        if role not in schema:
            raise SchemaError(f"schema lacks required role {role!r}")
    wanted = {r: schema[r] for r in _ROLES if schema.get(r)}
    covs = list(schema.get("cov", []) or [])
    pos = {}
    for col in list(wanted.values()) + covs:
        if col not in header:
            raise SchemaError(f"column {col!r} not found in header")
        pos[col] = header.index(col)

    def column(col):
        j = pos[col]
        out = np.empty(len(rows))
        for i, r in enumerate(rows, start=1):
            cell = r[j].strip() if j < len(r) else ""
            if cell == "":
                raise ParseError(f"row {i}: missing value in column {col!r}", row=i, column=col)
            try:
                out[i - 1] = float(cell)
            except ValueError:
                raise ParseError(f"row {i}: non-numeric value {cell!r} in column {col!r}",
                                 row=i, column=col) from None
        return out

    vals = {role: column(col) for role, col in wanted.items()}
    cov = np.column_stack([column(c) for c in covs]) if covs else None
    return Dataset(
        y=vals["y"], x=vals["x"], w=vals.get("w"), t=vals.get("t"), z=vals.get("z"),
        cov=cov, cov_names=tuple(covs),
    )


# --------------------------------------------------------------------------- transforms

def collapse_by_running(ds: Dataset) -> Dataset:
    """One row per distinct x holding within-cell weighted means and the
    cell weight sum."""
    if ds.collapsed:
        raise ValueError("dataset is already collapsed")
    ux, inv = np.unique(ds.x, return_inverse=True)
    wsum = np.bincount(inv, weights=ds.w, minlength=ux.size)

    def cell_mean(v):
        return np.bincount(inv, weights=ds.w * v, minlength=ux.size) / wsum

    t = cell_mean(ds.t) if ds.t is not None else None
    z = cell_mean(ds.z) if ds.z is not None else None
    cov = (np.column_stack([cell_mean(ds.cov[:, j]) for j in range(ds.cov.shape[1])])
           if ds.cov.shape[1] else None)
    return Dataset(y=cell_mean(ds.y), x=ux, w=wsum, t=t, z=z, cov=cov,
                   cov_names=ds.cov_names, collapsed=True)


def assign_bins(x, bin_width: float, anchor: float = 0.0) -> np.ndarray:
    """Cohort bin labels ``floor((x - anchor) / bin_width)``.

    Bin 0 starts at the anchor, so no bin straddles it.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    x = x.x if isinstance(x, Dataset) else np.asarray(x, float)
    return np.floor((x - anchor) / bin_width).astype(np.int64)


@dataclass(frozen=True)
class ShiftRule:
    """How treatment is assigned at a threshold ``k``.

    ``sharp``: ``T = 1(x >= k)``.  ``shifted-aux``: ``T = 1(z >= z0 + k)``,
    the auxiliary cutoff translated by the same offset as the threshold.
    """

    mode: str = "sharp"
    z0: float = 0.0

    def __post_init__(self):
        if self.mode not in ("sharp", "shifted-aux"):
            raise ConfigError(f"unknown treatment rule {self.mode!r}")

    def check(self, ds: Dataset) -> None:
        if self.mode == "shifted-aux" and not ds.has_z:
            raise SchemaError("shifted-aux treatment rule requires a z column")


def gen_placebo_treatment(ds: Dataset, rule: ShiftRule, k: float) -> np.ndarray:
    rule.check(ds)
    if rule.mode == "sharp":
        return (ds.x >= k).astype(float)
    return (ds.z >= rule.z0 + k).astype(float)


@dataclass(frozen=True)
class DensitySplitPlan:
    g: int
    labels: np.ndarray = field(repr=False)  # 0 outside the placebo zone, else 1..g
    seed: int = 0

    def group_mask(self, group: int) -> np.ndarray:
        """Rows of ``group`` plus every row outside the placebo zone."""
        return (self.labels == group) | (self.labels == 0)


def _interval_mask(x, iv):
    lo, hi = iv
    return (x >= lo) & (x < hi)


def split_density_groups(ds: Dataset, placebo_zone, treatment_zone, seed: int) -> DensitySplitPlan:
    """Randomly split placebo-zone rows into ``g`` groups so each group's
    density roughly matches the treatment zone's.

    Zones are half-open x-intervals ``[lo, hi)``.  ``g`` is the rounded
    ratio of weight-per-unit-x densities, at least 1.
    """
    pz, tz = tuple(placebo_zone), tuple(treatment_zone)
    if not (pz[1] <= tz[0] or tz[1] <= pz[0]):
        raise ConfigError("placebo and treatment zones overlap")
    in_p = _interval_mask(ds.x, pz)
    in_t = _interval_mask(ds.x, tz)
    if not in_p.any() or not in_t.any():
        raise EmptyInputError("density split needs rows in both zones")
    dens_p = ds.w[in_p].sum() / (pz[1] - pz[0])
    dens_t = ds.w[in_t].sum() / (tz[1] - tz[0])
    g = max(1, round_half_up(dens_p / dens_t))
    labels = np.zeros(ds.n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    labels[in_p] = rng.integers(1, g + 1, size=int(in_p.sum()))
    labels.setflags(write=False)
    return DensitySplitPlan(g=g, labels=labels, seed=seed)

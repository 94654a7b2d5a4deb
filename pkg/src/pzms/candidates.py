"""Candidate estimators: the 14 model forms, design construction, and the
direct (reference) estimator at a single threshold."""

from __future__ import annotations

import hashlib
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, ShiftRule, gen_placebo_treatment
from .errors import DegenerateWindowError, SingularDesignError, ThinWindowError
from .regress import Z975, tsls_fit

__all__ = [
    "FAMILIES", "KERNELS", "FORMS", "MODEL_IDS", "Term", "FormDef", "CandidateSpec", "CandidateGrid",
    "EstimateResult", "Design", "enumerate_candidates", "build_design", "estimate",
    "bandwidth_profile", "form_def", "spec_from_model",
]

FAMILIES = ("RDD", "RPJKD", "RKD", "CohortIV")
KERNELS = ("uniform", "triangular")


@dataclass(frozen=True)
class Term:
    """Monomial ``u**power`` restricted to one side of the threshold (or both).

    ``u`` is the recentred running variable ``x - k``; side ``"R"`` means
    ``u >= 0``.
    """

    name: str
    power: int
    side: str  # "both", "L" or "R"

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        v = u ** self.power if self.power else np.ones_like(u)
        if self.side == "R":
            return v * (u >= 0)
        if self.side == "L":
            return v * (u < 0)
        return v


ONE = Term("1", 0, "both")
D = Term("D", 0, "R")
X = Term("X", 1, "both")
XD = Term("X*D", 1, "R")
X2L = Term("X^2*(1-D)", 2, "L")
X2R = Term("X^2*D", 2, "R")
X2 = Term("X^2", 2, "both")
X3 = Term("X^3", 3, "both")


@dataclass(frozen=True)
class FormDef:
    model_id: int
    family: str
    form: str
    description: str
    f_terms: tuple[Term, ...]
    instruments: tuple[Term, ...]  # empty for CohortIV: bin dummies instead


_RPJKD_F = {
    "linear": (X,),
    "quadratic": (X, X2),
    "mixed": (X, X2L),
    "interacted-quadratic": (X, X2L, X2),
}

FORMS: tuple[FormDef, ...] = (
    FormDef(1, "RDD", "linear", "RDD - linear", (X, XD), (D,)),
    FormDef(2, "RDD", "mixed", "RDD - mixed polynomial", (X, XD, X2L), (D,)),
    FormDef(3, "RDD", "quadratic", "RDD - quadratic", (X, XD, X2L, X2R), (D,)),
    FormDef(4, "RPJKD", "linear", "RPJKD - linear", _RPJKD_F["linear"], (D, XD)),
    FormDef(5, "RPJKD", "quadratic", "RPJKD - quadratic", _RPJKD_F["quadratic"], (D, XD)),
    FormDef(6, "RPJKD", "mixed", "RPJKD - mixed polynomial", _RPJKD_F["mixed"], (D, XD)),
    FormDef(7, "RPJKD", "interacted-quadratic", "RPJKD - interacted quadratic",
            _RPJKD_F["interacted-quadratic"], (D, XD)),
    FormDef(8, "RKD", "linear", "RKD - linear", _RPJKD_F["linear"], (XD,)),
    FormDef(9, "RKD", "quadratic", "RKD - quadratic", _RPJKD_F["quadratic"], (XD,)),
    FormDef(10, "RKD", "mixed", "RKD - mixed polynomial", _RPJKD_F["mixed"], (XD,)),
    FormDef(11, "RKD", "interacted-quadratic", "RKD - interacted quadratic",
            _RPJKD_F["interacted-quadratic"], (XD,)),
    FormDef(12, "CohortIV", "linear", "birth cohort-IV - linear", (X,), ()),
    FormDef(13, "CohortIV", "quadratic", "birth cohort-IV - quadratic", (X, X2), ()),
    FormDef(14, "CohortIV", "cubic", "birth cohort-IV - cubic", (X, X2, X3), ()),
)

_BY_KEY = {(f.family, f.form): f for f in FORMS}
MODEL_IDS = {f.model_id: f for f in FORMS}
_FORM_ORDER = {f.model_id: i for i, f in enumerate(FORMS)}


def form_def(family: str, form: str) -> FormDef:
    try:
        return _BY_KEY[(family, form)]
    except KeyError:
        raise ValueError(f"form {form!r} is not valid for family {family!r}") from None


@dataclass(frozen=True)
class CandidateSpec:
    family: str
    form: str
    bw_left: float
    bw_right: float
    kernel: str = "uniform"
    use_row_weights: bool = True
    covariates: tuple[str, ...] = ()
    cohort_bin_width: float = 30.0

    def __post_init__(self):
        form_def(self.family, self.form)
        if not (self.bw_left > 0 and self.bw_right > 0):
            raise ValueError("bandwidths must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.family == "CohortIV" and not self.cohort_bin_width > 0:
            raise ValueError("cohort_bin_width must be positive")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def definition(self) -> FormDef:
        return form_def(self.family, self.form)

    @property
    def model_id(self) -> int:
        return self.definition.model_id

    @property
    def description(self) -> str:
        return self.definition.description

    @property
    def max_order(self) -> int:
        return max(t.power for t in self.definition.f_terms + self.definition.instruments)

    def side_params(self) -> tuple[int, int]:
        """Polynomial parameters per side (highest power on that side + 1)."""
        terms = (ONE,) + self.definition.f_terms + self.definition.instruments
        left = max(t.power for t in terms if t.side in ("both", "L"))
        right = max(t.power for t in terms if t.side in ("both", "R"))
        return left + 1, right + 1

    @property
    def label(self) -> str:
        bw = f"{_num(self.bw_left)}" if self.bw_left == self.bw_right else \
            f"{_num(self.bw_left)}/{_num(self.bw_right)}"
        extra = "" if self.kernel == "uniform" else " tri"
        if not self.use_row_weights:
            extra += " unw"
        if self.covariates:
            extra += " +" + "+".join(self.covariates)
        return f"m{self.model_id:02d} bw{bw}{extra}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = list(self.covariates)
        d["model_id"] = self.model_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateSpec":
        keys = ("family", "form", "bw_left", "bw_right", "kernel", "use_row_weights",
                "covariates", "cohort_bin_width")
        return cls(**{k: d[k] for k in keys if k in d})

    def spec_hash(self) -> str:
        d = self.to_dict()
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _num(v):
    return f"{v:g}"


def spec_from_model(model_id: int, bw_left: float, bw_right: float | None = None, **kw) -> CandidateSpec:
    f = MODEL_IDS[model_id]
    return CandidateSpec(f.family, f.form, bw_left, bw_left if bw_right is None else bw_right, **kw)


@dataclass
class CandidateGrid:
    """Declarative candidate grid.

    Model forms are given either as ``models`` (Table-style ids 1..14) or as
    ``families`` x ``forms``.  With ``symmetric`` the bandwidth pairs are
    ``(min(b, left_cap), min(b, right_cap))`` for each ``b`` in ``bandwidths``;
    otherwise the Cartesian product ``bw_left`` x ``bw_right`` is used.
    """

    models: Sequence[int] | None = None
    families: Sequence[str] | None = None
    forms: Sequence[str] | None = None
    bandwidths: Sequence[float] = ()
    bw_left: Sequence[float] = ()
    bw_right: Sequence[float] = ()
    symmetric: bool = True
    left_cap: float | None = None
    right_cap: float | None = None
    kernels: Sequence[str] = ("uniform",)
    row_weights: Sequence[bool] = (True,)
    covariate_sets: Sequence[Sequence[str]] = ((),)
    cohort_bin_width: float = 30.0

    def bandwidth_pairs(self) -> list[tuple[float, float]]:
        if self.symmetric:
            lc = self.left_cap if self.left_cap is not None else np.inf
            rc = self.right_cap if self.right_cap is not None else np.inf
            pairs = [(float(min(b, lc)), float(min(b, rc))) for b in self.bandwidths]
        else:
            pairs = [(float(a), float(b)) for a in self.bw_left for b in self.bw_right]
        seen, out = set(), []
        for p in pairs:
            if p not in seen:
                seen.add(p)
                out.append(p)
        return sorted(out)

    def form_defs(self) -> list[FormDef]:
        if self.models is not None:
            return sorted((MODEL_IDS[int(m)] for m in self.models), key=lambda f: f.model_id)
        fams = list(self.families or FAMILIES)
        forms = list(self.forms or [])
        out = []
        for fam in fams:
            for fm in forms:
                key = (fam, fm)
                if key in _BY_KEY:
                    out.append(_BY_KEY[key])
                else:
                    warnings.warn(f"form {fm!r} is not valid for family {fam!r}; skipped",
                                  stacklevel=3)
        return sorted(out, key=lambda f: f.model_id)


def enumerate_candidates(grid: CandidateGrid) -> list[CandidateSpec]:
    """Cartesian product of forms, bandwidth pairs, kernels and toggles, in
    (family, form, bw_left, bw_right, kernel, flags) order."""
    forms = grid.form_defs()
    pairs = grid.bandwidth_pairs()
    specs = [
        CandidateSpec(f.family, f.form, bl, br, kernel=kern, use_row_weights=rw,
                      covariates=tuple(cs), cohort_bin_width=grid.cohort_bin_width)
        for f, (bl, br), kern, rw, cs in itertools.product(
            forms, pairs, grid.kernels, grid.row_weights, grid.covariate_sets)
    ]
    if not specs:
        raise ValueError("candidate grid is empty")
    return specs


@dataclass(frozen=True)
class EstimateResult:
    tau: float
    se: float
    ci_low: float
    ci_high: float
    n_left: int
    n_right: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Design:
    """Design matrices for one candidate at one threshold (window rows only)."""

    rows: np.ndarray
    u: np.ndarray
    y: np.ndarray
    endog: np.ndarray
    exog: np.ndarray
    exog_names: list[str]
    instruments: np.ndarray
    instrument_names: list[str]
    weights: np.ndarray
    clusters: np.ndarray
    n_left: int
    n_right: int
    cells_left: int
    cells_right: int
    scale: float = field(default=1.0)


def kernel_weights(u, bw_left, bw_right, kernel):
    if kernel == "uniform":
        return np.ones_like(u)
    b = np.where(u < 0, bw_left, bw_right)
    return np.maximum(0.0, 1.0 - np.abs(u) / b)


def _window(ds: Dataset, k: float, bw_left: float, bw_right: float):
    return np.flatnonzero((ds.x >= k - bw_left) & (ds.x < k + bw_right))


def _treatment(ds, rule, k, rows):
    if rule is None:
        if ds.t is None:
            return (ds.x[rows] >= k).astype(float)
        return ds.t[rows]
    return gen_placebo_treatment(ds, rule, k)[rows]


def build_design(spec: CandidateSpec, ds: Dataset, k: float, rule: ShiftRule | None = None) -> Design:
    """Structural and first-stage designs for ``spec`` at threshold ``k``.

    Polynomial columns use ``u / s`` with ``s = max(bw_left, bw_right)``;
    rescaling leaves the treatment coefficient unchanged.  ``rule=None``
    uses the dataset's own treatment column (or ``1(x >= k)`` if it has
    none).
    """
    rows = _window(ds, k, spec.bw_left, spec.bw_right)
    u = ds.x[rows] - k
    left = u < 0
    cells_l = np.unique(u[left]).size
    cells_r = np.unique(u[~left]).size
    pl, pr = spec.side_params()
    if cells_l < pl + 2 or cells_r < pr + 2:
        raise ThinWindowError(
            f"window at k={k:g} has {cells_l}/{cells_r} cells left/right; "
            f"{spec.label} needs at least {pl + 2}/{pr + 2}")
    s = max(spec.bw_left, spec.bw_right)
    us = u / s
    fdef = spec.definition
    exog_terms = (ONE,) + fdef.f_terms
    exog = np.column_stack([t.evaluate(us) for t in exog_terms])
    names = [t.name for t in exog_terms]
    for j, t in enumerate(exog_terms[1:], start=1):
        if np.ptp(exog[:, j]) == 0 and t.side == "both":
            raise DegenerateWindowError(f"column {t.name} is constant inside the window at k={k:g}")
    if spec.covariates:
        exog = np.column_stack([exog, ds.covariates(spec.covariates)[rows]])
        names += list(spec.covariates)
    if fdef.family == "CohortIV":
        labels = np.floor(u / spec.cohort_bin_width).astype(np.int64)
        present = np.unique(labels)
        if present.size < 2:
            raise DegenerateWindowError(f"window at k={k:g} spans a single cohort bin")
        inst = np.column_stack([(labels == b).astype(float) for b in present[1:]])
        inst_names = [f"bin[{b}]" for b in present[1:]]
    else:
        inst = np.column_stack([t.evaluate(us) for t in fdef.instruments])
        inst_names = [t.name for t in fdef.instruments]
    wrow = ds.w[rows] if spec.use_row_weights else np.ones(rows.size)
    wts = wrow * kernel_weights(u, spec.bw_left, spec.bw_right, spec.kernel)
    n_left = int(round(float(ds.w[rows][left].sum())))
    n_right = int(round(float(ds.w[rows][~left].sum())))
    return Design(
        rows=rows, u=u, y=ds.y[rows], endog=_treatment(ds, rule, k, rows), exog=exog,
        exog_names=names, instruments=inst, instrument_names=inst_names, weights=wts,
        clusters=ds.x[rows], n_left=n_left, n_right=n_right, cells_left=cells_l,
        cells_right=cells_r, scale=s,
    )


def estimate(spec: CandidateSpec, ds: Dataset, k: float = 0.0,
             rule: ShiftRule | None = None) -> EstimateResult:
    """Point estimate, cluster-robust SE and conventional 95% CI at ``k``.

    Clusters are the distinct running-variable values, so on collapsed data
    each row is its own cluster.
    """
    des = build_design(spec, ds, k, rule)
    keep = des.weights > 0
    if not keep.all():
        des = _drop_rows(des, keep)
    with warnings.catch_warnings():
        if spec.family == "CohortIV":
            # empty or collinear bin dummies are expected near the data edge
            warnings.simplefilter("ignore")
        fit = tsls_fit(des.y, des.endog, des.exog, des.instruments, des.weights, des.clusters,
                       names=["T"] + des.exog_names, instrument_names=des.instrument_names)
    tau = float(fit.coef[0])
    se = float(np.sqrt(fit.vcov[0, 0])) if fit.inference_available else float("nan")
    return EstimateResult(tau=tau, se=se, ci_low=tau - Z975 * se, ci_high=tau + Z975 * se,
                          n_left=des.n_left, n_right=des.n_right, threshold=float(k))


def _drop_rows(des: Design, keep):
    for name in ("u", "y", "endog", "exog", "instruments", "weights", "clusters", "rows"):
        setattr(des, name, getattr(des, name)[keep])
    return des


def bandwidth_profile(ds: Dataset, family: str, form: str, bandwidths: Iterable, k: float = 0.0,
                      rule: ShiftRule | None = None, **spec_kw):
    """Estimate with one model form over a list of bandwidths.

    ``bandwidths`` holds scalars (symmetric) or ``(left, right)`` pairs.
    Returns ``(rows, notes)`` where each row is ``(bw_left, bw_right, tau,
    ci_low, ci_high)`` in ascending bandwidth order.
    """
    pairs = sorted((b, b) if np.isscalar(b) else tuple(b) for b in bandwidths)
    rows, notes = [], []
    for bl, br in pairs:
        spec = CandidateSpec(family, form, bl, br, **spec_kw)
        try:
            r = estimate(spec, ds, k, rule)
        except (ThinWindowError, DegenerateWindowError, SingularDesignError) as exc:
            notes.append(f"bw {bl:g}/{br:g} skipped: {exc}")
            continue
        rows.append((bl, br, r.tau, r.ci_low, r.ci_high))
    if not rows:
        raise ValueError("no feasible bandwidth in the profile grid")
    return rows, notes

"""Simulated datasets: the stylized Monte Carlo designs, quintic "realistic"
designs fitted from data, and the local-linear bias oracle."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConfigError
from .regress import wls_fit

__all__ = [
    "StylizedKind", "DgpSpec", "STYLIZED_KINDS", "stylized_cef", "stylized_dgp",
    "fit_realistic_dgp", "beta_fit_mom", "beta_from_moments", "sample_realistic",
    "analytic_llr_bias", "iteration_rng",
]

STYLIZED_KINDS = ("linear", "quadratic", "cubic", "sine", "cosine")
STYLIZED_JUMP = 0.3
STYLIZED_N = 900


def stylized_cef(kind: str, x) -> np.ndarray:
    """Smooth part f(x) of the stylized designs (without the jump)."""
    x = np.asarray(x, dtype=float)
    if kind == "linear":
        return x / 400.0
    if kind == "quadratic":
        return (x / 400.0) ** 2
    if kind == "cubic":
        return (x / 400.0) ** 3
    if kind == "sine":
        return np.sin(2 * np.pi * x / 400.0) / 2
    if kind == "cosine":
        return np.cos(2 * np.pi * x / 400.0) / 2
    raise ConfigError(f"unknown stylized DGP {kind!r}")


@dataclass(frozen=True)
class StylizedKind:
    kind: str = "linear"
    sigma: float = 0.1
    zone: str = "long"     # "long": placebo zone up to 800; "short": up to 400

    def __post_init__(self):
        if self.kind not in STYLIZED_KINDS:
            raise ConfigError(f"unknown stylized DGP {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.zone not in ("long", "short"):
            raise ConfigError("zone must be 'long' or 'short'")

    @property
    def zone_end(self) -> float:
        return 800.0 if self.zone == "long" else 400.0

    @property
    def max_bw(self) -> float:
        return 300.0 if self.zone == "long" else 200.0

    def to_dict(self) -> dict:
        return {"type": "stylized", **asdict(self)}


def stylized_grid() -> np.ndarray:
    return np.arange(1, STYLIZED_N + 1) - 100.5


def stylized_dgp(kind: StylizedKind, rng: np.random.Generator) -> Dataset:
    """900 rows on the fixed grid ``x = i - 100.5`` with
    ``y = 0.3 * 1(x > 0) + f(x) + N(0, sigma^2)``.

    The short zone only truncates placebo thresholds; all rows are kept.
    """
    x = stylized_grid()
    y = STYLIZED_JUMP * (x > 0) + stylized_cef(kind.kind, x)
    if kind.sigma > 0:
        y = y + rng.normal(0.0, kind.sigma, x.size)
    return Dataset(y=y, x=x)


@dataclass(frozen=True)
class DgpSpec:
    """Global quintic CEF with a jump and a kink at 0, homoskedastic normal
    noise, and a uniform or (scaled) beta running variable."""

    poly: tuple[float, ...] = (0.0,) * 6
    jump: float = 0.0
    kink: float = 0.0
    sigma: float = 0.0
    x_dist: dict = field(default_factory=lambda: {"kind": "uniform", "lo": -1.0, "hi": 1.0})
    n: int = 1000
    x_scale: float = 1.0   # polynomial terms use x / x_scale

    def __post_init__(self):
        poly = tuple(float(c) for c in self.poly)
        if len(poly) != 6:
            raise ConfigError("poly needs 6 coefficients (1, x, ..., x^5)")
        object.__setattr__(self, "poly", poly)
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        d = dict(self.x_dist)
        kind = d.get("kind")
        if kind not in ("uniform", "beta"):
            raise ConfigError(f"unknown x distribution {kind!r}")
        if not d["lo"] < d["hi"]:
            raise ConfigError("x distribution needs lo < hi")
        if kind == "beta" and not (d["a"] > 0 and d["b"] > 0):
            raise ConfigError("beta parameters must be positive")
        object.__setattr__(self, "x_dist", d)
        if self.n < 1:
            raise ConfigError("n must be positive")

    def cef(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x / self.x_scale
        out = np.polynomial.polynomial.polyval(v, self.poly)
        pos = x > 0
        return out + pos * (self.jump + self.kink * v)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["poly"] = list(self.poly)
        return {"type": "realistic", **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        keys = ("poly", "jump", "kink", "sigma", "x_dist", "n", "x_scale")
        return cls(**{k: d[k] for k in keys if k in d})

    @classmethod
    def from_json(cls, text: str) -> "DgpSpec":
        return cls.from_dict(json.loads(text))

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def beta_from_moments(mean: float, var: float) -> tuple[float, float]:
    """Method-of-moments beta parameters for a variable on [0, 1]."""
    if not var > 0:
        raise ValueError("variance must be positive")
    c = mean * (1.0 - mean) / var - 1.0
    return mean * c, (1.0 - mean) * c


def beta_fit_mom(xs) -> tuple[float, float, float, float]:
    """Beta fit to ``xs`` rescaled onto a support padded by 0.1% of the range.

    Returns ``(a, b, lo, hi)`` with a and b clamped to [0.01, 1e6].
    """
    x = np.asarray(xs, dtype=float)
    if x.size < 3:
        raise ValueError("need at least 3 values")
    rng_ = float(x.max() - x.min())
    if not rng_ > 0:
        raise ValueError("running variable has no variation")
    delta = 0.001 * rng_
    lo, hi = float(x.min()) - delta, float(x.max()) + delta
    u = (x - lo) / (hi - lo)
    a, b = beta_from_moments(float(u.mean()), float(u.var()))
    a = min(max(a, 0.01), 1e6)
    b = min(max(b, 0.01), 1e6)
    return a, b, lo, hi


def fit_realistic_dgp(ds: Dataset) -> DgpSpec:
    """Weighted LS of y on a global quintic plus ``1(x > 0)`` and
    ``x * 1(x > 0)``; sigma is the SD of the residuals and x gets a beta fit.

    Powers of x are taken of ``x / max|x|`` for conditioning; the scale is
    stored in the spec.
    """
    if not ((ds.x < 0).any() and (ds.x > 0).any()):
        raise ConfigError("data must lie on both sides of the threshold")
    if np.unique(ds.x).size < 10:
        raise ConfigError("need at least 10 distinct running-variable values")
    scale = float(np.max(np.abs(ds.x)))
    v = ds.x / scale
    pos = (ds.x > 0).astype(float)
    X = np.column_stack([v ** p for p in range(6)] + [pos, pos * v])
    names = ["1"] + [f"x^{p}" for p in range(1, 6)] + ["jump", "kink"]
    fit = wls_fit(X, ds.y, ds.w, names=names)
    resid = ds.y - X @ fit.coef
    a, b, lo, hi = beta_fit_mom(ds.x)
    return DgpSpec(
        poly=tuple(fit.coef[:6]), jump=float(fit.coef[6]), kink=float(fit.coef[7]),
        sigma=float(np.std(resid)), x_dist={"kind": "beta", "a": a, "b": b, "lo": lo, "hi": hi},
        n=ds.n, x_scale=scale,
    )


def sample_realistic(spec: DgpSpec, rng: np.random.Generator) -> Dataset:
    d = spec.x_dist
    if d["kind"] == "uniform":
        x = rng.uniform(d["lo"], d["hi"], spec.n)
    else:
        x = d["lo"] + (d["hi"] - d["lo"]) * rng.beta(d["a"], d["b"], spec.n)
    y = spec.cef(x)
    if spec.sigma > 0:
        y = y + rng.normal(0.0, spec.sigma, spec.n)
    return Dataset(y=y, x=x)


def analytic_llr_bias(theta3: float, b: float) -> float:
    """Bias of the local-linear jump estimate for a cubic CEF ``theta3 x^3``
    with uniform x and symmetric bandwidth ``b``.

    Projecting x^3 on (1, x) over (0, b) leaves the intercept
    ``delta = -b^3 / 5``; the left side contributes the mirror image, so the
    bias is ``2 theta3 delta``.
    """
    if not b > 0:
        raise ValueError("bandwidth must be positive")
    return 2.0 * theta3 * (-(b ** 3) / 5.0)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo iteration, derived from
    (seed, iteration) so results do not depend on scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(iteration)))))

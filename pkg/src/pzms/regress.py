"""Weighted least squares, two-stage least squares and cluster-robust variance."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import SingularDesignError

__all__ = ["RegressionFit", "wls_fit", "tsls_fit", "t_quantile", "t_pvalue", "Z975", "RANK_TOL"]

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    vcov: np.ndarray
    n: int
    n_clusters: int
    dof_resid: int
    inference_available: bool = True

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _col_name(names, j):
    return names[j] if names is not None and j < len(names) else f"column {j}"


def _qr_solve(Xs, ys, names):
    """Pivoted QR on an equilibrated design; returns (coef, R, piv)."""
    q, r, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0:
        raise SingularDesignError("design matrix is zero", column=_col_name(names, 0))
    rank = int(np.sum(d > RANK_TOL * d[0]))
    if rank < Xs.shape[1]:
        bad = int(piv[rank])
        raise SingularDesignError(
            f"design is rank deficient (rank {rank} of {Xs.shape[1]}); "
            f"offending column: {_col_name(names, bad)}",
            column=_col_name(names, bad),
        )
    b = linalg.solve_triangular(r, q.T @ ys)
    coef = np.empty_like(b)
    coef[piv] = b
    return coef, r, piv


def _cluster_meat(scores, clusters):
    if clusters is None:
        return scores.T @ scores, scores.shape[0]
    _, inv = np.unique(clusters, return_inverse=True)
    g = int(inv.max()) + 1
    summed = np.zeros((g, scores.shape[1]))
    np.add.at(summed, inv, scores)
    return summed.T @ summed, g


def _sandwich(Xhat, w, resid, clusters, names):
    """Cluster-robust (X'WX)^-1 (sum_g s_g s_g') (X'WX)^-1 with the
    G/(G-1) * (n-1)/(n-k) small-sample factor."""
    n, k = Xhat.shape
    sw = np.sqrt(w)
    scale = np.linalg.norm(Xhat * sw[:, None], axis=0)
    Xs = Xhat * sw[:, None] / scale
    _, r, piv = _qr_solve(Xs, np.zeros(n), names)
    rinv = linalg.solve_triangular(r, np.eye(k))
    bread_p = rinv @ rinv.T
    bread = np.empty_like(bread_p)
    bread[np.ix_(piv, piv)] = bread_p
    bread = bread / np.outer(scale, scale)
    scores = Xhat * (w * resid)[:, None]
    meat, g = _cluster_meat(scores, clusters)
    if g < 2 or n <= k:
        return np.full((k, k), np.nan), g, False
    factor = g / (g - 1) * (n - 1) / (n - k)
    v = factor * bread @ meat @ bread
    return 0.5 * (v + v.T), g, True


def wls_fit(design, y, w=None, clusters=None, names=None) -> RegressionFit:
    """Weighted least squares with a cluster-robust sandwich variance.

    ``clusters`` defaults to one cluster per row.  With fewer than two
    clusters the point estimate is still returned but ``vcov`` is NaN and
    ``inference_available`` is False.
    """
    X = _as_2d(design)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("design, y and w must have matching row counts")
    if clusters is not None and len(clusters) != n:
        raise ValueError("clusters must have one entry per row")
    sw = np.sqrt(w)
    scale = np.linalg.norm(X * sw[:, None], axis=0)
    zero = np.flatnonzero(scale == 0)
    if zero.size:
        raise SingularDesignError(f"column is identically zero: {_col_name(names, zero[0])}",
                                  column=_col_name(names, zero[0]))
    coef_s, _, _ = _qr_solve(X * sw[:, None] / scale, y * sw, names)
    coef = coef_s / scale
    resid = y - X @ coef
    vcov, g, ok = _sandwich(X, w, resid, clusters, names)
    return RegressionFit(coef=coef, vcov=vcov, n=n, n_clusters=g, dof_resid=n - k,
                         inference_available=ok)


def _independent_instruments(exog, instruments, w, names):
    """Drop instruments that are (numerically) in the span of exog and the
    instruments kept before them."""
    sw = np.sqrt(w)[:, None]
    Ze = exog * sw
    Zi = instruments * sw
    kept = []
    basis = Ze / np.linalg.norm(Ze, axis=0)
    for j in range(Zi.shape[1]):
        col = Zi[:, j]
        nrm = np.linalg.norm(col)
        if nrm == 0:
            warnings.warn(f"instrument {_col_name(names, j)} is zero in sample; dropped", stacklevel=3)
            continue
        q, r = np.linalg.qr(np.column_stack([basis, col / nrm]))
        if abs(r[-1, -1]) <= RANK_TOL * np.max(np.abs(np.diag(r))):
            warnings.warn(f"instrument {_col_name(names, j)} is collinear with the exogenous "
                          "regressors; dropped", stacklevel=3)
            continue
        kept.append(j)
        basis = np.column_stack([basis, col / nrm])
    return kept


def tsls_fit(y, endog, exog, instruments, w=None, clusters=None,
             names=None, instrument_names=None) -> RegressionFit:
    """Two-stage least squares for one endogenous regressor.

    Coefficients are ordered ``[endog, exog...]``.  The sandwich uses the
    fitted first stage in the bread and residuals computed with the actual
    endogenous variable.
    """
    y = np.asarray(y, dtype=float)
    endog = np.asarray(endog, dtype=float)
    exog = _as_2d(exog)
    instruments = _as_2d(instruments)
    n = y.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if instruments.shape[1] < 1:
        raise ValueError("at least one excluded instrument is required")
    exog_names = list(names[1:]) if names is not None else [f"exog {j}" for j in range(exog.shape[1])]
    all_names = ["endog"] + exog_names if names is None else list(names)

    # exog must be full rank by itself
    wls_fit(exog, y, w, names=exog_names)
    kept = _independent_instruments(exog, instruments, w, instrument_names)
    if not kept:
        raise SingularDesignError("no instrument has variation beyond the exogenous regressors",
                                  column=all_names[0])
    Z = np.column_stack([exog, instruments[:, kept]])
    first = wls_fit(Z, endog, w)
    that = Z @ first.coef
    Xhat = np.column_stack([that, exog])
    coef = wls_fit(Xhat, y, w, names=["fitted " + all_names[0]] + exog_names).coef
    resid = y - np.column_stack([endog, exog]) @ coef
    vcov, g, ok = _sandwich(Xhat, w, resid, clusters, all_names)
    k = Xhat.shape[1]
    return RegressionFit(coef=coef, vcov=vcov, n=n, n_clusters=g, dof_resid=n - k,
                         inference_available=ok)


def t_quantile(p: float, df: float = math.inf) -> float:
    """Inverse CDF of Student-t; ``df = inf`` gives the standard normal."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if df is None or math.isinf(df):
        return float(stats.norm.ppf(p))
    if df <= 0:
        raise ValueError("df must be positive")
    return float(stats.t.ppf(p, df))


def t_pvalue(stat: float, df: float = math.inf) -> float:
    """Two-sided p-value of a t (or z, when ``df`` is infinite) statistic."""
    if df is None or math.isinf(df):
        return float(2.0 * stats.norm.sf(abs(stat)))
    return float(2.0 * stats.t.sf(abs(stat), df))


Z975 = t_quantile(0.975)

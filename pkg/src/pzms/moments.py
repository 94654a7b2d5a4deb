"""Sliding-window moment engine for the placebo sweep.

Each candidate is a 2SLS fit whose instrument columns are piecewise
monomials of ``u = x - k`` on a few segments of the window (left and right
half-windows, or cohort bins).  All cross moments the fit needs are then
differences of prefix sums over the cells ordered outward from ``k``, so a
whole (candidate x threshold) block is solved with small batched linear
algebra instead of one regression per pair.

Results agree with :func:`pzms.candidates.estimate` to roughly 1e-10
relative.  Pairs whose normal equations are ill-conditioned are flagged
``NEEDS_DIRECT`` so the caller can fall back to the QR path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .candidates import ONE, CandidateSpec
from .dataset import Dataset, ShiftRule

__all__ = ["CellTable", "build_cells", "sweep_moments", "OK", "THIN", "NEEDS_DIRECT",
           "COND_LIMIT", "COND_LIMIT_G"]

OK, THIN, NEEDS_DIRECT = 0, 1, 2
# Normal-equation error grows roughly like eps * cond; beyond these limits
# the pair is refit by the QR path to keep agreement within 1e-8.
COND_LIMIT = 1e8
COND_LIMIT_G = 1e7
CANCEL_LIMIT = 1e6


@dataclass(frozen=True, eq=False)
class CellTable:
    """Per-cell sufficient statistics of one dataset under one weighting."""

    ux: np.ndarray     # sorted distinct x
    W: np.ndarray      # regression weight per cell
    ybar: np.ndarray   # W-weighted mean outcome
    wsum: np.ndarray   # row-weight sum (reported counts)
    nrows: np.ndarray  # raw row count
    mode: str          # "sharp" or "shifted-aux"
    z0: float = 0.0
    # shifted-aux: rows sorted by (cell, z) with cumulative regression weights
    keys: np.ndarray | None = None
    cumw: np.ndarray | None = None
    start: np.ndarray | None = None
    zsorted: np.ndarray | None = None

    def treatment(self, k: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Cell-mean treatment for cells ``idx`` (nk x L) at thresholds ``k``."""
        if self.mode == "sharp":
            return (self.ux[idx] >= k[:, None]).astype(float)
        nz = self.zsorted.size
        r = np.searchsorted(self.zsorted, self.z0 + k)  # rows with z rank < r are untreated
        pos = np.searchsorted(self.keys, idx * (nz + 1) + r[:, None])
        lo = self.cumw[self.start[idx]]
        hi = self.cumw[self.start[idx + 1]]
        return (hi - self.cumw[pos]) / (hi - lo)


def build_cells(ds: Dataset, use_row_weights: bool = True, rule: ShiftRule | None = None) -> CellTable:
    rule = rule or ShiftRule()
    rule.check(ds)
    ux, inv = np.unique(ds.x, return_inverse=True)
    wr = ds.w if use_row_weights else np.ones(ds.n)
    W = np.bincount(inv, weights=wr, minlength=ux.size)
    ybar = np.bincount(inv, weights=wr * ds.y, minlength=ux.size) / W
    wsum = np.bincount(inv, weights=ds.w, minlength=ux.size)
    nrows = np.bincount(inv, minlength=ux.size).astype(float)
    if rule.mode == "sharp":
        return CellTable(ux, W, ybar, wsum, nrows, "sharp")
    zsorted = np.unique(ds.z)
    zr = np.searchsorted(zsorted, ds.z)
    keys = inv * (zsorted.size + 1) + zr
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    cumw = np.concatenate([[0.0], np.cumsum(wr[order])])
    start = np.concatenate([[0], np.cumsum(np.bincount(inv, minlength=ux.size))])
    return CellTable(ux, W, ybar, wsum, nrows, "shifted-aux", float(rule.z0), keys, cumw,
                     start, zsorted)


# --------------------------------------------------------------------------- candidate layout

@dataclass
class _Group:
    """Candidates sharing one coefficient tensor ``C[column, segment, power]``."""

    C: np.ndarray
    sides: tuple[str, ...]        # "L"/"R" per segment
    nx: int                       # exogenous columns (leading columns of Z)
    kernel: str
    side_params: tuple[int, int]
    members: list[int]
    seg_lo: list[list[float]]
    seg_hi: list[list[float]]


def _layout(spec: CandidateSpec):
    fdef = spec.definition
    exog_terms = (ONE,) + fdef.f_terms
    if spec.family == "CohortIV":
        b = spec.cohort_bin_width
        j0 = math.floor(-spec.bw_left / b)
        j1 = math.ceil(spec.bw_right / b) - 1
        bins = list(range(j0, j1 + 1))
        lo = [max(j * b, -spec.bw_left) for j in bins]
        hi = [min((j + 1) * b, spec.bw_right) for j in bins]
        sides = tuple("L" if h <= 0 else "R" for h in hi)
    else:
        lo, hi, sides = [-spec.bw_left, 0.0], [0.0, spec.bw_right], ("L", "R")
    P = max(t.power for t in exog_terms + fdef.instruments) + 1
    nz = len(exog_terms) + (len(lo) - 1 if spec.family == "CohortIV" else len(fdef.instruments))
    C = np.zeros((nz, len(lo), P))
    for a, t in enumerate(exog_terms + fdef.instruments):
        for s, side in enumerate(sides):
            if t.side == "both" or t.side == side:
                C[a, s, t.power] = 1.0
    if spec.family == "CohortIV":
        for j in range(1, len(lo)):  # lowest bin is the base category
            C[len(exog_terms) + j - 1, j, 0] = 1.0
    return C, sides, len(exog_terms), lo, hi


def _groups(specs: Sequence[CandidateSpec], members: Sequence[int]) -> list[_Group]:
    out: dict = {}
    for i in members:
        spec = specs[i]
        C, sides, nx, lo, hi = _layout(spec)
        key = (spec.model_id, spec.kernel, sides)
        g = out.get(key)
        if g is None:
            g = out[key] = _Group(C, sides, nx, spec.kernel, spec.side_params(), [], [], [])
        g.members.append(i)
        g.seg_lo.append(lo)
        g.seg_hi.append(hi)
    return list(out.values())


# --------------------------------------------------------------------------- prefix sums

_FIRST = ("F", "Ft", "Fy")
_SECOND = ("N", "Nt", "Ny", "Ntt", "Nty", "Nyy")


def _ranges(P: int, ke: int, with_se: bool = True) -> dict:
    """Highest power needed for each moment family.

    ``F*`` are weighted first moments, ``N*`` the squared-weight moments
    the sandwich needs; ``ke`` adds the extra powers a triangular kernel
    brings in.
    """
    out = {"F": 2 * P - 2 + ke, "Ft": P - 1 + ke, "Fy": P - 1 + ke}
    if with_se:
        out.update({
            "N": 4 * P - 4 + 2 * ke, "Nt": 3 * P - 3 + 2 * ke, "Ny": 3 * P - 3 + 2 * ke,
            "Ntt": 2 * P - 2 + 2 * ke, "Nty": 2 * P - 2 + 2 * ke, "Nyy": 2 * P - 2 + 2 * ke,
        })
    return out


def _prefix(cells: CellTable, k, idx, valid, S, rmax):
    """Prefix sums over cells ordered outward from each threshold.

    Returns an array of shape (nk, L + 1, Q) whose last two columns are the
    raw row count and the row-weight sum, plus the column offset of each
    moment family.
    """
    W = np.where(valid, cells.W[idx], 0.0)
    y = cells.ybar[idx]
    t = cells.treatment(k, idx)
    v = (cells.ux[idx] - k[:, None]) / S
    base = {"F": W, "Ft": W * t, "Fy": W * y}
    if "N" in rmax:
        W2 = W * W
        base.update({"N": W2, "Nt": W2 * t, "Ny": W2 * y, "Ntt": W2 * t * t,
                     "Nty": W2 * t * y, "Nyy": W2 * y * y})
    offsets, off = {}, 0
    for q in rmax:
        offsets[q] = off
        off += rmax[q] + 1
    nk, L = v.shape
    out = np.zeros((nk, L + 1, off + 2))
    body = out[:, 1:]
    pw = np.ones_like(v)
    for r in range(max(rmax.values()) + 1):
        for q in rmax:
            if r <= rmax[q]:
                np.multiply(base[q], pw, out=body[..., offsets[q] + r])
        pw = pw * v
    body[..., off] = np.where(valid, cells.nrows[idx], 0.0)
    body[..., off + 1] = np.where(valid, cells.wsum[idx], 0.0)
    np.cumsum(body, axis=1, out=body)
    return out, offsets


# --------------------------------------------------------------------------- solver

def _hankel(m, P):
    """m[..., r] -> m[..., p + q] of shape (..., P, P)."""
    h = np.add.outer(np.arange(P), np.arange(P))
    return m[..., h]


def _inv_checked(A, bad, limit):
    """Batched inverse; flags matrices whose 1-norm condition exceeds ``limit``.

    Flagged entries are replaced by the identity so they cannot poison the
    batch; callers discard their results.
    """
    n = A.shape[-1]
    A = np.where(bad[..., None, None], np.eye(n), A)
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        Ainv = np.empty_like(A)
        flat, out = A.reshape(-1, n, n), Ainv.reshape(-1, n, n)
        fb = bad.reshape(-1).copy()
        for i in range(flat.shape[0]):
            try:
                out[i] = np.linalg.inv(flat[i])
            except np.linalg.LinAlgError:
                out[i] = np.eye(n)
                fb[i] = True
        bad = fb.reshape(bad.shape)
    with np.errstate(invalid="ignore", over="ignore"):
        cond = np.abs(A).sum(axis=-2).max(axis=-1) * np.abs(Ainv).sum(axis=-2).max(axis=-1)
    bad = bad | ~(cond < limit)
    return np.where(bad[..., None, None], np.eye(n), Ainv), bad


def _just_identified(ZZ, ZX, Zy):
    """IV solve beta = (Z'WX)^-1 Z'Wy; the influence matrix is (Z'WX)^-1."""
    dg = np.einsum("...ii->...i", ZZ)
    bad = ~(dg > 0).all(axis=-1)
    d = 1.0 / np.sqrt(np.where(dg > 0, dg, 1.0))
    M = ZX * d[..., :, None]
    cn = np.abs(M).sum(axis=-2)
    bad |= ~(cn > 0).all(axis=-1)
    c = 1.0 / np.where(cn > 0, cn, 1.0)
    Minv, bad = _inv_checked(M * c[..., None, :], bad, COND_LIMIT_G)
    beta = np.einsum("...ab,...b->...a", Minv, d * Zy) * c
    h0 = Minv[..., 0, :] * c[..., :1] * d
    return beta, h0, bad


def _over_identified(ZZ, ZX, Zy):
    """2SLS with equilibrated A = d ZZ d and G = (dZX)' A^-1 (dZX)."""
    dg = np.einsum("...ii->...i", ZZ)
    bad = ~(dg > 0).all(axis=-1)
    d = 1.0 / np.sqrt(np.where(dg > 0, dg, 1.0))
    A = ZZ * d[..., :, None] * d[..., None, :]
    Ainv, bad = _inv_checked(A, bad, COND_LIMIT)
    B = ZX * d[..., :, None]
    AinvB = Ainv @ B
    G = np.swapaxes(B, -1, -2) @ AinvB
    dgG = np.einsum("...ii->...i", G)
    bad |= ~(dgG > 0).all(axis=-1)
    e = 1.0 / np.sqrt(np.where(dgG > 0, dgG, 1.0))
    Gsinv, bad = _inv_checked(G * e[..., :, None] * e[..., None, :], bad, COND_LIMIT_G)
    rhs = np.einsum("...ab,...a->...b", AinvB, d * Zy) * e
    beta = np.einsum("...ab,...b->...a", Gsinv, rhs) * e
    g0 = Gsinv[..., 0, :] * e[..., :1] * e                             # row 0 of G^-1
    h0 = np.einsum("...ab,...b->...a", AinvB, g0) * d
    return beta, h0, bad


def _solve_group(g: _Group, pre, offs, need, k, iK, ux, S):
    nc = len(g.members)
    nk = k.size
    nseg = len(g.sides)
    C = g.C
    nz, _, P = C.shape
    ke = 1 if g.kernel == "triangular" else 0
    lo = np.asarray(g.seg_lo)   # (nc, nseg)
    hi = np.asarray(g.seg_hi)
    bl = -lo[:, 0]
    br = hi[:, -1]
    s = np.maximum(bl, br)
    kidx = np.arange(nk)[None, :]

    def count(side, bound, strict=False):
        pos = np.searchsorted(ux, k[None, :] + bound[:, None], side="right" if strict else "left")
        return (iK[None, :] - pos) if side == "L" else (pos - iK[None, :])

    mom = {q: np.zeros((nc, nk, nseg, need[q] + 1)) for q in need}
    nrows = np.zeros((nc, nk))
    wrow = np.zeros((nc, nk, 2))
    cells = np.zeros((nc, nk, 2))   # distinct cells per side, for the thin rule
    ncl = np.zeros((nc, nk))        # cells with positive kernel weight
    for j, side in enumerate(g.sides):
        pre_s = pre[side]
        if side == "L":
            c_in = count("L", hi[:, j])   # cells with u >= hi lie closer to k
            c_out = count("L", lo[:, j])
            # the triangular kernel gives the cell at u = -bw_left zero weight
            c_pos = count("L", lo[:, j], strict=ke == 1 and j == 0)
        else:
            c_in = count("R", lo[:, j])
            c_out = count("R", hi[:, j])
            c_pos = c_out
        seg = pre_s[kidx, c_out] - pre_s[kidx, c_in]                  # (nc, nk, Q)
        for q in need:
            o = offs[side][q]
            mom[q][:, :, j, :] = seg[..., o:o + need[q] + 1]
        sj = 0 if side == "L" else 1
        nrows += (pre_s[kidx, c_pos] - pre_s[kidx, c_in])[..., -2]
        wrow[..., sj] += seg[..., -1]
        cells[..., sj] += c_out - c_in
        ncl += c_pos - c_in

    # rescale u/S -> u/s
    ratio = S / s
    for q in need:
        mom[q] *= ratio[:, None, None, None] ** np.arange(need[q] + 1)

    if ke:
        sgn = np.array([1.0 if sd == "R" else -1.0 for sd in g.sides])
        bside = np.where(sgn > 0, br[:, None], bl[:, None])    # (nc, nseg)
        c = (sgn[None, :] * s[:, None] / bside)[:, None, :, None]
        for q in need:
            m = mom[q]
            if q in _FIRST:
                mom[q] = m[..., :-1] - c * m[..., 1:]
            else:
                mom[q] = m[..., :-2] - 2 * c * m[..., 1:-1] + c * c * m[..., 2:]

    Cf = C.reshape(nz, nseg * P)
    CC = (C[:, None, :, :, None] * C[None, :, :, None, :]).reshape(nz * nz, nseg * P * P)
    ZZ = (_hankel(mom["F"], P).reshape(nc * nk, nseg * P * P) @ CC.T).reshape(nc, nk, nz, nz)
    ZT = (mom["Ft"].reshape(nc * nk, nseg * P) @ Cf.T).reshape(nc, nk, nz)
    Zy = (mom["Fy"].reshape(nc * nk, nseg * P) @ Cf.T).reshape(nc, nk, nz)
    nx = g.nx
    ZX = np.concatenate([ZT[..., None], ZZ[..., :nx]], axis=-1)      # (nc, nk, nz, kx)
    kx = nx + 1

    pl, pr = g.side_params
    status = np.where((cells[..., 0] < pl + 2) | (cells[..., 1] < pr + 2), THIN, OK)
    if nz == kx:
        beta, h0, bad = _just_identified(ZZ, ZX, Zy)
    else:
        beta, h0, bad = _over_identified(ZZ, ZX, Zy)
    bT = beta[..., 0]
    status = np.where((status == OK) & bad, NEEDS_DIRECT, status)
    tau = np.where(status == OK, bT, np.nan)
    if "N" not in mom:
        return tau, np.full_like(tau, np.nan), wrow[..., 0], wrow[..., 1], status

    gsp = np.einsum("...a,asp->...sp", h0, C)                          # (nc, nk, nseg, P)
    # E_s[r] = sum over segment s of W^2 e^2 u^r, with e = y - bT t - pi_s(u)
    pi = np.einsum("...a,asp->...sp", beta[..., 1:], C[:nx])
    R = 2 * P - 1
    b4 = bT[..., None, None]
    E = mom["Nyy"][..., :R] + b4 ** 2 * mom["Ntt"][..., :R] - 2 * b4 * mom["Nty"][..., :R]
    for j in range(P):
        pj = pi[..., j:j + 1]
        E = E - 2 * pj * mom["Ny"][..., j:j + R] + 2 * b4 * pj * mom["Nt"][..., j:j + R]
    qq = np.zeros(pi.shape[:-1] + (2 * P - 1,))
    for p in range(P):
        qq[..., p:p + P] += pi[..., p:p + 1] * pi
    for m in range(2 * P - 1):
        E = E + qq[..., m:m + 1] * mom["N"][..., m:m + R]
    meat = np.einsum("...sp,...spq,...sq->...", gsp, _hankel(E, P), gsp)
    # the expansion of e^2 cancels badly when beta is huge (weak first stage);
    # compare the zero-power residual sum with the sum of its term magnitudes
    ab4, api = np.abs(b4[..., 0]), np.abs(pi)
    mag = (mom["Nyy"][..., 0] + ab4 ** 2 * mom["Ntt"][..., 0] + 2 * ab4 * np.abs(mom["Nty"][..., 0])
           + 2 * (api * np.abs(mom["Ny"][..., :P])).sum(-1)
           + 2 * ab4 * (api * np.abs(mom["Nt"][..., :P])).sum(-1)
           + (np.abs(qq) * np.abs(mom["N"][..., :2 * P - 1])).sum(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        lossy = ~(mag <= CANCEL_LIMIT * np.abs(E[..., 0])).all(axis=-1)
    lossy &= status == OK
    status = np.where(lossy, NEEDS_DIRECT, status)
    tau = np.where(lossy, np.nan, tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = ncl / (ncl - 1) * (nrows - 1) / (nrows - kx)
        se = np.sqrt(np.clip(meat, 0.0, None) * factor)
    se = np.where((ncl >= 2) & (nrows > kx) & (status == OK), se, np.nan)
    return tau, se, wrow[..., 0], wrow[..., 1], status


def _outward(cells: CellTable, k, reach_l, reach_r):
    """Index matrices of cells ordered outward from each threshold."""
    ux = cells.ux
    iK = np.searchsorted(ux, k)
    nl = iK - np.searchsorted(ux, k - reach_l)
    nr = np.searchsorted(ux, k + reach_r) - iK
    L = max(int(nl.max()), 1)
    R = max(int(nr.max()), 1)
    jl = np.arange(L)[None, :]
    jr = np.arange(R)[None, :]
    last = ux.size - 1
    il = np.clip(iK[:, None] - 1 - jl, 0, last)
    ir = np.clip(iK[:, None] + jr, 0, last)
    return iK, il, jl < nl[:, None], ir, jr < nr[:, None]


def sweep_moments(cells: CellTable, specs: Sequence[CandidateSpec], thresholds,
                  members: Sequence[int] | None = None, chunk_size: int = 128,
                  pool=None, with_se: bool = True):
    """Fit every candidate in ``members`` at every threshold.

    Returns ``(tau, se, n_left, n_right, status)`` arrays shaped
    (len(specs), len(thresholds)); rows outside ``members`` are left NaN with
    status ``NEEDS_DIRECT``.  With ``with_se=False`` only point estimates are
    computed (``se`` is NaN), which skips all second-moment sums.
    Candidates with covariates must not be passed.

    Results do not depend on ``pool``: thresholds are always processed in
    fixed-size chunks and written to pre-indexed slots.
    """
    k_all = np.asarray(thresholds, dtype=float)
    members = list(range(len(specs))) if members is None else list(members)
    shape = (len(specs), k_all.size)
    tau = np.full(shape, np.nan)
    se = np.full(shape, np.nan)
    nl = np.zeros(shape)
    nr = np.zeros(shape)
    status = np.full(shape, NEEDS_DIRECT, dtype=np.int8)
    if not members or k_all.size == 0:
        return tau, se, nl, nr, status
    for i in members:
        if specs[i].covariates:
            raise ValueError("the moment engine does not handle covariates")
    groups = _groups(specs, members)
    reach_l = max(specs[i].bw_left for i in members)
    reach_r = max(specs[i].bw_right for i in members)
    S = max(reach_l, reach_r)
    Pmax = max(g.C.shape[2] for g in groups)
    kemax = 1 if any(g.kernel == "triangular" for g in groups) else 0
    rmax = _ranges(Pmax, kemax, with_se)

    def run(c0):
        k = k_all[c0:c0 + chunk_size]
        iK, il, vl, ir, vr = _outward(cells, k, reach_l, reach_r)
        pl, offl = _prefix(cells, k, il, vl, S, rmax)
        pr, offr = _prefix(cells, k, ir, vr, S, rmax)
        pre = {"L": pl, "R": pr}
        offs = {"L": offl, "R": offr}
        sl = slice(c0, c0 + k.size)
        for g in groups:
            ke = 1 if g.kernel == "triangular" else 0
            need = _ranges(g.C.shape[2], ke, with_se)
            t, s_, a, b, st = _solve_group(g, pre, offs, need, k, iK, cells.ux, S)
            rows = np.asarray(g.members)
            tau[rows, sl] = t
            se[rows, sl] = s_
            # counts are reported as rounded weight sums, as in the direct path
            nl[rows, sl] = np.round(a)
            nr[rows, sl] = np.round(b)
            status[rows, sl] = st

    starts = range(0, k_all.size, chunk_size)
    if pool is None:
        for c0 in starts:
            run(c0)
    else:
        list(pool.map(run, starts))
    return tau, se, nl, nr, status

"""Hot kernels with a numba path and a pure-numpy fallback.

Set ``ROBSUITE_DISABLE_NUMBA=1`` to force the numpy implementations. Both
paths are always importable so tests and ``benchmarks/bench_kernels.py`` can
compare them directly.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("ROBSUITE_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _identity_jit(*args, **kwargs):
    def wrap(fn):
        return fn
    return wrap


njit = numba.njit if numba is not None else _identity_jit


# ---------------------------------------------------------------------------
# radial warp: out[i, j] = bilinear(img, c + (p - c) * (1 + k r^2)), r in units
# of the half-extent so the border midpoints sit at r = 1.


def radial_warp_numpy(imgs, k):
    imgs = np.asarray(imgs, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b, h, w = imgs.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ri, rj = max(ci, 1e-12), max(cj, 1e-12)
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    di, dj = ii - ci, jj - cj
    r2 = (di / ri) ** 2 + (dj / rj) ** 2
    scale = 1.0 + k[:, None, None] * r2[None]
    u_raw = ci + di[None] * scale
    v_raw = cj + dj[None] * scale
    u = np.clip(u_raw, 0.0, h - 1.0)
    v = np.clip(v_raw, 0.0, w - 1.0)
    in_u = (u_raw >= 0.0) & (u_raw <= h - 1.0)
    in_v = (v_raw >= 0.0) & (v_raw <= w - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), h - 2)
    j0 = np.minimum(np.floor(v).astype(np.int64), w - 2)
    fu, fv = u - i0, v - j0
    bi = np.arange(b)[:, None, None]
    p00 = imgs[bi, i0, j0]
    p01 = imgs[bi, i0, j0 + 1]
    p10 = imgs[bi, i0 + 1, j0]
    p11 = imgs[bi, i0 + 1, j0 + 1]
    out = (1 - fu) * (1 - fv) * p00 + (1 - fu) * fv * p01 + fu * (1 - fv) * p10 + fu * fv * p11
    gu = (1 - fv) * (p10 - p00) + fv * (p11 - p01)
    gv = (1 - fu) * (p01 - p00) + fu * (p11 - p10)
    dk = np.where(in_u, gu, 0.0) * (di * r2)[None] + np.where(in_v, gv, 0.0) * (dj * r2)[None]
    return out, dk


@njit(cache=True)
def _radial_warp_jit(imgs, k):
    b, h, w = imgs.shape
    out = np.empty((b, h, w))
    dk = np.empty((b, h, w))
    ci = (h - 1) / 2.0
    cj = (w - 1) / 2.0
    ri = max(ci, 1e-12)
    rj = max(cj, 1e-12)
    for n in range(b):
        kn = k[n]
        for i in range(h):
            di = i - ci
            for j in range(w):
                dj = j - cj
                r2 = (di / ri) ** 2 + (dj / rj) ** 2
                s = 1.0 + kn * r2
                u_raw = ci + di * s
                v_raw = cj + dj * s
                u = min(max(u_raw, 0.0), h - 1.0)
                v = min(max(v_raw, 0.0), w - 1.0)
                i0 = min(int(np.floor(u)), h - 2)
                j0 = min(int(np.floor(v)), w - 2)
                fu = u - i0
                fv = v - j0
                p00 = imgs[n, i0, j0]
                p01 = imgs[n, i0, j0 + 1]
                p10 = imgs[n, i0 + 1, j0]
                p11 = imgs[n, i0 + 1, j0 + 1]
                out[n, i, j] = (1 - fu) * (1 - fv) * p00 + (1 - fu) * fv * p01 + fu * (1 - fv) * p10 + fu * fv * p11
                g = 0.0
                if u_raw >= 0.0 and u_raw <= h - 1.0:
                    g += ((1 - fv) * (p10 - p00) + fv * (p11 - p01)) * di * r2
                if v_raw >= 0.0 and v_raw <= w - 1.0:
                    g += ((1 - fu) * (p01 - p00) + fu * (p11 - p10)) * dj * r2
                dk[n, i, j] = g
    return out, dk


def radial_warp_numba(imgs, k):
    return _radial_warp_jit(np.ascontiguousarray(imgs, dtype=np.float64), np.ascontiguousarray(k, dtype=np.float64))


def radial_warp(imgs, k):
    """Warp a batch ``(B, h, w)`` by per-image coefficients ``k``; returns (out, d out / d k)."""
    if NUMBA_ENABLED:
        return radial_warp_numba(imgs, k)
    return radial_warp_numpy(imgs, k)


# ---------------------------------------------------------------------------
# GA population fitness. Individuals are index sets packed as (flat, offsets).


def _fitness_from_counts(counts, sizes, r_ref, lam1, lam2, literal, penalty):
    vals = counts if literal else counts / sizes[:, None]
    a = vals - vals.mean(axis=1, keepdims=True)
    bref = r_ref - r_ref.mean()
    saa = (a * a).sum(axis=1)
    sbb = (bref * bref).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (a @ bref) / np.sqrt(saa * sbb)
    mean = vals.mean(axis=1)
    std = np.sqrt(saa / vals.shape[1])
    if literal:
        fit = rho + lam1 * (mean - lam2 * std)
    else:
        fit = rho - lam1 * (mean + lam2 * std)
    return np.where(saa > 0.0, fit, penalty)


def population_fitness_numpy(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty):
    fail = np.asarray(fail, dtype=np.float64)
    p = len(offsets) - 1
    counts = np.empty((p, fail.shape[0]))
    for n in range(p):
        counts[n] = fail[:, flat[offsets[n]:offsets[n + 1]]].sum(axis=1)
    sizes = np.diff(offsets).astype(np.float64)
    return _fitness_from_counts(counts, sizes, np.asarray(r_ref, dtype=np.float64), lam1, lam2, literal, penalty)


@njit(cache=True)
def _population_fitness_jit(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty):
    kk = fail.shape[0]
    p = offsets.shape[0] - 1
    out = np.empty(p)
    vals = np.empty(kk)
    rbar = 0.0
    for i in range(kk):
        rbar += r_ref[i]
    rbar /= kk
    sbb = 0.0
    for i in range(kk):
        sbb += (r_ref[i] - rbar) ** 2
    for n in range(p):
        lo = offsets[n]
        hi = offsets[n + 1]
        size = hi - lo
        for i in range(kk):
            c = 0.0
            for q in range(lo, hi):
                c += fail[i, flat[q]]
            vals[i] = c if literal else c / size
        mean = 0.0
        for i in range(kk):
            mean += vals[i]
        mean /= kk
        saa = 0.0
        sab = 0.0
        for i in range(kk):
            d = vals[i] - mean
            saa += d * d
            sab += d * (r_ref[i] - rbar)
        if saa <= 0.0:
            out[n] = penalty
            continue
        rho = sab / np.sqrt(saa * sbb)
        std = np.sqrt(saa / kk)
        if literal:
            out[n] = rho + lam1 * (mean - lam2 * std)
        else:
            out[n] = rho - lam1 * (mean + lam2 * std)
    return out


def population_fitness_numba(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty):
    return _population_fitness_jit(
        np.ascontiguousarray(fail, dtype=np.float64),
        np.ascontiguousarray(flat, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(r_ref, dtype=np.float64),
        float(lam1), float(lam2), bool(literal), float(penalty),
    )


def population_fitness(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty):
    """Fitness of every packed individual; degenerate correlations get ``penalty``."""
    if NUMBA_ENABLED:
        return population_fitness_numba(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty)
    return population_fitness_numpy(fail, flat, offsets, r_ref, lam1, lam2, literal, penalty)

"""Perturbation schemes: a family plus bound(s) defining the allowed vicinity.

All operations are batched: ``params`` is ``(B, param_dim)`` and images are
``(B, h, w)``; single items are promoted. Only the first image of a pair is
ever perturbed, so everything here works on single images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from . import _accel
from .errors import CapabilityError, ConfigError, ConstraintError, DimensionError

FAMILIES = ("L2", "LINF", "ILLUM", "PATCH", "RADIAL")
ANCHOR_GRID = 4
MEMBERSHIP_TOL = 1e-6


@dataclass(frozen=True)
class Scheme:
    name: str
    family: str
    epsilon: tuple
    side: int = 16

    def __post_init__(self):
        eps = self.epsilon if isinstance(self.epsilon, (tuple, list)) else (self.epsilon,)
        object.__setattr__(self, "epsilon", tuple(float(e) for e in eps))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        want = 2 if self.family == "ILLUM" else 1
        if len(self.epsilon) != want:
            raise ConfigError(f"{self.family} takes {want} bound(s), got {len(self.epsilon)}")
        if min(self.epsilon) <= 0:
            raise ConfigError("bounds must be strictly positive")
        if self.family == "PATCH" and not self.epsilon[0] <= 0.25:
            raise ConfigError("patch area fraction must lie in (0, 0.25]")
        if self.family == "PATCH" and self.patch_shape[0] * self.patch_shape[1] == 0:
            raise ConfigError("patch area fraction too small for this image size")

    @property
    def eps(self) -> float:
        return self.epsilon[0]

    @property
    def n_pixels(self) -> int:
        return self.side * self.side

    @property
    def p(self) -> float:
        if self.family == "L2":
            return 2.0
        if self.family == "LINF":
            return math.inf
        raise CapabilityError(f"{self.family} is not an Lp family")

    @property
    def is_lp(self) -> bool:
        return self.family in ("L2", "LINF")

    @property
    def differentiable(self) -> bool:
        # the patch location index is discrete
        return self.family != "PATCH"

    @property
    def patch_shape(self) -> tuple:
        area = self.epsilon[0] * self.n_pixels
        ph = max(1, int(math.floor(math.sqrt(area))))
        pw = int(math.floor(area / ph))
        return ph, min(pw, self.side)

    @property
    def n_locations(self) -> int:
        return ANCHOR_GRID * ANCHOR_GRID if self.family == "PATCH" else 1

    @property
    def param_dim(self) -> int:
        if self.family in ("L2", "LINF"):
            return self.n_pixels
        if self.family == "ILLUM":
            return 2
        if self.family == "RADIAL":
            return 1
        ph, pw = self.patch_shape
        return ph * pw + 1

    @property
    def param_scale(self) -> np.ndarray:
        """Relative per-parameter ranges used to shape sign steps."""
        if self.family == "ILLUM":
            ea, eb = self.epsilon
            return np.array([ea, eb]) / max(ea, eb)
        return np.ones(self.param_dim)

    def anchors(self) -> np.ndarray:
        ph, pw = self.patch_shape
        rows = np.round(np.linspace(0, self.side - ph, ANCHOR_GRID)).astype(np.int64)
        cols = np.round(np.linspace(0, self.side - pw, ANCHOR_GRID)).astype(np.int64)
        return np.array([(r, c) for r in rows for c in cols], dtype=np.int64)

    def descriptor(self) -> dict:
        return {"name": self.name, "family": self.family, "epsilon": list(self.epsilon),
                "param_dim": self.param_dim, "side": self.side}

    @classmethod
    def from_descriptor(cls, d: dict) -> "Scheme":
        s = cls(d["name"], d["family"], tuple(d["epsilon"]), int(d.get("side", 16)))
        if "param_dim" in d and int(d["param_dim"]) != s.param_dim:
            raise ConfigError(f"descriptor param_dim {d['param_dim']} != {s.param_dim}")
        return s


def default_schemes(side: int = 16) -> list[Scheme]:
    return [
        Scheme("l2_small", "L2", (0.4,), side),
        Scheme("l2_large", "L2", (0.6,), side),
        Scheme("linf_small", "LINF", (0.02,), side),
        Scheme("linf_large", "LINF", (0.03,), side),
        Scheme("illum", "ILLUM", (0.15, 0.08), side),
        Scheme("patch", "PATCH", (0.05,), side),
        Scheme("radial_small", "RADIAL", (0.15,), side),
        Scheme("radial_large", "RADIAL", (0.3,), side),
    ]


def _batch(params, imgs=None, scheme=None):
    params = np.asarray(params, dtype=np.float64)
    single = params.ndim == 1
    params = np.atleast_2d(params)
    if scheme is not None and params.shape[1] != scheme.param_dim:
        raise DimensionError(f"{scheme.name} expects {scheme.param_dim} params, got {params.shape[1]}")
    if imgs is None:
        return params, None, single
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    if scheme is not None and imgs.shape[1:] != (scheme.side, scheme.side):
        raise DimensionError(f"{scheme.name} expects {scheme.side}x{scheme.side} images, got {imgs.shape[1:]}")
    if imgs.shape[0] != params.shape[0]:
        if imgs.shape[0] == 1:
            imgs = np.broadcast_to(imgs, (params.shape[0],) + imgs.shape[1:])
        else:
            raise DimensionError("params and images disagree on batch size")
    return params, imgs, single


def _unbatch(arr, single):
    return arr[0] if single else arr


def identity_params(scheme: Scheme, batch: int | None = None) -> np.ndarray:
    p = np.zeros(scheme.param_dim)
    if scheme.family == "ILLUM":
        p[0] = 1.0
    elif scheme.family == "PATCH":
        p[:-1] = 0.5
    return p if batch is None else np.tile(p, (batch, 1))


def init_params(scheme: Scheme, rng: np.random.Generator, magnitude_fraction, batch: int | None = None) -> np.ndarray:
    """Random params whose constraint magnitude equals ``magnitude_fraction`` times the bound."""
    b = 1 if batch is None else batch
    f = np.broadcast_to(np.asarray(magnitude_fraction, dtype=np.float64), (b,))[:, None]
    fam = scheme.family
    if fam == "L2":
        d = rng.normal(size=(b, scheme.param_dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = f * scheme.eps * d
    elif fam == "LINF":
        d = rng.uniform(-1.0, 1.0, size=(b, scheme.param_dim))
        d /= np.abs(d).max(axis=1, keepdims=True)
        out = f * scheme.eps * d
    elif fam == "ILLUM":
        d = rng.uniform(-1.0, 1.0, size=(b, 2))
        d /= np.abs(d).max(axis=1, keepdims=True)
        out = np.column_stack([1.0 + f[:, 0] * scheme.epsilon[0] * d[:, 0], f[:, 0] * scheme.epsilon[1] * d[:, 1]])
    elif fam == "RADIAL":
        sign = np.where(rng.random(b) < 0.5, -1.0, 1.0)
        out = (f[:, 0] * scheme.eps * sign)[:, None]
    else:
        contents = 0.5 + f * (rng.random((b, scheme.param_dim - 1)) - 0.5)
        loc = rng.integers(0, scheme.n_locations, size=b).astype(np.float64)
        out = np.column_stack([contents, loc])
    return out[0] if batch is None else out


def uniform_params(scheme: Scheme, rng: np.random.Generator, batch: int) -> np.ndarray:
    """Params drawn uniformly over the vicinity's volume (uniform anchor for PATCH)."""
    fam = scheme.family
    if fam == "L2":
        d = rng.normal(size=(batch, scheme.param_dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * (scheme.eps * rng.random(batch) ** (1.0 / scheme.param_dim))[:, None]
    if fam == "LINF":
        return rng.uniform(-scheme.eps, scheme.eps, size=(batch, scheme.param_dim))
    if fam == "ILLUM":
        ea, eb = scheme.epsilon
        return np.column_stack([rng.uniform(1.0 - ea, 1.0 + ea, batch), rng.uniform(-eb, eb, batch)])
    if fam == "RADIAL":
        return rng.uniform(-scheme.eps, scheme.eps, size=(batch, 1))
    contents = rng.random((batch, scheme.param_dim - 1))
    return np.column_stack([contents, rng.integers(0, scheme.n_locations, size=batch).astype(np.float64)])


def project(scheme: Scheme, params) -> np.ndarray:
    params, _, single = _batch(params, scheme=scheme)
    out = params.copy()
    fam = scheme.family
    if fam == "L2":
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        # a rescaled vector can land an ulp above eps; leave it alone so projection is idempotent
        scale = np.where(norm > scheme.eps * (1 + 1e-12), scheme.eps / np.maximum(norm, 1e-300), 1.0)
        out = out * scale
    elif fam == "LINF":
        np.clip(out, -scheme.eps, scheme.eps, out=out)
    elif fam == "ILLUM":
        ea, eb = scheme.epsilon
        out[:, 0] = np.clip(out[:, 0], 1.0 - ea, 1.0 + ea)
        out[:, 1] = np.clip(out[:, 1], -eb, eb)
    elif fam == "RADIAL":
        np.clip(out, -scheme.eps, scheme.eps, out=out)
    else:
        np.clip(out[:, :-1], 0.0, 1.0, out=out[:, :-1])
        out[:, -1] = np.clip(np.round(out[:, -1]), 0, scheme.n_locations - 1)
    return _unbatch(out, single)


def is_projected(scheme: Scheme, params, tol: float = MEMBERSHIP_TOL) -> bool:
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if scheme.family == "L2":
        return bool(np.all(np.linalg.norm(params, axis=1) <= scheme.eps * (1 + tol) + tol))
    return bool(np.all(np.abs(project(scheme, params) - params) <= tol))


def _patch_index(scheme: Scheme, loc):
    ph, pw = scheme.patch_shape
    anchors = scheme.anchors()[np.asarray(loc, dtype=np.int64)]
    rr, cc = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
    offs = (rr * scheme.side + cc).ravel()
    return (anchors[:, 0] * scheme.side + anchors[:, 1])[:, None] + offs[None, :]


def apply(scheme: Scheme, params, imgs, check: bool = True) -> np.ndarray:
    """Perturbed images; params must already be projected."""
    params, imgs, single = _batch(params, imgs, scheme)
    if check and not is_projected(scheme, params):
        raise ConstraintError(f"params for {scheme.name} are outside the constraint; project first")
    fam = scheme.family
    if fam in ("L2", "LINF"):
        out = np.clip(imgs + params.reshape(imgs.shape), 0.0, 1.0)
    elif fam == "ILLUM":
        out = np.clip(params[:, 0, None, None] * imgs + params[:, 1, None, None], 0.0, 1.0)
    elif fam == "RADIAL":
        out, _ = _accel.radial_warp(imgs, params[:, 0])
    else:
        b = imgs.shape[0]
        flat = np.array(imgs.reshape(b, -1))
        np.put_along_axis(flat, _patch_index(scheme, params[:, -1]), params[:, :-1], axis=1)
        out = flat.reshape(imgs.shape)
    return _unbatch(out, single)


def param_grad(scheme: Scheme, params, imgs, upstream, fixed_location: bool = False) -> np.ndarray:
    """Chain rule through ``apply``; clipped pixels pass zero gradient.

    PATCH locations are discrete: pass ``fixed_location=True`` to get content
    gradients with a zero entry for the location slot.
    """
    if not scheme.differentiable and not fixed_location:
        raise CapabilityError(f"{scheme.family} location index has no gradient; use fixed_location=True")
    params, imgs, single = _batch(params, imgs, scheme)
    up = np.asarray(upstream, dtype=np.float64).reshape(imgs.shape)
    b = imgs.shape[0]
    fam = scheme.family
    if fam in ("L2", "LINF"):
        v = imgs + params.reshape(imgs.shape)
        g = np.where((v > 0.0) & (v < 1.0), up, 0.0).reshape(b, -1)
    elif fam == "ILLUM":
        v = params[:, 0, None, None] * imgs + params[:, 1, None, None]
        m = (v > 0.0) & (v < 1.0)
        um = np.where(m, up, 0.0)
        g = np.column_stack([(um * imgs).sum(axis=(1, 2)), um.sum(axis=(1, 2))])
    elif fam == "RADIAL":
        _, dk = _accel.radial_warp(imgs, params[:, 0])
        g = (up * dk).sum(axis=(1, 2))[:, None]
    else:
        idx = _patch_index(scheme, params[:, -1])
        g = np.column_stack([np.take_along_axis(up.reshape(b, -1), idx, axis=1), np.zeros(b)])
    return _unbatch(g, single)


# ---------------------------------------------------------------------------
# membership


def _illum_feasible(scheme, x, xp, tol):
    ea, eb = scheme.epsilon
    x, xp = x.ravel(), xp.ravel()
    inner = (xp > tol) & (xp < 1 - tol)
    if inner.sum() >= 2 and np.ptp(x[inner]) > 1e-9:
        A = np.column_stack([x[inner], np.ones(inner.sum())])
        (a, bias), *_ = np.linalg.lstsq(A, xp[inner], rcond=None)
        a = float(np.clip(a, 1 - ea, 1 + ea))
        bias = float(np.clip(bias, -eb, eb))
        if np.max(np.abs(np.clip(a * x + bias, 0, 1) - xp)) <= tol:
            return True
    # exact feasibility of {(a, b) in box : clip(a x + b) == x'} as a 2-variable LP
    lo_mask, hi_mask = xp <= tol, xp >= 1 - tol
    mid = ~(lo_mask | hi_mask)
    rows, rhs = [], []
    for xi, vi in zip(x[mid], xp[mid]):
        rows += [[xi, 1.0], [-xi, -1.0]]
        rhs += [vi + tol, -(vi - tol)]
    for xi in x[lo_mask]:
        rows.append([xi, 1.0])
        rhs.append(tol)
    for xi in x[hi_mask]:
        rows.append([-xi, -1.0])
        rhs.append(-(1 - tol))
    if not rows:
        return True
    res = linprog(np.zeros(2), A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(1 - ea - tol, 1 + ea + tol), (-eb - tol, eb + tol)], method="highs")
    return bool(res.status == 0)


def _radial_feasible(scheme, x, xp, tol):
    eps = scheme.eps
    grid = np.linspace(-eps, eps, 401)
    warped, _ = _accel.radial_warp(np.broadcast_to(x, (grid.size,) + x.shape), grid)
    err = np.abs(warped - xp[None]).reshape(grid.size, -1).max(axis=1)
    best = int(np.argmin(err))
    if err[best] <= tol:
        return True
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, grid.size - 1)]

    def f(k):
        w, _ = _accel.radial_warp(x[None], np.array([k]))
        return float(np.abs(w[0] - xp).max())

    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return bool(min(res.fun, err[best]) <= tol)


def _patch_feasible(scheme, x, xp, tol):
    if xp.min() < -tol or xp.max() > 1 + tol:
        return False
    ph, pw = scheme.patch_shape
    diff = np.abs(xp - x)
    for r, c in scheme.anchors():
        outside = diff.copy()
        outside[r:r + ph, c:c + pw] = 0.0
        if outside.max() <= tol:
            return True
    return False


def within(scheme: Scheme, x, x_prime, tol: float = MEMBERSHIP_TOL) -> bool:
    """Whether ``x_prime`` is reachable from ``x`` under the scheme's constraint."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    if x.shape != xp.shape:
        raise DimensionError("shapes differ")
    x = x.reshape(scheme.side, scheme.side)
    xp = xp.reshape(scheme.side, scheme.side)
    fam = scheme.family
    if fam == "L2":
        return bool(np.linalg.norm((xp - x).ravel()) <= scheme.eps + tol)
    if fam == "LINF":
        return bool(np.abs(xp - x).max() <= scheme.eps + tol)
    if np.array_equal(x, xp):
        return True
    if fam == "ILLUM":
        return _illum_feasible(scheme, x, xp, tol)
    if fam == "RADIAL":
        return _radial_feasible(scheme, x, xp, tol)
    return _patch_feasible(scheme, x, xp, tol)


def within_batch(scheme: Scheme, xs, xps, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, scheme.side, scheme.side)
    xps = np.asarray(xps, dtype=np.float64).reshape(-1, scheme.side, scheme.side)
    if scheme.family == "L2":
        return np.linalg.norm((xps - xs).reshape(len(xs), -1), axis=1) <= scheme.eps + tol
    if scheme.family == "LINF":
        return np.abs(xps - xs).reshape(len(xs), -1).max(axis=1) <= scheme.eps + tol
    return np.array([within(scheme, a, b, tol) for a, b in zip(xs, xps)], dtype=bool)


def default_pgd_step(scheme: Scheme, steps: int) -> float:
    """Sign-step size that lets ``steps`` iterations cross the vicinity about 2.5 times."""
    if scheme.family == "L2":
        return 2.5 * scheme.eps / (steps * math.sqrt(scheme.n_pixels))
    if scheme.family == "ILLUM":
        return 2.5 * max(scheme.epsilon) / steps
    if scheme.family == "PATCH":
        return 2.5 / steps
    return 2.5 * scheme.eps / steps

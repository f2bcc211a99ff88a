"""Worst-case robustness by exhaustive search over a discretized vicinity.

A pair is robust when no grid point of the constraint set changes the
prediction away from the true label. The grid under-approximates the
continuous vicinity, so this is a test oracle for the attack-based
estimators and nothing more.

Grids are built from an absolute spacing, so two vicinities with the same
spacing and bounds ``eps1 <= eps2`` are nested point sets.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dataset import PairSet
from .errors import CapabilityError, ConfigError
from .perturb import Scheme, apply, identity_params
from .siamese import SiameseSystem, encode_batch, predict_from_margin

DEFAULT_RESOLUTION = 64
MAX_POINTS = 1_000_000
LINF_MAX_PIXELS = 8
LINF_LEVELS = 3


def _axis(bound: float, step: float) -> np.ndarray:
    """Multiples of ``step`` inside ``[-bound, bound]``; always contains 0."""
    k = int(np.floor(bound / step + 1e-9))
    return np.arange(-k, k + 1) * step


@dataclass(frozen=True, eq=False)
class DiscretizedVicinity:
    """Enumerable grid over a scheme's parameter space.

    ``step`` fixes the spacing per scalar parameter (one value per bound);
    by default it is ``2 * eps / (resolution - 1)``. L-inf grids move only
    the listed ``pixels``, each over ``{-eps, 0, eps}``. ``extra`` adds
    explicit parameter rows, e.g. points found by an attack.
    """

    scheme: Scheme
    grid_resolution: int = DEFAULT_RESOLUTION
    step: tuple | None = None
    pixels: tuple | None = None
    extra: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.grid_resolution < 1:
            raise ConfigError("grid resolution must be at least 1")
        fam = self.scheme.family
        if fam in ("L2", "PATCH"):
            raise CapabilityError(f"no enumerable grid for {fam}")
        if fam == "LINF":
            px = self.pixels if self.pixels is not None else _centre_pixels(self.scheme.side)
            if len(px) > LINF_MAX_PIXELS:
                raise CapabilityError(f"L-inf grids move at most {LINF_MAX_PIXELS} pixels")
            object.__setattr__(self, "pixels", tuple(int(p) for p in px))
        if self.size > MAX_POINTS:
            raise CapabilityError(f"grid has {self.size} points, limit is {MAX_POINTS}")

    def _steps(self) -> tuple:
        if self.step is not None:
            return tuple(float(s) for s in np.broadcast_to(self.step, (len(self.scheme.epsilon),)))
        if self.grid_resolution == 1:
            return tuple(np.inf for _ in self.scheme.epsilon)
        return tuple(2 * e / (self.grid_resolution - 1) for e in self.scheme.epsilon)

    def axes(self) -> list[np.ndarray]:
        fam = self.scheme.family
        if fam == "LINF":
            levels = np.linspace(-self.scheme.eps, self.scheme.eps, LINF_LEVELS)
            return [levels] * len(self.pixels)
        out = []
        for bound, st in zip(self.scheme.epsilon, self._steps()):
            out.append(np.zeros(1) if not np.isfinite(st) else _axis(bound, st))
        return out

    @property
    def size(self) -> int:
        n = int(np.prod([len(a) for a in self.axes()], dtype=np.int64))
        return n + (0 if self.extra is None else len(self.extra))

    def points(self):
        """Parameter rows in chunks; the clean point comes first."""
        fam = self.scheme.family
        base = identity_params(self.scheme, 1)
        yield base
        grid = itertools.product(*self.axes())
        while True:
            chunk = list(itertools.islice(grid, 8192))
            if not chunk:
                break
            c = np.asarray(chunk, dtype=np.float64)
            if fam == "ILLUM":
                rows = np.column_stack([1.0 + c[:, 0], c[:, 1]])
            elif fam == "RADIAL":
                rows = c[:, :1]
            else:
                rows = np.zeros((len(c), self.scheme.param_dim))
                rows[:, list(self.pixels)] = c
            yield rows
        if self.extra is not None and len(self.extra):
            yield np.atleast_2d(np.asarray(self.extra, dtype=np.float64))

    def with_points(self, params) -> "DiscretizedVicinity":
        extra = np.atleast_2d(np.asarray(params, dtype=np.float64))
        if self.extra is not None:
            extra = np.concatenate([self.extra, extra])
        return DiscretizedVicinity(self.scheme, self.grid_resolution, self.step, self.pixels, extra)


def _centre_pixels(side: int) -> tuple:
    row = side // 2
    lo = max(0, side // 2 - LINF_MAX_PIXELS // 2)
    return tuple(row * side + c for c in range(lo, min(side, lo + LINF_MAX_PIXELS)))


def find_flip(sys: SiameseSystem, pair, vicinity: DiscretizedVicinity):
    """First grid parameter row whose prediction differs from the label, or ``None``."""
    xa = np.asarray(pair.x_alpha, dtype=np.float64)
    eb = encode_batch(sys, np.asarray(pair.x_beta)[None])
    y = int(pair.y)
    for rows in vicinity.points():
        xp = apply(vicinity.scheme, rows, np.broadcast_to(xa, (len(rows),) + xa.shape), check=False)
        pred = predict_from_margin(encode_batch(sys, xp) @ eb[0], sys.kappa)
        hit = np.flatnonzero(pred != y)
        if len(hit):
            return rows[hit[0]]
    return None


def brute_force_robust(sys: SiameseSystem, pair, vicinity: DiscretizedVicinity) -> bool:
    return find_flip(sys, pair, vicinity) is None


def oracle_robust_fraction(sys: SiameseSystem, pairs: PairSet, vicinity: DiscretizedVicinity) -> float:
    if len(pairs) == 0:
        raise ConfigError("need at least one pair")
    return float(np.mean([brute_force_robust(sys, pairs[i], vicinity) for i in range(len(pairs))]))

"""Reference robustness estimators: PGD robust accuracy and a sampled local Lipschitz score."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import PairSet
from .errors import CapabilityError, ConfigError
from .numerics import conjugate_exponent
from .perturb import (Scheme, _patch_index, apply, default_pgd_step, identity_params, init_params, param_grad,
                      project)
from .siamese import SiameseSystem, encode_batch, margin_and_grad, margins


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 100
    step_size: float | None = None  # None: perturb.default_pgd_step
    restarts: int = 1
    literal_eq4: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("PGD needs at least one step")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("PGD step size must be positive")
        if self.restarts < 1:
            raise ConfigError("PGD needs at least one restart")

    def eta(self, scheme: Scheme) -> float:
        return self.step_size if self.step_size is not None else default_pgd_step(scheme, self.steps)


@dataclass
class RobustnessReport:
    flips: np.ndarray
    robust_accuracy: float
    forward_count: int
    backward_count: int
    wall_time: float
    system_id: str = ""
    scheme: str = ""
    config_hash: str = ""
    traces: np.ndarray | None = field(default=None, repr=False)
    witnesses: np.ndarray | None = field(default=None, repr=False)  # per expanded row, NaN if robust

    def to_json(self) -> dict:
        return {
            "system_id": self.system_id,
            "scheme": self.scheme,
            "robust_accuracy": self.robust_accuracy,
            "forward_count": self.forward_count,
            "backward_count": self.backward_count,
            "wall_time_s": self.wall_time,
            "config_hash": self.config_hash,
        }


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def pgd_step(scheme: Scheme, params, ascent_grad, eta: float, literal: bool = False) -> np.ndarray:
    """One signed-gradient ascent step followed by projection.

    With ``literal=True`` on Lp families the step is renormalised onto the
    boundary sphere unconditionally, instead of projected only when outside.
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    g = np.atleast_2d(np.asarray(ascent_grad, dtype=np.float64))
    new = params + eta * np.sign(g) * scheme.param_scale
    if scheme.family == "PATCH":
        new[:, -1] = params[:, -1]
    if literal and scheme.is_lp:
        norms = np.linalg.norm(new, ord=scheme.p, axis=1, keepdims=True)
        return np.where(norms > 0, scheme.eps * new / np.maximum(norms, 1e-300), new)
    return project(scheme, new)


def patch_params_from_image(scheme: Scheme, imgs, loc) -> np.ndarray:
    """PATCH params that reproduce ``imgs`` exactly (the patch holds the original pixels)."""
    imgs = np.asarray(imgs, dtype=np.float64).reshape(len(loc), -1)
    idx = _patch_index(scheme, loc)
    return np.column_stack([np.take_along_axis(imgs, idx, axis=1), np.asarray(loc, dtype=np.float64)])


def _expand_locations(scheme: Scheme, pairs: PairSet):
    """Replicate every pair once per patch anchor (identity map for other families)."""
    n_loc = scheme.n_locations
    rep = np.repeat(np.arange(len(pairs)), n_loc)
    loc = np.tile(np.arange(n_loc), len(pairs))
    return rep, loc


def pgd_attack_batch(sys: SiameseSystem, pairs: PairSet, scheme: Scheme, cfg: PgdConfig, rng: np.random.Generator,
                     keep_iterates: bool = False):
    """PGD on the misclassification loss for every pair.

    Returns ``(flipped, traces, n_passes, iterates, witnesses)``. ``traces``
    holds the descent loss ``(2y-1) * margin`` per step and ``witnesses`` the
    parameters of each row's first flip (NaN where none was found); rows
    follow the expanded pair/anchor layout. Restart 0 starts from the clean
    input; later restarts start from a random point in the vicinity.
    """
    rep, loc = _expand_locations(scheme, pairs)
    xa, xb, y = pairs.xa[rep], pairs.xb[rep], pairs.y[rep]
    eb = encode_batch(sys, xb)
    sign = (2 * y - 1).astype(np.float64)
    eta = cfg.eta(scheme)
    rows = len(rep)
    flipped_rows = np.zeros(rows, dtype=bool)
    witnesses = np.full((rows, scheme.param_dim), np.nan)
    traces = np.empty((rows, cfg.restarts * cfg.steps))
    iterates = [] if keep_iterates else None
    for r in range(cfg.restarts):
        if scheme.family == "PATCH":
            params = patch_params_from_image(scheme, xa, loc)
            if r > 0:
                params[:, :-1] = project(scheme, init_params(scheme, rng, rng.random(rows), rows))[:, :-1]
        elif r == 0:
            params = identity_params(scheme, rows)
        else:
            params = project(scheme, init_params(scheme, rng, rng.random(rows), rows))
        for s in range(cfg.steps):
            xp = apply(scheme, params, xa, check=False)
            if keep_iterates:
                iterates.append(xp)
            t, g = margin_and_grad(sys, xp, None, eb=eb)
            new = ((t > sys.kappa).astype(np.int64) != y) & ~flipped_rows
            witnesses[new] = params[new]
            flipped_rows |= new
            traces[:, r * cfg.steps + s] = sign * t
            ascent = param_grad(scheme, params, xa, -sign[:, None] * g, fixed_location=True)
            params = pgd_step(scheme, params, ascent, eta, cfg.literal_eq4)
    flipped = np.zeros(len(pairs), dtype=bool)
    np.logical_or.at(flipped, rep, flipped_rows)
    n_passes = rows * cfg.restarts * cfg.steps
    return flipped, traces, n_passes, iterates, witnesses


def pgd_attack(sys: SiameseSystem, pair, scheme: Scheme, cfg: PgdConfig, rng: np.random.Generator):
    """Single-pair PGD; returns (flipped, per-step loss trace)."""
    ps = pair if isinstance(pair, PairSet) else PairSet.from_pairs([pair])
    flipped, traces, _, _, _ = pgd_attack_batch(sys, ps, scheme, cfg, rng)
    return bool(flipped[0]), traces[0] if scheme.n_locations == 1 else traces


def robust_accuracy(sys: SiameseSystem, pairs: PairSet, scheme: Scheme, cfg: PgdConfig,
                    rng: np.random.Generator) -> RobustnessReport:
    if len(pairs) == 0:
        raise ConfigError("robust accuracy needs a nonempty pair set")
    start = time.perf_counter()
    flipped, traces, n_passes, _, witnesses = pgd_attack_batch(sys, pairs, scheme, cfg, rng)
    wall = time.perf_counter() - start
    return RobustnessReport(
        flips=flipped,
        robust_accuracy=1.0 - flipped.sum() / len(pairs),
        forward_count=n_passes,
        backward_count=n_passes,
        wall_time=wall,
        system_id=sys.system_id,
        scheme=scheme.name,
        config_hash=config_hash(asdict(cfg), scheme.descriptor()),
        traces=traces,
        witnesses=witnesses,
    )


def expected_pgd_passes(n_pairs: int, scheme: Scheme, cfg: PgdConfig) -> int:
    return cfg.restarts * cfg.steps * n_pairs * scheme.n_locations


# ---------------------------------------------------------------------------
# sampled local Lipschitz estimate


def _vicinity_samples(scheme: Scheme, x, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points of the vicinity, drawn one at a time so prefixes agree across sample counts."""
    n = x.size
    out = np.empty((n_samples, n))
    for i in range(n_samples):
        if scheme.family == "LINF":
            d = rng.uniform(-scheme.eps, scheme.eps, size=n)
        else:
            d = rng.normal(size=n)
            d *= scheme.eps * rng.random() ** (1.0 / n) / np.linalg.norm(d)
        out[i] = d
    return np.clip(x.ravel()[None] + out, 0.0, 1.0)


def max_grad_norm(grad_fn, x, scheme: Scheme, n_samples: int, rng: np.random.Generator) -> float:
    """Largest dual-norm gradient over sampled vicinity points; ``grad_fn`` maps (S, n) -> (S, n)."""
    if not scheme.is_lp:
        raise CapabilityError(f"Lipschitz estimate needs an Lp scheme, got {scheme.family}")
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    pts = _vicinity_samples(scheme, np.asarray(x, dtype=np.float64), n_samples, rng)
    q = conjugate_exponent(scheme.p)
    return float(np.linalg.norm(grad_fn(pts), ord=q, axis=1).max())


def lipschitz_local(sys: SiameseSystem, pair, scheme: Scheme, n_samples: int, rng: np.random.Generator) -> float:
    eb = encode_batch(sys, np.asarray(pair.x_beta)[None])

    def grad_fn(pts):
        _, g = margin_and_grad(sys, pts, None, eb=np.repeat(eb, len(pts), axis=0))
        return g

    return max_grad_norm(grad_fn, pair.x_alpha, scheme, n_samples, rng)


def clever_score(sys: SiameseSystem, pairs: PairSet, scheme: Scheme, n_samples: int = 64,
                 rng: np.random.Generator | None = None) -> float:
    """Mean normalised certified-radius proxy ``min(eps, |t - kappa| / K) / eps``."""
    if not scheme.is_lp:
        raise CapabilityError(f"CLEVER-style score needs an Lp scheme, got {scheme.family}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    t = margins(sys, pairs.xa, pairs.xb)
    scores = np.empty(len(pairs))
    for i in range(len(pairs)):
        k = lipschitz_local(sys, pairs[i], scheme, n_samples, rng)
        radius = abs(t[i] - sys.kappa) / k if k > 0 else np.inf
        scores[i] = min(scheme.eps, radius) / scheme.eps
    return float(scores.mean())

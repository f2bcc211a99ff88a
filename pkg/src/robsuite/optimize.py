"""Subset selection: pick candidates whose failure rates track reference robustness.

``prose`` mode (default) minimises

    rho(rates, r_ref) - lam1 * (mean(rates) + lam2 * std(rates))

with ``rates[i]`` the fraction of selected candidates system ``i`` gets
wrong. Failure rates fall as robustness rises, so a strongly negative
correlation is the goal, and the regulariser favours strong, discriminative
candidates. ``literal`` mode scores raw counts as
``rho(counts, r_ref) + lam1 * (mean(counts) - lam2 * std(counts))``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from .dataset import PairSet
from .errors import ConfigError, DegenerateCorrelationError, DimensionError, EmptySelectionError, InfeasibleError
from .gen import CandidatePool
from .numerics import pearson, rng_stream
from .perturb import Scheme
from .siamese import SiameseSystem, encode_batch, predict_from_margin


@dataclass(frozen=True)
class GaConfig:
    population: int = 64
    generations: int = 1000
    mutation_rate: float | None = None  # None: 1 / number of candidates
    crossover_rate: float = 0.9
    elitism: int = 2
    seed: int = 0
    tournament: int = 2


@dataclass(frozen=True)
class SelectionConfig:
    k_min: int
    k_max: int
    lam1: float = 0.5
    lam2: float = 1.0
    objective_mode: str = "prose"
    ga: GaConfig = GaConfig()

    def __post_init__(self):
        if self.objective_mode not in ("prose", "literal"):
            raise ConfigError(f"unknown objective mode {self.objective_mode!r}")
        if not 0 < self.k_min <= self.k_max:
            raise ConfigError("need 0 < k_min <= k_max")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ConfigError("regulariser weights must be non-negative")

    @property
    def literal(self) -> bool:
        return self.objective_mode == "literal"

    def penalty(self) -> float:
        """Fitness assigned to degenerate selections; worse than any attainable value."""
        if self.literal:
            return 2.0 + self.lam1 * self.k_max * (1.0 + self.lam2)
        return 2.0 + self.lam1 * (1.0 + self.lam2)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FailureMatrix:
    system_ids: tuple
    bits: np.ndarray  # (K, C) uint8, 1 = system mislabels the candidate

    def __post_init__(self):
        self.bits.setflags(write=False)

    @property
    def shape(self):
        return self.bits.shape


def failure_matrix(pool: CandidatePool, systems: list[SiameseSystem], chunk: int = 4096) -> FailureMatrix:
    """One forward pass per (system, candidate) on the perturbed pair."""
    if len(pool) == 0:
        raise EmptySelectionError("pool is empty")
    if len(systems) < 2:
        raise ConfigError("need at least two tuning systems")
    for s in systems:
        if s.side != pool.scheme.side:
            raise DimensionError(f"system {s.system_id} expects {s.side}px images, pool has {pool.scheme.side}px")
    y = pool.labels
    bits = np.zeros((len(systems), len(pool)), dtype=np.uint8)
    eb_src = [encode_batch(s, pool.sources.xb) for s in systems]
    for lo in range(0, len(pool), chunk):
        sl = slice(lo, lo + chunk)
        xp = pool.perturbed(np.arange(lo, min(lo + chunk, len(pool))))
        src = pool.source_index[sl]
        for i, s in enumerate(systems):
            t = (encode_batch(s, xp) * eb_src[i][src]).sum(axis=1)
            bits[i, sl] = predict_from_margin(t, s.kappa) != y[sl]
    return FailureMatrix(tuple(s.system_id for s in systems), bits)


def fitness(z, F, r_ref, cfg: SelectionConfig) -> float:
    """Objective of a single binary selection (lower is better)."""
    bits = F.bits if isinstance(F, FailureMatrix) else np.asarray(F)
    z = np.asarray(z).astype(bool)
    if z.shape != (bits.shape[1],):
        raise DimensionError("selection length must match the candidate count")
    size = int(z.sum())
    if size == 0:
        return cfg.penalty()
    counts = bits[:, z].sum(axis=1).astype(np.float64)
    vals = counts if cfg.literal else counts / size
    try:
        rho = pearson(vals, r_ref)
    except DegenerateCorrelationError:
        return cfg.penalty()
    mean, std = vals.mean(), vals.std()
    if cfg.literal:
        return rho + cfg.lam1 * (mean - cfg.lam2 * std)
    return rho - cfg.lam1 * (mean + cfg.lam2 * std)


@dataclass
class SelectionResult:
    z: np.ndarray
    fitness: float
    trace: list = field(default_factory=list)


class _Population:
    def __init__(self, members):
        self.members = members

    def packed(self):
        sizes = np.array([len(m) for m in self.members], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return np.concatenate(self.members).astype(np.int64), offsets


def _random_subset(rng, n, k):
    return np.sort(rng.choice(n, size=k, replace=False))


def _repair(rng, child, n, k_min, k_max):
    if len(child) > k_max:
        drop = rng.choice(len(child), size=len(child) - k_max, replace=False)
        child = np.delete(child, drop)
    elif len(child) < k_min:
        need = k_min - len(child)
        if n <= 4 * k_max:
            pool = np.setdiff1d(np.arange(n), child, assume_unique=True)
            child = np.union1d(child, rng.choice(pool, size=need, replace=False))
        else:
            have = set(child.tolist())
            extra = []
            while len(extra) < need:
                c = int(rng.integers(0, n))
                if c not in have:
                    have.add(c)
                    extra.append(c)
            child = np.union1d(child, np.array(extra, dtype=np.int64))
    return child


def ga_search(F, r_ref, cfg: SelectionConfig) -> SelectionResult:
    """Elitist GA over index-set individuals with a cardinality-repair operator."""
    bits = F.bits if isinstance(F, FailureMatrix) else np.asarray(F, dtype=np.uint8)
    r_ref = np.asarray(r_ref, dtype=np.float64)
    k_sys, n = bits.shape
    if len(r_ref) != k_sys:
        raise DimensionError("r_ref length must match the number of systems")
    if np.ptp(r_ref) == 0:
        raise DegenerateCorrelationError("reference robustness is constant across tuning systems")
    if cfg.k_min > n:
        raise InfeasibleError(f"k_min={cfg.k_min} exceeds pool size {n}")
    k_min, k_max = cfg.k_min, min(cfg.k_max, n)
    ga = cfg.ga
    rng = rng_stream(ga.seed, 31)
    rate = ga.mutation_rate if ga.mutation_rate is not None else 1.0 / n
    failf = bits.astype(np.float64)
    penalty = cfg.penalty()

    def evaluate(members):
        flat, offsets = _Population(members).packed()
        return _accel.population_fitness(failf, flat, offsets, r_ref, cfg.lam1, cfg.lam2, cfg.literal, penalty)

    members = [_random_subset(rng, n, int(rng.integers(k_min, k_max + 1))) for _ in range(ga.population)]
    fit = evaluate(members)
    trace = [float(fit.min())]

    def pick():
        cands = rng.integers(0, len(members), size=ga.tournament)
        return members[cands[np.argmin(fit[cands])]]

    for _ in range(ga.generations):
        order = np.argsort(fit, kind="stable")
        children = [members[i] for i in order[:ga.elitism]]
        while len(children) < ga.population:
            a, b = pick(), pick()
            if rng.random() < ga.crossover_rate:
                both = np.intersect1d(a, b, assume_unique=True)
                diff = np.setxor1d(a, b, assume_unique=True)
                child = np.union1d(both, diff[rng.random(len(diff)) < 0.5])
            else:
                child = a
            flips = rng.binomial(n, rate)
            if flips:
                child = np.setxor1d(child, np.unique(rng.integers(0, n, size=flips)), assume_unique=True)
            children.append(_repair(rng, child, n, k_min, k_max))
        members = children
        fit = evaluate(members)
        trace.append(min(trace[-1], float(fit.min())))
    best = int(np.argmin(fit))
    z = np.zeros(n, dtype=bool)
    z[members[best]] = True
    return SelectionResult(z, float(fit[best]), trace)


def ga_select(F, r_ref, cfg: SelectionConfig) -> np.ndarray:
    return ga_search(F, r_ref, cfg).z


def default_cardinality(pool_size: int, lo: float = 0.02, hi: float = 0.05) -> tuple[int, int]:
    return max(2, int(round(lo * pool_size))), max(2, int(round(hi * pool_size)))


@dataclass(eq=False)
class TestSet:
    """Selected triples ``((x_alpha, x_beta), x_prime_alpha, y)`` for one scheme."""

    __test__ = False  # not a pytest class

    scheme: Scheme
    sources: PairSet
    source_index: np.ndarray
    x_prime: np.ndarray
    y: np.ndarray
    candidate_index: np.ndarray

    def __len__(self):
        return len(self.y)

    def triples(self):
        for i in range(len(self)):
            s = self.source_index[i]
            yield (self.sources.xa[s], self.sources.xb[s]), self.x_prime[i], int(self.y[i])


def extract_set(pool: CandidatePool, z) -> TestSet:
    z = np.asarray(z).astype(bool)
    if z.shape != (len(pool),):
        raise DimensionError("selection length must match the pool size")
    idx = np.flatnonzero(z)
    if len(idx) == 0:
        raise EmptySelectionError("selection is empty")
    return TestSet(pool.scheme, pool.sources, pool.source_index[idx].copy(), pool.perturbed(idx),
                   pool.labels[idx].copy(), idx)

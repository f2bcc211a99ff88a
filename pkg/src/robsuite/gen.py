"""Candidate generation: monotone gradient descent against a dummy encoder.

For every source pair the perturbation parameters start at a random
magnitude inside the vicinity and follow plain gradient descent on the
loss ``(2y - 1) * margin``. An iterate becomes a candidate only when its
loss beats every earlier candidate of the same source, so each source
contributes a ladder of progressively stronger adversaries. PATCH runs one
ladder per anchor of the location grid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import PairSet
from .errors import ConfigError, EmptyPoolError, GenerationError, IntegrityError
from .numerics import read_rbt, write_rbt
from .perturb import Scheme, apply, init_params, param_grad, project, uniform_params
from .siamese import SiameseSystem, encode_batch, margin_and_grad, margins

HIST_BINS = 20


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class Candidate:
    source_index: int
    params: np.ndarray
    x_prime_alpha: np.ndarray
    loss: float
    step: int
    y: int


@dataclass(eq=False)
class CandidatePool:
    """Accepted candidates for one scheme, ordered by (source_index, step).

    ``source_index`` points into ``sources`` (the generation pair set).
    Pixels are re-derived from ``params`` on demand.
    """

    scheme: Scheme
    dummy_system_id: str
    sources: PairSet
    source_index: np.ndarray
    params: np.ndarray
    loss: np.ndarray
    step: np.ndarray
    dummy_kappa: float = 0.0
    meta: dict | None = None

    def __len__(self):
        return len(self.source_index)

    @property
    def labels(self) -> np.ndarray:
        return self.sources.y[self.source_index]

    def perturbed(self, index=None) -> np.ndarray:
        idx = np.arange(len(self)) if index is None else np.asarray(index, dtype=np.int64)
        out = np.empty((len(idx), self.scheme.side, self.scheme.side))
        for lo in range(0, len(idx), 4096):
            sl = idx[lo:lo + 4096]
            out[lo:lo + len(sl)] = apply(self.scheme, self.params[sl], self.sources.xa[self.source_index[sl]],
                                         check=False)
        return out

    def __getitem__(self, i) -> Candidate:
        return Candidate(int(self.source_index[i]), self.params[i], self.perturbed([i])[0], float(self.loss[i]),
                         int(self.step[i]), int(self.labels[i]))

    def dummy_flips(self) -> np.ndarray:
        y = self.labels
        t = self.loss * (2 * y - 1)
        return (t > self.dummy_kappa).astype(np.int64) != y

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.scheme.descriptor(), sort_keys=True).encode())
        for arr in (self.source_index, self.step):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        for arr in (self.params, self.loss):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def ladder_ids(pool_or_scheme, source_index=None, params=None) -> np.ndarray:
    """Key of the monotone ladder each candidate belongs to.

    One ladder per source, except PATCH where every (source, anchor) run is
    its own ladder.
    """
    if isinstance(pool_or_scheme, CandidatePool):
        scheme, source_index, params = pool_or_scheme.scheme, pool_or_scheme.source_index, pool_or_scheme.params
    else:
        scheme = pool_or_scheme
    source_index = np.asarray(source_index, dtype=np.int64)
    if scheme.family != "PATCH":
        return source_index
    return source_index * scheme.n_locations + np.asarray(params)[:, -1].astype(np.int64)


def generate_pool(pairs: PairSet, scheme: Scheme, dummy: SiameseSystem, n_steps: int, eta: float,
                  rng: np.random.Generator) -> CandidatePool:
    """Run the monotone descent for every source; PATCH runs once per anchor with the location held fixed."""
    if n_steps < 1:
        raise ConfigError("need at least one generation step")
    if not eta > 0:
        raise ConfigError("step size must be positive")
    n_loc = scheme.n_locations
    rep = np.repeat(np.arange(len(pairs)), n_loc)
    b = len(rep)
    xa, y = pairs.xa[rep], pairs.y[rep]
    eb = encode_batch(dummy, pairs.xb)[rep]
    sign = (2 * y - 1).astype(np.float64)
    frac = rng.uniform(0.0, 1.0, size=b)
    params = project(scheme, init_params(scheme, rng, frac, b))
    if scheme.family == "PATCH":
        params[:, -1] = np.tile(np.arange(n_loc), len(pairs))
    best = np.ones(b)
    rec_row, rec_params, rec_loss, rec_step = [], [], [], []
    for i in range(n_steps):
        kept = _f32(params)
        xp = apply(scheme, kept, xa, check=False)
        t, g = margin_and_grad(dummy, xp, None, eb=eb)
        loss = 2 * y * t - t
        bad = ~np.isfinite(loss)
        if bad.any():
            raise GenerationError(f"non-finite loss for source pair {int(rep[np.flatnonzero(bad)[0]])} at step {i}")
        grad = param_grad(scheme, kept, xa, sign[:, None] * g, fixed_location=True)
        loss = _f32(loss)  # compare at storage precision so saved ladders stay strictly decreasing
        acc = loss < best
        if acc.any():
            idx = np.flatnonzero(acc)
            rec_row.append(idx)
            rec_params.append(kept[idx])
            rec_loss.append(loss[idx])
            rec_step.append(np.full(len(idx), i))
            best = np.where(acc, loss, best)
        params = project(scheme, kept - eta * grad)
    meta = {"n_steps": n_steps, "eta": eta}
    if not rec_row:
        return CandidatePool(scheme, dummy.system_id, pairs, np.zeros(0, np.int64), np.zeros((0, scheme.param_dim)),
                             np.zeros(0), np.zeros(0, np.int64), dummy.kappa, meta)
    row = np.concatenate(rec_row)
    step = np.concatenate(rec_step)
    order = np.lexsort((step, row))  # rows are already (source, anchor) ordered
    return CandidatePool(scheme, dummy.system_id, pairs, rep[row[order]].astype(np.int64),
                         np.concatenate(rec_params)[order], np.concatenate(rec_loss)[order],
                         step[order].astype(np.int64), dummy.kappa, meta)


def random_pool(pairs: PairSet, scheme: Scheme, dummy: SiameseSystem, counts, rng: np.random.Generator) -> CandidatePool:
    """Volume-uniform vicinity samples with the given per-source counts (ablation baseline)."""
    counts = np.asarray(counts, dtype=np.int64)
    src = np.repeat(np.arange(len(pairs)), counts)
    n = len(src)
    params = _f32(project(scheme, uniform_params(scheme, rng, n)))
    t = np.empty(n)
    for lo in range(0, n, 4096):
        sl = slice(lo, lo + 4096)
        xp = apply(scheme, params[sl], pairs.xa[src[sl]], check=False)
        t[sl] = margins(dummy, xp, pairs.xb[src[sl]])
    y = pairs.y[src]
    return CandidatePool(scheme, dummy.system_id, pairs, src, params, (2 * y - 1) * t, np.zeros(n, np.int64),
                         dummy.kappa, {"random": True})


def pool_stats(pool: CandidatePool) -> dict:
    if len(pool) == 0:
        raise EmptyPoolError("pool has no candidates")
    hist, _ = np.histogram(np.clip(pool.loss, -1.0, 1.0), bins=HIST_BINS, range=(-1.0, 1.0))
    per_source = np.bincount(pool.source_index, minlength=len(pool.sources))
    flips = pool.dummy_flips()
    flipped_sources = np.unique(pool.source_index[flips])
    return {
        "size": int(len(pool)),
        "per_source": per_source.tolist(),
        "loss_histogram": hist.tolist(),
        "dummy_flip_fraction": float(flips.mean()),
        "source_flip_fraction": float(len(flipped_sources) / len(pool.sources)),
        "occupied_bins": int((hist > 0).sum()),
    }


def save_pool(pool: CandidatePool, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_rbt(directory / "params.rbt", pool.params)
    write_rbt(directory / "candidates.rbt", np.column_stack([pool.source_index, pool.step, pool.loss]))
    manifest = {
        "scheme": pool.scheme.descriptor(),
        "dummy_system_id": pool.dummy_system_id,
        "dummy_kappa": pool.dummy_kappa,
        "size": len(pool),
        "digest": pool.digest(),
        **(pool.meta or {}),
        **(extra or {}),
    }
    (directory / "pool.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_pool(directory, sources: PairSet, dummy: SiameseSystem | None = None, tol: float = 1e-5) -> CandidatePool:
    """Load a pool; with ``dummy`` given, re-derive every candidate and check its stored loss."""
    directory = Path(directory)
    manifest = json.loads((directory / "pool.json").read_text())
    params = read_rbt(directory / "params.rbt").astype(np.float64)
    cand = read_rbt(directory / "candidates.rbt").astype(np.float64).reshape(-1, 3)
    scheme = Scheme.from_descriptor(manifest["scheme"])
    pool = CandidatePool(scheme, manifest["dummy_system_id"], sources, cand[:, 0].astype(np.int64),
                         params.reshape(len(cand), scheme.param_dim), cand[:, 2], cand[:, 1].astype(np.int64),
                         manifest["dummy_kappa"], {k: manifest[k] for k in ("n_steps", "eta", "seed") if k in manifest})
    if dummy is not None and len(pool):
        y = pool.labels
        t = np.empty(len(pool))
        for lo in range(0, len(pool), 4096):
            sl = slice(lo, lo + 4096)
            t[sl] = margins(dummy, pool.perturbed(np.arange(len(pool))[sl]), sources.xb[pool.source_index[sl]])
        drift = np.abs((2 * y - 1) * t - pool.loss).max()
        if drift > tol:
            raise IntegrityError(f"re-derived losses drift by {drift:.2e} from stored values")
    return pool

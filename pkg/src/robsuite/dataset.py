"""Synthetic identity data: procedural face-like prototypes and labeled pairs."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import read_rbt, rng_stream, write_rbt


@dataclass(frozen=True)
class Identity:
    id: int
    prototype: np.ndarray


@dataclass(frozen=True)
class VerificationPair:
    x_alpha: np.ndarray
    x_beta: np.ndarray
    y: int


@dataclass(frozen=True)
class PairSet:
    """Columnar storage for verification pairs; ``xa``/``xb`` are ``(N, h, w)``."""

    xa: np.ndarray
    xb: np.ndarray
    y: np.ndarray
    id_a: np.ndarray
    id_b: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> VerificationPair:
        return VerificationPair(self.xa[i], self.xb[i], int(self.y[i]))

    @property
    def side(self) -> int:
        return self.xa.shape[1]

    def subset(self, index) -> "PairSet":
        index = np.asarray(index, dtype=np.int64)
        return PairSet(self.xa[index], self.xb[index], self.y[index], self.id_a[index], self.id_b[index])

    @classmethod
    def from_pairs(cls, pairs) -> "PairSet":
        pairs = list(pairs)
        xa = np.stack([p.x_alpha for p in pairs]).astype(np.float64)
        xb = np.stack([p.x_beta for p in pairs]).astype(np.float64)
        y = np.array([p.y for p in pairs], dtype=np.int64)
        ids = -np.ones(len(pairs), dtype=np.int64)
        return cls(xa, xb, y, ids, ids.copy())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.xa, self.xb):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()


def _blob(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def make_prototypes(num_identities: int, side: int, seed: int) -> list[Identity]:
    """Procedural "blob faces": an oval head with identity-specific eyes, mouth and texture."""
    if num_identities < 2:
        raise ConfigError("need at least two identities")
    if side < 8:
        raise ConfigError("side must be at least 8")
    c = np.linspace(-1.0, 1.0, side)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    out = []
    for k in range(num_identities):
        rng = rng_stream(seed, k)
        head_w = rng.uniform(0.6, 0.85)
        head_h = rng.uniform(0.75, 0.95)
        skin = rng.uniform(0.5, 0.75)
        bg = rng.uniform(0.12, 0.3)
        head = 1.0 / (1.0 + np.exp(-12.0 * (1.0 - np.sqrt((xx / head_w) ** 2 + (yy / head_h) ** 2))))
        img = bg + (skin - bg) * head
        eye_y = rng.uniform(-0.4, -0.1)
        eye_dx = rng.uniform(0.2, 0.45)
        eye_s = rng.uniform(0.08, 0.16)
        eye_dark = rng.uniform(0.25, 0.45)
        tilt = rng.uniform(-0.1, 0.1)
        img = img - eye_dark * _blob(yy, xx, eye_y + tilt, -eye_dx, eye_s, eye_s * 1.3)
        img = img - eye_dark * _blob(yy, xx, eye_y - tilt, eye_dx, eye_s, eye_s * 1.3)
        mouth_y = rng.uniform(0.35, 0.6)
        mouth_w = rng.uniform(0.15, 0.4)
        img = img - rng.uniform(0.15, 0.35) * _blob(yy, xx, mouth_y, rng.uniform(-0.1, 0.1), 0.08, mouth_w)
        img = img + rng.uniform(-0.15, 0.15) * _blob(yy, xx, rng.uniform(-0.1, 0.25), 0.0, 0.2, 0.1)
        # low-frequency texture: coarse noise upsampled bilinearly
        coarse = rng.normal(0.0, 0.05, size=(5, 5))
        cc = np.linspace(0, 4, side)
        g0 = np.floor(cc).astype(int).clip(0, 3)
        f = cc - g0
        rows = coarse[g0] * (1 - f)[:, None] + coarse[g0 + 1] * f[:, None]
        tex = rows[:, g0] * (1 - f)[None, :] + rows[:, g0 + 1] * f[None, :]
        img = np.clip(img + tex, 0.0, 1.0)
        out.append(Identity(k, img))
    protos = np.stack([i.prototype.ravel() for i in out])
    d2 = ((protos[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    if not d2.min() > 0:
        raise ConfigError("generated prototypes are not distinct")
    return out


def sample_image(identity: Identity, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    proto = identity.prototype
    if sigma == 0:
        return proto.copy()
    return np.clip(proto + rng.normal(0.0, sigma, size=proto.shape), 0.0, 1.0)


def make_pairs(identities: list[Identity], count: int, pos_ratio: float, sigma: float, seed: int) -> PairSet:
    """Balanced verification pairs; pair ``i`` draws its noise from sub-stream ``(seed, 1, i)``."""
    if count < 2:
        raise ConfigError("count must be at least 2")
    if not 0 < pos_ratio < 1:
        raise ConfigError("pos_ratio must lie in (0, 1)")
    if len(identities) < 2:
        raise ConfigError("need at least two identities")
    n_pos = math.ceil(count * pos_ratio)
    main = rng_stream(seed, 0)
    m = len(identities)
    id_a = np.empty(count, dtype=np.int64)
    id_b = np.empty(count, dtype=np.int64)
    id_a[:n_pos] = main.integers(0, m, size=n_pos)
    id_b[:n_pos] = id_a[:n_pos]
    na = main.integers(0, m, size=count - n_pos)
    nb = (na + main.integers(1, m, size=count - n_pos)) % m
    id_a[n_pos:], id_b[n_pos:] = na, nb
    y = np.zeros(count, dtype=np.int64)
    y[:n_pos] = 1
    order = main.permutation(count)
    id_a, id_b, y = id_a[order], id_b[order], y[order]
    side = identities[0].prototype.shape
    xa = np.empty((count,) + side)
    xb = np.empty((count,) + side)
    for i in range(count):
        rng = rng_stream(seed, 1, i)
        xa[i] = sample_image(identities[id_a[i]], sigma, rng)
        xb[i] = sample_image(identities[id_b[i]], sigma, rng)
    return PairSet(xa, xb, y, id_a, id_b)


def make_triplets(identities: list[Identity], count: int, sigma: float, seed: int):
    """Anchor/positive/negative image arrays for triplet training."""
    rng = rng_stream(seed, 2)
    m = len(identities)
    a_id = rng.integers(0, m, size=count)
    n_id = (a_id + rng.integers(1, m, size=count)) % m
    protos = np.stack([i.prototype for i in identities])
    shape = (count,) + protos.shape[1:]
    anchor = np.clip(protos[a_id] + rng.normal(0, sigma, shape), 0, 1)
    positive = np.clip(protos[a_id] + rng.normal(0, sigma, shape), 0, 1)
    negative = np.clip(protos[n_id] + rng.normal(0, sigma, shape), 0, 1)
    return anchor, positive, negative


def save_dataset(pairs: PairSet, meta: dict, directory) -> None:
    """Write ``dataset.json`` plus ``images.rbt``; pair ``i`` references images ``2i`` and ``2i+1``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.stack([pairs.xa, pairs.xb], axis=1).reshape((-1,) + pairs.xa.shape[1:])
    write_rbt(directory / "images.rbt", images)
    manifest = dict(meta)
    manifest.update({
        "count": len(pairs),
        "positives": int(pairs.y.sum()),
        "pairs": [[2 * i, 2 * i + 1, int(pairs.y[i]), int(pairs.id_a[i]), int(pairs.id_b[i])] for i in range(len(pairs))],
    })
    (directory / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(directory) -> tuple[PairSet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    images = read_rbt(directory / "images.rbt").astype(np.float64)
    rows = np.array(manifest["pairs"], dtype=np.int64).reshape(-1, 5)
    pairs = PairSet(images[rows[:, 0]], images[rows[:, 1]], rows[:, 2], rows[:, 3], rows[:, 4])
    return pairs, manifest

"""Siamese verification systems: MLP encoders with hand-written backprop.

An encoder maps a flattened image through an optional box blur, affine
layers (activation on all but the last) and a final L2 normalisation. The
verifier predicts "same identity" iff the inner product of the two unit
embeddings strictly exceeds ``kappa``.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import PairSet, make_triplets
from .errors import CalibrationError, ConfigError, DimensionError, TrainingError, ZooError
from .numerics import derive_seed, read_rbt, rng_stream, write_rbt

TRIPLET_MARGIN = 0.2
EMBED_DIM = 32


class PassCounter:
    """Counts encoder passes in units of image rows."""

    def __init__(self):
        self.forward = 0
        self.backward = 0


_COUNTERS: list[PassCounter] = []


@contextlib.contextmanager
def count_passes():
    counter = PassCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _tick(forward=0, backward=0):
    for c in _COUNTERS:
        c.forward += forward
        c.backward += backward


@dataclass(frozen=True)
class ArchDescriptor:
    smoothing_kernel: int = 1
    layer_widths: tuple = (64, EMBED_DIM)
    activation: str = "relu"
    weight_scale: float = 1.0
    noise_aug_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths or min(self.layer_widths) <= 0:
            raise ConfigError("layer widths must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.smoothing_kernel < 1 or self.smoothing_kernel % 2 == 0:
            raise ConfigError("smoothing kernel must be a positive odd integer")

    @property
    def embed_dim(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    triplets: int = 2048
    data_sigma: float = 0.05


@dataclass(frozen=True, eq=False)
class SiameseSystem:
    arch: ArchDescriptor
    weights: tuple  # ((W, b), ...) with W of shape (out, in)
    side: int
    kappa: float = 0.0
    system_id: str = ""
    seed: int = 0
    accuracy: float = float("nan")
    loss_trace: tuple = field(default=(), repr=False)

    @property
    def n_inputs(self) -> int:
        return self.side * self.side


_SMOOTH_CACHE: dict = {}


def smoothing_matrix(side: int, k: int) -> np.ndarray:
    """Box-average operator on a flattened ``side x side`` image (border-renormalised)."""
    key = (side, k)
    if key not in _SMOOTH_CACHE:
        r = k // 2
        one = np.zeros((side, side))
        for i in range(side):
            lo, hi = max(0, i - r), min(side, i + r + 1)
            one[i, lo:hi] = 1.0 / (hi - lo)
        _SMOOTH_CACHE[key] = np.kron(one, one)
    return _SMOOTH_CACHE[key]


def _act(name, a):
    return np.maximum(a, 0.0) if name == "relu" else np.tanh(a)


def _act_grad(name, a, h):
    return (a > 0).astype(np.float64) if name == "relu" else 1.0 - h * h


def _flatten(sys: SiameseSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = sys.n_inputs
    if x.shape[-2:] == (sys.side, sys.side):
        return x.reshape(-1, n)
    if x.shape[-1] == n:
        return x.reshape(-1, n)
    raise DimensionError(f"input shape {x.shape} does not match a {sys.side}x{sys.side} encoder")


def _forward(sys: SiameseSystem, X: np.ndarray):
    _tick(forward=X.shape[0])
    h = X
    if sys.arch.smoothing_kernel > 1:
        h = h @ smoothing_matrix(sys.side, sys.arch.smoothing_kernel).T
    acts, pres = [h], []
    last = len(sys.weights) - 1
    for i, (W, b) in enumerate(sys.weights):
        a = h @ W.T + b
        h = a if i == last else _act(sys.arch.activation, a)
        pres.append(a)
        acts.append(h)
    norm = np.sqrt((h * h).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    u = h / norm
    return u, (acts, pres, norm, u)


def _backward(sys: SiameseSystem, cache, du: np.ndarray, want_weights: bool):
    _tick(backward=du.shape[0])
    acts, pres, norm, u = cache
    g = (du - u * (u * du).sum(axis=1, keepdims=True)) / norm
    last = len(sys.weights) - 1
    grads = [None] * len(sys.weights)
    for i in range(last, -1, -1):
        W, _ = sys.weights[i]
        if i != last:
            g = g * _act_grad(sys.arch.activation, pres[i], acts[i + 1])
        if want_weights:
            grads[i] = (g.T @ acts[i], g.sum(axis=0))
        g = g @ W
    if sys.arch.smoothing_kernel > 1:
        g = g @ smoothing_matrix(sys.side, sys.arch.smoothing_kernel)
    return g, grads


def encode_batch(sys: SiameseSystem, X) -> np.ndarray:
    u, _ = _forward(sys, _flatten(sys, X))
    return u


def encode(sys: SiameseSystem, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size != sys.n_inputs:
        raise DimensionError(f"image has {img.size} values, encoder expects {sys.n_inputs}")
    return encode_batch(sys, img.reshape(1, -1))[0]


def margins(sys: SiameseSystem, xa, xb) -> np.ndarray:
    """Batched inner products of unit embeddings."""
    A, B = _flatten(sys, xa), _flatten(sys, xb)
    if A.shape != B.shape:
        raise DimensionError("x_alpha and x_beta batches differ in shape")
    u, _ = _forward(sys, np.concatenate([A, B]))
    n = A.shape[0]
    return np.clip((u[:n] * u[n:]).sum(axis=1), -1.0, 1.0)


def margin(sys: SiameseSystem, pair) -> float:
    return float(margins(sys, pair.x_alpha, pair.x_beta)[0])


def predict_from_margin(t, kappa):
    return (np.asarray(t) > kappa).astype(np.int64)


def predict_batch(sys: SiameseSystem, xa, xb) -> np.ndarray:
    return predict_from_margin(margins(sys, xa, xb), sys.kappa)


def predict(sys: SiameseSystem, pair) -> int:
    return int(predict_from_margin(margin(sys, pair), sys.kappa))


def margin_and_grad(sys: SiameseSystem, xa, xb, eb=None):
    """Margins and their gradients w.r.t. ``xa`` (flattened, ``(B, n)``).

    ``eb`` may carry precomputed embeddings of ``xb``; the second image is
    never differentiated.
    """
    A = _flatten(sys, xa)
    if eb is None:
        eb = encode_batch(sys, xb)
    ua, cache = _forward(sys, A)
    t = (ua * eb).sum(axis=1)
    g, _ = _backward(sys, cache, eb, want_weights=False)
    return t, g


def backward_margin(sys: SiameseSystem, pair) -> np.ndarray:
    _, g = margin_and_grad(sys, pair.x_alpha, pair.x_beta)
    return g[0].reshape(np.shape(pair.x_alpha))


def init_system(arch: ArchDescriptor, side: int, seed: int) -> SiameseSystem:
    rng = rng_stream(seed, 7)
    gain = 2.0 if arch.activation == "relu" else 1.0
    fan_in = side * side
    weights = []
    for width in arch.layer_widths:
        W = rng.normal(0.0, arch.weight_scale * np.sqrt(gain / fan_in), size=(width, fan_in))
        weights.append((_f32(W), np.zeros(width)))
        fan_in = width
    return SiameseSystem(arch=arch, weights=tuple(weights), side=side, seed=seed)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def triplet_loss_and_grads(sys: SiameseSystem, A, P, N):
    b = A.shape[0]
    u, cache = _forward(sys, np.concatenate([A, P, N]))
    ua, up, un = u[:b], u[b:2 * b], u[2 * b:]
    dap = ((ua - up) ** 2).sum(1)
    dan = ((ua - un) ** 2).sum(1)
    raw = dap - dan + TRIPLET_MARGIN
    active = (raw > 0).astype(np.float64)[:, None] / b
    loss = float(np.maximum(raw, 0.0).mean())
    du = np.concatenate([2 * (un - up) * active, -2 * (ua - up) * active, 2 * (ua - un) * active])
    _, grads = _backward(sys, cache, du, want_weights=True)
    return loss, grads


def train(arch: ArchDescriptor, triplets, hyper: TrainConfig, side: int | None = None,
          init: SiameseSystem | None = None) -> SiameseSystem:
    """Plain SGD on the triplet loss; deterministic given ``hyper.seed``."""
    anchor, positive, negative = (np.asarray(t, dtype=np.float64) for t in triplets)
    if side is None:
        side = anchor.shape[-1]
    sys = init if init is not None else init_system(arch, side, hyper.seed)
    n = anchor.shape[0]
    A, P, N = (t.reshape(n, -1) for t in (anchor, positive, negative))
    rng = rng_stream(hyper.seed, 11)
    weights = [(W.copy(), b.copy()) for W, b in sys.weights]
    trace = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            xa, xp, xn = A[idx], P[idx], N[idx]
            if arch.noise_aug_sigma > 0:
                xa, xp, xn = (np.clip(x + rng.normal(0, arch.noise_aug_sigma, x.shape), 0, 1) for x in (xa, xp, xn))
            cur = replace(sys, weights=tuple(weights))
            loss, grads = triplet_loss_and_grads(cur, xa, xp, xn)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            for (W, b), (dW, db) in zip(weights, grads):
                W -= hyper.lr * dW
                b -= hyper.lr * db
            total += loss
            batches += 1
        trace.append(total / max(batches, 1))
        if not all(np.all(np.isfinite(W)) for W, _ in weights):
            raise TrainingError(f"weights diverged at epoch {epoch}")
    weights = tuple((_f32(W), _f32(b)) for W, b in weights)
    return replace(sys, weights=weights, loss_trace=tuple(trace))


def pair_hinge_loss_and_grads(sys: SiameseSystem, xa, xb, y, hinge: float = 0.1):
    """Mean of ``max(0, hinge - (2y - 1) * (t - kappa))`` and its weight gradients."""
    A, B = _flatten(sys, xa), _flatten(sys, xb)
    b = A.shape[0]
    u, cache = _forward(sys, np.concatenate([A, B]))
    ua, ub = u[:b], u[b:]
    sign = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    raw = hinge - sign * ((ua * ub).sum(axis=1) - sys.kappa)
    active = (raw > 0).astype(np.float64) * -sign / b
    du = np.concatenate([ub * active[:, None], ua * active[:, None]])
    _, grads = _backward(sys, cache, du, want_weights=True)
    return float(np.maximum(raw, 0.0).mean()), grads


def finetune_pairs(sys: SiameseSystem, xa, xb, y, epochs: int = 20, lr: float = 0.05, batch: int = 64,
                   hinge: float = 0.1, seed: int = 0) -> SiameseSystem:
    """SGD on a pair hinge loss with ``kappa`` held fixed (an adaptive attacker fitting a published set)."""
    xa, xb = _flatten(sys, xa), _flatten(sys, xb)
    y = np.asarray(y, dtype=np.int64)
    if not (len(xa) == len(xb) == len(y)) or len(y) == 0:
        raise DimensionError("fine-tuning needs equally sized, nonempty pair arrays")
    rng = rng_stream(seed, 13)
    weights = [(W.copy(), b.copy()) for W, b in sys.weights]
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total, batches = 0.0, 0
        for start in range(0, len(y), batch):
            idx = order[start:start + batch]
            loss, grads = pair_hinge_loss_and_grads(replace(sys, weights=tuple(weights)), xa[idx], xb[idx], y[idx],
                                                    hinge)
            for (W, b), (dW, db) in zip(weights, grads):
                W -= lr * dW
                b -= lr * db
            total += loss
            batches += 1
        trace.append(total / batches)
        if not all(np.all(np.isfinite(W)) for W, _ in weights):
            raise TrainingError(f"weights diverged at fine-tuning epoch {epoch}")
    weights = tuple((_f32(W), _f32(b)) for W, b in weights)
    return replace(sys, weights=weights, loss_trace=tuple(trace))


def calibrate_threshold(sys: SiameseSystem, pairs: PairSet) -> float:
    """Threshold at margin midpoints maximising clean accuracy; ties go to the smaller value."""
    y = np.asarray(pairs.y)
    if len(y) == 0 or y.min() == y.max():
        raise CalibrationError("validation pairs must contain both labels")
    t = margins(sys, pairs.xa, pairs.xb)
    return _best_threshold(t, y)[0]


def _best_threshold(t, y):
    levels = np.unique(t)
    cands = np.concatenate([[(-1.0 + levels[0]) / 2], (levels[:-1] + levels[1:]) / 2, [(levels[-1] + 1.0) / 2]])
    cands = np.clip(cands, np.nextafter(-1.0, 0.0), np.nextafter(1.0, 0.0))
    acc = ((t[None, :] > cands[:, None]) == (y[None, :] == 1)).mean(axis=1)
    best = int(np.argmax(acc))  # first maximum is the smallest candidate
    return float(cands[best]), float(acc[best])


def clean_accuracy(sys: SiameseSystem, pairs: PairSet) -> float:
    return float((predict_batch(sys, pairs.xa, pairs.xb) == pairs.y).mean())


@dataclass(frozen=True)
class ZooMember:
    arch: ArchDescriptor
    train: TrainConfig = TrainConfig()


ROMAN = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII"]


def default_zoo_config() -> list[ZooMember]:
    """Nine encoders spanning smoothing, width, depth, activation and noise augmentation."""
    A = ArchDescriptor
    return [
        ZooMember(A(1, (64, 32), "relu", 1.0, 0.0)),
        ZooMember(A(3, (64, 32), "relu", 1.0, 0.1)),
        ZooMember(A(1, (128, 32), "tanh", 1.0, 0.0)),
        ZooMember(A(3, (96, 32), "tanh", 1.0, 0.2)),
        ZooMember(A(5, (64, 32), "relu", 1.0, 0.15)),
        ZooMember(A(1, (64, 64, 32), "relu", 1.0, 0.05)),
        ZooMember(A(5, (128, 32), "tanh", 0.8, 0.3)),
        ZooMember(A(1, (96, 32), "relu", 1.5, 0.0)),
        ZooMember(A(3, (64, 64, 32), "tanh", 1.0, 0.1)),
    ]


def train_member(member: ZooMember, identities, side, seed, system_id="") -> SiameseSystem:
    hyper = replace(member.train, seed=seed)
    trip = make_triplets(identities, hyper.triplets, hyper.data_sigma, derive_seed(seed, 1))
    sys = train(member.arch, trip, hyper, side=side)
    return replace(sys, system_id=system_id)


def build_zoo(zoo_config, identities, calib_pairs: PairSet, root_seed: int, accuracy_floor: float = 0.85,
              eval_pairs: PairSet | None = None) -> list[SiameseSystem]:
    """Train, calibrate and vet every member; raises ``ZooError`` naming any below the floor."""
    if len(zoo_config) < 2:
        raise ConfigError("zoo needs at least two members")
    side = identities[0].prototype.shape[0]
    eval_pairs = calib_pairs if eval_pairs is None else eval_pairs
    zoo, bad = [], []
    for i, member in enumerate(zoo_config):
        sid = ROMAN[i] if i < len(ROMAN) else f"S{i + 1}"
        sys = train_member(member, identities, side, derive_seed(root_seed, i), sid)
        sys = replace(sys, kappa=calibrate_threshold(sys, calib_pairs))
        sys = replace(sys, accuracy=clean_accuracy(sys, eval_pairs))
        if sys.accuracy < accuracy_floor:
            bad.append(f"{sid} ({sys.accuracy:.3f})")
        zoo.append(sys)
    if bad:
        raise ZooError("members below accuracy floor: " + ", ".join(bad))
    return zoo


def save_system(sys: SiameseSystem, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in sys.weights])
    write_rbt(directory / "weights.rbt", flat)
    meta = {
        "system_id": sys.system_id,
        "arch": {**asdict(sys.arch), "layer_widths": list(sys.arch.layer_widths)},
        "side": sys.side,
        "kappa": sys.kappa,
        "seed": sys.seed,
        "accuracy": sys.accuracy,
        "shapes": [list(W.shape) for W, _ in sys.weights],
        "loss_trace": list(sys.loss_trace),
    }
    (directory / "system.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_system(directory) -> SiameseSystem:
    directory = Path(directory)
    meta = json.loads((directory / "system.json").read_text())
    flat = read_rbt(directory / "weights.rbt").astype(np.float64)
    weights, pos = [], 0
    for out_dim, in_dim in meta["shapes"]:
        W = flat[pos:pos + out_dim * in_dim].reshape(out_dim, in_dim)
        pos += out_dim * in_dim
        b = flat[pos:pos + out_dim]
        pos += out_dim
        weights.append((W, b))
    if pos != flat.size:
        raise DimensionError("weight blob size does not match recorded shapes")
    arch = ArchDescriptor(**meta["arch"])
    return SiameseSystem(arch=arch, weights=tuple(weights), side=meta["side"], kappa=meta["kappa"],
                         system_id=meta["system_id"], seed=meta["seed"], accuracy=meta["accuracy"],
                         loss_trace=tuple(meta.get("loss_trace", ())))

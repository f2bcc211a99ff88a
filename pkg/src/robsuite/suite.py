"""The distributable test suite: assembly, storage, integrity checks and evaluation.

A suite holds one set per scheme. Original pairs are stored once and every
set element points at its original by row, so suites built from a shared
source pool stay small.

On disk::

    manifest.json            sorted-key JSON, SHA-256 of every blob
    originals.rbt            (M, 2, side, side) clean pairs
    perturbed/<scheme>.rbt   (n, side, side) perturbed first images
    labels.rbt               (N, 2) rows of (original row, label), sets concatenated
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssemblyError, ChecksumError, DimensionError, EmptySelectionError, IntegrityError, VersionError
from .numerics import decode_rbt, encode_rbt
from .optimize import TestSet
from .perturb import Scheme, within
from .siamese import SiameseSystem, count_passes, encode_batch, predict_from_margin

FORMAT_VERSION = 1


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class SuiteSet:
    """Perturbed elements of one scheme; ``original_index`` rows into the suite's originals."""

    scheme: Scheme
    original_index: np.ndarray
    x_prime: np.ndarray
    y: np.ndarray
    originals: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.y)

    @property
    def xa(self) -> np.ndarray:
        return self.originals[self.original_index, 0]

    @property
    def xb(self) -> np.ndarray:
        return self.originals[self.original_index, 1]


@dataclass(eq=False)
class TestSuite:
    __test__ = False  # not a pytest class

    manifest: dict
    originals: np.ndarray
    original_labels: np.ndarray
    sets: list

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, name: str) -> SuiteSet:
        for s in self.sets:
            if s.scheme.name == name:
                return s
        raise KeyError(name)

    @property
    def scheme_names(self) -> list[str]:
        return [s.scheme.name for s in self.sets]

    @property
    def size(self) -> int:
        return sum(len(s) for s in self.sets)

    def blobs(self) -> dict[str, bytes]:
        """Serialized payloads keyed by their path inside the suite directory."""
        out = {"originals.rbt": encode_rbt(self.originals)}
        for s in self.sets:
            out[f"perturbed/{s.scheme.name}.rbt"] = encode_rbt(s.x_prime)
        rows = np.concatenate([np.column_stack([s.original_index, s.y]) for s in self.sets])
        out["labels.rbt"] = encode_rbt(rows)
        return out


def _source_key(xa, xb) -> bytes:
    return np.ascontiguousarray(xa, dtype="<f4").tobytes() + np.ascontiguousarray(xb, dtype="<f4").tobytes()


def assemble(sets: list[TestSet], suite_seed: int, provenance: dict | None = None) -> TestSuite:
    """Bind per-scheme test sets into one suite with deduplicated originals."""
    if not sets:
        raise AssemblyError("a suite needs at least one set")
    names = [s.scheme.name for s in sets]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise AssemblyError(f"duplicate scheme names: {dup}")
    side = sets[0].scheme.side
    rows: dict[bytes, int] = {}
    originals, labels, per_set = [], [], []
    for ts in sets:
        if len(ts) == 0:
            raise EmptySelectionError(f"set for {ts.scheme.name} is empty")
        if ts.scheme.side != side:
            raise AssemblyError("all sets must share one image size")
        idx = np.empty(len(ts), dtype=np.int64)
        for j, s in enumerate(ts.source_index):
            xa, xb = ts.sources.xa[s], ts.sources.xb[s]
            key = _source_key(xa, xb)
            if key not in rows:
                rows[key] = len(originals)
                originals.append(np.stack([xa, xb]))
                labels.append(int(ts.sources.y[s]))
            idx[j] = rows[key]
        per_set.append(idx)
    orig = _f32(np.stack(originals))
    suite_sets = [SuiteSet(ts.scheme, idx, _f32(ts.x_prime), np.asarray(ts.y, dtype=np.int64).copy(), orig)
                  for ts, idx in zip(sets, per_set)]
    suite = TestSuite({}, orig, np.asarray(labels, dtype=np.int64), suite_sets)
    suite.manifest = _manifest(suite, suite_seed, provenance or {})
    return suite


def _manifest(suite: TestSuite, suite_seed: int, provenance: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "suite_seed": int(suite_seed),
        "side": int(suite.originals.shape[-1]),
        "schemes": [s.scheme.descriptor() for s in suite.sets],
        "set_sizes": {s.scheme.name: len(s) for s in suite.sets},
        "n_originals": int(len(suite.originals)),
        "original_labels": suite.original_labels.tolist(),
        "provenance": provenance,
        "checksums": {k: _sha(v) for k, v in sorted(suite.blobs().items())},
    }


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")


def save(suite: TestSuite, path) -> None:
    path = Path(path)
    (path / "perturbed").mkdir(parents=True, exist_ok=True)
    for name, data in suite.blobs().items():
        (path / name).write_bytes(data)
    (path / "manifest.json").write_bytes(manifest_bytes(suite.manifest))


def load(path) -> TestSuite:
    """Read and checksum-verify a suite directory; nothing is returned unless every blob checks out."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IntegrityError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"suite format_version {version!r}, this reader handles {FORMAT_VERSION}")
    arrays = {}
    for name, digest in manifest["checksums"].items():
        try:
            data = (path / name).read_bytes()
        except FileNotFoundError as exc:
            raise IntegrityError(f"missing blob {name}") from exc
        arrays[name] = decode_rbt(data)
        if _sha(data) != digest:
            raise ChecksumError(f"checksum mismatch for {name}")
    orig = arrays["originals.rbt"].astype(np.float64)
    rows = arrays["labels.rbt"].astype(np.int64).reshape(-1, 2)
    sets, lo = [], 0
    for desc in manifest["schemes"]:
        scheme = Scheme.from_descriptor(desc)
        n = manifest["set_sizes"][scheme.name]
        xp = arrays[f"perturbed/{scheme.name}.rbt"].astype(np.float64)
        if len(xp) != n or lo + n > len(rows):
            raise IntegrityError(f"set {scheme.name} size disagrees with the manifest")
        sets.append(SuiteSet(scheme, rows[lo:lo + n, 0].copy(), xp, rows[lo:lo + n, 1].copy(), orig))
        lo += n
    return TestSuite(manifest, orig, np.asarray(manifest["original_labels"], dtype=np.int64), sets)


def checksum_problems(suite: TestSuite) -> list[str]:
    expected = suite.manifest.get("checksums", {})
    actual = {k: _sha(v) for k, v in suite.blobs().items()}
    probs = [f"checksum mismatch for {k}" for k in sorted(actual) if expected.get(k) != actual[k]]
    probs += [f"manifest lists unknown blob {k}" for k in sorted(set(expected) - set(actual))]
    return probs


def verify(suite: TestSuite) -> list[str]:
    """Collect every integrity, membership and label problem instead of stopping at the first."""
    problems = checksum_problems(suite)
    if suite.manifest.get("format_version") != FORMAT_VERSION:
        problems.append(f"format_version {suite.manifest.get('format_version')!r} is not {FORMAT_VERSION}")
    for s in suite.sets:
        if len(s) == 0:
            problems.append(f"{s.scheme.name}: empty set")
            continue
        bad_rows = (s.original_index < 0) | (s.original_index >= len(suite.originals))
        for j in np.flatnonzero(bad_rows):
            problems.append(f"{s.scheme.name}[{j}]: original row {int(s.original_index[j])} out of range")
        for j in np.flatnonzero(~bad_rows):
            o = s.original_index[j]
            if int(s.y[j]) != int(suite.original_labels[o]):
                problems.append(f"{s.scheme.name}[{j}]: label {int(s.y[j])} disagrees with source label "
                                f"{int(suite.original_labels[o])}")
            if not within(s.scheme, suite.originals[o, 0], s.x_prime[j]):
                problems.append(f"{s.scheme.name}[{j}]: perturbation outside the {s.scheme.family} vicinity")
    return problems


# ---------------------------------------------------------------------------
# evaluation


def _set_arrays(test_set):
    """(unique first images, unique second images, element->unique row, x_prime, y) for either set type."""
    if isinstance(test_set, SuiteSet):
        rows, inv = np.unique(test_set.original_index, return_inverse=True)
        return test_set.originals[rows, 0], test_set.originals[rows, 1], inv, test_set.x_prime, test_set.y
    rows, inv = np.unique(test_set.source_index, return_inverse=True)
    return test_set.sources.xa[rows], test_set.sources.xb[rows], inv, test_set.x_prime, test_set.y


def evaluate_set(sys: SiameseSystem, test_set) -> tuple[float, dict]:
    """Suite robustness ``1 - #{h(x') != y} / n`` plus the clean-vs-perturbed consistency count.

    ``forward_count`` counts verifier calls: one per element and one per
    distinct original.
    """
    xa, xb, inv, xp, y = _set_arrays(test_set)
    n = len(y)
    if n == 0:
        raise EmptySelectionError("cannot evaluate an empty set")
    if xp.shape[1:] != (sys.side, sys.side):
        raise DimensionError(f"system {sys.system_id} expects {sys.side}px images, set has {xp.shape[1:]}")
    start = time.perf_counter()
    eb = encode_batch(sys, xb)
    clean = predict_from_margin((encode_batch(sys, xa) * eb).sum(axis=1), sys.kappa)
    pert = predict_from_margin((encode_batch(sys, xp) * eb[inv]).sum(axis=1), sys.kappa)
    wall = time.perf_counter() - start
    y = np.asarray(y, dtype=np.int64)
    y_orig = np.zeros(len(xa), dtype=np.int64)
    y_orig[inv] = y
    mism = int((pert != y).sum())
    counts = {
        "size": n,
        "mismatches": mism,
        "consistency_mismatches": int((pert != clean[inv]).sum()),
        "originals": int(len(xa)),
        "clean_correct": int((clean == y_orig).sum()),
        "forward_count": n + int(len(xa)),
        "wall_time": wall,
    }
    return 1.0 - mism / n, counts


@dataclass
class EvalReport:
    system_id: str
    per_scheme: dict
    clean_accuracy: float
    wall_time: float
    forward_count: int
    backward_count: int
    suite_seed: int = 0

    def to_json(self) -> dict:
        return {
            "system_id": self.system_id,
            "suite_seed": self.suite_seed,
            "clean_accuracy": self.clean_accuracy,
            "wall_time_s": self.wall_time,
            "forward_count": self.forward_count,
            "backward_count": self.backward_count,
            "per_scheme": self.per_scheme,
        }

    def csv_rows(self) -> list[dict]:
        return [{"system_id": self.system_id, "scheme": k, "robustness": v["robustness"], "time_s": v["wall_time"]}
                for k, v in self.per_scheme.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["system_id", "scheme", "robustness", "time_s"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()


def evaluate_suite(sys: SiameseSystem, suite: TestSuite) -> EvalReport:
    problems = checksum_problems(suite)
    if problems:
        raise ChecksumError("; ".join(problems))
    per_scheme = {}
    start = time.perf_counter()
    with count_passes() as counter:
        for s in suite.sets:
            r, counts = evaluate_set(sys, s)
            per_scheme[s.scheme.name] = {"robustness": r, **counts}
        eb = encode_batch(sys, suite.originals[:, 1])
        clean = predict_from_margin((encode_batch(sys, suite.originals[:, 0]) * eb).sum(axis=1), sys.kappa)
    wall = time.perf_counter() - start
    return EvalReport(
        system_id=sys.system_id,
        per_scheme=per_scheme,
        clean_accuracy=float((clean == suite.original_labels).mean()),
        wall_time=wall,
        forward_count=sum(v["forward_count"] for v in per_scheme.values()),
        backward_count=counter.backward,
        suite_seed=int(suite.manifest.get("suite_seed", 0)),
    )

"""End-to-end suite construction: dataset, zoo, pools, references, selection, assembly.

Every stage writes its outputs under the run directory plus a marker in
``stages/`` recording a hash of the config slice it depends on (and of its
upstream stages) and a SHA-256 of each output file. A rerun skips a stage
whose hash matches after checking those files, so completed work is never
redone and tampering surfaces as an integrity error.
"""
from __future__ import annotations

import copy
import hashlib
import json
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import suite as suite_mod
from .dataset import PairSet, load_dataset, make_pairs, make_prototypes, save_dataset
from .errors import ConfigError, IntegrityError, MissingArtifactError, RobSuiteError, StageError
from .gen import generate_pool, load_pool, pool_stats, save_pool
from .numerics import RNG_ALGORITHM, derive_seed, rng_stream
from .optimize import GaConfig, SelectionConfig, extract_set, failure_matrix, ga_search
from .perturb import Scheme, default_schemes
from .reference import PgdConfig, config_hash, robust_accuracy
from .siamese import ArchDescriptor, TrainConfig, ZooMember, build_zoo, default_zoo_config, load_system, \
    predict_batch, save_system

STAGES = ("dataset", "zoo", "pools", "references", "select", "assemble")

DEFAULT_ETA = {
    "l2_small": 0.03, "l2_large": 0.05, "linf_small": 0.05, "linf_large": 0.08,
    "illum": 0.02, "patch": 0.005, "radial_small": 0.05, "radial_large": 0.1,
}

DEFAULT_CONFIG = {
    "dataset": {"identities": 16, "side": 16, "seed": 7, "pairs": 512, "pos_ratio": 0.5, "sigma": 0.05,
                "split_seed": 1, "calibration_fraction": 0.2, "generation_fraction": 0.375},
    "zoo": {"seed": 42, "accuracy_floor": 0.85, "dummy": "II", "n_tuning": 5, "split_seed": 5},
    "schemes": {},
    "gen": {"steps": 100, "seed": 0, "filter_sources": True, "eta": dict(DEFAULT_ETA)},
    "reference": {"steps": 100, "restarts": 1, "literal_eq4": False, "seed": 0, "pairs": "generation"},
    "ga": {"population": 64, "generations": 1000, "crossover_rate": 0.9, "elitism": 2, "tournament": 2,
           "lam1": 0.01, "lam2": 5.0, "objective": "prose", "k_min_fraction": 0.02, "k_max_fraction": 0.05,
           "k_fractions": {"patch": [0.002, 0.005]}},
    "suite": {"seed": 0},
    "experiments": {"seeds": [0, 1, 2], "ablation_scheme": "linf_small", "adaptive_system": "I",
                    "adaptive_epochs": 30, "adaptive_lr": 0.05},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read a TOML or JSON config, fill defaults, apply ``overrides`` and validate."""
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            if path.suffix.lower() == ".json":
                raw = json.loads(text.decode("utf-8"))
            else:
                import tomli
                raw = tomli.loads(text.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    d = cfg["dataset"]
    if d["calibration_fraction"] <= 0 or d["generation_fraction"] <= 0 or \
            d["calibration_fraction"] + d["generation_fraction"] > 1:
        raise ConfigError("calibration and generation fractions must be positive and sum to at most 1")
    if d["pairs"] < 8:
        raise ConfigError("need at least 8 pairs")
    if cfg["ga"]["objective"] not in ("prose", "literal"):
        raise ConfigError(f"unknown objective {cfg['ga']['objective']!r}")
    if cfg["ga"]["generations"] < 0 or cfg["ga"]["population"] < 2:
        raise ConfigError("GA needs a population of at least 2 and non-negative generations")
    if cfg["reference"]["pairs"] not in ("generation", "holdout"):
        raise ConfigError("reference.pairs must be 'generation' or 'holdout'")
    schemes = resolve_schemes(cfg)
    missing = [s.name for s in schemes if s.name not in cfg["gen"]["eta"]]
    if missing:
        raise ConfigError(f"no GEN step size for schemes {missing}")
    if cfg["zoo"]["n_tuning"] < 2:
        raise ConfigError("need at least two tuning systems")


def resolve_schemes(cfg: dict) -> list[Scheme]:
    """Default schemes, with ``[schemes.<name>]`` tables replacing or adding entries (``enabled = false`` drops one)."""
    side = cfg["dataset"]["side"]
    by_name = {s.name: s for s in default_schemes(side)}
    for name, spec in cfg["schemes"].items():
        if not spec.get("enabled", True):
            by_name.pop(name, None)
            continue
        base = by_name.get(name)
        family = spec.get("family", base.family if base else None)
        eps = spec.get("epsilon", list(base.epsilon) if base else None)
        if family is None or eps is None:
            raise ConfigError(f"scheme {name!r} needs a family and epsilon")
        by_name[name] = Scheme(name, family, tuple(np.atleast_1d(eps).tolist()), side)
    if not by_name:
        raise ConfigError("no schemes enabled")
    return list(by_name.values())


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1), encoding="utf-8")


@dataclass
class Splits:
    calibration: np.ndarray
    generation: np.ndarray
    holdout: np.ndarray


@dataclass
class ZooInfo:
    systems: dict
    dummy: str
    tuning: list
    testing: list

    @property
    def scored(self) -> list:
        return self.tuning + self.testing


@dataclass
class Pipeline:
    cfg: dict
    out: Path
    jobs: int = 1
    log: object = None
    status: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.schemes = resolve_schemes(self.cfg)
        self._hashes: dict = {}

    # ------------------------------------------------------------------ plumbing

    def _say(self, msg: str) -> None:
        if self.log is not None:
            print(msg, file=self.log, flush=True)

    def _map(self, fn, items):
        if self.jobs <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.jobs) as ex:
            return list(ex.map(fn, items))

    def stage_hash(self, name: str) -> str:
        if name in self._hashes:
            return self._hashes[name]
        c = self.cfg
        schemes = [s.descriptor() for s in self.schemes]
        parts = {
            "dataset": (c["dataset"], RNG_ALGORITHM),
            "zoo": (c["zoo"],),
            "pools": (c["gen"], schemes),
            "references": (c["reference"], schemes),
            "select": (c["ga"], c["suite"]),
            "assemble": (c["suite"],),
        }[name]
        upstream = [self.stage_hash(s) for s in STAGES[:STAGES.index(name)]]
        self._hashes[name] = config_hash(name, parts, upstream)
        return self._hashes[name]

    def _marker(self, name: str) -> Path:
        return self.out / "stages" / f"{name}.json"

    def _stage_dir(self, name: str) -> Path:
        return self.out / name

    def _outputs(self, name: str) -> dict:
        d = self._stage_dir(name)
        return {str(p.relative_to(self.out)): _sha_file(p) for p in sorted(d.rglob("*")) if p.is_file()}

    def _completed(self, name: str) -> bool:
        marker = self._marker(name)
        if not marker.exists():
            return False
        m = json.loads(marker.read_text(encoding="utf-8"))
        if m.get("hash") != self.stage_hash(name):
            return False
        for rel, digest in m["outputs"].items():
            p = self.out / rel
            if not p.exists():
                raise IntegrityError(f"stage {name}: recorded output {rel} is missing")
            if _sha_file(p) != digest:
                raise IntegrityError(f"stage {name}: output {rel} does not match its recorded checksum")
        return True

    def _run(self, name: str, compute) -> None:
        if self._completed(name):
            self.status[name] = "skipped"
            self._say(f"[{name}] up to date")
            return
        d = self._stage_dir(name)
        tmp = self.out / f".{name}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        start = time.perf_counter()
        self._say(f"[{name}] running")
        try:
            compute(tmp)
        except IntegrityError:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        except RobSuiteError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageError(name, str(exc)) from exc
        if d.exists():
            shutil.rmtree(d)
        tmp.rename(d)
        _dump(self._marker(name), {"stage": name, "hash": self.stage_hash(name), "outputs": self._outputs(name)})
        timings = self._timings()
        timings[name] = time.perf_counter() - start
        _dump(self.out / "timings.json", timings)
        self.status[name] = "ran"
        self._say(f"[{name}] done in {timings[name]:.1f}s")

    def _timings(self) -> dict:
        p = self.out / "timings.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def run(self, until: str | None = None) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        _dump(self.out / "config.json", self.cfg)
        steps = {
            "dataset": self._stage_dataset,
            "zoo": self._stage_zoo,
            "pools": self._stage_pools,
            "references": self._stage_references,
            "select": self._stage_select,
            "assemble": self._stage_assemble,
        }
        for name in STAGES:
            self._run(name, steps[name])
            if name == until:
                break
        return dict(self.status)

    # ------------------------------------------------------------------ loaders

    def _require(self, name: str) -> Path:
        if not self._marker(name).exists():
            raise MissingArtifactError(f"stage {name!r} has not been run in {self.out}")
        return self._stage_dir(name)

    def load_pairs(self) -> PairSet:
        pairs, _ = load_dataset(self._require("dataset"))
        return pairs

    def load_splits(self) -> Splits:
        s = json.loads((self._require("dataset") / "splits.json").read_text())
        return Splits(*(np.asarray(s[k], dtype=np.int64) for k in ("calibration", "generation", "holdout")))

    def split_pairs(self, which: str) -> PairSet:
        return self.load_pairs().subset(getattr(self.load_splits(), which))

    def load_zoo(self) -> ZooInfo:
        d = self._require("zoo")
        meta = json.loads((d / "zoo.json").read_text())
        systems = {sid: load_system(d / sid) for sid in meta["ids"]}
        return ZooInfo(systems, meta["dummy"], meta["tuning"], meta["testing"])

    def generation_sources(self) -> tuple[PairSet, np.ndarray]:
        d = self._require("pools")
        rows = np.asarray(json.loads((d / "sources.json").read_text())["rows"], dtype=np.int64)
        return self.split_pairs("generation").subset(rows), rows

    def load_pool(self, scheme_name: str, sources: PairSet | None = None):
        if sources is None:
            sources, _ = self.generation_sources()
        return load_pool(self._require("pools") / scheme_name, sources)

    def load_references(self, scheme_name: str) -> dict:
        return json.loads((self._require("references") / f"{scheme_name}.json").read_text())

    def load_selection(self, scheme_name: str) -> dict:
        return json.loads((self._require("select") / f"{scheme_name}.json").read_text())

    def load_suite(self):
        return suite_mod.load(self._require("assemble"))

    # ------------------------------------------------------------------ stages

    def _stage_dataset(self, d: Path) -> None:
        c = self.cfg["dataset"]
        ids = make_prototypes(c["identities"], c["side"], c["seed"])
        pairs = make_pairs(ids, c["pairs"], c["pos_ratio"], c["sigma"], derive_seed(c["seed"], 1))
        n = len(pairs)
        perm = rng_stream(c["split_seed"], 2).permutation(n)
        n_cal = int(round(c["calibration_fraction"] * n))
        n_gen = int(round(c["generation_fraction"] * n))
        splits = {"calibration": np.sort(perm[:n_cal]).tolist(),
                  "generation": np.sort(perm[n_cal:n_cal + n_gen]).tolist(),
                  "holdout": np.sort(perm[n_cal + n_gen:]).tolist()}
        for k in ("calibration", "generation"):
            y = pairs.y[splits[k]]
            if len(y) == 0 or y.min() == y.max():
                raise ConfigError(f"{k} split needs both labels")
        save_dataset(pairs, {"config": c, "rng": RNG_ALGORITHM}, d)
        _dump(d / "splits.json", splits)

    def _zoo_members(self) -> list[ZooMember]:
        members = self.cfg["zoo"].get("members")
        if not members:
            return default_zoo_config()
        out = []
        for m in members:
            arch = ArchDescriptor(m.get("smoothing_kernel", 1), tuple(m.get("layer_widths", (64, 32))),
                                  m.get("activation", "relu"), m.get("weight_scale", 1.0),
                                  m.get("noise_aug_sigma", 0.0))
            train_keys = {k: m[k] for k in ("lr", "epochs", "batch", "triplets", "data_sigma") if k in m}
            out.append(ZooMember(arch, TrainConfig(**train_keys)))
        return out

    def _stage_zoo(self, d: Path) -> None:
        c = self.cfg["zoo"]
        dc = self.cfg["dataset"]
        ids = make_prototypes(dc["identities"], dc["side"], dc["seed"])
        pairs = self.load_pairs()
        sp = self.load_splits()
        zoo = build_zoo(self._zoo_members(), ids, pairs.subset(sp.calibration), c["seed"], c["accuracy_floor"],
                        eval_pairs=pairs.subset(sp.holdout) if len(sp.holdout) else None)
        names = [s.system_id for s in zoo]
        if c["dummy"] not in names:
            raise ConfigError(f"dummy {c['dummy']!r} is not a zoo member")
        rest = [n for n in names if n != c["dummy"]]
        if len(rest) <= c["n_tuning"]:
            raise ConfigError("zoo too small for the requested tuning group plus a testing group")
        order = rng_stream(c["split_seed"], 3).permutation(len(rest))
        tuning = [rest[i] for i in order[:c["n_tuning"]]]
        testing = [rest[i] for i in order[c["n_tuning"]:]]
        for s in zoo:
            save_system(s, d / s.system_id)
        _dump(d / "zoo.json", {"ids": names, "dummy": c["dummy"], "tuning": tuning, "testing": testing,
                               "accuracy": {s.system_id: s.accuracy for s in zoo}})

    def _stage_pools(self, d: Path) -> None:
        c = self.cfg["gen"]
        zoo = self.load_zoo()
        dummy = zoo.systems[zoo.dummy]
        gen_pairs = self.split_pairs("generation")
        keep = np.ones(len(gen_pairs), dtype=bool)
        if c["filter_sources"]:
            for sid in [zoo.dummy] + zoo.tuning:
                keep &= predict_batch(zoo.systems[sid], gen_pairs.xa, gen_pairs.xb) == gen_pairs.y
        rows = np.flatnonzero(keep)
        if len(rows) == 0:
            raise ConfigError("no generation pair survives the clean-correctness filter")
        sources = gen_pairs.subset(rows)
        _dump(d / "sources.json", {"rows": rows.tolist(), "filtered_by": [zoo.dummy] + zoo.tuning
                                   if c["filter_sources"] else []})

        def one(j_scheme):
            j, scheme = j_scheme
            pool = self.build_pool(j, scheme, sources, dummy, c["seed"])
            save_pool(pool, d / scheme.name, {"seed": c["seed"], "stats": _brief_stats(pool)})
            return scheme.name, len(pool)

        for name, size in self._map(one, list(enumerate(self.schemes))):
            self._say(f"  pool {name}: {size} candidates")

    def build_pool(self, j: int, scheme: Scheme, sources: PairSet, dummy, gen_seed: int):
        c = self.cfg["gen"]
        return generate_pool(sources, scheme, dummy, c["steps"], c["eta"][scheme.name], rng_stream(gen_seed, 4, j))

    def reference_pairs(self) -> PairSet:
        return self.split_pairs(self.cfg["reference"]["pairs"])

    def pgd_config(self) -> PgdConfig:
        c = self.cfg["reference"]
        return PgdConfig(steps=c["steps"], restarts=c["restarts"], literal_eq4=c["literal_eq4"])

    def _stage_references(self, d: Path) -> None:
        c = self.cfg["reference"]
        zoo = self.load_zoo()
        pairs = self.reference_pairs()
        cfg = self.pgd_config()
        timing = {}

        def one(j_scheme):
            j, scheme = j_scheme
            reps = [robust_accuracy(zoo.systems[sid], pairs, scheme, cfg, rng_stream(c["seed"], 5, j, k))
                    for k, sid in enumerate(zoo.scored)]
            return scheme, reps

        for scheme, reps in self._map(one, list(enumerate(self.schemes))):
            _dump(d / f"{scheme.name}.json", {
                "scheme": scheme.descriptor(),
                "pgd": {"steps": cfg.steps, "restarts": cfg.restarts, "literal_eq4": cfg.literal_eq4,
                        "step_size": cfg.eta(scheme)},
                "pairs": c["pairs"],
                "robust_accuracy": {r.system_id: r.robust_accuracy for r in reps},
                "forward_count": {r.system_id: r.forward_count for r in reps},
                "backward_count": {r.system_id: r.backward_count for r in reps},
            })
            timing[scheme.name] = {r.system_id: r.wall_time for r in reps}
        _dump(self.out / "reference_timings.json", timing)

    def selection_config(self, pool_size: int, seed: int, lam1: float | None = None,
                         scheme_name: str | None = None) -> SelectionConfig:
        """GA settings for one pool; ``k_fractions`` may override the cardinality window per scheme."""
        g = self.cfg["ga"]
        lo, hi = g.get("k_fractions", {}).get(scheme_name, (g["k_min_fraction"], g["k_max_fraction"]))
        k_min = g.get("k_min", max(2, int(round(lo * pool_size))))
        k_max = g.get("k_max", max(k_min, int(round(hi * pool_size))))
        ga = GaConfig(population=g["population"], generations=g["generations"], mutation_rate=g.get("mutation_rate"),
                      crossover_rate=g["crossover_rate"], elitism=g["elitism"], seed=seed, tournament=g["tournament"])
        try:
            return SelectionConfig(k_min, k_max, g["lam1"] if lam1 is None else lam1, g["lam2"], g["objective"], ga)
        except ConfigError as exc:
            raise ConfigError(f"selection bounds for a pool of {pool_size}: {exc}") from exc

    def ga_seed(self, j: int, suite_seed: int | None = None) -> int:
        seed = self.cfg["suite"]["seed"] if suite_seed is None else suite_seed
        return derive_seed(seed, 6, j)

    def _stage_select(self, d: Path) -> None:
        zoo = self.load_zoo()
        sources, _ = self.generation_sources()
        tuning = [zoo.systems[s] for s in zoo.tuning]

        def one(j_scheme):
            j, scheme = j_scheme
            pool = self.load_pool(scheme.name, sources)
            r_ref = np.array([self.load_references(scheme.name)["robust_accuracy"][s] for s in zoo.tuning])
            F = failure_matrix(pool, tuning)
            cfg = self.selection_config(len(pool), self.ga_seed(j), scheme_name=scheme.name)
            res = ga_search(F, r_ref, cfg)
            _dump(d / f"{scheme.name}.json", {
                "pool_hash": pool.digest(),
                "tuning": zoo.tuning,
                "r_ref": r_ref.tolist(),
                "cfg": cfg.to_json(),
                "seed": cfg.ga.seed,
                "z": np.flatnonzero(res.z).tolist(),
                "fitness": res.fitness,
                "trace": res.trace,
            })
            return scheme.name, int(res.z.sum()), res.fitness

        for name, k, fit in self._map(one, list(enumerate(self.schemes))):
            self._say(f"  selection {name}: {k} candidates, fitness {fit:.4f}")

    def _stage_assemble(self, d: Path) -> None:
        sources, _ = self.generation_sources()
        sets, prov = [], {}
        for scheme in self.schemes:
            pool = self.load_pool(scheme.name, sources)
            sel = self.load_selection(scheme.name)
            if sel["pool_hash"] != pool.digest():
                raise IntegrityError(f"selection for {scheme.name} was made on a different pool")
            z = np.zeros(len(pool), dtype=bool)
            z[sel["z"]] = True
            sets.append(extract_set(pool, z))
            prov[scheme.name] = {"pool_hash": sel["pool_hash"], "ga_seed": sel["seed"],
                                 "selection_hash": config_hash(sel["cfg"], sel["z"])}
        st = suite_mod.assemble(sets, self.cfg["suite"]["seed"], prov)
        suite_mod.save(st, d)


def _brief_stats(pool) -> dict:
    st = pool_stats(pool)
    return {k: st[k] for k in ("size", "dummy_flip_fraction", "source_flip_fraction", "occupied_bins")}


def run_pipeline(cfg: dict, out, jobs: int = 1, log=sys.stderr) -> Pipeline:
    p = Pipeline(cfg, out, jobs, log)
    p.run()
    return p

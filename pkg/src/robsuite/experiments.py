"""Experiment drivers over a completed pipeline run.

Each driver returns a plain dict and writes JSON plus CSV tables under
``<run>/experiments/``. Correlations always compare suite robustness with
PGD robust accuracy across zoo members (the dummy excluded).
"""
from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import suite as suite_mod
from .errors import DegenerateCorrelationError, DimensionError, MissingArtifactError
from .gen import random_pool
from .numerics import derive_seed, pearson, rng_stream
from .optimize import extract_set, failure_matrix, ga_search
from .pipeline import Pipeline
from .siamese import clean_accuracy, finetune_pairs, predict_batch

WHICH = ("rq1", "rq2", "ablation", "speedup", "adaptive")


def _corr(a, b) -> float:
    """Pearson r, or NaN for a constant vector or a group with fewer than two systems."""
    try:
        return pearson(a, b)
    except (DegenerateCorrelationError, DimensionError):
        return float("nan")


def _write(out: Path, name: str, result: dict, rows: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(result, sort_keys=True, indent=1), encoding="utf-8")
    if rows:
        with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


class Experiments:
    def __init__(self, pipeline: Pipeline, seeds=None):
        self.p = pipeline
        self.cfg = pipeline.cfg
        self.seeds = list(seeds if seeds is not None else self.cfg["experiments"]["seeds"])
        for stage in ("zoo", "pools", "references"):
            pipeline._require(stage)
        self.zoo = pipeline.load_zoo()
        self.sources, _ = pipeline.generation_sources()
        self.out = pipeline.out / "experiments"
        self._fm = {}

    # ------------------------------------------------------------------ shared pieces

    def r_ref(self, scheme_name: str, ids) -> np.ndarray:
        ref = self.p.load_references(scheme_name)["robust_accuracy"]
        return np.array([ref[s] for s in ids])

    def failures(self, scheme_name: str):
        """Pool and failure matrix over every scored system (tuning rows first)."""
        if scheme_name not in self._fm:
            pool = self.p.load_pool(scheme_name, self.sources)
            F = failure_matrix(pool, [self.zoo.systems[s] for s in self.zoo.scored])
            self._fm[scheme_name] = (pool, F.bits)
        return self._fm[scheme_name]

    def select(self, bits, r_tune, scheme_index: int, suite_seed: int, lam1=None):
        n_tune = len(self.zoo.tuning)
        cfg = self.p.selection_config(bits.shape[1], self.p.ga_seed(scheme_index, suite_seed), lam1,
                                      self.p.schemes[scheme_index].name)
        return ga_search(bits[:n_tune], r_tune, cfg).z

    def _groups(self, r_suite, r_ref) -> dict:
        n = len(self.zoo.tuning)
        return {"tuning": _corr(r_suite[:n], r_ref[:n]), "testing": _corr(r_suite[n:], r_ref[n:]),
                "overall": _corr(r_suite, r_ref)}

    # ------------------------------------------------------------------ drivers

    def rq1(self) -> dict:
        """Score every zoo member on the stored suite and correlate with PGD per scheme."""
        st = self.p.load_suite()
        ids = self.zoo.scored
        reports = {sid: suite_mod.evaluate_suite(self.zoo.systems[sid], st) for sid in ids}
        result, rows = {"suite_seed": st.manifest["suite_seed"], "schemes": {}}, []
        for name in st.scheme_names:
            r_ref = self.r_ref(name, ids)
            r_suite = np.array([reports[s].per_scheme[name]["robustness"] for s in ids])
            result["schemes"][name] = self._groups(r_suite, r_ref)
            for k, sid in enumerate(ids):
                rows.append({"scheme": name, "system_id": sid,
                             "group": "tuning" if k < len(self.zoo.tuning) else "testing",
                             "pgd_robust_accuracy": r_ref[k], "suite_robustness": r_suite[k]})
        _write(self.out, "rq1", result, rows)
        return result

    def rq2(self) -> dict:
        """Tuning/testing/overall correlations per scheme, averaged over GA seeds."""
        ids = self.zoo.scored
        n_tune = len(self.zoo.tuning)
        result, rows = {"seeds": self.seeds, "schemes": {}}, []
        for j, scheme in enumerate(self.p.schemes):
            pool, bits = self.failures(scheme.name)
            r_ref = self.r_ref(scheme.name, ids)
            per_seed = []
            for seed in self.seeds:
                z = self.select(bits, r_ref[:n_tune], j, seed)
                r_suite = 1.0 - bits[:, z].mean(axis=1)
                g = self._groups(r_suite, r_ref)
                per_seed.append(g)
                rows.append({"scheme": scheme.name, "seed": seed, "size": int(z.sum()), **g})
            result["schemes"][scheme.name] = {
                k: float(np.mean([g[k] for g in per_seed])) for k in ("tuning", "testing", "overall")}
        _write(self.out, "rq2", result, rows)
        return result

    def ablation(self, scheme_name: str | None = None) -> dict:
        """GEN vs uniform random pool of equal per-source size, and with vs without the regulariser."""
        name = scheme_name or self.cfg["experiments"]["ablation_scheme"]
        j = [s.name for s in self.p.schemes].index(name)
        scheme = self.p.schemes[j]
        ids = self.zoo.scored
        n_tune = len(self.zoo.tuning)
        r_ref = self.r_ref(name, ids)
        pool, bits = self.failures(name)
        counts = np.bincount(pool.source_index, minlength=len(self.sources))
        dummy = self.zoo.systems[self.zoo.dummy]
        rows, acc = [], {"gen": [], "random": [], "no_reg": []}
        for seed in self.seeds:
            rp = random_pool(self.sources, scheme, dummy, counts, rng_stream(derive_seed(seed, 91), j))
            rbits = failure_matrix(rp, [self.zoo.systems[s] for s in ids]).bits
            for arm, b, lam1 in (("gen", bits, None), ("random", rbits, None), ("no_reg", bits, 0.0)):
                z = self.select(b, r_ref[:n_tune], j, seed, lam1)
                c = _corr(1.0 - b[:, z].mean(axis=1), r_ref)
                acc[arm].append(c)
                rows.append({"scheme": name, "seed": seed, "arm": arm, "overall": c})
        mean = {k: float(np.mean(v)) for k, v in acc.items()}
        result = {"scheme": name, "seeds": self.seeds, "mean_overall": mean,
                  "gen_minus_random": mean["gen"] - mean["random"],
                  "reg_minus_no_reg": mean["gen"] - mean["no_reg"]}
        _write(self.out, "ablation", result, rows)
        return result

    def speedup(self) -> dict:
        """Suite evaluation cost against the PGD reference cost per system."""
        st = self.p.load_suite()
        tpath = self.p.out / "reference_timings.json"
        if not tpath.exists():
            raise MissingArtifactError(f"{tpath} is missing; rerun the references stage")
        timings = json.loads(tpath.read_text())
        rows, ratios = [], []
        for sid in self.zoo.scored:
            rep = suite_mod.evaluate_suite(self.zoo.systems[sid], st)
            pgd_time = sum(timings[name][sid] for name in st.scheme_names)
            pgd_fwd = sum(self.p.load_references(n)["forward_count"][sid] for n in st.scheme_names)
            pgd_bwd = sum(self.p.load_references(n)["backward_count"][sid] for n in st.scheme_names)
            ratio = rep.wall_time / pgd_time
            ratios.append(ratio)
            rows.append({"system_id": sid, "suite_time_s": rep.wall_time, "pgd_time_s": pgd_time,
                         "time_ratio": ratio, "suite_forward": rep.forward_count, "suite_backward": rep.backward_count,
                         "pgd_forward": pgd_fwd, "pgd_backward": pgd_bwd})
        result = {"max_time_ratio": float(max(ratios)), "mean_time_ratio": float(np.mean(ratios)),
                  "max_suite_backward": int(max(r["suite_backward"] for r in rows))}
        _write(self.out, "speedup", result, rows)
        return result

    def rotation_sources(self):
        """Held-out pairs that the dummy and every tuning system classify correctly."""
        pairs = self.p.split_pairs("holdout")
        keep = np.ones(len(pairs), dtype=bool)
        if self.cfg["gen"]["filter_sources"]:
            for sid in [self.zoo.dummy] + self.zoo.tuning:
                keep &= predict_batch(self.zoo.systems[sid], pairs.xa, pairs.xb) == pairs.y
        return pairs.subset(np.flatnonzero(keep))

    def build_suite(self, sources, gen_seed: int, suite_seed: int):
        """Regenerate pools and selections from scratch under new seeds (seed rotation)."""
        dummy = self.zoo.systems[self.zoo.dummy]
        tuning = [self.zoo.systems[s] for s in self.zoo.tuning]
        sets = []
        for j, scheme in enumerate(self.p.schemes):
            pool = self.p.build_pool(j, scheme, sources, dummy, gen_seed)
            bits = failure_matrix(pool, tuning).bits
            z = self.select(bits, self.r_ref(scheme.name, self.zoo.tuning), j, suite_seed)
            sets.append(extract_set(pool, z))
        return suite_mod.assemble(sets, suite_seed, {"gen_seed": gen_seed})

    def adaptive(self, system_id: str | None = None) -> dict:
        """Fine-tune one member on the published suite, then score it on that suite and on a rotated one.

        The rotated suite uses a fresh GEN seed, a fresh GA seed and source
        pairs from the held-out split.
        """
        c = self.cfg["experiments"]
        sid = system_id or c["adaptive_system"]
        if sid not in self.zoo.systems or sid == self.zoo.dummy:
            raise MissingArtifactError(f"{sid!r} is not a scored zoo member")
        sys0 = self.zoo.systems[sid]
        st_a = self.p.load_suite()
        seed_a = st_a.manifest["suite_seed"]
        seed_b = seed_a + 1
        st_b = self.build_suite(self.rotation_sources(), self.cfg["gen"]["seed"] + 1, seed_b)
        xa = np.concatenate([s.x_prime for s in st_a.sets] + [st_a.originals[:, 0]])
        xb = np.concatenate([s.xb for s in st_a.sets] + [st_a.originals[:, 1]])
        y = np.concatenate([s.y for s in st_a.sets] + [st_a.original_labels])
        start = time.perf_counter()
        tuned = finetune_pairs(sys0, xa, xb, y, epochs=c["adaptive_epochs"], lr=c["adaptive_lr"], seed=seed_a)
        tune_time = time.perf_counter() - start

        def score(system, st):
            rep = suite_mod.evaluate_suite(system, st)
            return float(np.mean([v["robustness"] for v in rep.per_scheme.values()])), rep

        before_a, _ = score(sys0, st_a)
        before_b, _ = score(sys0, st_b)
        after_a, rep_a = score(tuned, st_a)
        after_b, rep_b = score(tuned, st_b)
        holdout = self.p.split_pairs("holdout")
        result = {
            "system_id": sid, "seed_a": seed_a, "seed_b": seed_b,
            "before": {"seed_a": before_a, "seed_b": before_b},
            "after": {"seed_a": after_a, "seed_b": after_b},
            "inflation": after_a - after_b,
            "fresh_gain": after_b - before_b,
            "clean_accuracy": {"before": clean_accuracy(sys0, holdout), "after": clean_accuracy(tuned, holdout)},
            "finetune_time_s": tune_time,
        }
        rows = [{"scheme": k, "before_a": None, "after_a": rep_a.per_scheme[k]["robustness"],
                 "after_b": rep_b.per_scheme[k]["robustness"]} for k in rep_a.per_scheme]
        before_rep = suite_mod.evaluate_suite(sys0, st_a)
        for r in rows:
            r["before_a"] = before_rep.per_scheme[r["scheme"]]["robustness"]
        _write(self.out, "adaptive", result, rows)
        return result

    def run(self, which: str) -> dict:
        return getattr(self, which)()

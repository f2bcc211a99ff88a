import numpy as np
import pytest

from robsuite.errors import CapabilityError, ConfigError
from robsuite.perturb import Scheme, apply, default_schemes, within_batch
from robsuite.reference import (PgdConfig, clever_score, expected_pgd_passes, max_grad_norm, pgd_attack,
                                pgd_attack_batch, pgd_step, robust_accuracy)
from robsuite.numerics import rng_stream
from robsuite.siamese import count_passes, predict_batch

SCHEMES = {s.name: s for s in default_schemes(16)}


@pytest.mark.parametrize("name", ["l2_small", "linf_small", "illum", "patch", "radial_small"])
def test_every_pgd_iterate_is_feasible(system, pairs, name):
    scheme = SCHEMES[name]
    sub = pairs.subset(np.arange(6))
    cfg = PgdConfig(steps=10, restarts=2)
    _, _, _, iterates, _ = pgd_attack_batch(system, sub, scheme, cfg, rng_stream(0), keep_iterates=True)
    rep = np.repeat(np.arange(len(sub)), scheme.n_locations)
    for xp in iterates:
        assert within_batch(scheme, sub.xa[rep], xp).all()


def test_pass_accounting(system, pairs):
    sub = pairs.subset(np.arange(5))
    for name in ("linf_small", "patch"):
        scheme = SCHEMES[name]
        cfg = PgdConfig(steps=4, restarts=2)
        with count_passes() as c:
            rep = robust_accuracy(system, sub, scheme, cfg, rng_stream(1))
        n = expected_pgd_passes(len(sub), scheme, cfg)
        assert rep.forward_count == rep.backward_count == n
        assert c.backward == n
        assert 0.0 <= rep.robust_accuracy <= 1.0


def test_clean_errors_count_as_flips(system, pairs):
    wrong = np.flatnonzero(predict_batch(system, pairs.xa, pairs.xb) != pairs.y)
    right = np.flatnonzero(predict_batch(system, pairs.xa, pairs.xb) == pairs.y)
    idx = np.concatenate([wrong[:2], right[:2]])
    flipped, _, _, _, _ = pgd_attack_batch(system, pairs.subset(idx), SCHEMES["linf_small"], PgdConfig(steps=1),
                                           rng_stream(0))
    assert flipped[:len(wrong[:2])].all()


def test_pgd_is_deterministic_and_stronger_with_larger_budget(system, pairs):
    cfg = PgdConfig(steps=20)
    a = robust_accuracy(system, pairs, SCHEMES["linf_small"], cfg, rng_stream(3))
    b = robust_accuracy(system, pairs, SCHEMES["linf_small"], cfg, rng_stream(3))
    assert np.array_equal(a.flips, b.flips) and a.config_hash == b.config_hash
    big = robust_accuracy(system, pairs, Scheme("big", "LINF", (0.3,)), cfg, rng_stream(3))
    assert big.robust_accuracy <= a.robust_accuracy


def test_witnesses_reproduce_flips(system, pairs):
    scheme = SCHEMES["illum"]
    rep = robust_accuracy(system, pairs, scheme, PgdConfig(steps=30), rng_stream(2))
    hit = np.flatnonzero(rep.flips)
    assert np.array_equal(hit, np.flatnonzero(~np.isnan(rep.witnesses[:, 0])))
    xp = apply(scheme, rep.witnesses[hit], pairs.xa[hit])
    assert np.all(predict_batch(system, xp, pairs.xb[hit]) != pairs.y[hit])


def test_single_pair_trace(system, pairs):
    flipped, trace = pgd_attack(system, pairs[0], SCHEMES["l2_small"], PgdConfig(steps=7), rng_stream(0))
    assert trace.shape == (7,) and isinstance(flipped, bool)


def test_pgd_step_modes():
    l2 = SCHEMES["l2_small"]
    p = np.zeros((1, 256))
    g = np.random.default_rng(0).normal(size=(1, 256))
    lit = pgd_step(l2, p, g, 1e-3, literal=True)
    assert np.linalg.norm(lit) == pytest.approx(l2.eps)
    proj = pgd_step(l2, p, g, 1e-3)
    assert np.linalg.norm(proj) == pytest.approx(1e-3 * 16)
    patch = SCHEMES["patch"]
    q = np.full((1, patch.param_dim), 0.5)
    q[0, -1] = 7
    assert pgd_step(patch, q, np.ones_like(q), 0.1)[0, -1] == 7


def test_config_errors(system, pairs):
    with pytest.raises(ConfigError):
        PgdConfig(steps=0)
    with pytest.raises(ConfigError):
        PgdConfig(restarts=0)
    with pytest.raises(ConfigError):
        PgdConfig(step_size=-1.0)
    with pytest.raises(ConfigError):
        robust_accuracy(system, pairs.subset([]), SCHEMES["l2_small"], PgdConfig(), rng_stream(0))


def test_lipschitz_of_linear_map_is_dual_norm():
    w = np.random.default_rng(2).normal(size=256)
    grad_fn = lambda pts: np.tile(w, (len(pts), 1))  # noqa: E731
    x = np.full(256, 0.5)
    assert max_grad_norm(grad_fn, x, SCHEMES["l2_small"], 4, rng_stream(0)) == pytest.approx(np.linalg.norm(w))
    assert max_grad_norm(grad_fn, x, SCHEMES["linf_small"], 4, rng_stream(0)) == pytest.approx(np.abs(w).sum())
    with pytest.raises(CapabilityError):
        max_grad_norm(grad_fn, x, SCHEMES["illum"], 4, rng_stream(0))


def test_clever_score_range(system, pairs):
    s = clever_score(system, pairs.subset(np.arange(4)), SCHEMES["l2_small"], n_samples=8)
    assert 0.0 <= s <= 1.0
    with pytest.raises(CapabilityError):
        clever_score(system, pairs, SCHEMES["radial_small"])

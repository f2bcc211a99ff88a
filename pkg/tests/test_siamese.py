from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robsuite.dataset import PairSet, VerificationPair, make_triplets
from robsuite.errors import CalibrationError, ConfigError, DimensionError, ZooError
from robsuite.numerics import finite_diff_check
from robsuite.siamese import (ArchDescriptor, TrainConfig, backward_margin, build_zoo, calibrate_threshold,
                              count_passes, default_zoo_config, encode, encode_batch, finetune_pairs, init_system,
                              load_system, margin, margins, pair_hinge_loss_and_grads, predict, predict_batch,
                              predict_from_margin, save_system, train, ZooMember)


def test_predict_uses_strict_threshold():
    assert predict_from_margin(1.0, 0.5) == 1
    assert predict_from_margin(0.0, 0.5) == 0
    assert predict_from_margin(0.5, 0.5) == 0


@given(st.integers(0, 2 ** 31 - 1))
def test_embeddings_have_unit_norm(seed):
    sys = init_system(ArchDescriptor(3, (24, 8), "tanh"), 16, 0)
    x = np.random.default_rng(seed).random((5, 16, 16))
    assert np.allclose(np.linalg.norm(encode_batch(sys, x), axis=1), 1.0)


def test_linear_encoder_gradient_closed_form(rng):
    sys = init_system(ArchDescriptor(1, (8,), "relu"), 16, 2)
    W, b = sys.weights[0]
    xa, xb = rng.random((16, 16)), rng.random((16, 16))
    h = W @ xa.ravel() + b
    u = h / np.linalg.norm(h)
    v = encode(sys, xb)
    expected = W.T @ ((v - u * (u @ v)) / np.linalg.norm(h))
    g = backward_margin(sys, VerificationPair(xa, xb, 1))
    assert np.allclose(g.ravel(), expected, atol=1e-12)


@pytest.mark.parametrize("arch", default_zoo_config()[:5], ids=lambda m: f"k{m.arch.smoothing_kernel}-{m.arch.activation}")
def test_backward_margin_matches_finite_differences(arch, rng):
    sys = init_system(arch.arch, 16, 9)
    for _ in range(3):
        xa, xb = rng.uniform(0.1, 0.9, (2, 16, 16))

        def f(z):
            return margin(sys, VerificationPair(z, xb, 1))

        err = finite_diff_check(f, lambda z: backward_margin(sys, VerificationPair(z, xb, 1)), xa)
        assert err < 1e-3


def test_margin_of_identical_images_is_stationary(rng):
    # with u == v the tangent projection v - u<u, v> vanishes, so the margin is at its maximum
    sys = init_system(ArchDescriptor(3, (16, 8), "tanh"), 16, 0)
    x = rng.random((16, 16))
    assert margin(sys, VerificationPair(x, x, 1)) == pytest.approx(1.0)
    assert np.abs(backward_margin(sys, VerificationPair(x, x, 1))).max() < 1e-12


def test_prediction_depends_on_margin_and_kappa_only(system, pairs):
    t = margins(system, pairs.xa, pairs.xb)
    assert np.array_equal(predict_batch(system, pairs.xa, pairs.xb), (t > system.kappa).astype(int))
    shifted = replace(system, kappa=margin(system, pairs[0]))
    assert predict(shifted, pairs[0]) == 0


def test_training_is_deterministic_and_learns(identities, pairs, system):
    assert system.accuracy >= 0.9
    trace = np.array(system.loss_trace)
    assert trace[-1] < trace[0]
    assert np.all(trace[1:] <= trace[:-1] * 1.05)
    hyper = TrainConfig(epochs=8, triplets=768, seed=1)
    again = train(system.arch, make_triplets(identities, 768, 0.05, 1), hyper, side=16)
    for (W1, _), (W2, _) in zip(system.weights, again.weights):
        assert np.array_equal(W1, W2)


def test_zero_epochs_returns_initial_weights(identities):
    arch = ArchDescriptor(1, (16, 8))
    sys = train(arch, make_triplets(identities, 8, 0.05, 0), TrainConfig(epochs=0, seed=4), side=16)
    init = init_system(arch, 16, 4)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(sys.weights, init.weights))


def _brute_threshold(t, y):
    grid = np.unique(np.concatenate([[-1.0], t, [1.0]]))
    cands = (grid[:-1] + grid[1:]) / 2
    acc = [((t > c) == (y == 1)).mean() for c in cands]
    return cands[int(np.argmax(acc))], max(acc)


def test_calibration_matches_exhaustive_sweep(system, pairs):
    kappa = calibrate_threshold(system, pairs)
    t = margins(system, pairs.xa, pairs.xb)
    best, best_acc = _brute_threshold(t, pairs.y)
    assert ((t > kappa) == (pairs.y == 1)).mean() == best_acc
    assert kappa == pytest.approx(best, abs=1e-12)


def test_calibration_degenerate_cases(system, pairs):
    with pytest.raises(CalibrationError):
        calibrate_threshold(system, pairs.subset(np.flatnonzero(pairs.y == 1)))
    same = PairSet(np.repeat(pairs.xa[:1], 4, 0), np.repeat(pairs.xb[:1], 4, 0), np.array([1, 1, 1, 0]),
                   np.zeros(4, int), np.zeros(4, int))
    kappa = calibrate_threshold(system, same)
    t = margins(system, same.xa, same.xb)
    assert ((t > kappa) == (same.y == 1)).mean() == 0.75


def test_save_load_round_trip(tmp_path, system, pairs):
    save_system(system, tmp_path / "s")
    back = load_system(tmp_path / "s")
    assert back.kappa == system.kappa and back.arch == system.arch
    assert np.array_equal(margins(back, pairs.xa, pairs.xb), margins(system, pairs.xa, pairs.xb))


def test_pass_counter_counts_rows(system, pairs):
    with count_passes() as c:
        margins(system, pairs.xa[:5], pairs.xb[:5])
        backward_margin(system, pairs[0])
    assert c.forward == 10 + 2 and c.backward == 1


def test_hinge_finetuning_lowers_its_loss(system, pairs):
    before, _ = pair_hinge_loss_and_grads(system, pairs.xa, pairs.xb, pairs.y)
    tuned = finetune_pairs(system, pairs.xa, pairs.xb, pairs.y, epochs=5, seed=1)
    after, _ = pair_hinge_loss_and_grads(tuned, pairs.xa, pairs.xb, pairs.y)
    assert after < before
    assert tuned.kappa == system.kappa
    with pytest.raises(DimensionError):
        finetune_pairs(system, pairs.xa[:0], pairs.xb[:0], pairs.y[:0])


def test_bad_inputs(system):
    with pytest.raises(DimensionError):
        encode(system, np.zeros(10))
    with pytest.raises(ConfigError):
        ArchDescriptor(2)
    with pytest.raises(ConfigError):
        ArchDescriptor(activation="gelu")


def test_zoo_floor_names_offenders(identities, pairs):
    weak = [ZooMember(ArchDescriptor(1, (8, 4)), TrainConfig(epochs=0))] * 2
    with pytest.raises(ZooError, match="I "):
        build_zoo(weak, identities, pairs, 0, accuracy_floor=0.99)
    with pytest.raises(ConfigError):
        build_zoo(weak[:1], identities, pairs, 0)

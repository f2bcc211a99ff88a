import itertools

import numpy as np
import pytest

from robsuite.errors import CapabilityError, ConfigError
from robsuite.perturb import Scheme, apply, default_schemes
from robsuite.robustness_theory import (DiscretizedVicinity, brute_force_robust, find_flip, oracle_robust_fraction)
from robsuite.siamese import predict_batch

SCHEMES = {s.name: s for s in default_schemes(16)}


def test_clean_point_comes_first():
    v = DiscretizedVicinity(SCHEMES["illum"], 5)
    first = next(iter(v.points()))
    assert np.array_equal(first, [[1.0, 0.0]])
    assert DiscretizedVicinity(SCHEMES["radial_small"], 1).size == 1


def test_grid_sizes_and_bounds():
    v = DiscretizedVicinity(SCHEMES["illum"], 5)
    pts = np.concatenate(list(v.points())[1:])
    assert len(pts) == v.size == 25
    assert np.all(np.abs(pts[:, 0] - 1.0) <= 0.15 + 1e-12) and np.all(np.abs(pts[:, 1]) <= 0.08 + 1e-12)
    lv = DiscretizedVicinity(SCHEMES["linf_small"])
    assert lv.size == 3 ** 8


def test_shared_step_grids_are_nested():
    small = DiscretizedVicinity(SCHEMES["radial_small"], step=0.01)
    large = DiscretizedVicinity(SCHEMES["radial_large"], step=0.01)
    a = {round(float(k), 9) for k in np.concatenate(list(small.points()))[:, 0]}
    b = {round(float(k), 9) for k in np.concatenate(list(large.points()))[:, 0]}
    assert a <= b


def test_capability_limits():
    with pytest.raises(CapabilityError):
        DiscretizedVicinity(SCHEMES["l2_small"])
    with pytest.raises(CapabilityError):
        DiscretizedVicinity(SCHEMES["patch"])
    with pytest.raises(CapabilityError):
        DiscretizedVicinity(SCHEMES["linf_small"], pixels=tuple(range(9)))
    with pytest.raises(CapabilityError):
        DiscretizedVicinity(Scheme("i", "ILLUM", (0.5, 0.5)), step=(1e-4, 1e-4))
    with pytest.raises(ConfigError):
        DiscretizedVicinity(SCHEMES["illum"], 0)


def test_find_flip_agrees_with_manual_enumeration(system, pairs):
    v = DiscretizedVicinity(Scheme("wide", "ILLUM", (0.6, 0.4)), 7)
    for i in range(12):
        p = pairs[i]
        params = np.array([[1 + a, b] for a, b in itertools.product(*v.axes())])
        xp = apply(v.scheme, params, p.x_alpha, check=False)
        any_flip = bool((predict_batch(system, xp, np.repeat(p.x_beta[None], len(params), 0)) != p.y).any())
        clean_wrong = int(predict_batch(system, p.x_alpha[None], p.x_beta[None])[0]) != p.y
        hit = find_flip(system, p, v)
        assert (hit is not None) == (any_flip or clean_wrong)
        assert brute_force_robust(system, p, v) == (hit is None)


def test_oracle_is_monotone_in_epsilon(system, pairs):
    sub = pairs.subset(np.arange(16))
    fracs = [oracle_robust_fraction(system, sub, DiscretizedVicinity(Scheme(f"r{e}", "RADIAL", (e,)), step=0.02))
             for e in (0.05, 0.2, 0.6)]
    assert fracs[0] >= fracs[1] >= fracs[2]
    with pytest.raises(ConfigError):
        oracle_robust_fraction(system, sub.subset([]), DiscretizedVicinity(SCHEMES["radial_small"], 3))


def test_extra_points_are_searched(system, pairs):
    v = DiscretizedVicinity(SCHEMES["radial_small"], 1)
    assert v.with_points([[0.1], [0.05]]).size == 3

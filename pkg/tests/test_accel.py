import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robsuite import _accel

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@given(st.integers(0, 2 ** 31), st.floats(-0.5, 0.5))
def test_radial_warp_paths_agree(seed, k):
    imgs = np.random.default_rng(seed).random((3, 16, 16))
    kk = np.array([k, -k, 0.0])
    a, ga = _accel.radial_warp_numpy(imgs, kk)
    b, gb = _accel.radial_warp_numba(imgs, kk)
    assert np.allclose(a, b, atol=1e-12) and np.allclose(ga, gb, atol=1e-12)


@needs_numba
def test_population_fitness_paths_agree():
    rng = np.random.default_rng(0)
    fail = (rng.random((6, 200)) < 0.3).astype(np.float64)
    members = [np.sort(rng.choice(200, size=int(rng.integers(1, 20)), replace=False)) for _ in range(30)]
    flat = np.concatenate(members).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum([len(m) for m in members])]).astype(np.int64)
    r = rng.random(6)
    for literal in (False, True):
        args = (fail, flat, offsets, r, 0.3, 2.0, literal, 5.0)
        assert np.allclose(_accel.population_fitness_numpy(*args), _accel.population_fitness_numba(*args), atol=1e-12)


def test_env_flag_selects_numpy_path():
    code = "from robsuite import _accel; print(_accel.NUMBA_ENABLED)"
    env = dict(os.environ, ROBSUITE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"

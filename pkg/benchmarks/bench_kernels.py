"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are always importable; ROBSUITE_DISABLE_NUMBA only changes which
one the package dispatches to. Outputs are checked for agreement before
timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from robsuite import _accel


def _time(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_radial(repeat):
    rng = np.random.default_rng(0)
    imgs = rng.random((2048, 16, 16))
    k = rng.uniform(-0.3, 0.3, 2048)
    a, ga = _accel.radial_warp_numpy(imgs, k)
    b, gb = _accel.radial_warp_numba(imgs, k)
    assert np.allclose(a, b, atol=1e-12) and np.allclose(ga, gb, atol=1e-12)
    return (_time(lambda: _accel.radial_warp_numpy(imgs, k), repeat),
            _time(lambda: _accel.radial_warp_numba(imgs, k), repeat))


def bench_fitness(repeat):
    rng = np.random.default_rng(1)
    n, k_sys, pop, size = 20000, 5, 64, 700
    fail = (rng.random((k_sys, n)) < 0.3).astype(np.float64)
    members = [np.sort(rng.choice(n, size=size, replace=False)) for _ in range(pop)]
    flat = np.concatenate(members).astype(np.int64)
    offsets = np.arange(pop + 1, dtype=np.int64) * size
    r_ref = rng.random(k_sys)
    args = (fail, flat, offsets, r_ref, 0.01, 5.0, False, 2.06)
    assert np.allclose(_accel.population_fitness_numpy(*args), _accel.population_fitness_numba(*args), atol=1e-12)
    return (_time(lambda: _accel.population_fitness_numpy(*args), repeat),
            _time(lambda: _accel.population_fitness_numba(*args), repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return 1
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in (("radial_warp", bench_radial), ("population_fitness", bench_fitness)):
        t_np, t_nb = fn(args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

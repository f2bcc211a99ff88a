import numpy as np
import pytest

from robsuite.errors import ConfigError, EmptyPoolError, IntegrityError
from robsuite.gen import generate_pool, ladder_ids, load_pool, pool_stats, random_pool, save_pool
from robsuite.numerics import rng_stream
from robsuite.perturb import default_schemes, within_batch
from robsuite.siamese import margins

SCHEMES = {s.name: s for s in default_schemes(16)}
ETA = {"l2_small": 0.03, "linf_small": 0.05, "illum": 0.02, "patch": 0.005, "radial_small": 0.05}


@pytest.fixture(scope="module")
def sources(pairs):
    return pairs.subset(np.arange(12))


@pytest.fixture(scope="module")
def pools(sources, system):
    return {name: generate_pool(sources, SCHEMES[name], system, 30, eta, rng_stream(0, j))
            for j, (name, eta) in enumerate(ETA.items())}


@pytest.mark.parametrize("name", list(ETA))
def test_ladders_strictly_decrease(pools, name):
    pool = pools[name]
    assert len(pool) > 0
    keys = ladder_ids(pool)
    for k in np.unique(keys):
        rows = np.flatnonzero(keys == k)
        assert np.all(np.diff(pool.step[rows]) > 0)
        assert np.all(np.diff(pool.loss[rows]) < 0)


@pytest.mark.parametrize("name", ["illum", "radial_small"])
def test_ladders_survive_float32_storage(pools, sources, name, tmp_path):
    save_pool(pools[name], tmp_path / "p", {"seed": 0})
    back = load_pool(tmp_path / "p", sources)
    keys = ladder_ids(back)
    for k in np.unique(keys):
        assert np.all(np.diff(back.loss[keys == k]) < 0)


@pytest.mark.parametrize("name", list(ETA))
def test_candidates_are_feasible_and_losses_reproduce(pools, sources, system, name):
    pool = pools[name]
    xp = pool.perturbed()
    assert within_batch(pool.scheme, sources.xa[pool.source_index], xp).all()
    t = margins(system, xp, sources.xb[pool.source_index])
    assert np.allclose((2 * pool.labels - 1) * t, pool.loss, atol=1e-9)


def test_patch_runs_every_anchor(pools, sources):
    pool = pools["patch"]
    locs = pool.params[:, -1].astype(int)
    assert set(np.unique(locs)) == set(range(16))
    assert len(np.unique(ladder_ids(pool))) == 16 * len(sources)


def test_generation_is_deterministic(sources, system, pools):
    again = generate_pool(sources, SCHEMES["linf_small"], system, 30, ETA["linf_small"], rng_stream(0, 1))
    assert again.digest() == pools["linf_small"].digest()


def test_pool_round_trip_and_tamper(tmp_path, pools, sources, system):
    pool = pools["illum"]
    save_pool(pool, tmp_path / "p", {"seed": 0})
    back = load_pool(tmp_path / "p", sources, dummy=system)
    assert back.digest() == pool.digest() and len(back) == len(pool)
    raw = (tmp_path / "p" / "params.rbt").read_bytes()
    data = bytearray(raw)
    data[-4:] = np.float32(0.9).tobytes()
    (tmp_path / "p" / "params.rbt").write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_pool(tmp_path / "p", sources, dummy=system)


def test_random_pool_matches_counts(sources, system):
    counts = np.arange(len(sources)) % 3
    pool = random_pool(sources, SCHEMES["linf_small"], system, counts, rng_stream(4))
    assert np.array_equal(np.bincount(pool.source_index, minlength=len(sources)), counts)
    assert within_batch(pool.scheme, sources.xa[pool.source_index], pool.perturbed()).all()


def test_stats_and_errors(pools, sources, system):
    st = pool_stats(pools["l2_small"])
    assert st["size"] == len(pools["l2_small"]) and sum(st["per_source"]) == st["size"]
    assert sum(st["loss_histogram"]) == st["size"]
    empty = random_pool(sources, SCHEMES["l2_small"], system, np.zeros(len(sources), int), rng_stream(0))
    with pytest.raises(EmptyPoolError):
        pool_stats(empty)
    with pytest.raises(ConfigError):
        generate_pool(sources, SCHEMES["l2_small"], system, 0, 0.1, rng_stream(0))
    with pytest.raises(ConfigError):
        generate_pool(sources, SCHEMES["l2_small"], system, 5, 0.0, rng_stream(0))


def test_candidate_view(pools):
    c = pools["radial_small"][0]
    assert c.x_prime_alpha.shape == (16, 16) and c.y in (0, 1)

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robsuite.errors import (DegenerateCorrelationError, DimensionError, DomainError, NumericError,
                             TruncatedBlobError)
from robsuite.numerics import (as_real_array, bilinear_sample, conjugate_exponent, decode_rbt, derive_seed, dot,
                               encode_rbt, finite_diff_check, norm_p, pearson, read_rbt, rng_stream, write_rbt)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def pearson_by_definition(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_pearson_matches_definition_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        a = rng.normal(size=n)
        b = 0.3 * a + rng.normal(size=n)
        assert abs(pearson(a, b) - pearson_by_definition(a.tolist(), b.tolist())) <= 1e-12


def test_pearson_small_cases():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(DimensionError):
        pearson([1], [1])


@given(arrays(np.float64, st.integers(3, 30), elements=finite), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(a, scale, shift):
    assume(np.ptp(a) > 1e-3)
    b = np.sin(a) + 0.1 * a
    assume(np.ptp(b) > 1e-3)
    r = pearson(a, b)
    assert -1.0 <= r <= 1.0
    assert pearson(b, a) == pytest.approx(r, abs=1e-12)
    assert pearson(scale * a + shift, b) == pytest.approx(r, abs=1e-9)
    assert pearson(-a, b) == pytest.approx(-r, abs=1e-9)


@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_norms_agree_with_numpy(a):
    for p in (1, 2, 3.5, math.inf):
        assert norm_p(a, p) == pytest.approx(np.linalg.norm(a, ord=p), rel=1e-10, abs=1e-12)


def test_norm_and_dot_errors():
    with pytest.raises(DomainError):
        norm_p([1.0], 0.5)
    with pytest.raises(DimensionError):
        dot([1.0, 2.0], [1.0])
    assert norm_p([], 2) == 0.0
    assert dot([1, 2], [3, 4]) == 11.0


def test_conjugate_exponent():
    assert conjugate_exponent(2) == 2
    assert conjugate_exponent(math.inf) == 1
    assert conjugate_exponent(1) == math.inf
    assert 1 / 3 + 1 / conjugate_exponent(3) == pytest.approx(1.0)


def test_as_real_array_checks():
    assert as_real_array([[1, 2]], shape=(1, 2)).dtype == np.float64
    with pytest.raises(DimensionError):
        as_real_array([1, 2], shape=(3,))
    with pytest.raises(NumericError):
        as_real_array([1.0, np.nan])


def test_rng_streams_are_reproducible_and_distinct():
    a = rng_stream(5, 1, 2).random(8)
    assert np.array_equal(a, rng_stream(5, 1, 2).random(8))
    assert not np.array_equal(a, rng_stream(5, 1, 3).random(8))
    assert not np.array_equal(a, rng_stream(6, 1, 2).random(8))
    assert derive_seed(5, 1) == derive_seed(5, 1) != derive_seed(5, 2)


def test_bilinear_lattice_and_midpoint():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(img, 1, 0)[0] == 2.0
    val, (gu, gv) = bilinear_sample(img, 0.0, 0.5)
    assert val == 0.5 and gv == 1.0 and gu == 2.0
    # clamped coordinates have no derivative along the clamped axis
    val, (gu, gv) = bilinear_sample(img, -3.0, 0.5)
    assert val == 0.5 and gu == 0.0
    with pytest.raises(DimensionError):
        bilinear_sample(np.zeros(4), 0, 0)


@given(st.floats(0.05, 2.95), st.floats(0.05, 2.95))
def test_bilinear_gradient_matches_differences(u, v):
    img = np.random.default_rng(3).random((4, 4))
    assume(min(abs(u - round(u)), abs(v - round(v))) > 1e-4)
    _, (gu, gv) = bilinear_sample(img, u, v)
    h = 1e-7
    assert gu == pytest.approx((bilinear_sample(img, u + h, v)[0] - bilinear_sample(img, u - h, v)[0]) / (2 * h),
                               abs=1e-6)
    assert gv == pytest.approx((bilinear_sample(img, u, v + h)[0] - bilinear_sample(img, u, v - h)[0]) / (2 * h),
                               abs=1e-6)


def test_finite_diff_check_known_functions(rng):
    w = rng.normal(size=7)
    x = rng.normal(size=7)
    assert finite_diff_check(lambda z: float(w @ z), lambda z: w, x) < 1e-8
    assert finite_diff_check(lambda z: float(z @ z), lambda z: 2 * z, x) < 1e-6
    assert finite_diff_check(lambda z: float(z @ z), lambda z: 3 * z, x) > 0.1
    with pytest.raises(DomainError):
        finite_diff_check(lambda z: 0.0, lambda z: z, x, h=0)
    with pytest.raises(NumericError):
        finite_diff_check(lambda z: float("nan"), lambda z: z, x)


@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_rbt_round_trip(arr):
    out = decode_rbt(encode_rbt(arr))
    assert out.shape == arr.shape and out.dtype == np.float32
    assert np.array_equal(out, arr)


def test_rbt_rejects_damage(tmp_path):
    data = write_rbt(tmp_path / "a.rbt", np.arange(6.0).reshape(2, 3))
    assert np.array_equal(read_rbt(tmp_path / "a.rbt"), np.arange(6.0).reshape(2, 3))
    for bad in (data[:-1], data + b"\0", b"XXXX" + data[4:], data[:6], data[:10]):
        with pytest.raises(TruncatedBlobError):
            decode_rbt(bad)

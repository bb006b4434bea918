import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlglc.numerics import (
    cosine_rows_backward,
    cosine_similarity,
    cross_entropy,
    l2_normalize,
    l2_normalize_backward,
    make_rng,
    soft_cross_entropy_from_logits,
    softmax_with_temperature,
)

from oracles import rel_err

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
logit_vecs = arrays(np.float64, st.integers(1, 12), elements=finite)


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(softmax_with_temperature([0.0, 0.0], 1.0), [0.5, 0.5])


@pytest.mark.parametrize("t", [0.04, 0.1, 1.0, 7.0])
def test_softmax_identical_logits_is_uniform(t):
    np.testing.assert_allclose(softmax_with_temperature([3.3, 3.3, 3.3], t), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_matches_high_precision_reference():
    mpmath.mp.dps = 50
    logits, t = [1.0, 2.0, 0.5], 0.1
    ex = [mpmath.exp(mpmath.mpf(z) / mpmath.mpf(t)) for z in logits]
    ref = [float(e / sum(ex)) for e in ex]
    np.testing.assert_allclose(softmax_with_temperature(logits, t), ref, rtol=1e-13, atol=1e-300)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(bad):
    with pytest.raises(ValueError):
        softmax_with_temperature([1.0, 2.0], bad)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_with_temperature([1.0, np.nan], 1.0)
    with pytest.raises(ValueError):
        softmax_with_temperature([1.0, np.inf], 1.0)


@given(logit_vecs, st.floats(0.01, 10))
def test_softmax_sums_to_one(z, t):
    assert abs(softmax_with_temperature(z, t).sum() - 1.0) < 1e-9


@given(logit_vecs, st.floats(0.01, 10), st.floats(-100, 100))
def test_softmax_shift_invariance(z, t, c):
    np.testing.assert_allclose(softmax_with_temperature(z + c, t), softmax_with_temperature(z, t), atol=1e-9)


@given(logit_vecs)
def test_lower_temperature_never_lowers_peak(z):
    temps = [10.0, 3.0, 1.0, 0.3, 0.1, 0.04]
    peaks = [softmax_with_temperature(z, t).max() for t in temps]
    assert all(b >= a - 1e-12 for a, b in zip(peaks, peaks[1:]))


def test_cross_entropy_examples():
    assert cross_entropy([0, 1, 0], [0, 1, 0]) == 0.0
    k = 7
    u = np.full(k, 1 / k)
    assert cross_entropy(u, u) == pytest.approx(math.log(k), abs=1e-14)
    assert cross_entropy([0.7, 0.3], [0.6, 0.4]) == pytest.approx(-(0.7 * math.log(0.6) + 0.3 * math.log(0.4)),
                                                                  abs=1e-15)


def test_cross_entropy_clamps_zero_prediction():
    assert cross_entropy([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_dimension_mismatch():
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [0.2, 0.3, 0.5])


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_gibbs_inequality(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 10))
    p = rng.dirichlet(np.ones(k))
    q = rng.dirichlet(np.ones(k))
    assert cross_entropy(p, p) <= cross_entropy(p, q) + 1e-12


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_similarity([1, 2], [3, -1]) == pytest.approx(1 / (math.sqrt(5) * math.sqrt(10)), abs=1e-15)
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_soft_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 6))
    target = rng.dirichlet(np.ones(6), size=3)
    temp = rng.uniform(0.05, 2)
    _, g = soft_cross_entropy_from_logits(target, z, temp)
    fd = _fd(lambda zz: soft_cross_entropy_from_logits(target, zz, temp)[0].sum(), z.copy())
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_cosine_and_normalize_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    w = rng.normal(size=4)

    def f(aa, bb):
        an = aa / np.linalg.norm(aa, axis=1, keepdims=True)
        bn = bb / np.linalg.norm(bb, axis=1, keepdims=True)
        return float((w * (an * bn).sum(1)).sum())

    da, db = cosine_rows_backward(a, b, w)
    assert rel_err(da, _fd(lambda x: f(x, b), a.copy())) < 1e-4
    assert rel_err(db, _fd(lambda x: f(a, x), b.copy())) < 1e-4

    c = rng.normal(size=(4, 5))
    y, n = l2_normalize(a)
    dx = l2_normalize_backward(c, y, n)
    assert rel_err(dx, _fd(lambda x: float((c * l2_normalize(x)[0]).sum()), a.copy())) < 1e-4


def test_rng_is_reproducible_and_forkable():
    a = make_rng(7).standard_normal(5)
    b = make_rng(7).standard_normal(5)
    c = make_rng(7, 1).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_reference_stream():
    # frozen PCG64 output for seed 7; changes here break every recorded experiment
    assert make_rng(7).integers(0, 2**62, size=3).tolist() == [
        2882744023523087010, 4137668341471484581, 3577218852397956696]

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpe.core import BoxPrior, RngState, as_generator, prior_logpdf, prior_sample


def test_sample_unit_box_deterministic():
    p = BoxPrior([0.0], [1.0])
    a = prior_sample(p, 3, RngState(7))
    b = prior_sample(p, 3, RngState(7))
    assert a.shape == (3, 1)
    assert np.all((a >= 0) & (a <= 1))
    assert a.tobytes() == b.tobytes()


def test_sample_mean_symmetric_box():
    p = BoxPrior([-1, -1], [1, 1])
    x = prior_sample(p, 100_000, RngState(1))
    # se = sqrt(1/3 / 1e5) ~ 0.0018
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_svar_prior_ranges(svar6):
    x = prior_sample(svar6.prior, 1, RngState(3))[0]
    assert x.shape == (7,)
    assert np.all(np.abs(x[:6]) <= 1)
    assert 0 <= x[6] <= 1


def test_logpdf_examples():
    assert prior_logpdf(BoxPrior([0], [1]), np.array([0.5])) == 0.0
    assert prior_logpdf(BoxPrior([-1, -1], [1, 1]), np.zeros(2)) == pytest.approx(-math.log(4))
    assert prior_logpdf(BoxPrior([0], [1]), np.array([1.5])) == -np.inf


def test_logpdf_dimension_mismatch():
    with pytest.raises(ValueError):
        prior_logpdf(BoxPrior([0, 0], [1, 1]), np.zeros(3))


def test_invalid_bounds():
    with pytest.raises(ValueError):
        BoxPrior([0, 1], [1, 1])
    with pytest.raises(ValueError):
        BoxPrior([], [])
    with pytest.raises(ValueError):
        prior_sample(BoxPrior([0], [1]), 0, 0)


def test_unbounded_box_contains_everything_but_cannot_sample():
    p = BoxPrior([-np.inf], [np.inf])
    assert p.contains(np.array([[1e300], [-1e300]])).all()
    with pytest.raises(ValueError):
        prior_sample(p, 1, 0)


def test_rng_streams_distinct_and_reproducible():
    root = RngState(5)
    a = root.child(1).generator().random(4)
    b = root.child(2).generator().random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, RngState(5, (1,)).generator().random(4))
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    with pytest.raises(TypeError):
        as_generator("seed")


boxes = st.integers(1, 5).flatmap(
    lambda d: st.tuples(
        st.lists(st.floats(-100, 100), min_size=d, max_size=d),
        st.lists(st.floats(0.01, 50), min_size=d, max_size=d),
    )
)


@settings(max_examples=50, deadline=None)
@given(boxes, st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_samples_always_in_support(box, n, seed):
    lo, width = box
    p = BoxPrior(lo, np.asarray(lo) + np.asarray(width))
    x = prior_sample(p, n, seed)
    assert np.all(np.isfinite(prior_logpdf(p, x)))
    assert np.allclose(prior_logpdf(p, x), -p.log_volume)
    assert x.tobytes() == prior_sample(p, n, seed).tobytes()

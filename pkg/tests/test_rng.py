import numpy as np
import pytest

from services.rng import RngStream, gaussian_matrix, haar_orthonormal


def test_same_key_reproduces_draws():
    """Two streams with the same (seed, stream_id) produce identical numbers."""
    a = RngStream(42, 3).standard_normal(100)
    b = RngStream(42, 3).standard_normal(100)
    np.testing.assert_array_equal(a, b)


def test_stream_ids_are_independent():
    """Different stream ids under one seed give different sequences."""
    a = RngStream(42, 0).standard_normal(50)
    b = RngStream(42, 1).standard_normal(50)
    assert not np.allclose(a, b)


def test_counter_advances_and_fresh_rewinds():
    """Drawing moves the counter; fresh() restarts the same sequence."""
    rng = RngStream(9)
    start = rng.counter
    first = rng.standard_normal(10)
    assert rng.counter > start
    np.testing.assert_array_equal(rng.fresh().standard_normal(10), first)


def test_child_is_deterministic_and_distinct():
    """child(i) depends only on (seed, stream_id, i) and differs from the parent."""
    parent = RngStream(5, 2)
    c1 = parent.child(7).standard_normal(20)
    c2 = RngStream(5, 2).child(7).standard_normal(20)
    np.testing.assert_array_equal(c1, c2)
    assert not np.allclose(c1, RngStream(5, 2).standard_normal(20))
    assert not np.allclose(c1, parent.child(8).standard_normal(20))


def test_spawn_keeps_seed():
    """spawn changes only the stream id."""
    s = RngStream(11, 0).spawn(4)
    assert (s.seed, s.stream_id) == (11, 4)


def test_seed_range_is_checked():
    """Seeds outside the unsigned 64-bit range are rejected."""
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)


def test_gaussian_matrix_scale_and_validation(rng):
    """Entries have the requested standard deviation; non-positive stddev is rejected."""
    m = gaussian_matrix(rng, 400, 250, stddev=0.5)
    assert m.shape == (400, 250)
    assert np.std(m) == pytest.approx(0.5, rel=0.02)
    with pytest.raises(ValueError):
        gaussian_matrix(rng, 2, 2, stddev=0.0)


def test_haar_orthonormal_columns(rng):
    """Columns are orthonormal."""
    q = haar_orthonormal(rng, 7, 3)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-12)

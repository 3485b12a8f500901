import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from arblab import rng


def test_deterministic_for_fixed_key():
    keys = rng.path_keys(123, np.arange(64, dtype=np.uint64))
    a = rng.step_normals(keys, 7, 3)
    b = rng.step_normals(keys, 7, 3)
    assert np.array_equal(a, b)
    assert a.shape == (64, 3)


def test_partition_independent():
    # a path's stream must not depend on how paths are grouped into blocks
    all_keys = rng.path_keys(9, np.arange(100, dtype=np.uint64))
    whole = rng.step_normals(all_keys, 5, 2)
    pieces = [rng.step_normals(all_keys[lo:lo + 30], 5, 2) for lo in range(0, 100, 30)]
    assert np.array_equal(np.vstack(pieces), whole)


def test_distinct_across_steps_paths_seeds():
    keys = rng.path_keys(1, np.arange(8, dtype=np.uint64))
    assert not np.array_equal(rng.step_normals(keys, 0, 2),
                              rng.step_normals(keys, 1, 2))
    other = rng.path_keys(2, np.arange(8, dtype=np.uint64))
    assert not np.array_equal(rng.step_normals(keys, 0, 2),
                              rng.step_normals(other, 0, 2))
    assert len(np.unique(keys)) == 8


@given(seed=st.integers(min_value=0, max_value=2**64 - 1),
       step=st.integers(min_value=0, max_value=10**6))
@settings(max_examples=25, deadline=None)
def test_values_are_standard_normal_ish(seed, step):
    z = rng.scalar_normals(seed, np.arange(4000, dtype=np.uint64), step, 1)
    assert np.all(np.isfinite(z))
    # crude sanity at 5 sigma of the sample statistics
    assert abs(z.mean()) < 5 / np.sqrt(4000)
    assert abs(z.std() - 1.0) < 0.1


def test_moments_large_sample():
    z = rng.scalar_normals(42, np.arange(200000, dtype=np.uint64), 0, 1).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(len(z))
    assert abs(z.std() - 1.0) < 0.01
    assert abs(np.mean(z**3)) < 0.03
    assert abs(np.mean(z**4) - 3.0) < 0.1

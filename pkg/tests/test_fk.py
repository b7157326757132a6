import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmlsmc.fk import PathStore, PhiEvaluationError, WeightedCloud, smoother_estimate


def make_cloud(weights, paths):
    """Cloud over explicit trajectories; paths: (K, n+1, d)."""
    paths = np.asarray(paths, dtype=float)
    k, n_plus_1, d = paths.shape
    store = PathStore(states=[paths[:, t, :] for t in range(n_plus_1)],
                      ancestors=[np.arange(k) for _ in range(n_plus_1 - 1)])
    weights = np.asarray(weights, dtype=float)
    signs = np.sign(weights).astype(np.int8)
    with np.errstate(divide="ignore"):
        log_abs = np.where(signs == 0, -np.inf, np.log(np.abs(weights)))
    return WeightedCloud(log_abs_weights=log_abs, signs=signs, store=store,
                         terminal_indices=np.arange(k))


def test_single_sample_identity():
    cloud = make_cloud([1.0], np.zeros((1, 3, 1)))
    assert smoother_estimate(cloud, lambda p: 4.25) == pytest.approx(4.25)


def test_all_zero_weights_returns_zero_for_any_phi():
    cloud = make_cloud([0.0, 0.0], np.full((2, 3, 1), np.nan))

    def phi(path):  # would blow up if evaluated
        raise AssertionError("phi must not be evaluated on zero-weight entries")

    assert smoother_estimate(cloud, phi) == 0.0


def test_nonfinite_phi_names_offending_index():
    cloud = make_cloud([1.0, 1.0], np.zeros((2, 2, 1)))

    def phi(path):
        phi.calls += 1
        return np.nan if phi.calls == 2 else 1.0

    phi.calls = 0
    with pytest.raises(PhiEvaluationError) as err:
        smoother_estimate(cloud, phi)
    assert err.value.index == 1
    assert "trajectory 1" in str(err.value)


@given(st.lists(st.integers(min_value=-4, max_value=4), min_size=1, max_size=6),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_estimate_is_linear_in_phi(int_weights, seed):
    rng = np.random.default_rng(seed)
    k = len(int_weights)
    paths = rng.standard_normal((k, 3, 1))
    cloud = make_cloud(np.array(int_weights, dtype=float), paths)

    def phi(p):
        return p[-1, 0]

    def psi(p):
        return p[0, 0] ** 2

    combo = smoother_estimate(cloud, lambda p: 2.0 * phi(p) + 0.5 * psi(p))
    separate = 2.0 * smoother_estimate(cloud, phi) + 0.5 * smoother_estimate(cloud, psi)
    assert combo == pytest.approx(separate, rel=1e-12, abs=1e-12)


def test_vector_phi_gives_vector_estimate():
    cloud = make_cloud([2.0, -1.0], np.arange(2 * 2 * 1).reshape(2, 2, 1))
    out = smoother_estimate(cloud, lambda p: np.array([1.0, p[-1, 0]]))
    np.testing.assert_allclose(out, [2.0 - 1.0, 2.0 * 1.0 - 1.0 * 3.0])


def test_pathstore_materializes_through_ancestors():
    # two times, two particles, crossing ancestry
    states = [np.array([[0.0], [1.0]]), np.array([[10.0], [11.0]])]
    ancestors = [np.array([1, 0])]
    store = PathStore(states=states, ancestors=ancestors)
    np.testing.assert_array_equal(store.materialize(0), [[1.0], [10.0]])
    np.testing.assert_array_equal(store.materialize(1), [[0.0], [11.0]])
    allp = store.materialize_all()
    np.testing.assert_array_equal(allp[0], [[1.0], [10.0]])
    np.testing.assert_array_equal(allp[1], [[0.0], [11.0]])


def test_pathstore_column_selection():
    states = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
    store = PathStore(states=states, ancestors=[np.array([0])])
    np.testing.assert_array_equal(store.materialize(0, cols=(1, 2)), [[2.0], [4.0]])


def test_weight_length_mismatch_rejected():
    store = PathStore(states=[np.zeros((2, 1))], ancestors=[])
    with pytest.raises(ValueError):
        WeightedCloud(log_abs_weights=np.zeros(2), signs=np.zeros(2, dtype=np.int8),
                      store=store, terminal_indices=np.arange(1))


def test_linear_weights_roundtrip():
    cloud = make_cloud([0.5, -0.25, 0.0], np.zeros((3, 2, 1)))
    np.testing.assert_allclose(cloud.weights, [0.5, -0.25, 0.0])
    assert cloud.total_weight() == pytest.approx(0.25)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mogernn.graph import (SensorGraph, build_adjacency, default_sigma, load_distances, mask_adjacency,
                           save_distances, transition_matrices)


def test_adjacency_examples():
    d = np.array([[0.0, 2.0], [11.0, 0.0]])
    a = build_adjacency(d, sigma=2.0, kappa=10.0)
    assert a[0, 0] == 1.0
    assert a[1, 0] == 0.0
    assert abs(a[0, 1] - 0.3679) < 1e-4
    assert a[0, 1] == math.exp(-1.0)


def test_adjacency_unconnected_pairs_are_zero():
    d = np.array([[0.0, np.inf], [3.0, 0.0]])
    a = build_adjacency(d, sigma=1.0, kappa=5.0)
    assert a[0, 1] == 0.0 and a[1, 0] == math.exp(-3.0)


@pytest.mark.parametrize("sigma,kappa", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, -2.0), (1.0, None)])
def test_adjacency_parameter_errors(sigma, kappa):
    with pytest.raises(ValueError):
        build_adjacency(np.zeros((2, 2)), sigma, kappa)


def test_adjacency_rejects_negative_distance():
    with pytest.raises(ValueError):
        build_adjacency(np.array([[0.0, -1.0], [1.0, 0.0]]), 1.0, 5.0)


def test_default_sigma_is_population_std_of_finite_positive():
    d = np.array([[0.0, 1.0, np.inf], [2.0, 0.0, 3.0], [4.0, np.inf, 0.0]])
    vals = [1.0, 2.0, 3.0, 4.0]
    mu = sum(vals) / 4
    assert default_sigma(d) == pytest.approx(math.sqrt(sum((v - mu) ** 2 for v in vals) / 4), abs=1e-15)


def test_adjacency_is_directional():
    d = np.array([[0.0, 1.0], [5.0, 0.0]])
    a = build_adjacency(d, 1.0, 10.0)
    assert a[0, 1] != a[1, 0]


def test_mask_examples():
    a = np.array([[0.0, 0.5, 0.2], [0.3, 0.0, 0.4], [0.1, 0.6, 0.0]])
    np.testing.assert_array_equal(mask_adjacency(a, [True] * 3), a)
    m = mask_adjacency(a, [True, False, True])
    np.testing.assert_array_equal(m[1], 0.0)
    np.testing.assert_array_equal(m[[0, 2]], a[[0, 2]])


def _mask_oracle(a, observed):
    n = len(a)
    out = np.zeros_like(a)
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0 if (i == j or not observed[i]) else a[i, j]
    return out


def test_mask_matches_entrywise_oracle(rng):
    a = rng.uniform(0, 1, size=(5, 5))
    obs = np.zeros(5, dtype=bool)
    obs[[0, 2, 4]] = True
    np.testing.assert_array_equal(mask_adjacency(a, obs), _mask_oracle(a, obs))


def test_transition_examples(rng):
    f, b = transition_matrices(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(f, [[0, 1], [1, 0]])
    f, _ = transition_matrices(np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(f[0], 0.0)
    a = rng.uniform(0, 1, size=(4, 4)) * (rng.uniform(size=(4, 4)) > 0.3)
    f, b = transition_matrices(a)
    for m in (f, b):
        s = m.sum(axis=1)
        nz = s > 0
        np.testing.assert_allclose(s[nz], 1.0, atol=1e-12)


def test_transition_matches_degree_definition(rng):
    a = rng.uniform(0, 1, size=(4, 4))
    f, b = transition_matrices(a)
    np.testing.assert_allclose(f, np.diag(1 / a.sum(axis=1)) @ a, atol=1e-14)
    np.testing.assert_allclose(b, np.diag(1 / a.sum(axis=0)) @ a.T, atol=1e-14)


adjacencies = arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])),
                     elements=st.floats(0, 1))


@settings(max_examples=50, deadline=None)
@given(adjacencies, st.data())
def test_mask_is_idempotent(a, data):
    obs = np.array(data.draw(st.lists(st.booleans(), min_size=len(a), max_size=len(a))))
    once = mask_adjacency(a, obs)
    np.testing.assert_array_equal(mask_adjacency(once, obs), once)


@settings(max_examples=50, deadline=None)
@given(adjacencies)
def test_transition_rows_are_stochastic_or_zero(a):
    for m in transition_matrices(a):
        s = m.sum(axis=1)
        assert np.all((np.abs(s - 1) < 1e-12) | (s == 0))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5))
def test_adjacency_monotone_in_distance(d1, d2, sigma):
    if d1 == d2:
        return
    near, far = sorted((d1, d2))
    w = build_adjacency(np.array([[0.0, near], [far, 0.0]]), sigma, 10.0)
    # strict monotonicity holds while exp stays representable
    if w[1, 0] > 0:
        assert w[0, 1] > w[1, 0] or math.exp(-near / sigma) == math.exp(-far / sigma)
    assert np.all((w >= 0) & (w <= 1))


def test_distance_file_round_trip(tmp_path):
    ids = ["a", "b", "c"]
    d = np.array([[0.0, 800.0, np.inf], [800.0, 0.0, 1234.5], [np.inf, 0.1, 0.0]])
    save_distances(tmp_path / "d.csv", d, ids)
    np.testing.assert_array_equal(load_distances(tmp_path / "d.csv", ids), d)


def test_distance_file_requires_columns(tmp_path):
    (tmp_path / "d.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        load_distances(tmp_path / "d.csv", ["1", "2"])


def test_sensor_graph_subgraph_and_mask():
    d = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
    g = SensorGraph.from_distances(d, kappa=1.5, sigma=1.0, observed=[True, False, True], sensor_ids=list("xyz"))
    assert g.n_nodes == 3 and g.sigma == 1.0 and g.kappa == 1.5
    np.testing.assert_array_equal(g.masked_adjacency()[1], 0.0)
    sub = g.subgraph([2, 0])
    assert sub.sensor_ids == ["z", "x"]
    np.testing.assert_array_equal(sub.adjacency, g.adjacency[np.ix_([2, 0], [2, 0])])
    with pytest.raises(ValueError):
        SensorGraph(d, np.zeros((2, 2)))

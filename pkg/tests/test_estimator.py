import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mogernn import MoGERNN, SyntheticSpec, generate_synthetic
from mogernn.evaluation import (assign_roles, baseline_knn_ed, evaluate_model, knn_fill,
                                run_dynamic_scenario)

SMALL = dict(history=4, horizon=4, hidden=4, stride=8, batch_size=16, max_epochs=2, random_state=0)


@pytest.fixture(scope="module")
def world():
    ds, graph = generate_synthetic(SyntheticSpec(n_nodes=10, days=1, seed=2))
    return ds, graph


@pytest.fixture(scope="module")
def fitted(world):
    ds, graph = world
    return MoGERNN(**SMALL).fit(ds.series, graph.adjacency)


def test_sklearn_parameter_protocol():
    est = MoGERNN(hidden=7, top_k=3)
    params = est.get_params()
    assert params["hidden"] == 7 and params["top_k"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(hidden=9)
    assert est.hidden == 9 and twin.hidden == 7


def test_predict_requires_fit():
    with pytest.raises(NotFittedError):
        MoGERNN().predict(np.zeros((3, 12)), np.zeros((3, 3)))


def test_fit_sets_attributes(fitted):
    assert fitted.n_params_ == sum(p.data.size for p in fitted.params_.values())
    assert len(fitted.training_log_) == 2
    assert fitted.scale_ > 0


def test_predict_shapes_and_units(fitted, world):
    ds, graph = world
    one = fitted.predict(ds.series[:, :4], graph.adjacency)
    assert one.shape == (10, 4)
    batch = fitted.predict(np.stack([ds.series[:, :4], ds.series[:, 4:8]]), graph.adjacency)
    np.testing.assert_allclose(batch[0], one, atol=1e-12)
    # forecasts come back in speed units, not scaled units
    assert 20 < one.mean() < 90


def test_unobserved_rows_are_ignored(fitted, world):
    ds, graph = world
    X = ds.series[:, :4].copy()
    obs = np.ones(10, bool)
    obs[3] = False
    a = fitted.predict(X, graph.adjacency, observed=obs)
    X[3] = 1e6
    assert fitted.predict(X, graph.adjacency, observed=obs).tobytes() == a.tobytes()


def test_input_validation(fitted, world):
    ds, graph = world
    with pytest.raises(ValueError):
        fitted.predict(ds.series[:, :5], graph.adjacency)
    with pytest.raises(ValueError):
        fitted.predict(ds.series[:, :4], graph.adjacency[:5, :5])
    with pytest.raises(ValueError):
        fitted.predict(ds.series[:, :4], -graph.adjacency)
    with pytest.raises(ValueError):
        fitted.predict(ds.series[:, :4], graph.adjacency, observed=np.ones(3, bool))
    with pytest.raises(ValueError):
        MoGERNN(**SMALL).fit(np.full((3, 30), np.nan), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MoGERNN(**{**SMALL, "scaling": "robust"}).fit(ds.series, graph.adjacency)


def test_checkpoint_round_trip(fitted, world, tmp_path):
    ds, graph = world
    fitted.save(tmp_path / "c.json", extra={"note": 1})
    back = MoGERNN.load(tmp_path / "c.json")
    assert back.param_bytes() == fitted.param_bytes()
    assert back.checkpoint_extra_ == {"note": 1}
    X = ds.series[:, 10:14]
    assert back.predict(X, graph.adjacency).tobytes() == fitted.predict(X, graph.adjacency).tobytes()
    raw = json.loads((tmp_path / "c.json").read_text())
    raw["format"] = "other"
    with pytest.raises(ValueError):
        MoGERNN.from_checkpoint(raw)


def test_minmax_scaling(world):
    ds, graph = world
    est = MoGERNN(**{**SMALL, "scaling": "minmax"}).fit(ds.series, graph.adjacency)
    assert est.offset_ == ds.series.min()
    assert est.scale_ == pytest.approx(ds.series.max() - ds.series.min())


def test_inductive_application(fitted, world):
    ds, graph = world
    blob = fitted.param_bytes()
    big, bg = generate_synthetic(SyntheticSpec(n_nodes=17, days=0.2, seed=8))
    assert fitted.predict(big.series[:, :4], bg.adjacency).shape == (17, 4)
    assert fitted.param_bytes() == blob


def test_same_roles_reproduce_standard_evaluation(fitted, world):
    ds, graph = world
    roles = assign_roles(10, (7, 3, 0, 0), seed=0)
    rep, dump = run_dynamic_scenario(fitted, ds.series, ds.valid, graph.adjacency, roles)
    ref, pred, _, _ = evaluate_model(fitted, ds.series, ds.valid, graph.adjacency, roles.test_observed,
                                     roles.groups())
    assert rep.rows == ref.rows
    assert dump["pred"].tobytes() == pred.tobytes()


def test_failed_sensors_are_zeroed_even_with_data(fitted, world):
    ds, graph = world
    blob = fitted.param_bytes()
    roles = assign_roles(10, (6, 2, 0, 2), seed=1)
    _, dump = run_dynamic_scenario(fitted, ds.series, ds.valid, graph.adjacency, roles, stride=8)
    # manual masking: scramble the FS and VS series, which must not matter
    scrambled = ds.series.copy()
    scrambled[roles.nodes("FS", "VS")] = 0.0
    _, manual = run_dynamic_scenario(fitted, scrambled, ds.valid, graph.adjacency, roles, stride=8)
    np.testing.assert_array_equal(manual["pred"], dump["pred"])
    assert fitted.param_bytes() == blob


def test_knn_ed_baseline_uses_filled_histories(fitted, world):
    ds, graph = world
    roles = assign_roles(10, (7, 3, 0, 0), seed=0)
    obs = roles.test_observed
    rep, pred = baseline_knn_ed(fitted, ds.series, ds.valid, graph.distances, graph.adjacency, obs,
                                roles.groups(), k=2, stride=8)
    X = np.stack([ds.series[:, i:i + 4] for i in range(0, ds.length - 7, 8)])
    filled, _ = knn_fill(X, obs, graph.distances, 2)
    np.testing.assert_allclose(pred, fitted.predict(filled, graph.adjacency), atol=1e-12)
    assert rep.get("VS")["mae"] >= 0

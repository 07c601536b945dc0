import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from amdvrp.estimator import DynamicAttentionRouter
from amdvrp.instance import generate_instance, validate_solution
from amdvrp.validation import check_instance, check_instances


def tiny(**kw):
    base = dict(embed_dim=8, n_layers=1, n_heads=2, n_epochs=1, steps_per_epoch=2, batch_size=2)
    base.update(kw)
    return DynamicAttentionRouter(**base)


def test_get_params_and_clone():
    est = tiny(reencode="never")
    params = est.get_params()
    assert params["embed_dim"] == 8 and params["reencode"] == "never"
    copy = clone(est)
    assert copy.get_params() == params
    est.set_params(n_heads=4)
    assert est.n_heads == 4 and copy.n_heads == 2


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        tiny().predict([generate_instance(3, 10, 0)])


def test_fit_predict_score(tmp_path):
    X = [generate_instance(5, 10, s) for s in range(4)]
    est = tiny(checkpoint_dir=str(tmp_path)).fit(X)
    assert len(est.history_) == 2 and est.n_features_in_ == 3
    assert (tmp_path / "epoch-001.amd").exists()
    sols = est.predict(X)
    assert all(validate_solution(x, s) is None for x, s in zip(X, sols))
    assert est.score(X) == pytest.approx(-np.mean([s.length for s in sols]))
    lp = est.predict_log_proba(X)
    assert lp.shape == (4,) and np.all(lp <= 0)


def test_fit_without_instances_needs_size():
    with pytest.raises(ValueError):
        tiny().fit()
    est = tiny(n_customers=3, capacity=10).fit()
    assert est.params_.arch.d_h == 8


def test_save_load_round_trip(tmp_path):
    X = [generate_instance(6, 12, s) for s in range(3)]
    est = tiny().init_params()
    est.save(tmp_path / "m.amd")
    other = DynamicAttentionRouter().load(tmp_path / "m.amd")
    assert other.embed_dim == 8 and other.n_layers == 1
    a = [s.visits for s in est.predict(X)]
    b = [s.visits for s in other.predict(X)]
    assert a == b


def test_transform_shapes():
    X = [generate_instance(4, 10, 0), generate_instance(4, 10, 1)]
    emb = tiny().init_params().transform(X)
    assert [e.shape for e in emb] == [(5, 8), (5, 8)]
    assert all(np.all(np.abs(e) < 1) for e in emb)


def test_sample_decoding_is_seeded():
    X = [generate_instance(6, 12, s) for s in range(5)]
    est = tiny(decode="sample", random_state=4).init_params()
    a = [r.solution.visits for r in est.rollout(X)]
    assert a == [r.solution.visits for r in est.rollout(X)]
    assert a != [r.solution.visits for r in est.rollout(X, seed=99)]


def test_input_coercion():
    inst = generate_instance(3, 10, 0)
    arr = np.column_stack([inst.coords, inst.demands])
    assert check_instance(arr, 10) == inst
    assert check_instance({"coords": inst.coords, "demands": inst.demands, "capacity": 10}) == inst
    assert check_instances(arr, 10) == [inst]
    with pytest.raises(ValueError):
        check_instance(arr)
    with pytest.raises(ValueError):
        check_instance(np.zeros((3, 2)), 10)
    with pytest.raises(ValueError):
        check_instances([])
    bad = arr.copy()
    bad[1, 2] = 2.5
    with pytest.raises(ValueError):
        check_instance(bad, 10)

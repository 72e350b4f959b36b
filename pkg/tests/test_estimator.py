import numpy as np
import pytest
from sklearn.base import clone

from gridverify.adversary import AttackSpec
from gridverify.estimator import StateVerifier
from gridverify.exceptions import DimensionError
from gridverify.orchestrator import DATA_DIR, ScenarioConfig, prepare

SMALL = dict(case="builtin:feeder7", regions="builtin:feeder7_3regions")


def readings(noise=0.0, seed=0, **kw):
    cfg = ScenarioConfig(noise_variance=noise, noise_seed=seed, **{**SMALL, **kw})
    return observed(prepare(cfg))


def observed(prep):
    return prep.data.measurements[:, prep.space.measured_indices], prep


def test_params_and_clone():
    est = StateVerifier(**SMALL, tol=1e-6, beta=3.0)
    params = est.get_params()
    assert params["tol"] == 1e-6 and params["beta"] == 3.0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(c2=1.0)
    assert est.c2 == 1.0


def test_fit_transform_exact_readings():
    X, prep = readings()
    est = StateVerifier(**SMALL, tol=1e-8, max_iter=3000)
    out = est.fit_transform(X)
    assert est.outcome_ == "converged" and est.verdict_ == "none"
    assert out.shape == (1, prep.space.n_buses)
    assert np.max(np.abs(out - prep.data.truth[:, prep.space.p_index])) < 1e-6
    assert set(est.trust_scores_) == {1, 2, 3}
    assert sum(est.trust_scores_.values()) == pytest.approx(1.0)
    assert np.array_equal(est.transform(X), out)


def test_transform_before_fit():
    X, _ = readings()
    with pytest.raises(Exception, match="not fitted"):
        StateVerifier(**SMALL).transform(X)


def test_wrong_column_count():
    X, _ = readings()
    with pytest.raises(DimensionError):
        StateVerifier(**SMALL).fit(X[:, :-1])


def test_set_params_refreshes_space():
    X, _ = readings()
    est = StateVerifier(**SMALL, max_iter=50).fit(X)
    assert est.n_features_in_ == X.shape[1]
    est.set_params(measurement_policy="injections")
    with pytest.raises(DimensionError):
        est.fit(X)
    Xi, prep = readings(measurement_policy="injections")
    est.fit(Xi)
    assert est.n_features_in_ == Xi.shape[1] < X.shape[1]
    assert est.verified_injections_.shape == (1, prep.space.n_buses)


def test_attack_isolated_golden():
    X, _ = observed(prepare(ScenarioConfig.load(DATA_DIR / "scenarios" / "golden.json")))
    est = StateVerifier(attack=AttackSpec(1, "state_update", seed=3)).fit(X)
    assert est.isolated_ == [1] and est.verdict_ == "attacker(1)"
    assert len(est.n_iter_) == 2
    assert max(est.trust_scores_, key=est.trust_scores_.get) == 1

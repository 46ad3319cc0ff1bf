import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hipinn import HiPINNRegressor, get_problem

LEVELS = [
    {"network": {"type": "mlp", "hidden": [8]}, "iterations": 40},
    {"network": {"type": "mlp", "hidden": [8]}, "iterations": 40},
]


def small(**kw):
    args = dict(problem="manufactured:sin_pi_1d", levels=LEVELS, n_interior=32, n_boundary=2, stride=20)
    args.update(kw)
    return HiPINNRegressor(**args)


def test_params_roundtrip_and_clone():
    est = small(lr=3e-3)
    params = est.get_params()
    assert params["lr"] == 3e-3 and params["levels"] is LEVELS
    twin = clone(est)
    assert twin.get_params()["n_interior"] == 32
    est.set_params(n_interior=10)
    assert est.n_interior == 10


def test_fit_predict_with_reference():
    p = get_problem("manufactured:sin_pi_1d")
    X = np.linspace(0, 1, 41)[:, None]
    est = small().fit(X, p.exact_values(X))
    assert est.predict(X).shape == (41,)
    assert len(est.composite_.levels) == 2
    errs = est.trace_.column("rel_l2_error")
    assert len(errs) == 4 and all(np.isfinite(errs))
    assert est.residual(X[1:-1]).shape == (39,)
    assert np.isfinite(est.score(X, p.exact_values(X)))


def test_fit_is_deterministic():
    X = np.linspace(0, 1, 11)[:, None]
    a = small().fit().predict(X)
    b = small().fit().predict(X)
    assert np.array_equal(a, b)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((2, 1)))


def test_input_validation():
    est = small()
    with pytest.raises(ValueError):
        est.fit(np.zeros((3, 1)))
    with pytest.raises(ValueError):
        est.fit(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        est.fit(np.full((3, 1), np.nan), np.zeros(3))
    with pytest.raises(ValueError):
        small(levels=[]).fit()
    with pytest.raises(TypeError):
        small(problem=3).fit()
    fitted = small(levels=LEVELS[:1]).fit()
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fitted.predict([[np.inf]])

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stimkit.ale import AleCurve, ale_curve, ale_curves, fit_psi_surface, variance_decomposition
from stimkit.exceptions import DataError, EstimationError


class Exact:
    """A known effect surface standing in for the fitted forest."""

    def __init__(self, fn):
        self.fn = fn

    def predict(self, X):
        return self.fn(np.asarray(X, float))


def test_linear_surface_exact(rng):
    X = rng.normal(size=(1000, 3))
    curve = ale_curve(Exact(lambda X: 1.5 * X[:, 0] - X[:, 2]), X, 0)
    np.testing.assert_allclose(curve.values, 1.5 * (X[:, 0] - X[:, 0].mean()), atol=1e-10)
    assert len(curve.bin_edges) == 26 - curve.merged_bins == len(curve.h_tilde)
    assert np.all(np.diff(curve.bin_edges) > 0)


def test_quadratic_surface_centering(rng):
    x = rng.uniform(-1, 1, 20_000)
    X = np.column_stack([x, rng.normal(size=len(x))])
    curve = ale_curve(Exact(lambda X: X[:, 0] ** 2), X, 0)
    # bin resolution (2/25)^2 / 4 plus sampling error of the centering constant
    np.testing.assert_allclose(curve.values, x**2 - 1 / 3, atol=0.01)


def test_constant_surface_flat(rng):
    X = rng.normal(size=(300, 2))
    curve = ale_curve(Exact(lambda X: np.full(len(X), 7.0)), X, 1)
    np.testing.assert_allclose(curve.values, 0.0, atol=1e-12)
    assert curve.var_component == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(5, 30))
def test_curves_centered(seed, n_bins):
    rng = np.random.default_rng(seed)
    X = rng.standard_t(3, size=(400, 2))
    a, b = rng.normal(size=2)
    curve = ale_curve(Exact(lambda X: np.sin(a * X[:, 0]) + b * X[:, 0] * X[:, 1]), X, 0, n_bins=n_bins)
    assert abs(curve.values.mean()) < 1e-8
    assert np.all(np.diff(curve.bin_edges) > 0)


def test_empty_bins_merged(rng):
    x = np.r_[rng.uniform(0, 1, 200), rng.uniform(9, 10, 200)]
    X = np.column_stack([x, rng.normal(size=400)])
    curve = ale_curve(Exact(lambda X: 2 * X[:, 0]), X, 0)
    assert curve.merged_bins > 0
    assert len(curve.bin_edges) == 26 - curve.merged_bins
    np.testing.assert_allclose(curve.values, 2 * (x - x.mean()), atol=1e-9)


def test_binary_two_level(rng):
    X = np.column_stack([rng.integers(0, 2, 500), rng.normal(size=500)])
    curve = ale_curve(Exact(lambda X: 3 * X[:, 0] + X[:, 1]), X, 0)
    assert curve.kind == "binary"
    assert curve.h_tilde[1] - curve.h_tilde[0] == pytest.approx(3.0)
    assert abs(curve.values.mean()) < 1e-12


def test_too_few_distinct_values(rng):
    X = np.column_stack([rng.integers(0, 5, 200), rng.normal(size=200)])
    with pytest.raises(DataError):
        ale_curve(Exact(lambda X: X[:, 0]), X, 0)


def test_uniform_covariate_has_26_edges(rng):
    X = rng.uniform(size=(2000, 2))
    curve = ale_curve(Exact(lambda X: X[:, 0]), X, 0)
    assert len(curve.bin_edges) == 26 and curve.merged_bins == 0


def test_quantile_binning(rng):
    X = rng.exponential(size=(2000, 2))
    curve = ale_curve(Exact(lambda X: X[:, 0]), X, 0, binning="quantile")
    counts = np.histogram(X[:, 0], curve.bin_edges)[0]
    assert counts.min() > 0.5 * counts.mean()


# ---------------------------------------------------------------- fitted surface


def test_surface_recovers_linear(rng):
    X = rng.normal(size=(3000, 3))
    s = fit_psi_surface(X[:, 0], X, seed=1)
    assert s.oob_r2_ > 0.9


def test_surface_constant_and_deterministic(rng):
    X = rng.normal(size=(300, 2))
    s = fit_psi_surface(np.full(300, 2.0), X)
    np.testing.assert_allclose(s.predict(X), 2.0)
    psi = rng.normal(size=300)
    np.testing.assert_array_equal(fit_psi_surface(psi, X, seed=3).predict(X),
                                  fit_psi_surface(psi, X, seed=3).predict(X))


@pytest.fixture(scope="module")
def additive():
    rng = np.random.default_rng(7)
    n = 5000
    X = pd.DataFrame(rng.normal(size=(n, 4)), columns=["d1", "d2", "s1", "s2"])
    alpha = 2 * X["d1"] + np.where(X["d2"] > 0, 1.0, -1.0) + X["s1"]
    psi = alpha + rng.normal(size=n)
    surface = fit_psi_surface(psi.to_numpy(), X.to_numpy(), seed=2)
    return X, alpha.to_numpy(), ale_curves(surface, X, list(X.columns))


def test_pseudo_orthogonality(additive):
    _, _, curves = additive
    V = np.column_stack([c.values for c in curves.values()])
    C = np.corrcoef(V, rowvar=False)
    off = C[~np.eye(len(C), dtype=bool)]
    assert np.nanmax(np.abs(off)) < 0.1


def test_functional_decomposition(additive):
    _, alpha, curves = additive
    resid = alpha - alpha.mean() - sum(c.values for c in curves.values())
    assert resid.var() / alpha.var() < 0.1


def test_linear_slope_within_ten_percent(additive):
    X, _, curves = additive
    slope = np.polyfit(X["d1"], curves["d1"].values, 1)[0]
    assert slope == pytest.approx(2.0, rel=0.1)


# ---------------------------------------------------------------- decomposition


def _c(name, var):
    return AleCurve(name, "continuous", np.arange(3.0), np.zeros(3), np.zeros(3), var)


def test_decomposition_shares():
    curves = {"a": _c("a", 3.0), "b": _c("b", 1.0), "s": _c("s", 1.0)}
    out = variance_decomposition(curves, ["a", "b"], ["s"])
    assert out["omega_D"] == pytest.approx(0.8)
    assert out["omega_D"] + out["omega_S"] == pytest.approx(1.0)


def test_decomposition_flat_supply():
    out = variance_decomposition({"a": _c("a", 2.0), "s": _c("s", 0.0)}, ["a"], ["s"])
    assert out["omega_D"] == 1.0


def test_decomposition_errors():
    with pytest.raises(EstimationError):
        variance_decomposition({"a": _c("a", 0.0), "s": _c("s", 0.0)}, ["a"], ["s"])
    with pytest.raises(DataError):
        variance_decomposition({"a": _c("a", 1.0)}, ["a"], ["s"])


def test_planted_four_to_one(additive):
    _, _, curves = additive
    # Var(2 d1 + sign(d2)) = 4 + 1 = 5 ; Var(s1) = 1 -> omega_D = 5/6
    out = variance_decomposition(curves, ["d1", "d2"], ["s1", "s2"])
    assert out["omega_D"] == pytest.approx(5 / 6, abs=0.05)

"""First differences, cross-fitted nuisances, doubly robust scores, BLP, and conditional MPCs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestRegressor
from sklearn.model_selection import KFold

from .._validation import check_binary, check_finite, check_matrix, check_same_length, standardize
from ..exceptions import ConfigError, DataError, EstimationError

CLIP = (0.01, 0.99)


def first_difference(panel: pd.DataFrame, outcome: str = "oop") -> pd.Series:
    """Per-consumer treat-window mean minus pre-window mean, indexed by consumer_id."""
    tags = set(panel["period_tag"].unique())
    if not {"pre", "treat"} <= tags:
        raise DataError("panel needs both pre and treat periods")
    sub = panel.loc[panel["period_tag"].isin(["pre", "treat"])]
    means = sub.groupby(["consumer_id", "period_tag"], sort=True)[outcome].mean().unstack()
    return (means["treat"] - means["pre"]).rename("delta_y")


def _forest(seed, **kw):
    # half-sample draws per tree, as in honest-forest defaults
    params = {"n_estimators": 200, "min_samples_leaf": 5, "max_features": 1.0, "max_samples": 0.5, "n_jobs": -1}
    params.update(kw)
    return RandomForestRegressor(random_state=seed, **params)


def fit_nuisances(X, delta_y, treat, k_folds: int = 5, seed: int = 0, **forest_params) -> dict:
    """Cross-fitted regression-forest estimates of E[dy | X] and E[Treat | X].

    Each row's prediction comes from a model fit without its fold; e_hat is
    clipped to [0.01, 0.99].
    """
    if int(k_folds) < 2:
        raise ConfigError("k_folds must be at least 2")
    X = check_matrix(X)
    dy = check_finite(np.asarray(delta_y, float), "delta_y")
    t = check_binary(treat).astype(float)
    n = check_same_length(X=X, delta_y=dy, treat=t)
    if n < k_folds:
        raise DataError(f"{n} rows cannot be split into {k_folds} folds")
    m_hat = np.empty(n)
    e_hat = np.empty(n)
    folds = KFold(n_splits=int(k_folds), shuffle=True, random_state=seed)
    for k, (train, test) in enumerate(folds.split(X)):
        if np.unique(t[train]).size < 2:
            raise EstimationError(f"fold {k} has only one treatment class in its training data; "
                                  "use fewer folds")
        m_hat[test] = _forest(seed + 2 * k, **forest_params).fit(X[train], dy[train]).predict(X[test])
        e_hat[test] = _forest(seed + 2 * k + 1, **forest_params).fit(X[train], t[train]).predict(X[test])
    return {"m_hat": m_hat, "e_hat": np.clip(e_hat, *CLIP)}


def dr_scores(catt, delta_y, treat, e_hat, m_hat) -> np.ndarray:
    """psi = catt + (T - e) / (e (1 - e)) * (dy - m - (T - e) * catt)."""
    catt = np.asarray(catt, float)
    dy = np.asarray(delta_y, float)
    t = np.asarray(treat, float)
    e = np.asarray(e_hat, float)
    m = np.asarray(m_hat, float)
    check_same_length(catt=catt, delta_y=dy, treat=t, e_hat=e, m_hat=m)
    if np.any((e <= 0) | (e >= 1)):
        raise DataError("e_hat must lie strictly inside (0, 1)")
    resid = dy - m - (t - e) * catt
    return catt + (t - e) / (e * (1 - e)) * resid


@dataclass
class BlpResult:
    names: list
    intercept: float
    intercept_se: float
    beta: np.ndarray
    se: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": ["intercept"] + list(self.names),
            "beta": np.r_[self.intercept, self.beta],
            "se": np.r_[self.intercept_se, self.se],
            "t": np.r_[self.intercept, self.beta] / np.r_[self.intercept_se, self.se],
        })


def blp(psi, X, names=None) -> BlpResult:
    """Least squares of psi on standardized covariates and an intercept, HC1 errors."""
    psi = check_finite(np.asarray(psi, float), "psi")
    X = check_matrix(X)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    check_same_length(psi=psi, X=X)
    if n <= p + 1:
        raise DataError(f"BLP needs more observations ({n}) than parameters ({p + 1})")
    Z, _, _ = standardize(X)
    corr = np.corrcoef(Z, rowvar=False) if p > 1 else np.ones((1, 1))
    for i in range(p):
        for j in range(i + 1, p):
            if abs(corr[i, j]) > 1 - 1e-10:
                raise EstimationError(f"collinear covariates: '{names[i]}' and '{names[j]}'")
    D = np.column_stack([np.ones(n), Z])
    DtD = D.T @ D
    if np.linalg.matrix_rank(DtD) < p + 1:
        raise EstimationError("collinear covariates in BLP design")
    coef = np.linalg.solve(DtD, D.T @ psi)
    resid = psi - D @ coef
    bread = np.linalg.inv(DtD)
    meat = (D * resid[:, None] ** 2).T @ D
    V = bread @ meat @ bread * n / (n - p - 1)
    se = np.sqrt(np.diag(V))
    return BlpResult(names, float(coef[0]), float(se[0]), coef[1:], se[1:])


def conditional_mpc(catt, cost_hat, treat_days: int):
    """1 + catt * treat_days / cost_hat; NaN (flagged) where cost_hat <= 0."""
    catt = np.asarray(catt, float)
    cost = np.asarray(cost_hat, float)
    check_same_length(catt=catt, cost_hat=cost)
    valid = cost > 0
    mpc = np.full(len(catt), np.nan)
    mpc[valid] = 1.0 + catt[valid] * treat_days / cost[valid]
    return mpc, valid


@dataclass
class EffectSet:
    consumer_id: np.ndarray
    treat: np.ndarray
    catt: np.ndarray
    psi: np.ndarray
    e_hat: np.ndarray
    m_hat: np.ndarray
    delta_y: np.ndarray
    cost_hat: np.ndarray | None = None
    mpc: np.ndarray | None = None

    COLUMNS = ["consumer_id", "catt", "psi", "e_hat", "m_hat", "cost_hat", "mpc"]

    def to_frame(self) -> pd.DataFrame:
        n = len(self.consumer_id)
        nan = np.full(n, np.nan)
        return pd.DataFrame({
            "consumer_id": self.consumer_id,
            "catt": self.catt, "psi": self.psi, "e_hat": self.e_hat, "m_hat": self.m_hat,
            "cost_hat": nan if self.cost_hat is None else self.cost_hat,
            "mpc": nan if self.mpc is None else self.mpc,
        })

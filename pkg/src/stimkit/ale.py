"""Accumulated local effects of a fitted effect surface, and the demand/supply
variance decomposition built from them."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestRegressor

from ._validation import check_finite, check_matrix, check_same_length
from .exceptions import DataError, EstimationError

logger = logging.getLogger(__name__)

DEMAND_SETS = {
    "default": ["wealth", "member", "n_orders_6m", "spend_per_order_6m"],
    # habits and membership left out
    "alternate": ["wealth"],
}
SUPPLY_SET = ["n_restaurants_3km", "nonsme_share_3km"]


class PsiSurface:
    """Regression-forest fit of the doubly robust scores on covariates."""

    def __init__(self, n_estimators: int = 300, min_samples_leaf: int = 20, seed: int = 0):
        self.n_estimators = n_estimators
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed

    def fit(self, X, psi):
        X = check_matrix(X)
        psi = check_finite(np.asarray(psi, float), "psi")
        check_same_length(X=X, psi=psi)
        self.model_ = RandomForestRegressor(
            n_estimators=self.n_estimators, min_samples_leaf=self.min_samples_leaf,
            max_features=1.0, oob_score=True, random_state=self.seed, n_jobs=-1,
        ).fit(X, psi)
        self.oob_r2_ = float(self.model_.oob_score_) if np.ptp(psi) > 0 else 1.0
        return self

    def predict(self, X):
        return self.model_.predict(check_matrix(X))


def fit_psi_surface(psi, X, seed: int = 0, **params) -> PsiSurface:
    return PsiSurface(seed=seed, **params).fit(X, psi)


@dataclass
class AleCurve:
    name: str
    kind: str                  # "continuous" or "binary"
    bin_edges: np.ndarray
    h_tilde: np.ndarray        # centered curve at the edges
    values: np.ndarray         # centered curve evaluated at each observation
    var_component: float
    merged_bins: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"covariate": self.name, "bin_edge": self.bin_edges, "h_tilde": self.h_tilde})


def _bin_edges(x, n_bins, binning):
    if binning == "equal":
        edges = np.linspace(x.min(), x.max(), n_bins + 1)
    elif binning == "quantile":
        edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)))
    else:
        raise ValueError("binning must be 'equal' or 'quantile'")
    return edges


def ale_curve(surface, X, k: int, n_bins: int = 25, name: str | None = None,
              binning: str = "equal") -> AleCurve:
    """First-order ALE of ``surface.predict`` along column ``k`` of X.

    Observations fall in bins (z_{j-1}, z_j] (the first bin also holds the
    minimum). Local differences at the bin edges are averaged within bins,
    accumulated, interpolated linearly at each observation, and centered so
    the sample mean is zero. A column with two distinct values gets the
    two-level difference instead of a curve.
    """
    X = check_matrix(X)
    x = X[:, k]
    name = name or f"x{k}"
    levels = np.unique(x)
    if levels.size < 2:
        raise DataError(f"covariate '{name}' is constant")
    if levels.size == 2:
        lo, hi = levels
        Xa, Xb = X.copy(), X.copy()
        Xa[:, k], Xb[:, k] = lo, hi
        delta = float(np.mean(surface.predict(Xb) - surface.predict(Xa)))
        vals = np.where(x == hi, delta, 0.0)
        c = vals.mean()
        return AleCurve(name, "binary", levels, np.array([0.0, delta]) - c, vals - c, float(np.var(vals - c)))
    if levels.size < n_bins:
        raise DataError(f"covariate '{name}' has {levels.size} distinct values, fewer than n_bins={n_bins}")

    edges = _bin_edges(x, n_bins, binning)
    merged = 0
    while True:
        idx = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, len(edges) - 2)
        counts = np.bincount(idx, minlength=len(edges) - 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        # drop the upper edge of the empty bin (merge with the next bin), or the lower edge for the last bin
        drop = j + 1 if j + 1 < len(edges) - 1 else j
        edges = np.delete(edges, drop)
        merged += 1
    if merged:
        logger.info("ALE %s: merged %d empty bins", name, merged)

    Xlo, Xhi = X.copy(), X.copy()
    Xlo[:, k] = edges[idx]
    Xhi[:, k] = edges[idx + 1]
    diff = surface.predict(Xhi) - surface.predict(Xlo)
    delta = np.bincount(idx, weights=diff, minlength=len(edges) - 1) / counts
    h = np.r_[0.0, np.cumsum(delta)]
    vals = np.interp(x, edges, h)
    c = vals.mean()
    return AleCurve(name, "continuous", edges, h - c, vals - c, float(np.var(vals - c)), merged)


def ale_curves(surface, X: pd.DataFrame, covariates, n_bins: int = 25, binning: str = "equal") -> dict:
    cols = list(X.columns)
    M = X.to_numpy(float)
    return {c: ale_curve(surface, M, cols.index(c), n_bins, c, binning) for c in covariates}


def variance_decomposition(curves: dict, demand_set=None, supply_set=None) -> dict:
    """Shares of ALE variance attributable to demand-side and supply-side covariates."""
    demand_set = list(demand_set or DEMAND_SETS["default"])
    supply_set = list(supply_set or SUPPLY_SET)
    missing = [c for c in demand_set + supply_set if c not in curves]
    if missing:
        raise DataError(f"no ALE curve for {missing}")
    var_d = float(sum(curves[c].var_component for c in demand_set))
    var_s = float(sum(curves[c].var_component for c in supply_set))
    total = var_d + var_s
    if total <= 0:
        raise EstimationError("all ALE variance components are zero")
    return {"omega_D": var_d / total, "omega_S": var_s / total, "var_D": var_d, "var_S": var_s}

"""Honest causal forest on residualized outcome and treatment."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_binary, check_finite, check_fraction, check_matrix, check_same_length
from ..exceptions import ConfigError, EstimationError
from . import _kernels


class CausalForest(RegressorMixin, BaseEstimator):
    """Ensemble of honest causal trees grown on (Y - m_hat, W - e_hat).

    Splits maximize heterogeneity of a gradient pseudo-outcome for the
    node-level residual-on-residual slope. Each tree's leaves keep moments of
    the residuals from the held-out honest half; a prediction pools those
    moments across trees and returns the implied local slope.

    ``fit`` stores out-of-bag predictions for the training rows in
    ``oob_predictions_`` (original row order).
    """

    def __init__(self, n_trees: int = 2000, min_leaf: int = 5, subsample_rate: float = 0.5,
                 honesty_fraction: float = 0.5, mtry: int | None = None, max_depth: int | None = None,
                 seed: int = 0):
        self.n_trees = n_trees
        self.min_leaf = min_leaf
        self.subsample_rate = subsample_rate
        self.honesty_fraction = honesty_fraction
        self.mtry = mtry
        self.max_depth = max_depth
        self.seed = seed

    def _validate_params(self, p):
        if int(self.n_trees) < 1:
            raise ConfigError("n_trees must be at least 1")
        if int(self.min_leaf) < 1:
            raise ConfigError("min_leaf must be at least 1")
        try:
            check_fraction(self.subsample_rate, "subsample_rate")
            check_fraction(self.honesty_fraction, "honesty_fraction")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        mtry = math.ceil(math.sqrt(p)) if self.mtry is None else int(self.mtry)
        if not 1 <= mtry <= p:
            raise ConfigError(f"mtry must lie in [1, {p}]")
        return mtry

    def fit(self, X, y, treat, m_hat, e_hat):
        X = check_matrix(X)
        n, p = X.shape
        y = check_finite(np.asarray(y, float), "y")
        treat = check_binary(treat).astype(np.int64)
        m_hat = check_finite(np.asarray(m_hat, float), "m_hat")
        e_hat = check_finite(np.asarray(e_hat, float), "e_hat")
        check_same_length(X=X, y=y, treat=treat, m_hat=m_hat, e_hat=e_hat)
        mtry = self._validate_params(p)
        y_res = y - m_hat
        w_res = treat - e_hat

        n_sub = int(n * self.subsample_rate)
        n_struct = int(n_sub * self.honesty_fraction)
        ml = int(self.min_leaf)
        n_t = int(treat.sum())
        need = 2 * ml
        frac = self.subsample_rate * min(self.honesty_fraction, 1 - self.honesty_fraction)
        if n_t * frac < need or (n - n_t) * frac < need:
            raise EstimationError(
                f"too few treated ({n_t}) or control ({n - n_t}) units for honest trees "
                f"with min_leaf={ml}")

        # canonical row order makes the fit independent of the input order
        keys = [treat, w_res, y_res] + [X[:, j] for j in range(p - 1, -1, -1)]
        order = np.lexsort(keys)
        Xs, ys, ws, ts = X[order], y_res[order], w_res[order], treat[order]
        cap = 2 * (max(n_struct, n_sub - n_struct) // (2 * ml)) + 3
        max_depth = -1 if self.max_depth is None else int(self.max_depth)
        out = _kernels.grow_forest(Xs, ys, ws, ts, int(self.seed), int(self.n_trees), n_sub, n_struct,
                                   mtry, ml, max_depth, cap)
        (self.feature_, self.threshold_, self.left_, self.right_, self.depth_,
         self.stats_, self.count_, inbag, self.n_nodes_) = out
        self.n_features_in_ = p
        self.mtry_ = mtry

        oob, used = _kernels.predict_forest(Xs, self.feature_, self.threshold_, self.left_, self.right_,
                                            self.stats_, self.count_, inbag, True)
        pred = np.empty(n)
        pred[order] = oob
        n_used = np.empty(n, dtype=np.int64)
        n_used[order] = used
        missing = ~np.isfinite(pred)
        if missing.any():
            # rows without usable out-of-bag trees fall back to the full forest
            full = self.predict(X[missing])
            pred[missing] = full
        self.oob_predictions_ = pred
        self.oob_tree_counts_ = n_used
        return self

    def predict(self, X):
        check_is_fitted(self, "feature_")
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        dummy = np.zeros((self.feature_.shape[0], X.shape[0]), dtype=np.bool_)
        pred, _ = _kernels.predict_forest(X, self.feature_, self.threshold_, self.left_, self.right_,
                                          self.stats_, self.count_, dummy, False)
        return pred

    def split_counts(self, max_depth: int = 4) -> np.ndarray:
        """(max_depth, p) counts of splits per feature at depths 1..max_depth."""
        check_is_fitted(self, "feature_")
        internal = self.feature_ >= 0
        d = self.depth_[internal] + 1
        f = self.feature_[internal]
        keep = d <= max_depth
        out = np.zeros((max_depth, self.n_features_in_))
        np.add.at(out, (d[keep] - 1, f[keep]), 1.0)
        return out

    def variable_importance(self, max_depth: int = 4, decay: float = 2.0) -> np.ndarray:
        """Depth-weighted split frequencies, normalized to sum to 1."""
        counts = self.split_counts(max_depth)
        totals = counts.sum(axis=1, keepdims=True)
        share = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
        weights = np.arange(1, max_depth + 1, dtype=float) ** -decay
        score = (weights[:, None] * share).sum(axis=0)
        if score.sum() == 0:
            return np.full(self.n_features_in_, 1.0 / self.n_features_in_)
        return score / score.sum()

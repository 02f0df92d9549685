"""Logistic propensity scores, 1:1 nearest-neighbor matching with replacement,
and covariate balance diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary, check_matrix, check_same_length
from .exceptions import DataError, EstimationError

DEFAULT_COVARIATES = ["age", "female", "member", "wealth", "n_orders_6m", "spend_per_order_6m"]


class LogitPropensity(ClassifierMixin, BaseEstimator):
    """Maximum-likelihood logistic regression fitted by IRLS.

    Converges when every component of the score vector is below ``tol`` in
    absolute value (score taken as the gradient of the mean log-likelihood).
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, feature_names=None):
        X = check_matrix(X)
        y = check_binary(y).astype(float)
        check_same_length(X=X, y=y)
        n, p = X.shape
        names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
        if y.sum() == 0 or y.sum() == n:
            raise DataError("propensity model needs at least one treated and one control")
        _check_separation(X, y, names)

        # work on centered/scaled columns for conditioning, map back at the end
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        if np.any(sd == 0):
            bad = names[int(np.flatnonzero(sd == 0)[0])]
            raise EstimationError(f"covariate '{bad}' is constant; drop it from the propensity model")
        D = np.column_stack([np.ones(n), (X - mean) / sd])
        beta = np.zeros(p + 1)
        beta[0] = np.log(y.mean() / (1 - y.mean()))
        grad = np.inf
        for it in range(1, self.max_iter + 1):
            prob = expit(D @ beta)
            grad = D.T @ (y - prob) / n
            if np.max(np.abs(grad)) < self.tol:
                break
            w = prob * (1 - prob)
            if np.min(w) < 1e-12 and np.max(np.abs(D @ beta)) > 30:
                j = int(np.argmax(np.abs(beta[1:])))
                raise EstimationError(f"perfect separation: covariate '{names[j]}' predicts treatment")
            H = (D * w[:, None]).T @ D / n
            try:
                beta = beta + np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                raise EstimationError("propensity Hessian is singular (collinear covariates)") from None
        else:
            prob = expit(D @ beta)
            grad = D.T @ (y - prob) / n
            if np.max(np.abs(grad)) >= self.tol:
                raise EstimationError(
                    f"IRLS did not converge in {self.max_iter} iterations "
                    f"(final gradient norm {np.linalg.norm(grad):.3e})")
            it = self.max_iter
        self.coef_ = beta[1:] / sd
        self.intercept_ = float(beta[0] - np.sum(beta[1:] * mean / sd))
        self.n_iter_ = it
        self.gradient_norm_ = float(np.linalg.norm(grad))
        self.feature_names_in_ = np.array(names, dtype=object)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_matrix(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p1 = expit(self.decision_function(X))
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def _check_separation(X, y, names):
    """Flag any single covariate that splits treated from controls perfectly."""
    t, c = X[y == 1], X[y == 0]
    for j, name in enumerate(names):
        if t[:, j].min() > c[:, j].max() or t[:, j].max() < c[:, j].min():
            raise EstimationError(f"perfect separation: covariate '{name}' predicts treatment")


def fit_propensity(consumers: pd.DataFrame, covariates=None, **params) -> pd.Series:
    """Propensity score for every consumer, indexed by consumer_id."""
    covariates = list(covariates or DEFAULT_COVARIATES)
    missing = [c for c in covariates if c not in consumers]
    if missing:
        raise DataError(f"consumers lack covariates {missing}")
    X = consumers[covariates].to_numpy(float)
    model = LogitPropensity(**params).fit(X, consumers["treat"].to_numpy(), feature_names=covariates)
    scores = model.predict_proba(X)[:, 1]
    out = pd.Series(scores, index=consumers["consumer_id"].to_numpy(), name="propensity")
    out.attrs["model"] = model
    return out


@dataclass
class MatchedSample:
    pairs: pd.DataFrame            # treated_id, control_id, distance
    control_weights: pd.Series     # control_id -> multiplicity
    propensity: pd.Series          # consumer_id -> score

    def weights(self, consumer_ids) -> np.ndarray:
        """Frequency weight per consumer: 1 for matched treated, multiplicity for controls."""
        ids = pd.Index(consumer_ids)
        w = pd.Series(0.0, index=ids)
        treated = ids.isin(self.pairs["treated_id"])
        w[treated] = 1.0
        cw = self.control_weights.reindex(ids).fillna(0.0)
        return (w + cw).to_numpy()


def match_nn(scores, treat, consumer_ids=None, caliper: float | None = None) -> MatchedSample:
    """1:1 nearest-neighbor matching on the score, with replacement.

    Distance ties go to the lexicographically smallest control_id.
    """
    if isinstance(scores, pd.Series) and consumer_ids is None:
        consumer_ids = scores.index.to_numpy()
    scores = np.asarray(scores, dtype=float)
    treat = check_binary(treat)
    ids = np.asarray(consumer_ids if consumer_ids is not None else np.arange(len(scores))).astype(str)
    check_same_length(scores=scores, treat=treat, consumer_ids=ids)
    if np.any((scores <= 0) | (scores >= 1)):
        raise DataError("scores must lie strictly inside (0, 1)")
    ctrl = treat == 0
    if not ctrl.any():
        raise DataError("no controls available for matching")
    if ctrl.all():
        raise DataError("no treated consumers to match")

    cs, cid = scores[ctrl], ids[ctrl]
    order = np.lexsort((cid, cs))
    cs, cid = cs[order], cid[order]
    # one representative per distinct score: the smallest id
    first = np.r_[True, cs[1:] != cs[:-1]]
    us, uid = cs[first], cid[first]

    ts, tid = scores[~ctrl], ids[~ctrl]
    j = np.searchsorted(us, ts)
    left = np.clip(j - 1, 0, len(us) - 1)
    right = np.clip(j, 0, len(us) - 1)
    dl, dr = np.abs(ts - us[left]), np.abs(us[right] - ts)
    take_right = (dr < dl) | ((dr == dl) & (uid[right] < uid[left]))
    pick = np.where(take_right, right, left)
    dist = np.where(take_right, dr, dl)

    pairs = pd.DataFrame({"treated_id": tid, "control_id": uid[pick], "distance": dist})
    if caliper is not None:
        pairs = pairs.loc[pairs["distance"] <= caliper].reset_index(drop=True)
    pairs = pairs.sort_values("treated_id", kind="stable").reset_index(drop=True)
    weights = pairs["control_id"].value_counts().sort_index().astype(np.int64)
    weights.index.name = "control_id"
    return MatchedSample(pairs, weights, pd.Series(scores, index=ids, name="propensity"))


def welch_t(x_t, x_c, w_c=None) -> float:
    """Unequal-variance two-sample t statistic; control values may carry frequency weights."""
    x_t = np.asarray(x_t, float)
    x_c = np.asarray(x_c, float)
    w_c = np.ones(len(x_c)) if w_c is None else np.asarray(w_c, float)
    n_t, n_c = len(x_t), w_c.sum()
    m_t = x_t.mean()
    m_c = np.sum(w_c * x_c) / n_c
    v_t = x_t.var(ddof=1)
    v_c = np.sum(w_c * (x_c - m_c) ** 2) / (n_c - 1)
    denom = np.sqrt(v_t / n_t + v_c / n_c)
    if denom == 0:
        return np.nan
    return float((m_t - m_c) / denom)


def balance_table(consumers: pd.DataFrame, matched: MatchedSample | None, covariates=None) -> pd.DataFrame:
    """Treated vs (weighted) control covariate means with Welch t statistics.

    With ``matched=None`` every control gets weight 1 (the unmatched comparison).
    """
    covariates = list(covariates or DEFAULT_COVARIATES)
    ids = consumers["consumer_id"].to_numpy().astype(str)
    if matched is None:
        t_mask = consumers["treat"].to_numpy() == 1
        c_mask = ~t_mask
        w_c = np.ones(c_mask.sum())
    else:
        t_mask = np.isin(ids, matched.pairs["treated_id"].to_numpy())
        cw = matched.control_weights.reindex(ids).fillna(0.0).to_numpy()
        c_mask = cw > 0
        w_c = cw[c_mask]
    rows = []
    for cov in covariates:
        x = consumers[cov].to_numpy(float)
        xt, xc = x[t_mask], x[c_mask]
        mean_t = xt.mean()
        mean_c = np.sum(w_c * xc) / w_c.sum()
        t = welch_t(xt, xc, w_c)
        rows.append({"covariate": cov, "mean_t": mean_t, "mean_c_weighted": mean_c,
                     "diff": mean_t - mean_c, "t_stat": t, "flagged": bool(np.isnan(t))})
    return pd.DataFrame(rows)

"""Counterfactual targeting: subsidy cost model, RATE curves, SME-weighted
depth-2 policy trees, and the hybrid coupon/transfer planner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestRegressor

from ._validation import check_finite, check_matrix, check_same_length
from .exceptions import ConfigError, DataError, EstimationError

Q_GRID = np.round(np.arange(1, 11) / 10, 1)


def fit_cost_model(X_treated, cost_treated, X_all, seed: int = 0, **params) -> np.ndarray:
    """Regression forest of realized subsidy on covariates, trained on treated
    consumers and evaluated for everyone."""
    y = np.asarray(cost_treated, float)
    if len(y) < 1:
        raise DataError("cost model needs at least one treated consumer")
    Xt = check_matrix(X_treated)
    y = check_finite(y, "cost")
    check_same_length(X=Xt, cost=y)
    kw = {"n_estimators": 200, "min_samples_leaf": 10, "max_features": 1.0, "n_jobs": -1}
    kw.update(params)
    model = RandomForestRegressor(random_state=seed, **kw).fit(Xt, y)
    return model.predict(check_matrix(X_all))


def _rank(priority, ids) -> np.ndarray:
    """Indices sorted by priority descending, ties by id ascending."""
    priority = np.asarray(priority, float)
    ids = np.asarray(ids).astype(str)
    return np.lexsort((ids, -priority))


def rate_curve(priority, psi, ids, q_grid=Q_GRID, strategy: str = "catt") -> pd.DataFrame:
    """Mean DR score among the top-q share ranked by ``priority``."""
    psi = check_finite(np.asarray(psi, float), "psi")
    priority = check_finite(np.asarray(priority, float), "priority")
    n = check_same_length(priority=priority, psi=psi, ids=np.asarray(ids))
    order = _rank(priority, ids)
    prefix = np.cumsum(psi[order])
    rows = []
    for q in q_grid:
        k = int(np.ceil(q * n - 1e-9))
        if k < 1:
            raise DataError(f"top {q:.0%} of {n} consumers is empty")
        rows.append({"strategy": strategy, "q": float(q), "att": prefix[k - 1] / k})
    return pd.DataFrame(rows)


def rate_curves(catt, psi, ids, X: pd.DataFrame, q_grid=Q_GRID) -> pd.DataFrame:
    """Full-CATT ranking plus one ranking per covariate.

    A covariate ranks in the direction of its correlation with the CATT.
    """
    out = [rate_curve(catt, psi, ids, q_grid, "catt")]
    catt = np.asarray(catt, float)
    for col in X.columns:
        x = X[col].to_numpy(float)
        sign = 1.0
        if np.ptp(x) > 0 and np.ptp(catt) > 0:
            sign = 1.0 if np.corrcoef(x, catt)[0, 1] >= 0 else -1.0
        out.append(rate_curve(sign * x, psi, ids, q_grid, col))
    return pd.concat(out, ignore_index=True)


# --------------------------------------------------------------------------- policy trees


def cut_points(x, n_cuts: int = 20) -> np.ndarray:
    """Interior quantile cut points (distinct, strictly inside the range)."""
    # observed values, so equivalent partitions are not repeated
    qs = np.quantile(np.asarray(x, float), np.arange(1, n_cuts + 1) / (n_cuts + 1), method="lower")
    qs = np.unique(qs)
    return qs[(qs >= np.min(x)) & (qs < np.max(x))]


@dataclass
class Node:
    feature: int | None = None
    cut: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None
    action: int | None = None

    def predict(self, X) -> np.ndarray:
        if self.feature is None:
            return np.full(len(X), self.action, dtype=np.int64)
        go_left = X[:, self.feature] <= self.cut
        out = np.empty(len(X), dtype=np.int64)
        out[go_left] = self.left.predict(X[go_left])
        out[~go_left] = self.right.predict(X[~go_left])
        return out

    def to_dict(self, names) -> dict:
        if self.feature is None:
            return {"action": int(self.action)}
        return {"feature": names[self.feature], "cut": float(self.cut),
                "left": self.left.to_dict(names), "right": self.right.to_dict(names)}


@dataclass
class PolicyTree:
    root: Node
    lam: float
    objective: float
    r_sme: float
    r_large: float
    names: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return self.root.predict(check_matrix(X))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "objective": self.objective, "R_SME": self.r_sme,
                "R_large": self.r_large, "tree": self.root.to_dict(self.names)}


def _best_child(cum, tot):
    """Best subtree (leaf or one split) for every row of a cumulative table.

    ``cum[..., c]`` is the reward sum with child feature at or below cut c and
    ``tot[...]`` the sum over the whole node. Returns value and the chosen
    cut index (-1 for a leaf).
    """
    leaf = np.maximum(tot, 0.0)
    split = np.maximum(cum, 0.0) + np.maximum(tot[..., None] - cum, 0.0)
    if split.shape[-1] == 0:
        return leaf, np.full(leaf.shape, -1)
    best_c = np.argmax(split, axis=-1)
    best = np.take_along_axis(split, best_c[..., None], axis=-1)[..., 0]
    use_split = best > leaf
    return np.where(use_split, best, leaf), np.where(use_split, best_c, -1)


def policy_tree(rewards_sme, rewards_large, X, lam: float, depth: int = 2, n_cuts: int = 20,
                names=None) -> PolicyTree:
    """Exhaustive depth-2 tree maximizing sum over treated of lam*r_sme + (1-lam)*r_large.

    Splits are ``x <= cut`` with cuts at covariate quantiles. Ties resolve to
    the first candidate in (feature, cut) order, leaves before splits, and
    no-treat before treat.
    """
    if depth != 2:
        raise ConfigError("only depth-2 policy trees are supported")
    if not 0.5 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0.5, 1]")
    X = check_matrix(X)
    r_s = check_finite(np.asarray(rewards_sme, float), "rewards_sme")
    r_l = check_finite(np.asarray(rewards_large, float), "rewards_large")
    n = check_same_length(X=X, rewards_sme=r_s, rewards_large=r_l)
    p = X.shape[1]
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    r = lam * r_s + (1 - lam) * r_l

    cuts = [cut_points(X[:, j], n_cuts) for j in range(p)]
    bins = [np.searchsorted(cuts[j], X[:, j], side="left") for j in range(p)]  # x <= cut[b] -> bin <= b
    nb = [len(c) + 1 for c in cuts]
    total = r.sum()

    best_val = max(total, 0.0)
    best = ("leaf",)
    for j in range(p):
        if nb[j] < 2:
            continue
        for jj in range(p):
            H = np.zeros((nb[j], nb[jj]))
            np.add.at(H, (bins[j], bins[jj]), r)
            C = H.cumsum(axis=0).cumsum(axis=1)           # root bin <= a, child bin <= c
            left_cum = C[:-1, :-1]                         # (root cut a, child cut c)
            left_tot = C[:-1, -1]
            right_cum = C[-1, :-1][None, :] - left_cum
            right_tot = total - left_tot
            lv, lc = _best_child(left_cum, left_tot)
            rv, rc = _best_child(right_cum, right_tot)
            # per root cut, keep the best child across child features in feature order
            if jj == 0:
                best_lv, best_lf, best_lc = lv.copy(), np.where(lc >= 0, jj, -1), lc.copy()
                best_rv, best_rf, best_rc = rv.copy(), np.where(rc >= 0, jj, -1), rc.copy()
            else:
                upd = lv > best_lv
                best_lv = np.where(upd, lv, best_lv)
                best_lf = np.where(upd, np.where(lc >= 0, jj, -1), best_lf)
                best_lc = np.where(upd, lc, best_lc)
                upd = rv > best_rv
                best_rv = np.where(upd, rv, best_rv)
                best_rf = np.where(upd, np.where(rc >= 0, jj, -1), best_rf)
                best_rc = np.where(upd, rc, best_rc)
        val = best_lv + best_rv
        a = int(np.argmax(val))
        if val[a] > best_val:
            best_val = float(val[a])
            best = ("split", j, a, (best_lf[a], best_lc[a]), (best_rf[a], best_rc[a]))

    def child_node(mask, spec):
        f, c = spec
        if f < 0:
            return Node(action=int(r[mask].sum() > 0))
        cut = cuts[f][c]
        lm = mask & (X[:, f] <= cut)
        rm = mask & ~(X[:, f] <= cut)
        return Node(int(f), float(cut), Node(action=int(r[lm].sum() > 0)), Node(action=int(r[rm].sum() > 0)))

    if best[0] == "leaf":
        root = Node(action=int(total > 0))
    else:
        _, j, a, lspec, rspec = best
        cut = cuts[j][a]
        lmask = X[:, j] <= cut
        root = Node(j, float(cut), child_node(lmask, lspec), child_node(~lmask, rspec))
    treated = root.predict(X) == 1
    return PolicyTree(root, float(lam), float(r[treated].sum()), float(r_s[treated].sum()),
                      float(r_l[treated].sum()), names)


def policy_frontier(rewards_sme, rewards_large, X, lambdas=(0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
                    n_cuts: int = 20, names=None) -> list[PolicyTree]:
    return [policy_tree(rewards_sme, rewards_large, X, lam, n_cuts=n_cuts, names=names) for lam in lambdas]


# --------------------------------------------------------------------------- hybrid planner


@dataclass
class HybridPlan:
    n_targeted: int
    gov_coupon_cost: float
    consumer_oop: float
    sme_transfer: float
    total_stimulus: float
    selected: np.ndarray

    def as_row(self, label: str) -> dict:
        return {"policy": label, "consumers_treated": self.n_targeted,
                "government_budget": self.gov_coupon_cost, "consumer_oop": self.consumer_oop,
                "funds_for_smes": self.sme_transfer, "total_stimulus": self.total_stimulus}


def make_plan(consumer_oop: float, gov_cost: float, sme_transfer: float = 0.0, n: int = 0,
              selected=None) -> HybridPlan:
    """Assemble a plan; total stimulus = consumer OOP + coupon cost + SME transfer."""
    if sme_transfer < 0:
        raise EstimationError("SME transfer cannot be negative")
    total = consumer_oop + gov_cost + sme_transfer
    return HybridPlan(n, gov_cost, consumer_oop, sme_transfer, total,
                      np.array([] if selected is None else selected))


def _greedy_order(catt, cost, ids):
    return np.lexsort((np.asarray(ids).astype(str), cost, -catt))


def hybrid_plan(catt, cost, budget: float, stimulus_target: float, ids=None) -> HybridPlan:
    """Coupons to the most responsive consumers until coupon stimulus reaches the
    target; the rest of the budget goes to SMEs.

    ``catt`` and ``cost`` share units (e.g. per day). Consumers enter by catt
    descending, then cost ascending, then id.
    """
    catt = check_finite(np.asarray(catt, float), "catt")
    cost = check_finite(np.asarray(cost, float), "cost")
    n = check_same_length(catt=catt, cost=cost)
    ids = np.arange(n).astype(str) if ids is None else np.asarray(ids).astype(str)
    if not budget > 0:
        raise ConfigError("budget must be positive")
    order = _greedy_order(catt, cost, ids)
    cum_cost = np.cumsum(cost[order])
    cum_stim = np.cumsum(catt[order] + cost[order])
    affordable = cum_cost <= budget + 1e-9 * max(1.0, budget)
    hit = np.flatnonzero((cum_stim >= stimulus_target) & affordable)
    if hit.size == 0:
        frontier = float(cum_stim[affordable].max()) if affordable.any() else 0.0
        raise EstimationError(f"stimulus target {stimulus_target:.3f} unreachable within budget "
                              f"{budget:.3f}; maximum achievable coupon stimulus is {frontier:.3f}")
    k = int(hit[0]) + 1
    chosen = order[:k]
    spent = float(cost[chosen].sum())
    return make_plan(float(catt[chosen].sum()), spent, max(budget - spent, 0.0), k, ids[chosen])


def full_targeting_plan(catt, cost, budget: float, ids=None) -> HybridPlan:
    """Coupons in greedy order until the next consumer would exceed the budget."""
    catt = np.asarray(catt, float)
    cost = np.asarray(cost, float)
    n = check_same_length(catt=catt, cost=cost)
    ids = np.arange(n).astype(str) if ids is None else np.asarray(ids).astype(str)
    order = _greedy_order(catt, cost, ids)
    cum_cost = np.cumsum(cost[order])
    k = int(np.searchsorted(cum_cost, budget * (1 + 1e-12), side="right"))
    chosen = order[:k]
    return make_plan(float(catt[chosen].sum()), float(cost[chosen].sum()), 0.0, k, ids[chosen])

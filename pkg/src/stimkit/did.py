"""Average-effect estimation on the consumer x day panel.

All regressions absorb consumer and date fixed effects by a within
transformation and cluster standard errors by consumer (CR1). Matched
controls enter through frequency weights that are constant within consumer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import DataError, EstimationError

logger = logging.getLogger(__name__)


@dataclass
class DidResult:
    outcome: str
    att: float
    se_cluster: float
    n_obs: int
    extra: dict = field(default_factory=dict)

    @property
    def t(self) -> float:
        return self.att / self.se_cluster if self.se_cluster > 0 else float("nan")

    def as_row(self) -> dict:
        return {"outcome": self.outcome, "coefficient": self.att, "se": self.se_cluster,
                "t": self.t, "n": self.n_obs}


def results_frame(results) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in results if r is not None],
                        columns=["outcome", "coefficient", "se", "t", "n"])


# --------------------------------------------------------------------------- core regression


def absorb(values: np.ndarray, unit: np.ndarray, time: np.ndarray, w: np.ndarray,
           tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Weighted two-way demeaning by alternating projections.

    ``values`` is (cells, k). On a balanced panel with weights constant
    within unit the first sweep is already exact.
    """
    out = np.array(values, dtype=float, copy=True)
    if out.ndim == 1:
        out = out[:, None]
    nu, nt = unit.max() + 1, time.max() + 1
    wu = np.bincount(unit, weights=w, minlength=nu)
    wt = np.bincount(time, weights=w, minlength=nt)
    wu[wu == 0] = 1.0
    wt[wt == 0] = 1.0
    scale = np.maximum(np.abs(out).max(axis=0), 1.0)
    for _ in range(max_iter):
        shift = 0.0
        for idx, tot, m in ((unit, wu, nu), (time, wt, nt)):
            means = np.column_stack([np.bincount(idx, weights=w * out[:, j], minlength=m)
                                     for j in range(out.shape[1])]) / tot[:, None]
            out -= means[idx]
            shift = max(shift, float(np.max(np.abs(means) / scale)))
        if shift < tol:
            break
    else:
        raise EstimationError("fixed-effect absorption did not converge")
    return out


def cluster_ols(y, X, w, cluster, n_absorbed: int):
    """Weighted OLS on pre-demeaned data with CR1 cluster-robust covariance.

    ``n_absorbed`` counts absorbed fixed effects that are not nested in the
    clusters (the date effects), used in the small-sample factor.
    """
    Xw = X * w[:, None]
    XtX = X.T @ Xw
    if np.linalg.matrix_rank(XtX) < X.shape[1] or np.any(np.diag(XtX) <= 1e-12 * max(1.0, XtX.max())):
        raise EstimationError("regressor is collinear with the fixed effects")
    beta = np.linalg.solve(XtX, Xw.T @ y)
    resid = y - X @ beta
    G = int(cluster.max()) + 1
    scores = np.column_stack([np.bincount(cluster, weights=Xw[:, j] * resid, minlength=G)
                              for j in range(X.shape[1])])
    used = np.bincount(cluster, weights=w, minlength=G) > 0
    g = int(used.sum())
    if g < 2:
        raise EstimationError("need at least two clusters")
    meat = scores[used].T @ scores[used]
    bread = np.linalg.inv(XtX)
    N = float(w.sum())
    K = X.shape[1] + n_absorbed
    factor = g / (g - 1) * (N - 1) / (N - K)
    V = factor * bread @ meat @ bread
    return beta, V, resid, g


def _treat_vector(treat, ids: np.ndarray) -> np.ndarray:
    if isinstance(treat, pd.Series):
        out = treat.reindex(ids)
        if out.isna().any():
            raise DataError("treat flags missing for some panel consumers")
        return out.to_numpy().astype(float)
    if isinstance(treat, pd.DataFrame):
        return _treat_vector(treat.set_index("consumer_id")["treat"], ids)
    arr = np.asarray(treat, dtype=float)
    if len(arr) != len(ids):
        raise DataError("treat vector length differs from the number of panel consumers")
    return arr


def _weight_vector(weights, ids: np.ndarray) -> np.ndarray:
    if weights is None:
        return np.ones(len(ids))
    if isinstance(weights, pd.Series):
        return weights.reindex(ids).fillna(0.0).to_numpy(float)
    arr = np.asarray(weights, dtype=float)
    if len(arr) != len(ids):
        raise DataError("weights length differs from the number of panel consumers")
    if np.any(arr < 0):
        raise DataError("weights must be nonnegative")
    return arr


@dataclass
class _Frame:
    """Panel cells selected for one regression, in integer-coded form."""

    y: np.ndarray
    unit: np.ndarray
    time: np.ndarray
    w: np.ndarray
    treat: np.ndarray       # per cell
    post: np.ndarray        # per cell, 1 on the comparison window
    ids: np.ndarray
    dates: np.ndarray


def _frame(panel: pd.DataFrame, treat, weights, outcome, post_tag="treat", mask=None) -> _Frame:
    ids, unit = np.unique(panel["consumer_id"].to_numpy().astype(str), return_inverse=True)
    dates, time = np.unique(panel["date"].to_numpy(), return_inverse=True)
    tag = panel["period_tag"].to_numpy()
    keep = (tag == "pre") | (tag == post_tag)
    if mask is not None:
        keep &= np.asarray(mask, bool)
    tr_u = _treat_vector(treat, ids)
    w_u = _weight_vector(weights, ids)
    if isinstance(outcome, str):
        y = panel[outcome].to_numpy(float)
    else:
        y = np.asarray(outcome, float)
    keep &= w_u[unit] > 0
    keep &= np.isfinite(y)
    unit, time = unit[keep], time[keep]
    # re-code so absorbed dimensions have no empty levels
    uu, unit = np.unique(unit, return_inverse=True)
    tt, time = np.unique(time, return_inverse=True)
    fr = _Frame(y[keep], unit, time, w_u[uu][unit], tr_u[uu][unit],
                (tag[keep] == post_tag).astype(float), ids[uu], dates[tt])
    for grp, label in ((1.0, "treated"), (0.0, "control")):
        for per, pname in ((0.0, "pre"), (1.0, post_tag)):
            if not np.any((fr.treat == grp) & (fr.post == per)):
                raise EstimationError(f"{label} group has no observations in the {pname} period")
    return fr


def _run(fr: _Frame, regressors: np.ndarray, name: str, balanced: bool):
    Z = np.column_stack([fr.y, regressors])
    if balanced:
        Zt = _balanced_demean(Z, fr.unit, fr.time, fr.w)
    else:
        Zt = absorb(Z, fr.unit, fr.time, fr.w)
    beta, V, resid, g = cluster_ols(Zt[:, 0], Zt[:, 1:], fr.w, fr.unit, n_absorbed=len(fr.dates) - 1)
    return beta, V, g


def _balanced_demean(Z, unit, time, w):
    nu, nt = unit.max() + 1, time.max() + 1
    if len(unit) != nu * nt:
        return absorb(Z, unit, time, w)
    k = Z.shape[1]
    M = np.zeros((nu, nt, k))
    M[unit, time] = Z
    wu = np.zeros(nu)
    wu[unit] = w
    M = M - M.mean(axis=1, keepdims=True)
    M = M - np.tensordot(wu, M, axes=(0, 0))[None] / wu.sum()
    return M[unit, time]


def estimate_twfe(panel: pd.DataFrame, treat, outcome="oop", weights=None, *,
                  post_tag: str = "treat", mask=None, name: str | None = None) -> DidResult:
    """TWFE DiD coefficient on Treat x Post with consumer and date effects.

    ``treat`` is a Series indexed by consumer_id (or an array aligned with the
    sorted panel ids); ``weights`` are per-consumer frequency weights.
    Cells tagged ``post_tag`` form the comparison window against ``pre``.
    """
    fr = _frame(panel, treat, weights, outcome, post_tag, mask)
    label = name or (outcome if isinstance(outcome, str) else "outcome")
    beta, V, g = _run(fr, (fr.treat * fr.post)[:, None], label, balanced=mask is None)
    se = float(np.sqrt(max(V[0, 0], 0.0)))
    if not se > 1e-12 * max(1.0, abs(float(beta[0]))):
        # e.g. two clusters: the cluster scores cancel exactly
        logger.warning("%s: clustered standard error degenerate with %d clusters; reported as NaN", label, g)
        se = float("nan")
    return DidResult(label, float(beta[0]), se, len(fr.y), {"clusters": g})


def pretrend_test(panel: pd.DataFrame, treat, outcome="oop", weights=None) -> dict:
    """Joint Wald F test on pre-period day x Treat coefficients (reference: last pre day)."""
    pre = panel.loc[panel["period_tag"] == "pre"]
    dates = np.unique(pre["date"].to_numpy())
    if len(dates) < 5:
        raise DataError(f"pretrend test needs at least 5 pre-period days, got {len(dates)}")
    fr = _frame(pre.assign(period_tag=np.where(pre["date"] == dates[-1], "ref", "pre")),
                treat, weights, outcome, post_tag="ref")
    q = len(fr.dates) - 1
    D = np.zeros((len(fr.y), q))
    rows = np.flatnonzero(fr.time < q)
    D[rows, fr.time[rows]] = fr.treat[rows]
    beta, V, g = _run(fr, D, "pretrend", balanced=True)
    try:
        wald = float(beta @ np.linalg.solve(V, beta))
    except np.linalg.LinAlgError:
        raise EstimationError("event-study covariance is singular") from None
    F = wald / q
    p = float(stats.f.sf(F, q, g - 1))
    return {"F": F, "p_value": p, "df1": q, "df2": g - 1, "coefficients": beta}


def decompose_margins(panel: pd.DataFrame, treat, weights=None) -> list[DidResult]:
    """Per-order and frequency margins of the OOP effect.

    Frequency uses the full balanced panel; per-order ratios use cells with
    at least one order (per-SKU ratios need at least one SKU).
    """
    n_orders = panel["n_orders"].to_numpy(float)
    n_sku = panel["n_sku"].to_numpy(float)
    oop = panel["oop"].to_numpy(float)
    in_window = panel["period_tag"].isin(["pre", "treat"]).to_numpy()
    if not np.any(in_window & (n_orders > 0)):
        raise DataError("no orders in the estimation window")
    with np.errstate(divide="ignore", invalid="ignore"):
        specs = [
            ("oop_per_order", oop / n_orders, n_orders > 0),
            ("order_freq", n_orders, None),
            ("sku_per_order", n_sku / n_orders, n_orders > 0),
            ("oop_per_sku", oop / n_sku, n_sku > 0),
        ]
    return [estimate_twfe(panel, treat, y, weights, mask=m, name=name) for name, y, m in specs]


def substitution_tests(panels: dict, treat, weights=None) -> dict:
    """Grocery spending, utensil sets per order, and the post-program window.

    ``panels`` maps ``grocery`` and ``restaurant`` to daily panels; the
    restaurant panel must include post cells for the intertemporal test.
    """
    out = {}
    if "grocery" in panels:
        out["grocery"] = estimate_twfe(panels["grocery"], treat, "total", weights, name="grocery_spend")
    rest = panels.get("restaurant")
    if rest is not None:
        n_orders = rest["n_orders"].to_numpy(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = rest["n_utensil"].to_numpy(float) / n_orders
        out["utensils"] = estimate_twfe(rest, treat, y, weights, mask=n_orders > 0, name="utensils_per_order")
        if (rest["period_tag"] == "post").any():
            out["intertemporal"] = estimate_twfe(rest, treat, "oop", weights, post_tag="post",
                                                 name="oop_post_window")
        else:
            logger.warning("post window not in panel; intertemporal substitution test skipped")
            out["intertemporal"] = None
    return out


def daily_did(panel: pd.DataFrame, claims: pd.DataFrame, outcome="oop", weights=None) -> DidResult:
    """TWFE with a claim-day indicator in place of Treat x Post."""
    if claims is None or "claimed" not in claims:
        raise DataError("daily DiD needs claims data")
    on = claims.loc[claims["claimed"] == 1, ["consumer_id", "date"]]
    if on.empty:
        raise EstimationError("no claim days in claims data")
    window = panel.loc[panel["period_tag"].isin(["pre", "treat"])]
    key = pd.MultiIndex.from_arrays([window["consumer_id"].astype(str), pd.DatetimeIndex(window["date"])])
    claimed = key.isin(pd.MultiIndex.from_arrays([on["consumer_id"].astype(str), pd.DatetimeIndex(on["date"])]))
    ids, unit = np.unique(window["consumer_id"].to_numpy().astype(str), return_inverse=True)
    _, time = np.unique(window["date"].to_numpy(), return_inverse=True)
    w = _weight_vector(weights, ids)[unit]
    keep = w > 0
    uu, unit = np.unique(unit[keep], return_inverse=True)
    tt, time = np.unique(time[keep], return_inverse=True)
    y = window[outcome].to_numpy(float)[keep]
    coupon = claimed[keep].astype(float)
    Z = np.column_stack([y, coupon])
    Zt = _balanced_demean(Z, unit, time, w[keep])
    beta, V, resid, g = cluster_ols(Zt[:, 0], Zt[:, 1:], w[keep], unit, n_absorbed=len(tt) - 1)
    return DidResult(f"{outcome}_claim_day", float(beta[0]), float(np.sqrt(V[0, 0])), int(keep.sum()),
                     {"clusters": g, "claim_cells": int(coupon.sum())})


def claim_share(claims: pd.DataFrame) -> float:
    """Share of treated consumer-days in the treatment window with a claim."""
    return float(claims["claimed"].mean())


def coupon_mpc(att: float, avg_daily_subsidy: float) -> float:
    """Total spending per unit of subsidy: 1 + att / subsidy."""
    if not avg_daily_subsidy > 0:
        raise EstimationError("average daily subsidy must be positive")
    return 1.0 + att / avg_daily_subsidy


def avg_daily_subsidy(panel: pd.DataFrame, treat, weights=None) -> float:
    """Mean subsidy per treated consumer-day over the treatment window."""
    ids = np.unique(panel["consumer_id"].to_numpy().astype(str))
    tr = pd.Series(_treat_vector(treat, ids), index=ids)
    w = pd.Series(_weight_vector(weights, ids), index=ids)
    cells = panel.loc[panel["period_tag"] == "treat"]
    keep = cells["consumer_id"].map(tr).to_numpy() == 1
    ww = cells["consumer_id"].map(w).to_numpy()[keep]
    s = cells["subsidy"].to_numpy(float)[keep]
    if ww.sum() == 0:
        raise DataError("no treated consumer-days in the treatment window")
    return float(np.sum(ww * s) / ww.sum())


DAY_TYPES = ("redemption", "non_redemption", "pre")


def bunching_histogram(orders: pd.DataFrame, period, bin_width: float = 5.0, upper: float = 200.0,
                       thresholds=(50.0, 100.0), category: str = "restaurant"):
    """Order-amount histograms by day type and spike ratios at each threshold.

    A redemption day is a treatment-window consumer-day with at least one
    discounted order. Returns ``(histogram, spikes)`` DataFrames.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    o = orders.loc[orders["category"] == category]
    tag = period.tag(o["date"])
    disc_day = (o.assign(_d=o["coupon_discount"] > 0)
                .groupby(["consumer_id", "date"])["_d"].transform("any").to_numpy())
    day_type = np.where(tag == "pre", "pre",
                        np.where(tag == "treat", np.where(disc_day, "redemption", "non_redemption"), ""))
    gross = o["gross_amount"].to_numpy(float)
    edges = np.arange(0.0, upper + bin_width, bin_width)
    hist_rows, spike_rows = [], []
    for dt in DAY_TYPES:
        g = gross[day_type == dt]
        counts, _ = np.histogram(g, bins=edges)
        total = max(len(g), 1)
        for lo, c in zip(edges[:-1], counts):
            hist_rows.append({"day_type": dt, "bin_lo": lo, "bin_hi": lo + bin_width,
                              "count": int(c), "density": c / total / bin_width})
        for thr in thresholds:
            above = np.sum((g >= thr) & (g < thr + 5.0))
            below = np.sum((g >= thr - 5.0) & (g < thr))
            ratio = above / below if below > 0 else (np.inf if above > 0 else np.nan)
            spike_rows.append({"day_type": dt, "threshold": thr, "mass_above": int(above),
                               "mass_below": int(below), "spike_ratio": ratio})
    return pd.DataFrame(hist_rows), pd.DataFrame(spike_rows)

"""Spreading consumer-level spending effects over establishments through
observed spending shares."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse

from .exceptions import DataError

logger = logging.getLogger(__name__)


@dataclass
class AllocationMatrix:
    P: sparse.csr_matrix       # consumers x establishments, rows sum to 1 or 0
    consumer_ids: np.ndarray
    establishment_ids: np.ndarray

    @property
    def zero_rows(self) -> np.ndarray:
        return np.asarray(self.P.sum(axis=1)).ravel() == 0

    def column_weights(self, mask) -> np.ndarray:
        """Per-consumer share of spending at establishments where ``mask`` holds."""
        return self.P @ np.asarray(mask, dtype=float)


def allocation_matrix(orders: pd.DataFrame, consumer_ids, establishment_ids, period=None,
                      category: str = "restaurant") -> AllocationMatrix:
    """Row-stochastic spending shares from gross amounts.

    With ``period`` given, only treatment-window orders count. Consumers
    without spending get an all-zero row (logged).
    """
    cids = np.asarray(consumer_ids).astype(str)
    eids = np.asarray(establishment_ids).astype(str)
    o = orders.loc[orders["category"] == category]
    if period is not None:
        o = o.loc[period.tag(o["date"]) == "treat"]
    o = o.loc[o["consumer_id"].astype(str).isin(cids)]
    e_index = pd.Index(eids)
    cols = e_index.get_indexer(o["establishment_id"].astype(str))
    if np.any(cols < 0):
        bad = o["establishment_id"].to_numpy()[np.flatnonzero(cols < 0)[0]]
        raise DataError(f"unknown establishment_id {bad} in allocation orders")
    rows = pd.Index(cids).get_indexer(o["consumer_id"].astype(str))
    spend = sparse.coo_matrix((o["gross_amount"].to_numpy(float), (rows, cols)),
                              shape=(len(cids), len(eids))).tocsr()
    spend.sum_duplicates()
    totals = np.asarray(spend.sum(axis=1)).ravel()
    inv = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    P = sparse.diags(inv) @ spend
    n_zero = int((totals == 0).sum())
    if n_zero:
        logger.info("%d consumers without spending in the allocation window", n_zero)
    return AllocationMatrix(P.tocsr(), cids, eids)


def map_effects(phi, P) -> np.ndarray:
    """Establishment gains: column sums of diag(phi) P."""
    phi = np.asarray(phi, dtype=float)
    mat = P.P if isinstance(P, AllocationMatrix) else P
    if mat.shape[0] != len(phi):
        raise DataError(f"phi has {len(phi)} entries but P has {mat.shape[0]} rows")
    return np.asarray(mat.T @ phi).ravel()


def market_shares(orders: pd.DataFrame, establishment_ids, period=None, category: str = "restaurant"):
    """Each establishment's share of total gross spending."""
    o = orders.loc[orders["category"] == category]
    if period is not None:
        o = o.loc[period.tag(o["date"]) == "treat"]
    spend = o.groupby(o["establishment_id"].astype(str))["gross_amount"].sum()
    spend = spend.reindex(np.asarray(establishment_ids).astype(str)).fillna(0.0).to_numpy()
    if spend.sum() <= 0:
        raise DataError("no spending to compute market shares")
    return spend / spend.sum()


def uniform_counterfactual(phi, P, shares) -> dict:
    """Variance of gains when every consumer allocates at the market shares.

    Only consumers with an allocation row take part, so the counterfactual
    distributes the same total as the actual mapping.
    """
    shares = np.asarray(shares, dtype=float)
    if shares.size < 2:
        raise DataError("need at least two establishments for a variance")
    if not np.isclose(shares.sum(), 1.0, atol=1e-9) or np.any(shares < 0):
        raise DataError("market shares must be nonnegative and sum to 1")
    mat = P.P if isinstance(P, AllocationMatrix) else sparse.csr_matrix(P)
    phi = np.asarray(phi, dtype=float)
    allocated = np.asarray(mat.sum(axis=1)).ravel() > 0
    actual = map_effects(phi, mat)
    uniform = phi[allocated].sum() * shares
    var_a = float(np.var(actual))
    var_u = float(np.var(uniform))
    reduction = 0.0 if var_a == 0 and var_u == 0 else 1.0 - var_u / var_a
    return {"var_actual": var_a, "var_uniform": var_u, "reduction_pct": reduction,
            "tau_actual": actual, "tau_uniform": uniform}


def quantile_labels(values, n_q: int) -> np.ndarray:
    """Quantile group 1..n_q, ties broken by position."""
    if n_q < 2:
        raise ValueError("n_q must be at least 2")
    ranks = pd.Series(np.asarray(values, float)).rank(method="first")
    return pd.qcut(ranks, n_q, labels=False).to_numpy() + 1


def gains_by_quantile(tau, establishments: pd.DataFrame, attribute: str = "sales", n_q: int = 5,
                      redemptions=None) -> pd.DataFrame:
    """Mean gain (and optional redemption count) per quantile of pre-period sales or price."""
    col = {"sales": "avg_monthly_sales_6m", "price": "avg_order_price_6m"}.get(attribute)
    if col is None:
        raise ValueError("attribute must be 'sales' or 'price'")
    q = quantile_labels(establishments[col], n_q)
    df = pd.DataFrame({"quantile": q, "tau": np.asarray(tau, float)})
    if redemptions is not None:
        df["redemptions"] = np.asarray(redemptions, float)
    agg = {"mean_gain": ("tau", "mean"), "total_gain": ("tau", "sum"), "n": ("tau", "size")}
    if redemptions is not None:
        agg["redemptions"] = ("redemptions", "sum")
    out = df.groupby("quantile", sort=True).agg(**agg).reset_index()
    out.insert(0, "attribute", attribute)
    return out


def redemption_counts(orders: pd.DataFrame, establishment_ids) -> np.ndarray:
    disc = orders.loc[orders["coupon_discount"] > 0, "establishment_id"].astype(str).value_counts()
    return disc.reindex(np.asarray(establishment_ids).astype(str)).fillna(0).to_numpy()

"""Log-linear demand, markups, producer surplus, and MVPF accounting."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .exceptions import DataError, EstimationError

logger = logging.getLogger(__name__)


@dataclass
class DemandFit:
    beta0: float
    beta1: float
    n_obs: int
    winsor_bounds: pd.DataFrame

    @property
    def kappa(self) -> float:
        return 1.0 / self.beta1


def winsorize_by_group(values, groups, lower: float = 5.0, upper: float = 95.0):
    """Clip values to per-group percentile bounds. Returns (clipped, bounds frame)."""
    s = pd.Series(np.asarray(values, float))
    g = pd.Series(np.asarray(groups))
    lo = s.groupby(g).transform(lambda v: np.percentile(v, lower))
    hi = s.groupby(g).transform(lambda v: np.percentile(v, upper))
    bounds = pd.DataFrame({"group": g, "lower": lo, "upper": hi}).drop_duplicates("group")
    return s.clip(lo, hi).to_numpy(), bounds.reset_index(drop=True)


def estimate_demand(quantity, price, day=None, winsor=(5.0, 95.0)) -> DemandFit:
    """Pooled OLS of ln Q on ln p after per-day winsorizing of prices.

    Model: ln Q = beta0 - beta1 ln p. ``winsor=None`` skips the clipping.
    """
    q = np.asarray(quantity, float)
    p = np.asarray(price, float)
    if q.shape != p.shape:
        raise DataError("quantity and price differ in length")
    if len(q) < 30:
        raise DataError(f"demand estimation needs at least 30 establishment-days, got {len(q)}")
    if np.any(q <= 0) or np.any(p <= 0):
        raise DataError("quantities and prices must be positive")
    day = np.zeros(len(q)) if day is None else np.asarray(day)
    if winsor is None:
        p_w, bounds = p, pd.DataFrame(columns=["group", "lower", "upper"])
    else:
        p_w, bounds = winsorize_by_group(p, day, *winsor)
    x = np.log(p_w)
    y = np.log(q)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise EstimationError("no price variation after winsorizing")
    slope = float(xc @ (y - y.mean())) / sxx
    beta1 = -slope
    beta0 = float(y.mean() - slope * x.mean())
    if beta1 <= 0:
        raise EstimationError(f"upward-sloping demand (beta1={beta1:.4f})")
    if beta1 <= 1:
        logger.warning("nonpositive markup: beta1=%.4f <= 1", beta1)
    return DemandFit(beta0, beta1, len(q), bounds)


def estimate_demand_frame(establishment_days: pd.DataFrame, period=None) -> DemandFit:
    """Demand fit from an establishment-day table, pre-period only, positive sales only."""
    df = establishment_days
    if period is not None:
        df = df.loc[period.tag(df["date"]) == "pre"]
    pos = (df["n_orders"] > 0) & (df["avg_price"] > 0)
    dropped = int((~pos).sum())
    if dropped:
        logger.info("demand fit: dropping %d establishment-days without sales", dropped)
    df = df.loc[pos]
    return estimate_demand(df["n_orders"], df["avg_price"], df["date"])


def producer_surplus_delta(fit, tau):
    """Per-establishment profit change kappa * tau and its total."""
    beta1 = fit.beta1 if isinstance(fit, DemandFit) else float(fit)
    tau = np.asarray(tau, float)
    d = tau / beta1
    return d, float(d.sum())


def consumer_gain(catt, subsidies, threshold: float = 0.0) -> float:
    """Realized subsidies of consumers whose effect is at most ``threshold``."""
    catt = np.asarray(catt, float)
    sub = np.asarray(subsidies, float)
    if catt.shape != sub.shape:
        raise DataError("catt and subsidies differ in length")
    return float(sub[catt <= threshold].sum())


def mvpf(consumer_gain: float, producer_gain: float, gov_cost: float) -> float:
    if not gov_cost > 0:
        raise EstimationError("government cost must be positive")
    return (consumer_gain + producer_gain) / gov_cost


@dataclass
class WelfareAccount:
    consumer_gain: float
    producer_gain: float
    gov_cost: float
    mvpf: float
    beta0: float
    beta1: float
    kappa: float

    def to_dict(self) -> dict:
        return asdict(self)

"""Seeded synthetic coupon program with a planted treatment-effect function.

The generator produces the same CSV tables that :func:`stimkit.panel.ingest_dataset`
reads, plus the per-consumer truth used to score the estimators.

Mechanics
---------
Every consumer-day draws a Poisson number of restaurant orders with rate
``lambda_i * s_t`` (``s_t`` is a weekday/weekend factor) and log-normal
amounts with mean ``mu_i``. Treated consumers claim a coupon bundle on each
treatment day with probability ``claim_prob``. On a claim day the bundle
applies to every qualifying order (spend 50 get 15 off, spend 100 get 30 off)
and the planted effect is realized by scaling basket size (``channel="basket"``)
or the order rate (``channel="frequency"``).

How discounts are taken depends on the consumer's behavior type:

* ``rational``: keeps the intended basket when it already qualifies (the
  discount is pure savings) and tops the basket up to just above a threshold
  when it falls within ``bunch_band`` of it.
* ``mental``: keeps out-of-pocket spending at the intended level and spends
  the discount on top of it.
* ``nonredeemer``: never uses a coupon.

The scale factor is solved per consumer so that, with coupon mechanics
included, the expected change in daily out-of-pocket spending over the
treatment window equals the planted ``alpha(X)`` exactly. ``alpha_true`` in
the truth table is that realized expectation (it differs from the formula
only where the scale factor hits its bounds).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.special import expit, logit, ndtr

from .exceptions import ConfigError
from .panel import COVARIATES, DEFAULT_PERIOD, Dataset, PeriodConfig, classify_sme, wealth_index

BEHAVIORS = ("rational", "mental", "nonredeemer")
_TOPUP_WIDTH = 5.0
_SCALE_BOUNDS = (0.05, 60.0)


@dataclass(frozen=True)
class EffectSpec:
    """Planted alpha(X) on z-scored covariates.

    alpha = intercept + sum(linear[k] * z_k) + sum(jump * 1{z_k > cut} for
    steps[k] = (cut, jump)) + sum(quadratic[k] * z_k**2) + noise_sd * N(0, 1)
    """

    intercept: float = 1.8
    linear: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    quadratic: dict = field(default_factory=dict)
    noise_sd: float = 0.0

    def evaluate(self, Z: pd.DataFrame, rng: np.random.Generator) -> np.ndarray:
        alpha = np.full(len(Z), float(self.intercept))
        for name, coef in self.linear.items():
            alpha += coef * Z[name].to_numpy()
        for name, (cut, jump) in self.steps.items():
            alpha += jump * (Z[name].to_numpy() > cut)
        for name, coef in self.quadratic.items():
            alpha += coef * Z[name].to_numpy() ** 2
        if self.noise_sd:
            alpha += self.noise_sd * rng.standard_normal(len(Z))
        return alpha

    def covariates(self) -> set:
        return set(self.linear) | set(self.steps) | set(self.quadratic)


@dataclass(frozen=True)
class SimConfig:
    n_consumers: int = 2000
    n_establishments: int = 400
    seed: int = 0
    period: PeriodConfig = DEFAULT_PERIOD
    effect: EffectSpec = field(default_factory=EffectSpec)
    behavior_mix: dict = field(default_factory=lambda: {"rational": 0.4, "mental": 0.4, "nonredeemer": 0.2})
    quota_share: float = 0.5
    # logit coefficients of treatment on z-scored covariates (selection on observables)
    confounding: dict = field(default_factory=lambda: {"member": 0.25, "n_orders_6m": 0.25, "female": 0.1})
    sorting_rho: float = 0.3
    channel: str = "basket"
    claim_prob: float = 0.1
    bunch_band: float = 10.0
    amount_sigma: float = 0.5
    orders_6m_mean: float = 55.0
    orders_6m_shape: float = 1.5
    spend_mean: float = 45.0
    spend_log_sd: float = 0.45
    weekend_lift: float = 0.0
    grocery_rate: float = 0.05
    grocery_mean: float = 60.0
    grocery_offset: float = 0.0
    post_effect: float = 0.0
    pretrend_slope: float = 0.0
    grocery_share: float = 0.05
    demand_beta0: float = 9.8
    demand_beta1: float = 1.5
    city_km: float = 30.0
    choice_k: int = 15

    def __post_init__(self):
        if self.n_consumers < 10:
            raise ConfigError("n_consumers must be at least 10")
        if self.n_establishments < 2:
            raise ConfigError("n_establishments must be at least 2")
        mix = self.behavior_mix
        if set(mix) - set(BEHAVIORS):
            raise ConfigError(f"unknown behavior types {sorted(set(mix) - set(BEHAVIORS))}")
        if any(not 0 <= v <= 1 for v in mix.values()) or not np.isclose(sum(mix.values()), 1.0):
            raise ConfigError("behavior_mix fractions must lie in [0, 1] and sum to 1")
        for name in ("quota_share", "claim_prob", "grocery_share"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0 < self.quota_share < 1:
            raise ConfigError("quota_share must lie strictly inside (0, 1)")
        if abs(self.sorting_rho) > 0.99:
            raise ConfigError(f"sorting_rho={self.sorting_rho} infeasible (|rho| must be <= 0.99)")
        if self.channel not in ("basket", "frequency"):
            raise ConfigError("channel must be 'basket' or 'frequency'")
        if not 0 <= self.bunch_band < 50:
            raise ConfigError("bunch_band must lie in [0, 50)")
        unknown = self.effect.covariates() | set(self.confounding)
        unknown -= set(COVARIATES)
        if unknown:
            raise ConfigError(f"unknown covariates in effect/confounding spec: {sorted(unknown)}")

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["period"] = {k: v.isoformat() for k, v in asdict(self.period).items()}
        return d


@dataclass
class OracleTruth:
    consumers: pd.DataFrame  # consumer_id, alpha_true, cost_true, behavior, claim_effect, scale
    beta0: float
    beta1: float


@dataclass
class Population:
    consumers: pd.DataFrame
    establishments: pd.DataFrame
    truth: OracleTruth
    latent: pd.DataFrame  # per-consumer simulation parameters, aligned with consumers


@dataclass
class Simulation:
    dataset: Dataset
    truth: OracleTruth
    config: SimConfig


# --------------------------------------------------------------------------- lognormal pieces


def _lognormal_pieces(logmean, sigma, a, b):
    """P(a <= G < b) and E[G; a <= G < b] for log G ~ N(logmean, sigma^2)."""
    with np.errstate(divide="ignore"):
        la = np.log(a) if np.isscalar(a) and a > 0 else np.log(np.maximum(a, 1e-300))
    lb = np.inf if np.isinf(b) else np.log(b)
    za, zb = (la - logmean) / sigma, (lb - logmean) / sigma
    prob = ndtr(zb) - ndtr(za)
    partial = np.exp(logmean + sigma**2 / 2) * (ndtr(zb - sigma) - ndtr(za - sigma))
    return prob, partial


def order_mechanics(mean_amount, sigma, behavior, band):
    """Expected out-of-pocket change and expected subsidy per claim-day order.

    ``mean_amount`` is the mean intended basket; amounts are log-normal with
    log-sd ``sigma``. ``behavior`` holds integer codes into BEHAVIORS.
    """
    mean_amount = np.asarray(mean_amount, dtype=float)
    m = np.log(mean_amount) - sigma**2 / 2
    u = _TOPUP_WIDTH / 2
    p_hi, _ = _lognormal_pieces(m, sigma, 100.0, np.inf)
    p_top2, e_top2 = _lognormal_pieces(m, sigma, 100.0 - band, 100.0)
    p_mid, _ = _lognormal_pieces(m, sigma, 50.0, 100.0 - band)
    p_top1, e_top1 = _lognormal_pieces(m, sigma, 50.0 - band, 50.0)
    d_rational = -30 * p_hi + (70 + u) * p_top2 - e_top2 - 15 * p_mid + (35 + u) * p_top1 - e_top1
    s_rational = 30 * (p_hi + p_top2) + 15 * (p_mid + p_top1)
    q30, _ = _lognormal_pieces(m, sigma, 70.0, np.inf)
    q15, _ = _lognormal_pieces(m, sigma, 35.0, 70.0)
    s_mental = 30 * q30 + 15 * q15

    behavior = np.asarray(behavior)
    doop = np.where(behavior == 0, d_rational, 0.0)
    subsidy = np.select([behavior == 0, behavior == 1], [s_rational, s_mental], 0.0)
    return doop, subsidy


def _solve_scale(target, rate, mu, sigma, behavior, band, channel):
    """Scale factor f so the expected claim-day OOP change equals ``target``.

    ``rate`` is the expected number of orders on a claim day.
    """
    lo, hi = _SCALE_BOUNDS

    def excess(f):
        if channel == "basket":
            doop, _ = order_mechanics(mu * f, sigma, behavior, band)
            return rate * (mu * (f - 1) + doop) - target
        doop, _ = order_mechanics(mu, sigma, behavior, band)
        return rate * (f * (mu + doop) - mu) - target

    f_lo = np.full_like(target, lo)
    f_hi = np.full_like(target, hi)
    below = excess(f_lo) >= 0
    above = excess(f_hi) <= 0
    for _ in range(80):
        mid = 0.5 * (f_lo + f_hi)
        pos = excess(mid) > 0
        f_hi = np.where(pos, mid, f_hi)
        f_lo = np.where(pos, f_lo, mid)
    f = 0.5 * (f_lo + f_hi)
    f = np.where(below, lo, np.where(above, hi, f))
    return f, excess(f) + target


def day_factors(period: PeriodConfig, weekend_lift: float) -> np.ndarray:
    dates = period.dates(include_post=True)
    return np.where(dates.dayofweek >= 5, 1.0 + weekend_lift, 1.0)


# --------------------------------------------------------------------------- population


def _bin_midpoint(x, width, lo):
    return lo + width * (np.floor((x - lo) / width) + 0.5)


def gen_population(config: SimConfig) -> Population:
    """Draw consumers, establishments, and the planted truth."""
    ss = np.random.SeedSequence(config.seed)
    rng_c, rng_e, rng_a = (np.random.default_rng(s) for s in ss.spawn(3))
    n = config.n_consumers

    age = _bin_midpoint(np.clip(rng_c.normal(32.3, 8.5, n), 18, 64.99), 5.0, 15.0)
    female = (rng_c.random(n) < 0.64).astype(np.int64)
    member = (rng_c.random(n) < 0.39).astype(np.int64)
    latent_w = rng_c.standard_normal(n)
    phone = _bin_midpoint(np.exp(7.8 + 0.45 * (0.8 * latent_w + 0.6 * rng_c.standard_normal(n))), 500.0, 0.0)
    housing = np.round(np.exp(11.0 + 0.35 * (0.8 * latent_w + 0.6 * rng_c.standard_normal(n))), 0)
    wealth = wealth_index(phone, housing)

    rho = config.sorting_rho
    share = np.clip(0.52 + 0.125 * (rho * wealth + np.sqrt(1 - rho**2) * rng_c.standard_normal(n)), 0, 1)
    n_rest = rng_c.poisson(np.exp(np.log(52.0) - 0.18 + 0.6 * rng_c.standard_normal(n) + 0.1 * wealth))

    k = config.orders_6m_shape
    rate = rng_c.gamma(k, config.orders_6m_mean / k / 182.0, n) * np.where(member == 1, 1.2, 0.87)
    rate = np.maximum(rate, 1.0 / 182.0)
    n_orders_6m = rng_c.poisson(182.0 * rate)
    s = config.spend_log_sd
    mu = np.exp(np.log(config.spend_mean) - s**2 / 2 + s * rng_c.standard_normal(n) + 0.1 * wealth)
    mu = np.maximum(mu, 8.0)
    spend_6m = np.round(mu * np.exp(0.08 * rng_c.standard_normal(n)), 2)

    gx = rng_c.uniform(0, config.city_km, n)
    gy = rng_c.uniform(0, config.city_km, n)

    consumers = pd.DataFrame({
        "consumer_id": [f"C{i:06d}" for i in range(n)],
        "age": age, "female": female, "member": member,
        "phone_price": phone, "housing_price": housing,
        "n_orders_6m": n_orders_6m.astype(float), "spend_per_order_6m": spend_6m,
        "n_restaurants_3km": n_rest.astype(float), "nonsme_share_3km": np.round(share, 6),
        "grid_x": np.round(gx, 4), "grid_y": np.round(gy, 4),
    })
    consumers["wealth"] = wealth
    Z = (consumers[COVARIATES] - consumers[COVARIATES].mean()) / consumers[COVARIATES].std(ddof=0).replace(0, 1)

    index = np.full(n, logit(config.quota_share))
    for name, coef in config.confounding.items():
        index += coef * Z[name].to_numpy()
    treat = (rng_a.random(n) < expit(index)).astype(np.int64)
    consumers.insert(len(consumers.columns) - 1, "treat", treat)

    mix = config.behavior_mix
    probs = np.array([mix.get(b, 0.0) for b in BEHAVIORS])
    behavior = rng_a.choice(len(BEHAVIORS), size=n, p=probs / probs.sum())

    alpha_planted = config.effect.evaluate(Z, rng_a)
    period = config.period
    s_t = day_factors(period, config.weekend_lift)
    tag = period.tag(period.dates(include_post=True))
    s_treat = s_t[tag == "treat"].mean()
    claim_rate = rate * s_treat
    if config.claim_prob > 0:
        scale, claim_effect = _solve_scale(alpha_planted / config.claim_prob, claim_rate, mu,
                                           config.amount_sigma, behavior, config.bunch_band, config.channel)
    else:
        scale, claim_effect = np.ones(n), np.zeros(n)
    alpha_true = config.claim_prob * claim_effect
    if config.channel == "basket":
        _, sub = order_mechanics(mu * scale, config.amount_sigma, behavior, config.bunch_band)
        cost_true = claim_rate * sub
    else:
        _, sub = order_mechanics(mu, config.amount_sigma, behavior, config.bunch_band)
        cost_true = claim_rate * scale * sub
    cost_true = cost_true * config.claim_prob * period.treat_days

    truth = OracleTruth(
        consumers=pd.DataFrame({
            "consumer_id": consumers["consumer_id"],
            "alpha_true": alpha_true,
            "cost_true": cost_true,
            "behavior": np.array(BEHAVIORS)[behavior],
            "alpha_planted": alpha_planted,
            "claim_effect": claim_effect,
            "scale": scale,
        }),
        beta0=config.demand_beta0,
        beta1=config.demand_beta1,
    )
    latent = pd.DataFrame({"rate": rate, "mu": mu, "behavior": behavior, "scale": scale})
    establishments = _gen_establishments(config, rng_e)
    return Population(consumers.drop(columns="wealth"), establishments, truth, latent)


def _gen_establishments(config: SimConfig, rng) -> pd.DataFrame:
    n_total = config.n_establishments
    n_groc = int(round(config.grocery_share * n_total))
    n_rest = n_total - n_groc
    price = np.exp(np.log(53.0) - 0.3 + 0.7 * rng.standard_normal(n_total))
    price = np.clip(price, 8.0, 800.0)
    appeal = 0.8 * rng.standard_normal(n_total)
    daily_q = np.exp(config.demand_beta0 - config.demand_beta1 * np.log(price) + appeal)
    sales = np.round(30.0 * daily_q * price * np.exp(0.05 * rng.standard_normal(n_total)), 2)
    ids = [f"E{k:05d}" for k in range(n_rest)] + [f"G{k:04d}" for k in range(n_groc)]
    est = pd.DataFrame({
        "establishment_id": ids,
        "avg_monthly_sales_6m": sales,
        "avg_order_price_6m": np.round(price, 2),
        "sme_flag": classify_sme(sales, 50.0),
        "grid_x": np.round(rng.uniform(0, config.city_km, n_total), 4),
        "grid_y": np.round(rng.uniform(0, config.city_km, n_total), 4),
    })
    est.attrs["appeal"] = appeal
    est.attrs["is_grocery"] = np.arange(n_total) >= n_rest
    return est


# --------------------------------------------------------------------------- orders


def _apply_mechanics(g, behavior, band, rng):
    """Gross amount and discount for claim-day orders with intended basket g."""
    u = rng.uniform(0, _TOPUP_WIDTH, len(g))
    gross = g.copy()
    disc = np.zeros_like(g)

    r = behavior == 0
    hi = r & (g >= 100)
    top2 = r & (g >= 100 - band) & (g < 100)
    mid = r & (g >= 50) & (g < 100 - band)
    top1 = r & (g >= 50 - band) & (g < 50)
    disc[hi | top2] = 30.0
    disc[mid | top1] = 15.0
    gross[top2] = 100.0 + u[top2]
    gross[top1] = 50.0 + u[top1]

    m = behavior == 1
    d_m = np.where(g >= 70, 30.0, np.where(g >= 35, 15.0, 0.0))
    disc[m] = d_m[m]
    gross[m] = g[m] + d_m[m]
    return gross, disc


def gen_orders(population: Population, config: SimConfig):
    """Generate orders, claims, and full-market establishment-day sales.

    Returns ``(orders, claims, establishment_days)`` DataFrames.
    """
    ss = np.random.SeedSequence([config.seed, 1])
    rng_claim, rng_rest, rng_groc, rng_est, rng_mkt = (np.random.default_rng(s) for s in ss.spawn(5))
    cons = population.consumers
    lat = population.latent
    period = config.period
    dates = period.dates(include_post=True)
    tag = period.tag(dates)
    s_t = day_factors(period, config.weekend_lift)
    n, T = len(cons), len(dates)
    treat = cons["treat"].to_numpy().astype(bool)
    rate, mu, behavior, scale = (lat[c].to_numpy() for c in ("rate", "mu", "behavior", "scale"))

    in_treat = tag == "treat"
    claim = np.zeros((n, T), dtype=bool)
    claim[:, in_treat] = rng_claim.random((n, in_treat.sum())) < config.claim_prob
    claim &= treat[:, None]

    base = rate[:, None] * s_t[None, :]
    amount_scale = np.ones((n, T))
    rate_scale = np.ones((n, T))
    if config.channel == "basket":
        amount_scale = np.where(claim, scale[:, None], 1.0)
    else:
        rate_scale = np.where(claim, scale[:, None], 1.0)
    pre_idx = np.flatnonzero(tag == "pre")
    if config.pretrend_slope:
        extra = config.pretrend_slope * np.arange(len(pre_idx))[None, :]
        adj = 1.0 + extra / (base[:, pre_idx] * mu[:, None])
        amount_scale[:, pre_idx] = np.where(treat[:, None], np.maximum(adj, _SCALE_BOUNDS[0]), 1.0)
    post = tag == "post"
    if config.post_effect:
        adj = 1.0 + config.post_effect / (base[:, post] * mu[:, None])
        amount_scale[:, post] = np.where(treat[:, None], np.maximum(adj, _SCALE_BOUNDS[0]), 1.0)

    counts = rng_rest.poisson(base * rate_scale)
    ci, di = np.nonzero(counts)
    reps = counts[ci, di]
    ci, di = np.repeat(ci, reps), np.repeat(di, reps)
    sig = config.amount_sigma
    g = mu[ci] * amount_scale[ci, di] * np.exp(sig * rng_rest.standard_normal(len(ci)) - sig**2 / 2)
    on_claim = claim[ci, di]
    gross = g.copy()
    disc = np.zeros_like(g)
    gm, dm = _apply_mechanics(g[on_claim], behavior[ci[on_claim]], config.bunch_band, rng_rest)
    gross[on_claim], disc[on_claim] = gm, dm
    gross = np.round(gross, 2)
    n_sku = 1 + rng_rest.poisson(gross / 30.0)
    n_utensil = 1 + rng_rest.poisson(0.4, len(gross))

    est = population.establishments
    is_groc = est.attrs["is_grocery"]
    shop = _choose_shops(cons, est, ~is_groc, ci, config, rng_est)

    # grocery orders
    g_rate = config.grocery_rate * s_t[None, :] * np.ones((n, 1))
    g_scale = np.ones((n, T))
    if config.grocery_offset:
        adj = 1.0 + config.grocery_offset / (g_rate[:, in_treat] * config.grocery_mean)
        g_scale[:, in_treat] = np.where(treat[:, None], np.maximum(adj, _SCALE_BOUNDS[0]), 1.0)
    gcounts = rng_groc.poisson(g_rate)
    gci, gdi = np.nonzero(gcounts)
    greps = gcounts[gci, gdi]
    gci, gdi = np.repeat(gci, greps), np.repeat(gdi, greps)
    gg = np.round(config.grocery_mean * g_scale[gci, gdi]
                  * np.exp(0.5 * rng_groc.standard_normal(len(gci)) - 0.125), 2)
    groc_ids = np.flatnonzero(is_groc)
    if len(groc_ids) == 0:
        groc_ids = np.flatnonzero(~is_groc)
    gshop = groc_ids[rng_groc.integers(0, len(groc_ids), len(gci))]

    orders = pd.DataFrame({
        "ci": np.concatenate([ci, gci]),
        "di": np.concatenate([di, gdi]),
        "establishment_id": est["establishment_id"].to_numpy()[np.concatenate([shop, gshop])],
        "gross_amount": np.concatenate([gross, gg]),
        "coupon_discount": np.concatenate([disc, np.zeros(len(gg))]),
        "n_sku": np.concatenate([n_sku, 1 + rng_groc.poisson(gg / 15.0)]),
        "n_utensil_sets": np.concatenate([n_utensil, np.zeros(len(gg), dtype=np.int64)]),
        "category": np.array(["restaurant"] * len(ci) + ["grocery"] * len(gci), dtype=object),
    })
    orders = orders.sort_values(["ci", "di", "category"], kind="stable").reset_index(drop=True)
    orders.insert(0, "order_id", [f"O{k:09d}" for k in range(len(orders))])
    orders.insert(1, "consumer_id", cons["consumer_id"].to_numpy()[orders["ci"].to_numpy()])
    orders.insert(3, "date", dates[orders["di"].to_numpy()])
    orders = orders.drop(columns=["ci", "di"])

    tci, tdi = np.nonzero(treat[:, None] & in_treat[None, :])
    claims = pd.DataFrame({
        "consumer_id": cons["consumer_id"].to_numpy()[tci],
        "date": dates[tdi],
        "claimed": claim[tci, tdi].astype(np.int64),
    })

    est_days = _gen_establishment_days(est, config, dates[tag == "pre"], rng_mkt)
    return orders, claims, est_days


def _choose_shops(cons, est, is_rest, ci, config, rng):
    rest_idx = np.flatnonzero(is_rest)
    xy = est[["grid_x", "grid_y"]].to_numpy()[rest_idx]
    k = min(config.choice_k, len(rest_idx))
    dist, nbr = cKDTree(xy).query(cons[["grid_x", "grid_y"]].to_numpy(), k=k)
    dist, nbr = dist.reshape(len(cons), k), nbr.reshape(len(cons), k)
    sme = est["sme_flag"].to_numpy()[rest_idx][nbr]
    share = cons["nonsme_share_3km"].to_numpy()[:, None]
    appeal = est.attrs["appeal"][rest_idx][nbr]
    w = np.exp(-dist / 2.0 + 0.5 * appeal) * np.where(sme == 1, 1 - share + 0.02, share + 0.02)
    cum = np.cumsum(w, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(len(ci))
    pick = (cum[ci] < u[:, None]).sum(axis=1)
    return rest_idx[nbr[ci, np.minimum(pick, k - 1)]]


def _gen_establishment_days(est, config, pre_dates, rng) -> pd.DataFrame:
    rest = ~est.attrs["is_grocery"]
    ids = est["establishment_id"].to_numpy()[rest]
    price = est["avg_order_price_6m"].to_numpy()[rest]
    appeal = est.attrs["appeal"][rest]
    m, T = len(ids), len(pre_dates)
    p_day = price[:, None] * np.exp(0.15 * rng.standard_normal((m, T)))
    lam = np.exp(config.demand_beta0 - config.demand_beta1 * np.log(p_day) + appeal[:, None]
                 + 0.1 * rng.standard_normal((m, T)))
    q = rng.poisson(lam).astype(float)
    return pd.DataFrame({
        "establishment_id": np.repeat(ids, T),
        "date": np.tile(pre_dates.to_numpy(), m),
        "n_orders": q.ravel(),
        "avg_price": np.round(p_day.ravel(), 2),
    })


# --------------------------------------------------------------------------- driver


def simulate(config: SimConfig) -> Simulation:
    pop = gen_population(config)
    orders, claims, est_days = gen_orders(pop, config)
    consumers = pop.consumers.copy()
    consumers["wealth"] = wealth_index(consumers["phone_price"], consumers["housing_price"])
    est = pop.establishments.copy()
    est.attrs = {}
    ds = Dataset(consumers, orders, est, config.period, claims, est_days,
                 counts={"consumers": len(consumers), "orders": len(orders), "establishments": len(est)})
    return Simulation(ds, pop.truth, config)


def _fmt_frame(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    for col in out.columns:
        if np.issubdtype(out[col].dtype, np.datetime64):
            out[col] = out[col].dt.strftime("%Y-%m-%d")
    return out


def write_simulation(sim: Simulation, outdir) -> list[Path]:
    """Write the simulated file set in the ingestion schemas plus truth.csv."""
    from .panel import FILES

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ds = sim.dataset
    tables = {
        "consumers": ds.consumers.drop(columns="wealth"),
        "orders": ds.orders,
        "establishments": ds.establishments,
        "claims": ds.claims,
        "establishment_days": ds.establishment_days,
    }
    written = []
    for key, frame in tables.items():
        fname, schema = FILES[key]
        path = outdir / fname
        _fmt_frame(frame[list(schema)]).to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
        written.append(path)
    path = outdir / "truth.csv"
    sim.truth.consumers[["consumer_id", "alpha_true", "cost_true"]].to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n")
    written.append(path)
    path = outdir / "period.cfg"
    path.write_text(sim.config.period.to_text())
    written.append(path)
    return written

import hashlib

import numpy as np
import pandas as pd
import pytest

from stimkit.exceptions import ConfigError
from stimkit.forest import first_difference
from stimkit.panel import build_daily_panel, validate_orders
from stimkit.simulate import EffectSpec, SimConfig, gen_population, simulate, write_simulation


def _digest(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


def test_same_seed_byte_identical(tmp_path):
    cfg = SimConfig(n_consumers=300, n_establishments=50, seed=9)
    a = _digest(write_simulation(simulate(cfg), tmp_path / "a"))
    b = _digest(write_simulation(simulate(cfg), tmp_path / "b"))
    assert a == b
    c = _digest(write_simulation(simulate(cfg.with_(seed=10)), tmp_path / "c"))
    assert c["orders.csv"] != a["orders.csv"]


def test_minimal_population():
    sim = simulate(SimConfig(n_consumers=10, n_establishments=5, seed=1))
    assert len(sim.dataset.consumers) == 10
    validate_orders(sim.dataset.orders)
    assert np.isfinite(sim.truth.consumers["alpha_true"]).all()


@pytest.mark.parametrize("rho", [0.0, 0.3])
def test_sorting_correlation(rho):
    pop = gen_population(SimConfig(n_consumers=10_000, n_establishments=50, seed=4, sorting_rho=rho))
    wealth = pop.latent["wealth"] if "wealth" in pop.latent else None
    cons = pop.consumers
    from stimkit.panel import wealth_index

    w = wealth_index(cons["phone_price"], cons["housing_price"]) if wealth is None else wealth
    r = np.corrcoef(w, cons["nonsme_share_3km"])[0, 1]
    assert abs(r - rho) < 0.05


def test_infeasible_rho():
    with pytest.raises(ConfigError):
        SimConfig(sorting_rho=0.995)


def test_behavior_mix_validated():
    with pytest.raises(ConfigError):
        SimConfig(behavior_mix={"rational": 0.5, "mental": 0.2})


def test_nonredeemers_get_no_discounts():
    sim = simulate(SimConfig(n_consumers=400, n_establishments=40, seed=2,
                             behavior_mix={"nonredeemer": 1.0}))
    assert (sim.dataset.orders["coupon_discount"] == 0).all()


def test_orders_satisfy_threshold_rules(small_sim):
    validate_orders(small_sim.dataset.orders)
    o = small_sim.dataset.orders
    tag = small_sim.config.period.tag(o["date"])
    assert (o.loc[tag != "treat", "coupon_discount"] == 0).all()


def test_planted_constant_effect_recovered():
    # one draw has SE ~0.21 at this size, so the bound is applied to a five-seed average
    diffs, truths = [], []
    for seed in range(5):
        cfg = SimConfig(n_consumers=10_000, n_establishments=100, seed=seed, effect=EffectSpec(intercept=3.0))
        sim = simulate(cfg)
        cons = sim.dataset.consumers
        panel = build_daily_panel(sim.dataset.orders, cons, cfg.period)
        dy = first_difference(panel).reindex(cons["consumer_id"]).to_numpy()
        t = cons["treat"].to_numpy() == 1
        se = np.sqrt(dy[t].var() / t.sum() + dy[~t].var() / (~t).sum())
        diffs.append(dy[t].mean() - dy[~t].mean())
        assert abs(diffs[-1] - 3.0) < 4 * se
        truths.append(sim.truth.consumers.loc[t, "alpha_true"].mean())
    assert np.mean(diffs) == pytest.approx(3.0, abs=0.3)
    assert np.mean(truths) == pytest.approx(3.0, abs=0.05)


def test_buncher_spike():
    cfg = SimConfig(n_consumers=3000, n_establishments=100, seed=3, behavior_mix={"rational": 1.0})
    o = simulate(cfg).dataset.orders
    o = o.loc[o["category"] == "restaurant"]
    redeem_days = o.loc[o["coupon_discount"] > 0, ["consumer_id", "date"]].drop_duplicates()
    o = o.merge(redeem_days, on=["consumer_id", "date"])
    g = o["gross_amount"]
    above = ((g >= 50) & (g < 55)).sum()
    below = ((g >= 45) & (g < 50)).sum()
    assert above >= 3 * max(below, 1)


def test_pre_period_groups_balanced_in_trend(small_sim):
    cons = small_sim.dataset.consumers
    panel = build_daily_panel(small_sim.dataset.orders, cons, small_sim.config.period)
    pre = panel.loc[panel["period_tag"] == "pre"].merge(cons[["consumer_id", "treat"]], on="consumer_id")
    # daily treated-minus-control gap should not drift across pre days
    daily = pre.groupby(["date", "treat"])["oop"].mean().unstack()
    gap = daily[1] - daily[0]
    per = pre.groupby(["consumer_id", "treat"])["oop"].mean().reset_index()
    se = np.sqrt(sum(per.loc[per["treat"] == k, "oop"].var() / (per["treat"] == k).sum() for k in (0, 1)))
    assert abs(gap.iloc[-7:].mean() - gap.iloc[:7].mean()) < 3 * se


def test_truth_consistency(small_sim):
    truth = small_sim.truth.consumers
    cons = small_sim.dataset.consumers
    assert list(truth["consumer_id"]) == list(cons["consumer_id"])
    assert (truth["cost_true"] >= 0).all()
    nonred = truth["behavior"] == "nonredeemer"
    assert (truth.loc[nonred, "cost_true"] == 0).all()


def test_config_serializes():
    d = SimConfig().to_dict()
    assert d["period"]["treat_start"] == "2022-07-18"
    assert d["behavior_mix"]["rational"] == pytest.approx(0.4)

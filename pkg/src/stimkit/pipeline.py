"""Pipeline steps behind the CLI. Each step reads the artifacts of earlier
steps from the output directory and writes its own."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import ale as ale_mod
from . import did as did_mod
from . import incidence as inc_mod
from . import policy as pol_mod
from . import psm
from . import welfare as wel_mod
from .config import PipelineConfig
from .exceptions import DataError, DependencyError
from .forest import CausalForest, blp, conditional_mpc, dr_scores, first_difference, fit_nuisances
from .panel import COVARIATES, FILES, build_daily_panel, classify_sme, ingest_dataset
from .simulate import simulate, write_simulation

logger = logging.getLogger(__name__)

STEPS = ["simulate", "match", "did", "forest", "ale", "incidence", "welfare", "target", "tree", "hybrid"]
ARTIFACTS = {
    "simulate": [],  # data/ files, listed at run time
    "match": ["matched.csv", "balance.csv"],
    "did": ["did.csv", "did_summary.json", "bunching.csv"],
    "forest": ["effects.csv", "blp.csv", "importance.csv"],
    "ale": ["ale.csv", "decomposition.csv"],
    "incidence": ["gains.csv", "incidence.json"],
    "welfare": ["welfare.json"],
    "target": ["rate.csv"],
    "tree": ["tree.json"],
    "hybrid": ["hybrid.csv"],
}
REQUIRES = {
    "match": [], "did": ["match"], "forest": ["match"], "ale": ["forest"], "incidence": ["forest"],
    "welfare": ["incidence"], "target": ["forest"], "tree": ["forest"], "hybrid": ["forest"],
}
# seed offsets so each randomized step draws its own stream from the master seed
_SEED = {"nuisance": 11, "forest": 13, "cost": 17, "surface": 19}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


class Context:
    """Lazily loaded inputs shared by the steps of one invocation."""

    def __init__(self, cfg: PipelineConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def data_dir(self) -> Path:
        return self.out / "data" if self.cfg.simulate else Path(self.cfg.data_dir)

    def need(self, step: str):
        for prior in REQUIRES.get(step, []):
            missing = [a for a in ARTIFACTS[prior] if not (self.out / a).exists()]
            if missing:
                raise DependencyError(f"'{step}' needs the output of '{prior}' ({missing[0]} not found in "
                                      f"{self.out}); run `stimkit {prior}` first")
        if self.cfg.simulate and step != "simulate" and not (self.data_dir / FILES["consumers"][0]).exists():
            raise DependencyError(f"'{step}' needs simulated data ({self.data_dir} is empty); "
                                  "run `stimkit simulate` first")

    @cached_property
    def dataset(self):
        return ingest_dataset(self.data_dir, self.cfg.period)

    @cached_property
    def matched(self) -> psm.MatchedSample:
        df = pd.read_csv(self.out / "matched.csv", dtype={"treated_id": str, "control_id": str})
        weights = df["control_id"].value_counts().sort_index().astype(np.int64)
        prop = pd.concat([pd.Series(df["propensity_treated"].to_numpy(), index=df["treated_id"]),
                          pd.Series(df["propensity_control"].to_numpy(), index=df["control_id"])])
        prop = prop[~prop.index.duplicated()]
        return psm.MatchedSample(df[["treated_id", "control_id", "distance"]], weights, prop)

    @cached_property
    def sample(self) -> pd.DataFrame:
        """Matched treated consumers plus the distinct matched controls, sorted by id."""
        ids = set(self.matched.pairs["treated_id"]) | set(self.matched.control_weights.index)
        cons = self.dataset.consumers
        out = cons.loc[cons["consumer_id"].isin(ids)].sort_values("consumer_id").reset_index(drop=True)
        if out.empty:
            raise DataError("matched sample is empty")
        return out

    @cached_property
    def sample_orders(self) -> pd.DataFrame:
        o = self.dataset.orders
        return o.loc[o["consumer_id"].isin(self.sample["consumer_id"])]

    @cached_property
    def panel(self) -> pd.DataFrame:
        return build_daily_panel(self.sample_orders, self.sample, self.cfg.period, include_post=True)

    @cached_property
    def weights(self) -> np.ndarray:
        return self.matched.weights(self.sample["consumer_id"].to_numpy())

    @property
    def treat(self) -> pd.Series:
        return self.sample.set_index("consumer_id")["treat"]

    @cached_property
    def window_subsidy(self) -> np.ndarray:
        """Realized subsidy per sample consumer over the treatment window."""
        cells = self.panel.loc[self.panel["period_tag"] == "treat"]
        s = cells.groupby("consumer_id")["subsidy"].sum()
        return s.reindex(self.sample["consumer_id"]).fillna(0.0).to_numpy()

    @cached_property
    def effects(self) -> pd.DataFrame:
        eff = pd.read_csv(self.out / "effects.csv", dtype={"consumer_id": str})
        if not np.array_equal(eff["consumer_id"].to_numpy(), self.sample["consumer_id"].to_numpy()):
            raise DataError("effects.csv does not match the matched sample; rerun `stimkit forest`")
        return eff

    @cached_property
    def restaurant_ids(self) -> np.ndarray:
        o = self.dataset.orders
        ids = set(o.loc[o["category"] == "restaurant", "establishment_id"])
        est = self.dataset.establishments
        return est.loc[est["establishment_id"].isin(ids), "establishment_id"].to_numpy().astype(str)

    def X(self, columns=None) -> pd.DataFrame:
        return self.sample[list(columns or COVARIATES)]


# --------------------------------------------------------------------------- steps


def step_simulate(ctx: Context) -> list[Path]:
    if not ctx.cfg.simulate:
        raise DependencyError("'simulate' is disabled: the config points at data.dir")
    sim = simulate(ctx.cfg.sim)
    return write_simulation(sim, ctx.data_dir)


def step_match(ctx: Context) -> list[Path]:
    cons = ctx.dataset.consumers
    covs = list(ctx.cfg.match_covariates)
    scores = psm.fit_propensity(cons, covs)
    m = psm.match_nn(scores, cons["treat"].to_numpy(), cons["consumer_id"].to_numpy(), ctx.cfg.caliper)
    pairs = m.pairs.assign(
        propensity_treated=scores.reindex(m.pairs["treated_id"]).to_numpy(),
        propensity_control=scores.reindex(m.pairs["control_id"]).to_numpy(),
    )
    write_csv(pairs, ctx.out / "matched.csv")
    bal = pd.concat([psm.balance_table(cons, None, covs).assign(sample="unmatched"),
                     psm.balance_table(cons, m, covs).assign(sample="matched")], ignore_index=True)
    write_csv(bal, ctx.out / "balance.csv")
    logger.info("matched %d treated to %d distinct controls", len(m.pairs), len(m.control_weights))
    return [ctx.out / "matched.csv", ctx.out / "balance.csv"]


def step_did(ctx: Context) -> list[Path]:
    panel, treat, w = ctx.panel, ctx.treat, ctx.weights
    results = [did_mod.estimate_twfe(panel, treat, y, w) for y in ("oop", "total", "unsub")]
    results += did_mod.decompose_margins(panel, treat, w)
    grocery = build_daily_panel(ctx.sample_orders, ctx.sample, ctx.cfg.period, category="grocery")
    subs = did_mod.substitution_tests({"grocery": grocery, "restaurant": panel}, treat, w)
    results += [subs["grocery"], subs["utensils"], subs["intertemporal"]]
    summary = {}
    claims = ctx.dataset.claims
    if claims is not None and (claims["claimed"] == 1).any():
        daily = did_mod.daily_did(panel, claims, weights=w)
        results.append(daily)
        share = did_mod.claim_share(claims.loc[claims["consumer_id"].isin(ctx.sample["consumer_id"])])
        summary.update({"daily_coefficient": daily.att, "claim_share": share,
                        "implied_period_att": daily.att * share})
    write_csv(did_mod.results_frame(results), ctx.out / "did.csv")

    pt = did_mod.pretrend_test(panel, treat, weights=w)
    sub = did_mod.avg_daily_subsidy(panel, treat, w)
    summary.update({"pretrend_F": pt["F"], "pretrend_p": pt["p_value"], "pretrend_df": [pt["df1"], pt["df2"]],
                    "att_oop": results[0].att, "avg_daily_subsidy": sub,
                    "coupon_mpc": did_mod.coupon_mpc(results[0].att, sub)})
    hist, spikes = did_mod.bunching_histogram(ctx.sample_orders, ctx.cfg.period)
    summary["spike_ratios"] = spikes.to_dict(orient="records")
    write_json(summary, ctx.out / "did_summary.json")
    write_csv(hist, ctx.out / "bunching.csv")
    return [ctx.out / a for a in ARTIFACTS["did"]]


def step_forest(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    sample = ctx.sample
    X = ctx.X().to_numpy(float)
    treat = sample["treat"].to_numpy()
    dy = first_difference(ctx.panel).reindex(sample["consumer_id"]).to_numpy()
    nu = fit_nuisances(X, dy, treat, cfg.k_folds, seed=cfg.seed + _SEED["nuisance"])
    forest = CausalForest(n_trees=cfg.forest_trees, min_leaf=cfg.forest_min_leaf,
                          subsample_rate=cfg.forest_subsample, honesty_fraction=cfg.forest_honesty,
                          mtry=cfg.forest_mtry, seed=cfg.seed + _SEED["forest"])
    forest.fit(X, dy, treat, nu["m_hat"], nu["e_hat"])
    catt = forest.oob_predictions_
    psi = dr_scores(catt, dy, treat, nu["e_hat"], nu["m_hat"])
    t_mask = treat == 1
    cost_hat = pol_mod.fit_cost_model(X[t_mask], ctx.window_subsidy[t_mask], X, seed=cfg.seed + _SEED["cost"])
    mpc, _ = conditional_mpc(catt, cost_hat, cfg.period.treat_days)
    eff = pd.DataFrame({"consumer_id": sample["consumer_id"], "catt": catt, "psi": psi,
                        "e_hat": nu["e_hat"], "m_hat": nu["m_hat"], "cost_hat": cost_hat, "mpc": mpc})
    write_csv(eff, ctx.out / "effects.csv")
    write_csv(blp(psi, X, COVARIATES).to_frame(), ctx.out / "blp.csv")
    write_csv(pd.DataFrame({"covariate": COVARIATES, "importance": forest.variable_importance()}),
              ctx.out / "importance.csv")
    return [ctx.out / a for a in ARTIFACTS["forest"]]


def step_ale(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    X = ctx.X()
    surface = ale_mod.fit_psi_surface(ctx.effects["psi"].to_numpy(), X.to_numpy(float),
                                      seed=cfg.seed + _SEED["surface"])
    needed = list(dict.fromkeys(ale_mod.DEMAND_SETS["default"] + ale_mod.SUPPLY_SET))
    curves = ale_mod.ale_curves(surface, X, needed, cfg.ale_bins, cfg.ale_binning)
    frames = [c.to_frame().assign(kind=c.kind, var_component=c.var_component, merged_bins=c.merged_bins)
              for c in curves.values()]
    write_csv(pd.concat(frames, ignore_index=True), ctx.out / "ale.csv")
    rows = []
    for scheme, demand in ale_mod.DEMAND_SETS.items():
        dec = ale_mod.variance_decomposition(curves, demand, ale_mod.SUPPLY_SET)
        rows.append({"scheme": scheme, "omega_D": dec["omega_D"], "omega_S": dec["omega_S"],
                     "selected": scheme == cfg.ale_scheme, "surface_oob_r2": surface.oob_r2_})
    write_csv(pd.DataFrame(rows), ctx.out / "decomposition.csv")
    return [ctx.out / a for a in ARTIFACTS["ale"]]


def _phi_treated(ctx: Context):
    eff = ctx.effects
    t_mask = ctx.sample["treat"].to_numpy() == 1
    phi = eff["catt"].to_numpy() * ctx.cfg.period.treat_days + ctx.window_subsidy
    return phi[t_mask], ctx.sample["consumer_id"].to_numpy()[t_mask]


def step_incidence(ctx: Context) -> list[Path]:
    period = ctx.cfg.period
    est = ctx.dataset.establishments
    est = est.loc[est["establishment_id"].isin(ctx.restaurant_ids)].reset_index(drop=True)
    eids = est["establishment_id"].to_numpy()
    phi, ids = _phi_treated(ctx)
    P = inc_mod.allocation_matrix(ctx.dataset.orders, ids, eids, period)
    tau = inc_mod.map_effects(phi, P)
    shares = inc_mod.market_shares(ctx.dataset.orders, eids, period)
    cf = inc_mod.uniform_counterfactual(phi, P, shares)
    gains = pd.DataFrame({
        "establishment_id": eids, "tau": tau,
        "sales_quantile": inc_mod.quantile_labels(est["avg_monthly_sales_6m"], 5),
        "price_quantile": inc_mod.quantile_labels(est["avg_order_price_6m"], 5),
    })
    write_csv(gains, ctx.out / "gains.csv")
    o = ctx.dataset.orders
    redeem = inc_mod.redemption_counts(o.loc[period.tag(o["date"]) == "treat"], eids)
    zero = P.zero_rows
    summary = {
        "var_actual": cf["var_actual"], "var_uniform": cf["var_uniform"], "reduction_pct": cf["reduction_pct"],
        "total_phi_allocated": float(phi[~zero].sum()), "total_tau": float(tau.sum()),
        "n_unallocated": int(zero.sum()), "phi_unallocated": float(phi[zero].sum()),
        "by_sales_quantile": inc_mod.gains_by_quantile(tau, est, "sales", 5, redeem).to_dict(orient="records"),
        "by_price_quantile": inc_mod.gains_by_quantile(tau, est, "price", 5, redeem).to_dict(orient="records"),
    }
    write_json(summary, ctx.out / "incidence.json")
    return [ctx.out / a for a in ARTIFACTS["incidence"]]


def step_welfare(ctx: Context) -> list[Path]:
    days = ctx.dataset.establishment_days
    if days is None:
        raise DataError("welfare needs establishment_days.csv (daily establishment sales)")
    fit = wel_mod.estimate_demand_frame(days, ctx.cfg.period)
    gains = pd.read_csv(ctx.out / "gains.csv", dtype={"establishment_id": str})
    _, producer = wel_mod.producer_surplus_delta(fit, gains["tau"].to_numpy())
    t_mask = ctx.sample["treat"].to_numpy() == 1
    subsidies = ctx.window_subsidy[t_mask]
    cg = wel_mod.consumer_gain(ctx.effects["catt"].to_numpy()[t_mask], subsidies, ctx.cfg.adjuster_threshold)
    cost = float(subsidies.sum())
    acct = wel_mod.WelfareAccount(cg, producer, cost, wel_mod.mvpf(cg, producer, cost),
                                  fit.beta0, fit.beta1, fit.kappa)
    write_json(acct.to_dict(), ctx.out / "welfare.json")
    return [ctx.out / "welfare.json"]


def step_target(ctx: Context) -> list[Path]:
    eff = ctx.effects
    curves = pol_mod.rate_curves(eff["catt"], eff["psi"], eff["consumer_id"], ctx.X())
    write_csv(curves, ctx.out / "rate.csv")
    return [ctx.out / "rate.csv"]


def tree_rewards(ctx: Context, percentile: float | None = None):
    """Per-consumer SME and non-SME revenue rewards of treating each sample consumer."""
    eff = ctx.effects
    est = ctx.dataset.establishments
    est = est.loc[est["establishment_id"].isin(ctx.restaurant_ids)].reset_index(drop=True)
    pct = ctx.cfg.sme_percentile if percentile is None else percentile
    sme = classify_sme(est["avg_monthly_sales_6m"], pct)
    P = inc_mod.allocation_matrix(ctx.dataset.orders, ctx.sample["consumer_id"], est["establishment_id"],
                                  ctx.cfg.period)
    phi = eff["psi"].to_numpy() * ctx.cfg.period.treat_days + eff["cost_hat"].to_numpy()
    s_share = P.column_weights(sme)
    l_share = P.column_weights(1 - sme)
    return phi * s_share, phi * l_share


def step_tree(ctx: Context) -> list[Path]:
    r_s, r_l = tree_rewards(ctx)
    trees = pol_mod.policy_frontier(r_s, r_l, ctx.X().to_numpy(float), ctx.cfg.lambdas,
                                    ctx.cfg.tree_cuts, COVARIATES)
    doc = {"sme_percentile": ctx.cfg.sme_percentile, "trees": [t.to_dict() for t in trees]}
    write_json(doc, ctx.out / "tree.json")
    return [ctx.out / "tree.json"]


def step_hybrid(ctx: Context) -> list[Path]:
    eff = ctx.effects
    days = ctx.cfg.period.treat_days
    catt = eff["catt"].to_numpy()
    cost_day = eff["cost_hat"].to_numpy() / days
    ids = eff["consumer_id"].to_numpy()
    t_mask = ctx.sample["treat"].to_numpy() == 1
    actual = pol_mod.make_plan(float(catt[t_mask].sum()), float(ctx.window_subsidy[t_mask].sum() / days),
                               0.0, int(t_mask.sum()))
    budget = ctx.cfg.budget if ctx.cfg.budget is not None else actual.gov_coupon_cost
    target = ctx.cfg.target if ctx.cfg.target is not None else actual.consumer_oop + actual.gov_coupon_cost
    full = pol_mod.full_targeting_plan(catt, cost_day, budget, ids)
    hyb = pol_mod.hybrid_plan(catt, cost_day, budget, target, ids)
    rows = [actual.as_row("actual"), full.as_row("full_targeting"), hyb.as_row("hybrid")]
    write_csv(pd.DataFrame(rows), ctx.out / "hybrid.csv")
    return [ctx.out / "hybrid.csv"]


RUNNERS = {
    "simulate": step_simulate, "match": step_match, "did": step_did, "forest": step_forest,
    "ale": step_ale, "incidence": step_incidence, "welfare": step_welfare, "target": step_target,
    "tree": step_tree, "hybrid": step_hybrid,
}


def _versions() -> dict:
    import numba
    import scipy
    import sklearn

    return {"stimkit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__,
            "numba": numba.__version__}


def update_manifest(ctx: Context, step: str, written: list[Path]) -> Path:
    path = ctx.out / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    if doc.get("config") not in (None, ctx.cfg.canonical()) or doc.get("seed") not in (None, ctx.cfg.seed):
        doc = {}  # different run configuration: start afresh
    inputs = {}
    if ctx.data_dir.exists():
        for fname, _ in FILES.values():
            f = ctx.data_dir / fname
            if f.exists():
                inputs[fname] = _sha256(f)
    doc.update({"config": ctx.cfg.canonical(), "seed": ctx.cfg.seed, "versions": _versions(),
                "inputs_sha256": inputs})
    steps = doc.setdefault("steps", {})
    steps[step] = {str(p.relative_to(ctx.out)): _sha256(p) for p in sorted(written)}
    doc["steps"] = {k: steps[k] for k in STEPS if k in steps}
    write_json(doc, path)
    return path


def run_step(ctx: Context, step: str) -> list[Path]:
    ctx.need(step)
    logger.info("running %s", step)
    written = RUNNERS[step](ctx)
    update_manifest(ctx, step, written)
    return written


def run_all(ctx: Context) -> list[Path]:
    written = []
    for step in STEPS:
        if step == "simulate" and not ctx.cfg.simulate:
            continue
        written += run_step(ctx, step)
    return written

"""Acceptance criteria. Each test prints one PASS/FAIL line and asserts it."""

import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import sparse
from scipy.special import expit

from conftest import ACCEPTANCE_LINES, brute_force_tree
from stimkit import did, psm
from stimkit.ale import ale_curves, fit_psi_surface, variance_decomposition
from stimkit.exceptions import EstimationError
from stimkit.forest import CausalForest
from stimkit.forest.effects import blp, dr_scores, fit_nuisances
from stimkit.incidence import map_effects
from stimkit.panel import build_daily_panel
from stimkit.policy import hybrid_plan, make_plan, policy_frontier, policy_tree, rate_curve
from stimkit.simulate import SimConfig, simulate
from stimkit.welfare import estimate_demand, mvpf, producer_surplus_delta

N_SEEDS = 100


def report(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, f"criterion {num} failed: {detail}"


# ---------------------------------------------------------------- DiD on the simulator


def _matched_did(seed: int) -> dict:
    t0 = time.perf_counter()
    sim = simulate(SimConfig(n_consumers=10_000, seed=seed))
    cons = sim.dataset.consumers
    scores = psm.fit_propensity(cons)
    m = psm.match_nn(scores, cons["treat"].to_numpy(), cons["consumer_id"].to_numpy())
    ids = set(m.pairs["treated_id"]) | set(m.control_weights.index)
    sample = cons.loc[cons["consumer_id"].isin(ids)].sort_values("consumer_id").reset_index(drop=True)
    orders = sim.dataset.orders
    panel = build_daily_panel(orders.loc[orders["consumer_id"].isin(ids)], sample, sim.config.period,
                              include_post=True)
    w = m.weights(sample["consumer_id"].to_numpy())
    treat = sample.set_index("consumer_id")["treat"]
    res = did.estimate_twfe(panel, treat, "oop", w)
    pt = did.pretrend_test(panel, treat, weights=w)
    return {"att": res.att, "se": res.se_cluster, "p": pt["p_value"], "secs": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def did_runs():
    return pd.DataFrame([_matched_did(s) for s in range(N_SEEDS)])


def test_criterion_01_did_recovery(did_runs):
    covered = int((np.abs(did_runs["att"] - 1.8) <= 2 * did_runs["se"]).sum())
    slowest = did_runs["secs"].max()
    report(1, "DiD recovery", covered >= 90 and slowest < 60,
           f"{covered}/{N_SEEDS} seeds within 2 SE of 1.8 (mean att {did_runs['att'].mean():.3f}, "
           f"mean se {did_runs['se'].mean():.3f}); slowest seed {slowest:.1f}s")


def test_criterion_02_two_by_two_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 60))
        T = int(rng.integers(2, 8))
        pre = int(rng.integers(1, T))
        Y = rng.normal(size=(n, T)) * rng.uniform(0.1, 10) + rng.normal(size=(n, 1)) * 5
        treat = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        ids = [f"c{i:04d}" for i in range(n)]
        dates = pd.date_range("2022-07-01", periods=T)
        panel = pd.DataFrame({"consumer_id": np.repeat(ids, T), "date": np.tile(dates, n),
                              "period_tag": np.tile(np.where(np.arange(T) < pre, "pre", "treat"), n),
                              "oop": Y.ravel()})
        att = did.estimate_twfe(panel, pd.Series(treat, index=ids)).att
        d = Y[:, pre:].mean(1) - Y[:, :pre].mean(1)
        cells = d[treat == 1].mean() - d[treat == 0].mean()
        worst = max(worst, abs(att - cells) / max(1.0, abs(cells)))
    report(2, "Exact 2x2 identity", worst <= 1e-10, f"max scaled gap {worst:.2e} over 200 random panels")


def test_criterion_03_pretrend_size(did_runs):
    rejections = int((did_runs["p"] < 0.05).sum())
    report(3, "Pre-trend test size", rejections <= 10, f"{rejections}/{N_SEEDS} seeds reject at 5%")


# ---------------------------------------------------------------- forest and DR scores


@pytest.fixture(scope="module")
def forest_oracle():
    rng = np.random.default_rng(4)
    n = 10_000
    X = rng.normal(size=(n, 5))
    e = expit(0.6 * X[:, 2])
    treat = (rng.random(n) < e).astype(int)
    alpha = 2 + 2 * (X[:, 0] > 0) + X[:, 1]
    baseline = 1.5 * X[:, 2] + X[:, 3]
    dy = baseline + treat * alpha + rng.normal(size=n)
    t0 = time.perf_counter()
    nu = fit_nuisances(X, dy, treat, 5, seed=11)
    forest = CausalForest(n_trees=2000, seed=13).fit(X, dy, treat, nu["m_hat"], nu["e_hat"])
    secs = time.perf_counter() - t0
    catt = forest.oob_predictions_
    return {"X": X, "treat": treat, "dy": dy, "alpha": alpha, "e": e, "m": baseline + e * alpha,
            "nu": nu, "catt": catt, "psi": dr_scores(catt, dy, treat, nu["e_hat"], nu["m_hat"]), "secs": secs}


def test_criterion_04_forest_oracle(forest_oracle):
    f = forest_oracle
    corr = np.corrcoef(f["catt"], f["alpha"])[0, 1]
    se = f["psi"].std(ddof=1) / np.sqrt(len(f["psi"]))
    gap = abs(f["psi"].mean() - f["alpha"].mean())
    rmse = np.sqrt(np.mean((f["catt"] - f["alpha"]) ** 2))
    report(4, "Forest oracle", corr >= 0.7 and gap <= 2 * se and f["secs"] < 300,
           f"corr {corr:.3f}; |mean psi - mean alpha| {gap:.4f} vs 2 SE {2 * se:.4f}; "
           f"rmse {rmse:.3f}; fit {f['secs']:.0f}s")


def test_criterion_05_doubly_robust(forest_oracle):
    f = forest_oracle
    target = f["alpha"].mean()
    cases = {
        "wrong m": dr_scores(f["catt"], f["dy"], f["treat"], f["nu"]["e_hat"], np.zeros_like(f["dy"])),
        "wrong e": dr_scores(f["catt"], f["dy"], f["treat"], np.full_like(f["dy"], 0.5), f["nu"]["m_hat"]),
    }
    parts, ok = [], True
    for name, psi in cases.items():
        se = psi.std(ddof=1) / np.sqrt(len(psi))
        gap = abs(psi.mean() - target)
        ok &= gap <= 2 * se
        parts.append(f"{name}: gap {gap:.4f} vs 2 SE {2 * se:.4f}")
    report(5, "Doubly robust score", ok, "; ".join(parts))


def test_criterion_06_blp_exactness(forest_oracle):
    rng = np.random.default_rng(6)
    x = rng.normal(3, 2, size=500)
    psi = 2 + (x - x.mean()) / x.std()
    fit = blp(psi, np.column_stack([x, rng.normal(size=500)]))
    exact = abs(fit.intercept - 2) <= 1e-8 and abs(fit.beta[0] - 1) <= 1e-8
    f = forest_oracle
    real = blp(f["psi"], f["X"])
    same = abs(real.intercept - f["psi"].mean()) <= 1e-8
    report(6, "BLP exactness", exact and same,
           f"intercept {fit.intercept:.10f}, beta1 {fit.beta[0]:.10f}; "
           f"oracle-run intercept - mean(psi) {real.intercept - f['psi'].mean():.1e}")


# ---------------------------------------------------------------- ALE


def test_criterion_07_ale_fidelity():
    rng = np.random.default_rng(7)
    n = 5000
    X = pd.DataFrame(rng.normal(size=(n, 4)), columns=["d1", "d2", "s1", "s2"])
    alpha = 2 * X["d1"] + X["s1"]  # Var(demand) 4, Var(supply) 1
    psi = (alpha + rng.normal(size=n)).to_numpy()
    curves = ale_curves(fit_psi_surface(psi, X.to_numpy(), seed=3), X, list(X.columns))
    omega = variance_decomposition(curves, ["d1", "d2"], ["s1", "s2"])["omega_D"]
    slope = np.polyfit(X["d1"], curves["d1"].values, 1)[0]
    report(7, "ALE fidelity", abs(omega - 0.8) <= 0.05 and abs(slope / 2 - 1) <= 0.1,
           f"omega_D {omega:.3f} (target 0.80); linear slope {slope:.3f} (planted 2)")


# ---------------------------------------------------------------- incidence, demand, MVPF


def test_criterion_08_incidence_conservation():
    psi = map_effects([10.0, 5.0], sparse.csr_matrix([[1.0, 0.0], [0.4, 0.6]]))
    exact = np.array_equal(psi, [12.0, 3.0])
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        n, k = int(rng.integers(1, 300)), int(rng.integers(2, 40))
        M = rng.random((n, k)) * (rng.random((n, k)) < 0.3)
        M[M.sum(1) == 0, rng.integers(0, k)] = 1.0
        M /= M.sum(1, keepdims=True)
        phi = rng.normal(size=n) * 50
        tau = map_effects(phi, sparse.csr_matrix(M))
        worst = max(worst, abs(tau.sum() - phi.sum()) / max(abs(phi).sum(), 1e-12))
    report(8, "Incidence conservation", exact and worst <= 1e-8,
           f"Psi {psi.tolist()}; max relative conservation gap {worst:.1e} over 200 simulations")


def test_criterion_09_demand_markup():
    rng = np.random.default_rng(9)
    p = rng.uniform(5, 60, 400)
    exact = estimate_demand(np.exp(5 - 1.5 * np.log(p)), p, winsor=None)
    exact_ok = abs(exact.beta0 - 5) <= 1e-8 and abs(exact.beta1 - 1.5) <= 1e-8
    p = np.exp(rng.normal(3, 0.5, 2000))
    day = np.repeat(np.arange(40), 50)
    q = np.exp(5 - 1.5 * np.log(p) + rng.normal(0, 0.5, 2000))
    noisy = estimate_demand(q, p, winsor=None)
    winsorized = estimate_demand(q, p, day)
    tau = rng.normal(size=50) * 100
    _, total = producer_surplus_delta(noisy, tau)
    _, total3 = producer_surplus_delta(noisy, 3 * tau)
    linear = (abs(total - tau.sum() / noisy.beta1) <= 1e-8 * abs(total)
              and abs(total3 - 3 * total) <= 1e-8 * abs(total))
    ok = exact_ok and abs(noisy.beta1 - 1.5) <= 0.1 and abs(noisy.kappa - 1 / noisy.beta1) < 1e-15 and linear
    report(9, "Demand/markup", ok,
           f"exact ({exact.beta0:.10f}, {exact.beta1:.10f}); noisy beta1 {noisy.beta1:.3f} "
           f"(per-day winsorized {winsorized.beta1:.3f}); kappa {noisy.kappa:.4f}; linear {linear}")


def test_criterion_10_mvpf_arithmetic():
    v = mvpf(2.0, 2.88, 1.0)
    homog = all(abs(mvpf(2 * s, 2.88 * s, s) - v) <= 1e-12 for s in (0.5, 2.0, 1e3))
    ratio = (7701.772 + 2856.284) / 2856.284
    report(10, "MVPF arithmetic", abs(v - 4.88) <= 1e-12 and homog and f"{ratio:.2f}" == "3.70",
           f"mvpf {v:.2f}; homogeneous {homog}; published MPC identity {ratio:.4f} -> {ratio:.2f}")


# ---------------------------------------------------------------- targeting


def test_criterion_11_rate():
    rng = np.random.default_rng(11)
    n = 5000
    X = rng.normal(size=(n, 4))
    treat = (rng.random(n) < 0.5).astype(int)
    alpha = 1.8 + 2 * X[:, 0]
    dy = X[:, 1] + treat * alpha + rng.normal(size=n)
    nu = fit_nuisances(X, dy, treat, 5, seed=1)
    catt = CausalForest(n_trees=500, seed=2).fit(X, dy, treat, nu["m_hat"], nu["e_hat"]).oob_predictions_
    psi = dr_scores(catt, dy, treat, nu["e_hat"], nu["m_hat"])
    ids = np.arange(n)
    self_curve = rate_curve(psi, psi, ids)["att"].to_numpy()
    mono = bool(np.all(np.diff(self_curve) <= 1e-12))
    curve = rate_curve(catt, psi, ids)["att"].to_numpy()
    report(11, "RATE monotonicity", mono and curve[0] >= 2 * curve[-1],
           f"psi-ranked curve decreasing {mono}; catt-ranked top decile {curve[0]:.3f} vs overall {curve[-1]:.3f}")


def test_criterion_12_policy_tree():
    parts, ok = [], True
    for seed in range(3):
        rng = np.random.default_rng(seed)
        X = np.column_stack([rng.normal(size=200), rng.integers(0, 2, 200), rng.uniform(size=200)])
        r_s = X[:, 0] + rng.normal(size=200)
        r_l = (X[:, 2] - 0.5) * 3 - X[:, 1] + rng.normal(size=200)
        for lam in (0.5, 0.7, 1.0):
            tree = policy_tree(r_s, r_l, X, lam, n_cuts=10)
            best = brute_force_tree(lam * r_s + (1 - lam) * r_l, X, n_cuts=10)
            ok &= abs(tree.objective - best) <= 1e-9
        frontier = [t.r_sme for t in policy_frontier(r_s, r_l, X, n_cuts=10)]
        ok &= bool(np.all(np.diff(frontier) >= -1e-9))
        parts.append("R_SME " + ", ".join(f"{v:.1f}" for v in frontier))
    report(12, "Policy tree", ok, f"brute force matched on 3 instances x 3 lambdas; {'; '.join(parts)}")


def test_criterion_13_hybrid_identity():
    actual = make_plan(7701.772, 2856.284, 0.0)
    hybrid = make_plan(9883.406, 671.975, 2184.309)
    table = round(actual.total_stimulus, 3) == 10558.056 and round(hybrid.total_stimulus, 3) == 12739.690
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(5, 200))
        catt = rng.normal(1, 2, n)
        cost = rng.exponential(1, n) + 0.01
        budget = cost.sum() * rng.uniform(0.3, 1.0)
        try:
            plan = hybrid_plan(catt, cost, budget, stimulus_target=rng.uniform(0, 1) * catt.clip(0).max())
        except EstimationError:
            continue
        assert plan.sme_transfer >= 0
        worst = max(worst, abs(plan.total_stimulus - plan.consumer_oop - plan.gov_coupon_cost - plan.sme_transfer))
    report(13, "Hybrid identity", table and worst <= 1e-9,
           f"published rows {actual.total_stimulus:.3f} and {hybrid.total_stimulus:.3f}; "
           f"max identity gap {worst:.1e} over 300 random plans")


# ---------------------------------------------------------------- end to end


def test_criterion_14_end_to_end(tmp_path):
    exe = shutil.which("stimkit")
    cmd = [exe] if exe else [sys.executable, "-m", "stimkit.cli"]
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 2024\nsimulate = true\nsimulate.n_consumers = 10000\n")
    secs = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        subprocess.run(cmd + ["all", "--config", str(cfg), "--out", str(tmp_path / name), "--quiet"], check=True)
        secs.append(time.perf_counter() - t0)

    def files(root: Path) -> dict:
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    identical = a == b
    report(14, "End-to-end determinism", identical and max(secs) < 600,
           f"{len(a)} files byte-identical {identical}; runs {secs[0]:.0f}s and {secs[1]:.0f}s")

from datetime import date

import numpy as np
import pandas as pd
import pytest

from stimkit.panel import PeriodConfig
from stimkit.policy import cut_points
from stimkit.simulate import SimConfig, simulate

ACCEPTANCE_LINES = []

SHORT_PERIOD = PeriodConfig(date(2022, 7, 1), date(2022, 7, 6), date(2022, 7, 10), date(2022, 7, 13))


@pytest.fixture(scope="session")
def small_sim():
    return simulate(SimConfig(n_consumers=600, n_establishments=80, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def order_frame(rows):
    """Orders from (consumer, establishment, date, gross, discount) tuples."""
    df = pd.DataFrame(rows, columns=["consumer_id", "establishment_id", "date", "gross_amount",
                                     "coupon_discount"])
    df.insert(0, "order_id", [f"O{k}" for k in range(len(df))])
    df["date"] = pd.to_datetime(df["date"])
    df["n_sku"] = 1
    df["n_utensil_sets"] = 1
    df["category"] = "restaurant"
    return df


def brute_force_tree(r, X, n_cuts=20):
    """Best objective over every depth-2 tree on the quantile grid, by direct enumeration."""
    n, p = X.shape
    splits = [(j, c) for j in range(p) for c in cut_points(X[:, j], n_cuts)]

    def best_sub(mask):
        best = max(r[mask].sum(), 0.0)
        for j, c in splits:
            left = mask & (X[:, j] <= c)
            best = max(best, max(r[left].sum(), 0.0) + max(r[mask & ~left].sum(), 0.0))
        return best

    best = max(r.sum(), 0.0)
    for j, c in splits:
        left = X[:, j] <= c
        best = max(best, best_sub(left) + best_sub(~left))
    return best


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

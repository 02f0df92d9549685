"""Data model, CSV ingestion, and the derived variables built from raw records.

Records are held as pandas DataFrames whose columns follow the schemas below.
Column names are part of the file contract and must match exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

CONSUMER_SCHEMA = {
    "consumer_id": "str",
    "age": "float",
    "female": "binary",
    "member": "binary",
    "phone_price": "float",
    "housing_price": "float",
    "n_orders_6m": "float",
    "spend_per_order_6m": "float",
    "n_restaurants_3km": "float",
    "nonsme_share_3km": "float",
    "grid_x": "float",
    "grid_y": "float",
    "treat": "binary",
}
ORDER_SCHEMA = {
    "order_id": "str",
    "consumer_id": "str",
    "establishment_id": "str",
    "date": "date",
    "gross_amount": "float",
    "coupon_discount": "float",
    "n_sku": "int",
    "n_utensil_sets": "int",
    "category": "str",
}
ESTABLISHMENT_SCHEMA = {
    "establishment_id": "str",
    "avg_monthly_sales_6m": "float",
    "avg_order_price_6m": "float",
    "sme_flag": "binary",
    "grid_x": "float",
    "grid_y": "float",
}
CLAIM_SCHEMA = {"consumer_id": "str", "date": "date", "claimed": "binary"}
# Full-market daily sales per establishment, used for demand estimation.
ESTABLISHMENT_DAY_SCHEMA = {
    "establishment_id": "str",
    "date": "date",
    "n_orders": "float",
    "avg_price": "float",
}

FILES = {
    "consumers": ("consumers.csv", CONSUMER_SCHEMA),
    "orders": ("orders.csv", ORDER_SCHEMA),
    "establishments": ("establishments.csv", ESTABLISHMENT_SCHEMA),
    "claims": ("claims.csv", CLAIM_SCHEMA),
    "establishment_days": ("establishment_days.csv", ESTABLISHMENT_DAY_SCHEMA),
}
REQUIRED_FILES = ("consumers", "orders", "establishments")

THRESHOLDS = {15.0: 50.0, 30.0: 100.0}
CATEGORIES = ("restaurant", "grocery")

# Covariates used by the heterogeneity analysis, in canonical order.
COVARIATES = [
    "age",
    "female",
    "member",
    "wealth",
    "n_orders_6m",
    "spend_per_order_6m",
    "n_restaurants_3km",
    "nonsme_share_3km",
]


@dataclass(frozen=True)
class PeriodConfig:
    """Study calendar: pre window, treatment window, post window.

    pre = [pre_start, treat_start), treat = [treat_start, treat_end],
    post = (treat_end, post_end].
    """

    pre_start: date
    treat_start: date
    treat_end: date
    post_end: date

    def __post_init__(self):
        if not (self.pre_start < self.treat_start <= self.treat_end < self.post_end):
            raise ConfigError(
                "period dates must satisfy pre_start < treat_start <= treat_end < post_end, "
                f"got {self.pre_start}, {self.treat_start}, {self.treat_end}, {self.post_end}"
            )

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "PeriodConfig":
        try:
            return cls(**{k: _parse_date(values[k]) for k in
                          ("pre_start", "treat_start", "treat_end", "post_end")})
        except KeyError as exc:
            raise ConfigError(f"period config missing key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ConfigError(f"bad date in period config: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "PeriodConfig":
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k).isoformat()}\n"
                       for k in ("pre_start", "treat_start", "treat_end", "post_end"))

    @property
    def pre_days(self) -> int:
        return (self.treat_start - self.pre_start).days

    @property
    def treat_days(self) -> int:
        return (self.treat_end - self.treat_start).days + 1

    @property
    def post_days(self) -> int:
        return (self.post_end - self.treat_end).days

    def dates(self, include_post: bool = False) -> pd.DatetimeIndex:
        end = self.post_end if include_post else self.treat_end
        return pd.date_range(self.pre_start, end, freq="D")

    def tag(self, dates) -> np.ndarray:
        """Period tag ('pre', 'treat', 'post', or '' outside the calendar)."""
        d = pd.DatetimeIndex(dates)
        out = np.full(len(d), "", dtype=object)
        ts = pd.Timestamp
        out[(d >= ts(self.pre_start)) & (d < ts(self.treat_start))] = "pre"
        out[(d >= ts(self.treat_start)) & (d <= ts(self.treat_end))] = "treat"
        out[(d > ts(self.treat_end)) & (d <= ts(self.post_end))] = "post"
        return out


DEFAULT_PERIOD = PeriodConfig(date(2022, 7, 4), date(2022, 7, 18), date(2022, 8, 27), date(2022, 9, 10))


def _parse_date(value) -> date:
    if isinstance(value, date):
        return value
    return date.fromisoformat(str(value).strip())


@dataclass
class Dataset:
    consumers: pd.DataFrame
    orders: pd.DataFrame
    establishments: pd.DataFrame
    period: PeriodConfig
    claims: pd.DataFrame | None = None
    establishment_days: pd.DataFrame | None = None
    counts: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- ingestion


def _parse_table(raw: pd.DataFrame, schema: dict, fname: str, allow_missing=()) -> pd.DataFrame:
    expected = list(schema)
    if list(raw.columns) != expected:
        missing = [c for c in expected if c not in raw.columns]
        extra = [c for c in raw.columns if c not in schema]
        raise DataError(f"{fname}: header mismatch (missing={missing}, unexpected={extra}); "
                        f"expected columns {expected}")
    out = {}
    for col, kind in schema.items():
        s = raw[col]
        blank = s.isna() | (s.str.strip() == "")
        if blank.any() and col not in allow_missing:
            line = int(np.flatnonzero(blank.to_numpy())[0]) + 2
            raise DataError(f"{fname}:{line}: column '{col}': missing value")
        if kind == "str":
            out[col] = s.str.strip()
            continue
        if kind == "date":
            parsed = pd.to_datetime(s, format="%Y-%m-%d", errors="coerce")
        else:
            parsed = pd.to_numeric(s, errors="coerce")
        bad = parsed.isna() & ~blank
        if kind == "binary":
            bad |= ~parsed.isin([0, 1]) & ~blank
        elif kind == "int":
            bad |= (parsed % 1 != 0) & parsed.notna()
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"{fname}:{i + 2}: column '{col}': cannot parse {s.iloc[i]!r} as {kind}")
        if kind in ("binary", "int") and not blank.any():
            parsed = parsed.astype(np.int64)
        out[col] = parsed
    return pd.DataFrame(out)


def read_table(path, schema: dict, allow_missing=()) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError:
        raise DataError(f"{path.name}: file is empty") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{path.name}: {exc}") from None
    return _parse_table(raw, schema, path.name, allow_missing)


def validate_orders(orders: pd.DataFrame, fname: str = "orders.csv") -> None:
    """Raise DataError naming the first order that breaks the coupon rules."""

    def fail(mask, msg):
        oid = orders["order_id"].to_numpy()[np.flatnonzero(mask)[0]]
        raise DataError(f"{fname}: order_id {oid}: {msg}")

    g = orders["gross_amount"].to_numpy(float)
    d = orders["coupon_discount"].to_numpy(float)
    if (bad := d < 0).any():
        fail(bad, "negative coupon_discount")
    if (bad := g < d).any():
        fail(bad, "gross_amount below coupon_discount")
    if (bad := ~np.isin(d, (0.0, 15.0, 30.0))).any():
        fail(bad, "coupon_discount must be 0, 15 or 30")
    for disc, thr in THRESHOLDS.items():
        if (bad := (d == disc) & (g < thr)).any():
            fail(bad, f"discount {disc:g} requires gross_amount >= {thr:g} (threshold rule)")
    if (bad := ~orders["category"].isin(CATEGORIES).to_numpy()).any():
        fail(bad, f"category must be one of {CATEGORIES}")
    if (bad := (orders[["n_sku", "n_utensil_sets"]].to_numpy() < 0).any(axis=1)).any():
        fail(bad, "negative count")


def validate_consumers(consumers: pd.DataFrame) -> None:
    share = consumers["nonsme_share_3km"].to_numpy()
    checks = [
        ((share < 0) | (share > 1), "nonsme_share_3km outside [0, 1]"),
        (consumers["n_restaurants_3km"].to_numpy() < 0, "negative n_restaurants_3km"),
        (consumers["spend_per_order_6m"].to_numpy() < 0, "negative spend_per_order_6m"),
    ]
    for mask, msg in checks:
        if mask.any():
            cid = consumers["consumer_id"].to_numpy()[np.flatnonzero(mask)[0]]
            raise DataError(f"consumers.csv: consumer_id {cid}: {msg}")
    if consumers["consumer_id"].duplicated().any():
        raise DataError("consumers.csv: duplicate consumer_id")


def classify_sme(sales, percentile: float = 50.0) -> np.ndarray:
    """1 for establishments strictly below the given revenue percentile."""
    sales = np.asarray(sales, dtype=float)
    return (sales < np.percentile(sales, percentile)).astype(np.int64)


def validate_establishments(est: pd.DataFrame, sme_percentile: float = 50.0) -> None:
    if (est[["avg_monthly_sales_6m", "avg_order_price_6m"]].to_numpy() < 0).any():
        raise DataError("establishments.csv: negative sales or price")
    if est["establishment_id"].duplicated().any():
        raise DataError("establishments.csv: duplicate establishment_id")
    expected = classify_sme(est["avg_monthly_sales_6m"], sme_percentile)
    mismatch = expected != est["sme_flag"].to_numpy()
    if mismatch.any():
        eid = est["establishment_id"].to_numpy()[np.flatnonzero(mismatch)[0]]
        raise DataError(f"establishments.csv: establishment_id {eid}: sme_flag inconsistent with "
                        f"the {sme_percentile:g}th revenue percentile")


def ingest_dataset(paths, period: PeriodConfig, *, sme_percentile: float = 50.0) -> Dataset:
    """Load and validate the CSV file set.

    ``paths`` is either a directory holding the standard file names or a mapping
    from table name (``consumers``, ``orders``, ...) to file path.
    """
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        paths = {k: root / fname for k, (fname, _) in FILES.items() if (root / fname).exists()}
    paths = dict(paths)
    for key in REQUIRED_FILES:
        if key not in paths:
            raise DataError(f"missing required file {FILES[key][0]}")

    attrs = [c for c in CONSUMER_SCHEMA if c != "consumer_id"]
    consumers = read_table(paths["consumers"], CONSUMER_SCHEMA, allow_missing=attrs)
    if consumers.empty:
        raise DataError("no consumers")
    incomplete = consumers[attrs].isna().any(axis=1)
    n_dropped = int(incomplete.sum())
    if n_dropped:
        logger.info("dropping %d consumers with missing attributes", n_dropped)
        consumers = consumers.loc[~incomplete].reset_index(drop=True)
        for col, kind in CONSUMER_SCHEMA.items():
            if kind == "binary":
                consumers[col] = consumers[col].astype(np.int64)
    if consumers.empty:
        raise DataError("no consumers with complete attributes")
    validate_consumers(consumers)
    consumers["wealth"] = wealth_index(consumers["phone_price"], consumers["housing_price"])

    orders = read_table(paths["orders"], ORDER_SCHEMA)
    validate_orders(orders, Path(paths["orders"]).name)
    known = orders["consumer_id"].isin(consumers["consumer_id"])
    n_orphan = int((~known).sum())
    if n_orphan:
        logger.info("dropping %d orders of unknown or dropped consumers", n_orphan)
        orders = orders.loc[known].reset_index(drop=True)

    est = read_table(paths["establishments"], ESTABLISHMENT_SCHEMA)
    validate_establishments(est, sme_percentile)
    unknown = ~orders["establishment_id"].isin(est["establishment_id"])
    if unknown.any():
        oid = orders["order_id"].to_numpy()[np.flatnonzero(unknown.to_numpy())[0]]
        raise DataError(f"orders.csv: order_id {oid}: unknown establishment_id")

    claims = read_table(paths["claims"], CLAIM_SCHEMA) if "claims" in paths else None
    est_days = (read_table(paths["establishment_days"], ESTABLISHMENT_DAY_SCHEMA)
                if "establishment_days" in paths else None)
    counts = {
        "consumers": len(consumers),
        "consumers_dropped_missing": n_dropped,
        "orders": len(orders),
        "orders_dropped_unknown_consumer": n_orphan,
        "establishments": len(est),
        "claims": 0 if claims is None else len(claims),
    }
    logger.info("ingested %s", counts)
    return Dataset(consumers, orders, est, period, claims, est_days, counts)


# --------------------------------------------------------------------------- derived variables


def wealth_index(phone_price, housing_price) -> np.ndarray:
    """First principal component of the two standardized wealth proxies.

    Sign is fixed so the index correlates positively with housing price, and
    the result is rescaled to mean 0, sd 1 (population sd).
    """
    phone = np.asarray(phone_price, dtype=float)
    housing = np.asarray(housing_price, dtype=float)
    if phone.shape != housing.shape or phone.ndim != 1 or len(phone) < 2:
        raise DataError("wealth_index needs two vectors of equal length >= 2")
    if np.ptp(phone) == 0 or np.ptp(housing) == 0:
        raise DataError("wealth_index: constant input column, principal component undefined")
    Z = np.column_stack([(phone - phone.mean()) / phone.std(), (housing - housing.mean()) / housing.std()])
    corr = Z.T @ Z / len(Z)
    evals, evecs = np.linalg.eigh(corr)
    if np.isclose(evals[0], evals[1], rtol=0, atol=1e-12):
        loading = np.array([1.0, 1.0]) / np.sqrt(2.0)
    else:
        loading = evecs[:, np.argmax(evals)]
    score = Z @ loading
    if np.cov(score, housing)[0, 1] < 0:
        score = -score
    return (score - score.mean()) / score.std()


PANEL_VALUES = ["oop", "total", "unsub", "subsidy", "n_orders", "n_sku", "n_utensil"]


def build_daily_panel(orders: pd.DataFrame, consumers: pd.DataFrame, period: PeriodConfig,
                      category: str = "restaurant", include_post: bool = False) -> pd.DataFrame:
    """Balanced consumer x day panel of spending outcomes, zero-filled.

    Rows are sorted by consumer_id then date. ``oop = total - subsidy`` and
    ``unsub`` sums orders that carried no discount.
    """
    if category not in CATEGORIES:
        raise ValueError(f"category must be one of {CATEGORIES}")
    ids = np.sort(consumers["consumer_id"].to_numpy().astype(str))
    dates = period.dates(include_post)
    n, T = len(ids), len(dates)

    o = orders.loc[orders["category"] == category]
    cidx = np.searchsorted(ids, o["consumer_id"].to_numpy().astype(str))
    cidx_ok = (cidx < n) & (ids[np.minimum(cidx, n - 1)] == o["consumer_id"].to_numpy().astype(str))
    if not cidx_ok.all():
        raise DataError(f"{int((~cidx_ok).sum())} orders reference unknown consumers")
    day = (pd.DatetimeIndex(o["date"]) - pd.Timestamp(period.pre_start)).days.to_numpy()
    calendar_days = (period.post_end - period.pre_start).days + 1
    outside = (day < 0) | (day >= calendar_days)
    if outside.any():
        logger.warning("excluding %d orders dated outside the study calendar", int(outside.sum()))
    keep = (day >= 0) & (day < T)

    flat = cidx[keep] * T + day[keep]
    gross = o["gross_amount"].to_numpy(float)[keep]
    disc = o["coupon_discount"].to_numpy(float)[keep]

    def cellsum(w):
        return np.bincount(flat, weights=w, minlength=n * T)

    total = cellsum(gross)
    subsidy = cellsum(disc)
    values = {
        "oop": total - subsidy,
        "total": total,
        "unsub": cellsum(np.where(disc == 0, gross, 0.0)),
        "subsidy": subsidy,
        "n_orders": np.bincount(flat, minlength=n * T).astype(float),
        "n_sku": cellsum(o["n_sku"].to_numpy(float)[keep]),
        "n_utensil": cellsum(o["n_utensil_sets"].to_numpy(float)[keep]),
    }
    panel = pd.DataFrame({
        "consumer_id": np.repeat(ids, T),
        "date": np.tile(dates.to_numpy(), n),
        "period_tag": np.tile(period.tag(dates), n),
        **values,
    })
    panel.attrs["excluded_orders"] = int(outside.sum())
    panel.attrs["n_consumers"] = n
    panel.attrs["n_dates"] = T
    return panel


def panel_matrix(panel: pd.DataFrame, column: str) -> np.ndarray:
    """Reshape one panel column to an (n_consumers, n_dates) array."""
    n = panel["consumer_id"].nunique()
    values = panel[column].to_numpy(float)
    if len(values) % n:
        raise DataError("panel is not balanced")
    return values.reshape(n, -1)


def grid_aggregate(effects, consumers: pd.DataFrame, cell_km: float = 3.0) -> pd.DataFrame:
    """Aggregate per-consumer values onto a square grid of side ``cell_km``.

    ``effects`` is aligned with the rows of ``consumers``. Cells containing
    fewer than two treated consumers are flagged.
    """
    if not cell_km > 0:
        raise ValueError("cell_km must be positive")
    eff = np.asarray(effects, dtype=float)
    if len(eff) != len(consumers):
        raise DataError("effects and consumers differ in length")
    df = pd.DataFrame({
        "cell_x": np.floor(consumers["grid_x"].to_numpy(float) / cell_km).astype(np.int64),
        "cell_y": np.floor(consumers["grid_y"].to_numpy(float) / cell_km).astype(np.int64),
        "effect": eff,
        "treated": consumers["treat"].to_numpy() if "treat" in consumers else np.ones(len(eff), int),
    })
    out = df.groupby(["cell_x", "cell_y"], sort=True).agg(
        mean=("effect", "mean"), count=("effect", "size"), total=("effect", "sum"),
        n_treated=("treated", "sum"),
    ).reset_index()
    out["flagged"] = out["n_treated"] < 2
    return out

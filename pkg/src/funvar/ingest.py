"""
Firm-level micro panels and aggregate macro series from CSV.

Canonical firm-panel schema (one row per firm and quarter)
----------------------------------------------------------
=================  ========  ===============================================
column             type      meaning
=================  ========  ===============================================
firm_id            str       firm identifier (required)
period             int       quarter index, consecutive integers (required)
sic                int       4-digit SIC code (required)
us_incorporated    0/1       1 if incorporated in the US
capital            float     capital stock (blank = missing)
labor              float     employment
sales              float     real sales
liquidity          float     cash and short-term investments
acquisitions       float     acquisitions in the quarter
assets             float     total assets
investment_rate    float     investment over lagged capital
=================  ========  ===============================================

Any export can be adapted through ``columns`` in the rules config, a mapping
from canonical name to the name used in the file.

Cleaning rules, applied in this order to rows that survived all earlier ones:

1. ``sector``: SIC 6000-6799 (finance), 4900-4999 (utilities), 9995, 9997;
2. ``incorporation``: not incorporated in the US;
3. ``negative_capital_assets``: negative capital or assets;
4. ``acquisitions``: acquisitions above 5% of assets;
5. ``investment_tails``: investment rate strictly outside the 0.5% and 99.5%
   quantiles, computed once on the sample that survives rule 1;
6. ``short_spell``: the row is not part of a run of at least 40 consecutive
   quarters with capital present (a single missing capital value inside a
   run is filled by linear interpolation first, two or more consecutive
   missing values break the run);
7. ``sales_growth``: quarter-over-quarter log sales growth above 1 or below -1;
8. ``negative_sales_liquidity``: negative sales or liquidity.

Dropping rows can shorten spells, so the pass repeats until nothing changes
(with the quantile thresholds held fixed). A row is counted under the first
rule it trips.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

CANONICAL = ("firm_id", "period", "sic", "us_incorporated", "capital", "labor", "sales", "liquidity",
             "acquisitions", "assets", "investment_rate")
REQUIRED = ("firm_id", "period", "sic")
RULES = ("sector", "incorporation", "negative_capital_assets", "acquisitions", "investment_tails",
         "short_spell", "sales_growth", "negative_sales_liquidity")

DEFAULT_RULES = {
    "sic_ranges": [[6000, 6799], [4900, 4999], [9995, 9995], [9997, 9997]],
    "acquisitions_share": 0.05,
    "tail_quantiles": [0.005, 0.995],
    "min_spell": 40,
    "max_abs_log_sales_growth": 1.0,
    "active": list(RULES),
    "columns": {},
}


@dataclass
class FirmPanel:
    """Cleaned rows plus the cleaning report.

    ``thresholds`` holds the frozen investment-rate cut-offs so that cleaning
    the result again applies exactly the same rules.
    """

    rows: pd.DataFrame
    counts: dict = field(default_factory=lambda: {r: 0 for r in RULES})
    errors: list = field(default_factory=list)
    thresholds: Optional[tuple] = None
    n_raw: int = 0
    interpolated: int = 0

    def report(self) -> dict:
        return {
            "raw_rows": self.n_raw,
            "retained_rows": int(len(self.rows)),
            "malformed_rows": len(self.errors),
            "excluded": dict(self.counts),
            "investment_rate_thresholds": None if self.thresholds is None else [repr(float(t)) for t in self.thresholds],
            "interpolated_capital": self.interpolated,
            "errors": self.errors,
        }

    def write(self, csv_path, report_path=None) -> None:
        self.rows.to_csv(csv_path, index=False, float_format="%.17g")
        if report_path is not None:
            Path(report_path).write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n")


def interpolate_single_gaps(values) -> np.ndarray:
    """Fill isolated missing values by the average of their neighbours.

    Runs of two or more missing values and missing end points stay missing.
    """
    x = np.asarray(values, dtype=float).copy()
    miss = np.isnan(x)
    idx = np.flatnonzero(miss[1:-1]) + 1
    lone = idx[~miss[idx - 1] & ~miss[idx + 1]]
    x[lone] = 0.5 * (x[lone - 1] + x[lone + 1])
    return x


def spells(periods, present) -> np.ndarray:
    """Length of the run of consecutive present periods each row belongs to (0 if absent)."""
    periods = np.asarray(periods)
    present = np.asarray(present, dtype=bool)
    out = np.zeros(len(periods), dtype=int)
    start = 0
    n = len(periods)
    while start < n:
        if not present[start]:
            start += 1
            continue
        end = start
        while end + 1 < n and present[end + 1] and periods[end + 1] == periods[end] + 1:
            end += 1
        out[start:end + 1] = end - start + 1
        start = end + 1
    return out


def _resolve_rules(rules):
    cfg = dict(DEFAULT_RULES)
    cfg.update(rules or {})
    unknown = set(cfg["active"]) - set(RULES)
    if unknown:
        raise ValidationError([f"unknown cleaning rule {u!r}" for u in sorted(unknown)])
    return cfg


def read_firm_csv(source, columns: Optional[dict] = None):
    """Parse a raw CSV into canonical columns; returns ``(frame, errors, n_raw)``."""
    raw = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    rename = {v: k for k, v in (columns or {}).items()}
    return _coerce(raw.rename(columns=rename))


def _coerce(raw: pd.DataFrame):
    missing = [c for c in REQUIRED if c not in raw.columns]
    if missing:
        raise ValidationError([f"missing required column {c!r}" for c in missing])
    n_raw = len(raw)
    errors = []
    df = pd.DataFrame({"firm_id": raw["firm_id"].astype(str).str.strip()})
    df["_row"] = np.arange(n_raw) + 2  # file line number
    bad = np.zeros(n_raw, dtype=bool)
    for col in CANONICAL[1:]:
        if col not in raw.columns:
            df[col] = np.nan
            continue
        s = raw[col].astype(str).str.strip()
        num = pd.to_numeric(s.replace({"": np.nan, "NA": np.nan, "nan": np.nan}), errors="coerce")
        unparsable = num.isna() & s.ne("") & ~s.isin(["NA", "nan"])
        if col in REQUIRED:
            unparsable |= num.isna()
        for i in np.flatnonzero(unparsable.to_numpy() & ~bad):
            errors.append({"line": int(df["_row"].iat[i]), "column": col, "value": s.iat[i]})
        bad |= unparsable.to_numpy()
        df[col] = num.to_numpy()
    empty_id = df["firm_id"].eq("").to_numpy()
    for i in np.flatnonzero(empty_id & ~bad):
        errors.append({"line": int(df["_row"].iat[i]), "column": "firm_id", "value": ""})
    bad |= empty_id
    ok = df[~bad].copy()
    dup = ok.duplicated(["firm_id", "period"], keep="first").to_numpy()
    for i in np.flatnonzero(dup):
        errors.append({"line": int(ok["_row"].iat[i]), "column": "period", "value": "duplicate firm-period"})
    ok = ok[~dup]
    ok["period"] = ok["period"].astype(np.int64)
    ok["sic"] = ok["sic"].astype(np.int64)
    errors.sort(key=lambda e: e["line"])
    return ok, errors, n_raw


def _in_ranges(sic, ranges):
    hit = np.zeros(len(sic), dtype=bool)
    for lo, hi in ranges:
        hit |= (sic >= lo) & (sic <= hi)
    return hit


def _rule_masks(df, cfg, thresholds, active):
    """Boolean violation mask per rule for the current rows (in rule order)."""
    masks = {}
    if "sector" in active:
        masks["sector"] = _in_ranges(df["sic"].to_numpy(), cfg["sic_ranges"])
    if "incorporation" in active:
        inc = df["us_incorporated"].to_numpy()
        masks["incorporation"] = ~np.isnan(inc) & (inc == 0)
    if "negative_capital_assets" in active:
        masks["negative_capital_assets"] = (df["capital"].to_numpy() < 0) | (df["assets"].to_numpy() < 0)
    if "acquisitions" in active:
        masks["acquisitions"] = df["acquisitions"].to_numpy() > cfg["acquisitions_share"] * df["assets"].to_numpy()
    if "investment_tails" in active and thresholds is not None:
        ir = df["investment_rate"].to_numpy()
        masks["investment_tails"] = (ir < thresholds[0]) | (ir > thresholds[1])
    return masks


def clean_firm_panel(source, rules: Optional[dict] = None) -> FirmPanel:
    """Apply the cleaning rules to a CSV path, a DataFrame or an earlier ``FirmPanel``."""
    cfg = _resolve_rules(rules)
    active = set(cfg["active"])
    thresholds = None
    if isinstance(source, FirmPanel):
        df, errors, n_raw = source.rows.copy(), [], len(source.rows)
        thresholds = source.thresholds
        if "_row" not in df.columns:
            df["_row"] = np.arange(len(df)) + 2
    elif isinstance(source, pd.DataFrame):
        df, errors, n_raw = _coerce(source.rename(columns={v: k for k, v in cfg["columns"].items()}).astype(str))
    else:
        df, errors, n_raw = read_firm_csv(source, cfg["columns"])

    df = df.sort_values(["firm_id", "period"], kind="mergesort").reset_index(drop=True)
    # isolated missing capital values, within each firm's consecutive periods
    before = int(df["capital"].isna().sum())
    df["capital"] = _interpolate_capital(df)
    n_interp = before - int(df["capital"].isna().sum())

    counts = {r: 0 for r in RULES}
    keep = np.ones(len(df), dtype=bool)

    def drop(rule, mask):
        hit = keep & mask
        counts[rule] += int(hit.sum())
        keep[hit] = False

    masks = _rule_masks(df, cfg, None, active)
    for rule in ("sector",):
        if rule in masks:
            drop(rule, masks[rule])
    if "investment_tails" in active and thresholds is None:
        ir = df.loc[keep, "investment_rate"].dropna().to_numpy()
        if ir.size:
            lo, hi = cfg["tail_quantiles"]
            thresholds = (float(np.quantile(ir, lo)), float(np.quantile(ir, hi)))

    masks = _rule_masks(df, cfg, thresholds, active)
    while True:
        n_keep = int(keep.sum())
        for rule in RULES[:5]:
            if rule in masks:
                drop(rule, masks[rule])
        if "short_spell" in active:
            drop("short_spell", _short_spell_mask(df, keep, cfg["min_spell"]))
        if "sales_growth" in active:
            drop("sales_growth", _sales_growth_mask(df, keep, cfg["max_abs_log_sales_growth"]))
        if "negative_sales_liquidity" in active:
            drop("negative_sales_liquidity",
                 (df["sales"].to_numpy() < 0) | (df["liquidity"].to_numpy() < 0))
        if int(keep.sum()) == n_keep:
            break

    out = df[keep].drop(columns=["_row"]).reset_index(drop=True)
    panel = FirmPanel(out, counts, errors, thresholds, n_raw, n_interp)
    logger.info("cleaning kept %d of %d rows", len(out), n_raw)
    return panel


def _interpolate_capital(df):
    cap = df["capital"].to_numpy(dtype=float).copy()
    firm = df["firm_id"].to_numpy()
    per = df["period"].to_numpy()
    for i in range(1, len(df) - 1):
        if (np.isnan(cap[i]) and firm[i - 1] == firm[i] == firm[i + 1]
                and per[i] - per[i - 1] == 1 and per[i + 1] - per[i] == 1
                and not np.isnan(cap[i - 1]) and not np.isnan(cap[i + 1])):
            cap[i] = 0.5 * (cap[i - 1] + cap[i + 1])
    return cap


def _short_spell_mask(df, keep, min_spell):
    mask = np.zeros(len(df), dtype=bool)
    present = keep & ~np.isnan(df["capital"].to_numpy())
    for _, idx in df.groupby("firm_id", sort=False).indices.items():
        idx = np.asarray(idx)
        rows = idx[keep[idx]]
        if rows.size == 0:
            continue
        lengths = spells(df["period"].to_numpy()[rows], present[rows])
        mask[rows] = lengths < min_spell
    return mask


def _sales_growth_mask(df, keep, bound):
    mask = np.zeros(len(df), dtype=bool)
    sales = df["sales"].to_numpy(dtype=float)
    per = df["period"].to_numpy()
    for _, idx in df.groupby("firm_id", sort=False).indices.items():
        rows = np.asarray(idx)[keep[np.asarray(idx)]]
        if rows.size < 2:
            continue
        s0, s1 = sales[rows[:-1]], sales[rows[1:]]
        consecutive = np.diff(per[rows]) == 1
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.log(s1 / s0)
        bad = consecutive & (s0 > 0) & (s1 > 0) & (np.abs(g) > bound)
        mask[rows[1:]] |= bad
    return mask


def deflate_and_detrend(panel, deflator, columns=("capital", "labor"), deflate=("capital",),
                        period_col="period", min_points: int = 3):
    """Per-firm log-linear detrending of real values.

    Each column in ``deflate`` is divided by ``deflator`` (a Series indexed by
    period) before taking logs. For every firm the log series is regressed on
    ``(1, t)`` and the residual is stored as ``<column>_dt``. Firms with fewer
    than ``min_points`` usable observations are dropped.

    Returns
    -------
    (DataFrame, list)
        Detrended rows and the ids of dropped firms.
    """
    df = panel.rows.copy() if isinstance(panel, FirmPanel) else panel.copy()
    defl = pd.Series(deflator, dtype=float)
    if (defl <= 0).any() or defl.isna().any():
        raise ValidationError(["deflator must be strictly positive"])
    missing = sorted(set(df[period_col]) - set(defl.index))
    if missing:
        raise ValidationError([f"deflator does not cover periods {missing[:5]}{'...' if len(missing) > 5 else ''}"])
    d = df[period_col].map(defl).to_numpy()
    for col in columns:
        v = df[col].to_numpy(dtype=float)
        if col in deflate:
            v = v / d
        with np.errstate(divide="ignore", invalid="ignore"):
            df[f"_{col}_log"] = np.where(v > 0, np.log(v), np.nan)

    dropped = []
    keep = np.ones(len(df), dtype=bool)
    for firm, idx in df.groupby("firm_id", sort=False).indices.items():
        idx = np.asarray(idx)
        t = df[period_col].to_numpy(dtype=float)[idx]
        short = False
        for col in columns:
            y = df[f"_{col}_log"].to_numpy()[idx]
            ok = ~np.isnan(y)
            if ok.sum() < min_points:
                short = True
                break
            Z = np.column_stack([np.ones(ok.sum()), t[ok]])
            coef = np.linalg.lstsq(Z, y[ok], rcond=None)[0]
            res = np.full(len(idx), np.nan)
            res[ok] = y[ok] - Z @ coef
            df.loc[df.index[idx], f"{col}_dt"] = res
        if short:
            dropped.append(firm)
            keep[idx] = False
    df = df.drop(columns=[f"_{c}_log" for c in columns])
    return df[keep].reset_index(drop=True), dropped


def interpolate_labor(annual: pd.DataFrame, value_col: str = "labor", year_col: str = "year"):
    """Quarterly series from year-end annual observations.

    Each annual value is the stock at the end of the fourth quarter; quarters
    in between are linear in time. The quarter index is ``4 * year + q - 1``
    for ``q = 1..4``, so the output runs from the first year's Q4 to the last
    year's Q4.

    Returns
    -------
    (DataFrame, list)
        Columns ``firm_id, period, <value_col>`` and the firms with a single
        annual observation (left out).
    """
    rows = []
    flagged = []
    for firm, g in annual.groupby("firm_id", sort=True):
        g = g.dropna(subset=[value_col]).sort_values(year_col)
        if len(g) < 2:
            flagged.append(firm)
            continue
        q_end = 4 * g[year_col].to_numpy(dtype=np.int64) + 3
        vals = g[value_col].to_numpy(dtype=float)
        grid = np.arange(q_end[0], q_end[-1] + 1)
        interp = np.interp(grid, q_end, vals)
        rows.append(pd.DataFrame({"firm_id": firm, "period": grid, value_col: interp}))
    out = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["firm_id", "period", value_col])
    return out, flagged


@dataclass
class MacroPanel:
    """Aggregate series on a common period index."""

    periods: np.ndarray
    values: pd.DataFrame
    detrended: dict

    @classmethod
    def from_csv(cls, path, detrend=(), period_col: str = "period", series=None):
        df = pd.read_csv(path)
        return cls.from_frame(df, detrend, period_col, series)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, detrend=(), period_col: str = "period", series=None):
        if period_col not in df.columns:
            raise ValidationError([f"macro data lacks a {period_col!r} column"])
        df = df.sort_values(period_col).reset_index(drop=True)
        names = list(series) if series is not None else [c for c in df.columns if c != period_col]
        problems = [f"unknown series {n!r}" for n in names if n not in df.columns]
        problems += [f"series {n!r} has missing values" for n in names if n in df.columns and df[n].isna().any()]
        problems += [f"series {n!r} must be positive to log-detrend" for n in detrend
                     if n in df.columns and (df[n] <= 0).any()]
        if problems:
            raise ValidationError(problems)
        vals = df[names].astype(float).copy()
        t = df[period_col].to_numpy(dtype=float)
        Z = np.column_stack([np.ones(len(t)), t])
        flags = {}
        for n in names:
            flags[n] = n in detrend
            if flags[n]:
                y = np.log(vals[n].to_numpy())
                vals[n] = y - Z @ np.linalg.lstsq(Z, y, rcond=None)[0]
        return cls(df[period_col].to_numpy(), vals, flags)

    def matrix(self, names=None) -> np.ndarray:
        return self.values[list(names) if names is not None else list(self.values.columns)].to_numpy()


def panel_to_cross_sections(df: pd.DataFrame, columns, period_col: str = "period"):
    """Group rows into per-period samples; returns ``(periods, [n_t x d arrays])``."""
    sub = df[[period_col, *columns]].dropna()
    periods = np.sort(sub[period_col].unique())
    groups = sub.groupby(period_col)
    return periods, [groups.get_group(p)[list(columns)].to_numpy(dtype=float) for p in periods]

import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from funvar import ingest
from funvar.exceptions import ValidationError
from ingest_fixtures import clean_firm, planted_panel


def test_single_gap_interpolation():
    np.testing.assert_array_equal(ingest.interpolate_single_gaps([1, np.nan, 3]), [1, 2, 3])
    out = ingest.interpolate_single_gaps([1, np.nan, np.nan, 4])
    assert np.isnan(out[1:3]).all() and out[0] == 1 and out[3] == 4
    out = ingest.interpolate_single_gaps([np.nan, 2, np.nan])
    assert np.isnan(out[0]) and np.isnan(out[2])


def test_spells():
    present = np.array([1, 1, 0, 1, 1, 1, 1], dtype=bool)
    np.testing.assert_array_equal(ingest.spells(np.arange(7), present), [2, 2, 0, 4, 4, 4, 4])
    # a jump in the period index also breaks a run
    np.testing.assert_array_equal(ingest.spells([1, 2, 5, 6, 7], np.ones(5, bool)), [2, 2, 3, 3, 3])


def test_planted_violations_counted_once_each():
    df, expected = planted_panel()
    panel = ingest.clean_firm_panel(df)
    assert panel.counts == expected
    assert len(panel.rows) == len(df) - sum(expected.values())
    assert panel.errors == []
    rep = panel.report()
    assert rep["raw_rows"] == 500 and rep["retained_rows"] == 492


def test_sector_firm_excluded():
    df = pd.concat([clean_firm("a", np.arange(45)), clean_firm("bank", np.arange(45), sic=6500)])
    panel = ingest.clean_firm_panel(df)
    assert panel.counts["sector"] == 45
    assert set(panel.rows["firm_id"]) == {"a"}


def test_all_clean_is_a_no_op():
    df = pd.concat([clean_firm("a", np.arange(40)), clean_firm("b", np.arange(3, 50))], ignore_index=True)
    panel = ingest.clean_firm_panel(df)
    assert all(v == 0 for v in panel.counts.values())
    pd.testing.assert_frame_equal(panel.rows, df, check_dtype=False)


def test_capital_gaps_in_a_panel():
    one = clean_firm("a", np.arange(60))
    one.loc[30, "capital"] = np.nan
    two = clean_firm("b", np.arange(60))
    two.loc[[30, 31], "capital"] = np.nan
    panel = ingest.clean_firm_panel(pd.concat([one, two], ignore_index=True))
    assert panel.interpolated == 1
    a = panel.rows[panel.rows["firm_id"] == "a"]
    assert len(a) == 60
    assert a["capital"].iat[30] == pytest.approx(0.5 * (one["capital"].iat[29] + one["capital"].iat[31]))
    # the double gap splits firm b into spells of 30 and 28, both too short
    assert "b" not in set(panel.rows["firm_id"])
    assert panel.counts["short_spell"] == 60


def test_cleaning_is_idempotent():
    df, _ = planted_panel()
    once = ingest.clean_firm_panel(df)
    twice = ingest.clean_firm_panel(once)
    pd.testing.assert_frame_equal(once.rows, twice.rows)
    assert sum(twice.counts.values()) == 0


def test_counts_plus_retained_cover_raw():
    df, _ = planted_panel()
    rng = np.random.default_rng(0)
    df.loc[rng.choice(len(df), 30, replace=False), "sales"] *= -1
    panel = ingest.clean_firm_panel(df)
    assert sum(panel.counts.values()) + len(panel.rows) >= panel.n_raw
    rows = panel.rows
    assert (rows["capital"] >= 0).all() and (rows["assets"] >= 0).all()
    assert (rows["sales"] >= 0).all() and (rows["liquidity"] >= 0).all()
    for _, g in rows.groupby("firm_id"):
        assert ingest.spells(g["period"].to_numpy(), g["capital"].notna().to_numpy()).min() >= 40


def test_malformed_rows_are_reported(tmp_path):
    df = clean_firm("a", np.arange(45)).astype(str)
    df.loc[3, "capital"] = "abc"
    df.loc[7, "period"] = ""
    df.loc[9, "period"] = df.loc[8, "period"]
    path = tmp_path / "raw.csv"
    df.to_csv(path, index=False)
    panel = ingest.clean_firm_panel(path)
    lines = [(e["line"], e["column"]) for e in panel.errors]
    assert lines == [(5, "capital"), (9, "period"), (11, "period")]
    panel.write(tmp_path / "clean.csv", tmp_path / "report.json")
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["malformed_rows"] == 3


def test_schema_problems():
    with pytest.raises(ValidationError):
        ingest.clean_firm_panel(pd.DataFrame({"firm_id": ["a"], "period": ["1"]}))
    with pytest.raises(ValidationError):
        ingest.clean_firm_panel(clean_firm("a", np.arange(3)), {"active": ["nonsense"]})


def test_column_mapping():
    df = clean_firm("a", np.arange(45)).rename(columns={"capital": "ppent", "firm_id": "gvkey"})
    panel = ingest.clean_firm_panel(df, {"columns": {"capital": "ppent", "firm_id": "gvkey"}})
    assert len(panel.rows) == 45 and "capital" in panel.rows.columns


def firm_series(a=0.3, b=0.02, T=20, firm="a"):
    t = np.arange(T)
    return pd.DataFrame({"firm_id": firm, "period": t, "capital": np.exp(a + b * t), "labor": np.exp(1 + 0.01 * t)})


def test_detrend_exact_exponential():
    df = firm_series()
    out, dropped = ingest.deflate_and_detrend(df, pd.Series(1.0, index=df["period"]))
    assert dropped == []
    assert np.abs(out["capital_dt"]).max() < 1e-10 and np.abs(out["labor_dt"]).max() < 1e-10


def test_detrend_recovers_planted_residuals():
    t = np.arange(30)
    e = np.sin(t) - np.sin(t).mean()
    e -= np.polyval(np.polyfit(t, e, 1), t)  # orthogonal to (1, t)
    df = firm_series(T=30)
    df["capital"] = np.exp(0.5 - 0.03 * t + e)
    out, _ = ingest.deflate_and_detrend(df, pd.Series(1.0, index=t))
    np.testing.assert_allclose(out["capital_dt"], e, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 999))
def test_detrend_invariant_to_scaling(scale, seed):
    rng = np.random.default_rng(seed)
    df = firm_series(T=12)
    df["capital"] *= np.exp(rng.normal(scale=0.1, size=12))
    defl = pd.Series(np.exp(rng.normal(scale=0.05, size=12)), index=df["period"])
    base, _ = ingest.deflate_and_detrend(df, defl)
    scaled = df.copy()
    scaled["capital"] *= scale
    out, _ = ingest.deflate_and_detrend(scaled, defl)
    np.testing.assert_allclose(out["capital_dt"], base["capital_dt"], atol=1e-10)
    doubled, _ = ingest.deflate_and_detrend(df, 2 * defl)
    np.testing.assert_allclose(doubled["capital_dt"], base["capital_dt"], atol=1e-10)


def test_detrend_drops_short_firms_and_checks_deflator():
    df = pd.concat([firm_series(), firm_series(T=2, firm="b")], ignore_index=True)
    defl = pd.Series(1.0, index=np.arange(20))
    out, dropped = ingest.deflate_and_detrend(df, defl)
    assert dropped == ["b"] and set(out["firm_id"]) == {"a"}
    with pytest.raises(ValidationError):
        ingest.deflate_and_detrend(df, defl.iloc[:5])
    with pytest.raises(ValidationError):
        ingest.deflate_and_detrend(df, -defl)


def test_interpolate_labor():
    annual = pd.DataFrame({"firm_id": ["a", "a", "b", "c", "c", "c"], "year": [2000, 2001, 2000, 1990, 1991, 1992],
                           "labor": [100.0, 200.0, 5.0, 7.0, 7.0, 7.0]})
    out, flagged = ingest.interpolate_labor(annual)
    assert flagged == ["b"]
    a = out[out["firm_id"] == "a"]
    np.testing.assert_allclose(a["labor"], [100, 125, 150, 175, 200])
    np.testing.assert_array_equal(a["period"], 4 * 2000 + 3 + np.arange(5))
    assert (out[out["firm_id"] == "c"]["labor"] == 7.0).all()


@settings(max_examples=25, deadline=None)
@given(vals=st.lists(st.floats(1, 1e4), min_size=2, max_size=8))
def test_interpolated_labor_hits_annual_values(vals):
    annual = pd.DataFrame({"firm_id": "a", "year": 1980 + np.arange(len(vals)), "labor": vals})
    out, _ = ingest.interpolate_labor(annual)
    at_year_end = out.set_index("period").loc[4 * annual["year"] + 3, "labor"]
    np.testing.assert_array_equal(at_year_end.to_numpy(), vals)


def test_macro_panel_detrend():
    t = np.arange(80)
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"period": t, "gdp": np.exp(2 + 0.01 * t + 0.02 * rng.standard_normal(80)),
                       "rate": rng.standard_normal(80)})
    mp = ingest.MacroPanel.from_frame(df, detrend=["gdp"])
    g = mp.values["gdp"].to_numpy()
    assert abs(g.mean()) < 1e-10
    assert abs(np.polyfit(t, g, 1)[0]) < 1e-10
    np.testing.assert_array_equal(mp.values["rate"], df["rate"])
    assert mp.detrended == {"gdp": True, "rate": False}
    assert mp.matrix(["gdp"]).shape == (80, 1)
    with pytest.raises(ValidationError):
        ingest.MacroPanel.from_frame(df.assign(gdp=-df["gdp"]), detrend=["gdp"])
    with pytest.raises(ValidationError):
        ingest.MacroPanel.from_frame(df.assign(rate=np.nan))


def test_panel_to_cross_sections():
    df = pd.DataFrame({"period": [1, 1, 2, 2, 2], "x1": [0.0, 1, 2, 3, np.nan], "x2": [5.0, 6, 7, 8, 9]})
    periods, xs = ingest.panel_to_cross_sections(df, ["x1", "x2"])
    np.testing.assert_array_equal(periods, [1, 2])
    assert xs[0].shape == (2, 2) and xs[1].shape == (2, 2)

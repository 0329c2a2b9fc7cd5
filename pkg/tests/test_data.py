from __future__ import annotations

from datetime import date

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfl.data import (AlignmentError, DataError, ParseError, PlanError, SplitGroup, SplitPlan,
                      TradingCalendar, audit_split_plan, business_calendar, clean_cross_section,
                      forward_returns, load_dir, make_split_plan, write_panel)
from dfl.dataset import audit_point_in_time, build_sections, group_sections, make_batches
from dfl.synthetic import PlantedFixture, SyntheticSpec, generate_synthetic

from conftest import make_panel


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def tiny_dir(tmp_path):
    _write(tmp_path / "prices.csv", "date,stock_id,close\n"
           "2021-01-04,A,10.0\n2021-01-04,B,20.0\n"
           "2021-01-05,A,11.0\n2021-01-05,B,19.0\n"
           "2021-01-06,A,12.5\n2021-01-06,B,18.0\n")
    _write(tmp_path / "membership.csv", "date,stock_id,industry_id\n"
           "2021-01-04,A,1\n2021-01-04,B,2\n2021-01-05,A,1\n2021-01-05,B,2\n"
           "2021-01-06,A,1\n2021-01-06,B,2\n")
    rows = ["date,stock_id,factor_name,value"]
    for d in ("2021-01-04", "2021-01-05", "2021-01-06"):
        for s, base in (("A", 1.0), ("B", -1.0)):
            rows += [f"{d},{s},value_0,{base}", f"{d},{s},size_1,{base * 2}"]
    _write(tmp_path / "factors.csv", "\n".join(rows) + "\n")
    _write(tmp_path / "factor_groups.csv", "factor_name,group\nvalue_0,value\nsize_1,size\n")
    return tmp_path


# --- ingestion ------------------------------------------------------------------

def test_minimal_fixture_shapes(tiny_dir):
    panel = load_dir(tiny_dir)
    assert len(panel.calendar) == 3
    assert [v.shape for v in panel.factors.values] == [(2, 2)] * 3
    assert panel.factors.groups == ("value", "size")
    assert panel.universes[0].ids == ("A", "B")


def test_factor_row_for_non_member_is_rejected(tiny_dir):
    with open(tiny_dir / "factors.csv", "a", encoding="utf-8") as fh:
        fh.write("2021-01-05,C,value_0,0.5\n")
    with pytest.raises(AlignmentError, match="row 14"):
        load_dir(tiny_dir)


def test_parse_error_reports_row(tiny_dir):
    text = (tiny_dir / "prices.csv").read_text().replace("2021-01-05,B,19.0", "2021-01-05,B,abc")
    _write(tiny_dir / "prices.csv", text)
    with pytest.raises(ParseError, match="row 5"):
        load_dir(tiny_dir)


def test_membership_date_outside_calendar(tiny_dir):
    with open(tiny_dir / "membership.csv", "a", encoding="utf-8") as fh:
        fh.write("2021-02-01,A,1\n")
    with pytest.raises(AlignmentError):
        load_dir(tiny_dir)


def test_bad_header(tiny_dir):
    _write(tiny_dir / "factor_groups.csv", "name,group\nvalue_0,value\n")
    with pytest.raises(ParseError, match="header"):
        load_dir(tiny_dir)


def test_round_trip_is_byte_identical(tiny_dir, tmp_path):
    panel = load_dir(tiny_dir)
    out1 = tmp_path / "one"
    write_panel(panel, out1)
    for name in ("prices.csv", "factors.csv", "membership.csv", "factor_groups.csv"):
        assert (out1 / name).read_bytes() == (tiny_dir / name).read_bytes()


def test_round_trip_synthetic(tmp_path):
    panel = generate_synthetic(SyntheticSpec(n_stocks=12, n_factors=3, n_dates=70, missing_rate=0.05,
                                             beta=(0.001, 0, 0), seed=4))
    write_panel(panel, tmp_path / "a")
    again = load_dir(tmp_path / "a")
    write_panel(again, tmp_path / "b")
    for name in ("prices.csv", "factors.csv", "membership.csv", "factor_groups.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for t in (0, 35, 69):
        np.testing.assert_array_equal(np.isnan(again.factors.values[t]), np.isnan(panel.factors.values[t]))


# --- forward returns ------------------------------------------------------------

def test_forward_returns_cases():
    close = np.array([[100.0, 50.0], [105.0, 50.0], [110.0, 50.0]])
    panel = make_panel(close, [1, 1])
    rp = forward_returns(panel.prices, panel.calendar, (1, 2))
    assert rp.values[2][0, 0] == pytest.approx(0.10)
    assert np.all(rp.values[1][:2, 1] == 0.0)
    assert np.all(np.isnan(rp.values[1][-1])) and np.all(np.isnan(rp.values[2][-1]))
    assert rp.label_end(0, 2) == panel.calendar[2] and rp.label_end(2, 1) is None


def test_forward_returns_rejects_non_positive_price():
    panel = make_panel(np.array([[1.0, 2.0], [0.0, 2.0]]), [1, 1])
    with pytest.raises(DataError):
        forward_returns(panel.prices, panel.calendar, (1,))


# --- cleaning -------------------------------------------------------------------

def test_median_imputation():
    # the second column keeps the middle stock under the sparse-row threshold
    res = clean_cross_section(np.array([[1.0, 0.0], [np.nan, 1.0], [3.0, 2.0]]))
    np.testing.assert_array_equal(res.values[:, 0], [1.0, 2.0, 3.0])


def test_sparse_stock_dropped():
    F = np.array([[1.0, np.nan, np.nan], [1.0, 2.0, 3.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    res = clean_cross_section(F)
    assert res.kept.tolist() == [False, True, True, True]
    assert res.values.shape == (3, 3)


def test_too_few_survivors_skips_date():
    res = clean_cross_section(np.array([[1.0, np.nan], [np.nan, np.nan], [2.0, 3.0]]))
    assert res.values is None and "survive" in res.warning


def test_outlier_clipped_to_five_sigma():
    col = np.zeros(2000)
    col[:1000], col[1000:] = -1.0, 1.0
    col[0] = 100.0 * col.std()
    out = clean_cross_section(col[:, None]).values[:, 0]
    mu, sd = out.mean(), out.std()
    # the clipped point sits exactly on the self-consistent 5 sigma bound
    assert out[0] == pytest.approx(mu + 5 * sd, rel=1e-8)
    assert np.all(np.abs(out - mu) <= 5 * sd * (1 + 1e-8))


@given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_cleaning_is_idempotent(F):
    once = clean_cross_section(F).values
    twice = clean_cross_section(once).values
    np.testing.assert_allclose(twice, once, rtol=0, atol=1e-9 * max(1.0, np.abs(once).max()))


# --- split plan -----------------------------------------------------------------

def _reference_calendar(end="2022-06-30"):
    return business_calendar("2010-01-01", end)


def test_split_plan_reproduces_reference_dates():
    plan = make_split_plan(_reference_calendar(), "2016-01-01", 13)
    first, last = plan.groups[0], plan.groups[-1]
    assert first == SplitGroup(("2010-01-01", "2015-06-30"), ("2015-07-01", "2015-11-30"),
                               ("2016-01-01", "2016-06-30"))
    assert last == SplitGroup(("2010-01-01", "2021-06-30"), ("2021-07-01", "2021-11-30"),
                              ("2022-01-01", "2022-06-30"))


def test_fourteen_group_plan_is_consecutive():
    plan = make_split_plan(_reference_calendar("2022-12-31"), "2016-01-01", 14)
    assert len(plan) == 14
    assert plan.groups[-1].test == ("2022-07-01", "2022-12-31")
    assert audit_split_plan(plan, _reference_calendar("2022-12-31")) == []


def test_single_group_plan_on_seven_years():
    cal = business_calendar("2014-01-01", "2020-12-31")
    plan = make_split_plan(cal, "2020-07-01", 1)
    (g,) = plan.groups
    assert g.valid == ("2020-01-01", "2020-05-31") and g.test == ("2020-07-01", "2020-12-31")
    gap_days = cal.index("2020-07-01") - cal.between(*g.valid)[-1]
    assert gap_days > plan.max_horizon


def test_split_plan_errors():
    cal = business_calendar("2015-01-01", "2016-12-31")
    with pytest.raises(PlanError):
        make_split_plan(cal, "2015-03-01", 1)
    with pytest.raises(PlanError):
        make_split_plan(cal, "2016-07-01", 2)
    with pytest.raises(PlanError):
        make_split_plan(cal, "2016-01-01", 0)


def test_validation_end_pulled_back_for_long_horizons():
    cal = business_calendar("2015-01-01", "2017-12-31")
    plan = make_split_plan(cal, "2017-01-01", 1, max_horizon=40)
    g = plan.groups[0]
    assert g.valid[1] < "2016-11-30"
    assert audit_split_plan(plan, cal) == []


def test_audit_flags_leaky_plan():
    cal = business_calendar("2015-01-01", "2016-12-31")
    leaky = SplitPlan((SplitGroup(("2015-01-01", "2015-12-31"), ("2016-01-01", "2016-06-20"),
                                  ("2016-07-01", "2016-12-31")),), 20)
    assert any("overlaps" in p for p in audit_split_plan(leaky, cal))


@given(st.integers(1, 60), st.integers(1, 6), st.sampled_from([5, 10, 20, 30]))
def test_generated_plans_never_leak(offset_months, groups, k):
    cal = business_calendar("2012-01-01", "2019-12-31")
    start = date(2013, 1, 1)
    y, mth = divmod(start.month - 1 + offset_months, 12)
    first = date(start.year + y, mth + 1, 1).isoformat()
    try:
        plan = make_split_plan(cal, first, groups, max_horizon=k)
    except PlanError:
        return
    assert audit_split_plan(plan, cal) == []


# --- sections, batching, point in time -------------------------------------------

def test_point_in_time_audit_and_purge():
    panel = generate_synthetic(SyntheticSpec(n_stocks=15, n_factors=3, n_dates=300, seed=2))
    sections, _ = build_sections(panel, (3, 5))
    assert audit_point_in_time(sections, panel.calendar) == []
    plan = make_split_plan(panel.calendar, "2018-09-01", 1, max_horizon=5, period_months=2)
    train, valid, test = group_sections(sections, plan.groups[0], panel.calendar, 5)
    last_train = panel.calendar.between(*plan.groups[0].train)[-1]
    assert train and all(s.t + 5 <= last_train for s in train)
    assert valid[0].date >= plan.groups[0].valid[0] and test[-1].date <= plan.groups[0].test[1]
    # a tampered label end is caught
    bad = sections[10]
    bad.label_ends = (panel.calendar[bad.t + 4],) + bad.label_ends[1:]
    assert audit_point_in_time([bad], panel.calendar)


def test_batches_group_equal_sizes_and_isolate_partial_labels():
    panel = generate_synthetic(SyntheticSpec(n_stocks=10, n_factors=2, n_dates=40, seed=1))
    sections, _ = build_sections(panel, (3,))
    batches = make_batches(sections, max_batch=16)
    assert sum(len(b.sections) for b in batches) == len(sections)
    for b in batches:
        assert len({s.n for s in b.sections}) == 1
        assert b.complete or len(b.sections) == 1
        assert b.mask.shape == (len(b.sections), b.sections[0].n, b.sections[0].n)


def test_sections_skip_dates_with_too_few_stocks():
    close = np.full((4, 3), 10.0)
    F = np.random.default_rng(0).standard_normal((4, 3, 2))
    F[2, :2] = np.nan
    panel = make_panel(close, [1, 1, 2], F=F)
    sections, warnings = build_sections(panel, (1,))
    assert [s.t for s in sections] == [0, 1, 3]
    assert any("skipped" in w for w in warnings)


# --- synthetic generator ---------------------------------------------------------

def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(n_stocks=20, n_factors=3, n_dates=60, seed=9, beta=(0.01, 0, 0))
    write_panel(generate_synthetic(spec), tmp_path / "a")
    write_panel(generate_synthetic(spec), tmp_path / "b")
    for name in ("prices.csv", "factors.csv", "membership.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_noiseless_linear_signal_is_perfectly_correlated():
    spec = SyntheticSpec(n_stocks=50, n_factors=4, n_dates=80, noise_vol=0.0, gamma=0.0,
                         beta=(0.002, -0.001, 0.0005, 0.0), seed=3)
    panel = generate_synthetic(spec)
    rp = forward_returns(panel.prices, panel.calendar, (1,))
    beta = np.array(spec.beta)
    for t in range(0, 79, 7):
        cols = panel.prices.columns(panel.universes[t].ids)
        corr = np.corrcoef(panel.factors.values[t] @ beta, rp.values[1][t, cols])[0, 1]
        assert abs(corr - 1.0) < 1e-9


def test_null_signal_has_no_ic():
    spec = SyntheticSpec(n_stocks=100, n_factors=4, n_dates=400, seed=5)
    panel = generate_synthetic(spec)
    rp = forward_returns(panel.prices, panel.calendar, (1,))
    ics = []
    for t in range(399):
        cols = panel.prices.columns(panel.universes[t].ids)
        F, r = panel.factors.values[t], rp.values[1][t, cols]
        ics.append([np.corrcoef(F[:, j], r)[0, 1] for j in range(4)])
    bound = 3.0 / np.sqrt(100 * 399)
    assert np.all(np.abs(np.mean(ics, axis=0)) < bound)


def test_churn_preserves_universe_size_and_changes_membership():
    panel = generate_synthetic(SyntheticSpec(n_stocks=50, n_factors=2, n_dates=130, seed=6))
    assert {u.n for u in panel.universes} == {50}
    log = panel.meta["churn_log"]
    assert log and all(len(e["in"]) == len(e["out"]) == 1 for e in log)
    assert len({u.ids for u in panel.universes}) > 1


def test_planted_fixture_scales_noise_to_snr():
    spec = PlantedFixture(seed=0, n_stocks=20, n_dates=30).spec()
    F = np.random.default_rng(12345).standard_normal((200_000, spec.n_factors))
    from dfl.synthetic import planted_signal
    assert planted_signal(F, spec).std() / spec.noise_vol == pytest.approx(0.3, rel=1e-12)
    null = PlantedFixture(seed=0, n_stocks=20, n_dates=30, null=True).spec()
    assert null.gamma == 0.0 and not any(null.beta) and null.noise_vol == spec.noise_vol


def test_calendar_rejects_unsorted_dates():
    with pytest.raises(ValueError):
        TradingCalendar(("2021-01-05", "2021-01-04"))

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from revprod.panel import FirmPeriod, Panel, PanelError, material_share, read_panel, trim_shares, write_panel

# frozen from tests/oracles/derive.py
MATERIAL_SHARE_R13437_M11322 = 0.12063328955315829164


def make_panel(n=5, T=4, seed=0, truth=False):
    rng = np.random.default_rng(seed)
    ids, per = np.meshgrid(np.arange(1, n + 1), np.arange(1, T + 1))
    r = rng.normal(13, 1, n * T)
    cols = {
        "firm_id": ids.ravel(), "period": per.ravel(), "r": r, "m": r - rng.uniform(0.3, 2.0, n * T),
        "k": rng.normal(10, 1, n * T), "l": rng.normal(10, 1, n * T),
    }
    if truth:
        y = rng.normal(12, 1, n * T)
        cols.update(omega=rng.normal(0, 0.1, n * T), u=rng.uniform(0, 1, n * T), y=y, p=r - y,
                    markup=1 + rng.uniform(0, 0.5, n * T))
    return Panel(cols)


def test_read_two_rows(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("firm_id,period,r,m,k,l\n1,1,13.0,11.0,9.5,9.4\n2,1,12.5,10.9,9.0,9.9\n")
    p = read_panel(f)
    assert len(p) == 2 and p.n_firms == 2 and not p.has_truth
    assert list(p.records)[1] == FirmPeriod(2, 1, 12.5, 10.9, 9.0, 9.9)


def test_duplicate_key_rejected(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("firm_id,period,r,m,k,l\n1,3,13,11,9,9\n1,3,12,11,9,9\n")
    with pytest.raises(PanelError, match="duplicate"):
        read_panel(f)


@pytest.mark.parametrize(
    "text, match",
    [
        ("firm_id,period,r,m,k\n1,1,1,1,1\n", "missing"),
        ("firm_id,period,r,m,k,l\n1,1,x,1,1,1\n", "non-numeric"),
        ("firm_id,period,r,m,k,l\n1,1,nan,1,1,1\n", "row 0"),
        ("firm_id,period,r,m,k,l\n1,1,1,1,1\n", "expected"),
    ],
)
def test_malformed_files(tmp_path, text, match):
    f = tmp_path / "p.csv"
    f.write_text(text)
    with pytest.raises(PanelError, match=match):
        read_panel(f)


def test_truth_columns_must_satisfy_accounting():
    p = make_panel(truth=True)
    cols = {c: np.array(p[c]) for c in p.columns}
    cols["p"][0] += 1e-6
    with pytest.raises(PanelError, match="r = p"):
        Panel(cols)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_write_read_round_trip(tmp_path_factory, n, T, seed, truth):
    p = make_panel(n, T, seed, truth)
    f = tmp_path_factory.mktemp("rt") / "p.csv"
    write_panel(p, f)
    q = read_panel(f)
    assert q == p
    for c in p.columns:
        assert np.array_equal(q[c], p[c])


def test_material_share_examples():
    rec = FirmPeriod(1, 1, r=2.0, m=2.0, k=0, l=0)
    assert material_share(rec) == 1.0
    assert material_share(FirmPeriod(1, 1, r=2.0, m=2.0 - math.log(2), k=0, l=0)) == pytest.approx(0.5, abs=1e-15)
    assert material_share(FirmPeriod(1, 1, r=13.437, m=11.322, k=0, l=0)) == pytest.approx(
        MATERIAL_SHARE_R13437_M11322, rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_material_share_positive_and_below_one_iff_m_below_r(r, m):
    assume(m == r or abs(m - r) > 1e-12)  # below that exp(m - r) rounds to 1
    s = material_share(FirmPeriod(1, 1, r=r, m=m, k=0, l=0))
    assert s > 0
    assert (s < 1) == (m < r)


def share_panel(shares):
    n = len(shares)
    r = np.full(n, 10.0)
    return Panel({"firm_id": np.arange(1, n + 1), "period": np.ones(n), "r": r, "m": r + np.log(shares),
                  "k": np.zeros(n), "l": np.zeros(n)})


def test_trim_noop_bounds():
    p = share_panel(np.random.default_rng(1).uniform(0.2, 0.8, 50))
    assert trim_shares(p, 0.0, 1.0) == p


def test_trim_drops_out_of_range_firm_everywhere():
    p = make_panel(4, 3)
    cols = {c: np.array(p[c]) for c in p.columns}
    i = np.flatnonzero((cols["firm_id"] == 2) & (cols["period"] == 2))[0]
    cols["m"][i] = cols["r"][i] + math.log(1.3)
    out = trim_shares(Panel(cols), 0.0, 1.0)
    assert 2 not in out["firm_id"] and out.n_firms == 3 and len(out) == 9


def test_trim_two_percent_each_side():
    p = share_panel(np.random.default_rng(2).uniform(0.05, 0.95, 100))
    out = trim_shares(p, 0.02, 0.98)
    assert len(out) == 96
    # brute force: drop the two smallest and two largest
    order = np.argsort(np.exp(p["m"] - p["r"]))
    np.testing.assert_array_equal(np.sort(out["firm_id"]), np.sort(p["firm_id"][order[2:-2]]))


def test_trim_by_period_uses_period_percentiles():
    rng = np.random.default_rng(3)
    a = share_panel(rng.uniform(0.1, 0.3, 50))
    b = share_panel(rng.uniform(0.6, 0.9, 50))
    cols = {c: np.r_[a[c], b[c]] for c in a.columns}
    cols["firm_id"] = np.r_[a["firm_id"], b["firm_id"] + 50]
    cols["period"] = np.r_[np.ones(50), np.full(50, 2)]
    p = Panel(cols)
    assert len(trim_shares(p, 0.1, 0.9, by_period=True)) == 80
    pooled = trim_shares(p, 0.1, 0.9)
    assert len(pooled) == 80
    assert not np.array_equal(np.sort(pooled["firm_id"]), np.sort(trim_shares(p, 0.1, 0.9, True)["firm_id"]))


def test_trim_errors():
    p = share_panel([0.5, 0.6])
    with pytest.raises(PanelError):
        trim_shares(p, 0.5, 0.2)
    with pytest.raises(PanelError):
        trim_shares(share_panel([1.5, 2.0]), 0.0, 1.0)


def test_lags_and_alignment():
    p = make_panel(6, 5)
    q = p.subset(~((p["firm_id"] == 3) & (p["period"] == 3)))
    np.testing.assert_array_equal(q.firms_with_lags(5, 1), [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(q.firms_with_lags(5, 2), [1, 2, 4, 5, 6])
    al = q.aligned(5, lags=(0, 2))
    np.testing.assert_array_equal(al[0]["firm_id"], al[2]["firm_id"])
    assert np.all(al[2]["period"] == 3)
    with pytest.raises(PanelError):
        q.aligned(5, lags=(2,), firm_ids=np.array([3]))

import csv
import math

import numpy as np
import pytest

from revprod.estimator.pipeline import EstimationConfig
from revprod.montecarlo import PARAMS, MCResult, RepRecord, run_mc, run_replication, summarize
from revprod.simulator import DGPConfig

SMALL = DGPConfig(n_firms=250, seed=3)


@pytest.fixture(scope="module")
def mc():
    return run_mc(SMALL, 2)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_records_in_replication_order(mc):
    assert [r.rep for r in mc.records] == [0, 1]
    assert mc.n_success == 2 and mc.n_failure == 0
    for r in mc.records:
        assert r.theta_m + r.theta_k + r.theta_l == pytest.approx(1.0, abs=1e-12)
        assert 0 <= r.ks_pvalue <= 1 and r.tfp_corr > 0.5
        assert r.tfp_pairs.shape[1] == 2


def test_replication_is_deterministic(mc):
    again = run_replication(SMALL, EstimationConfig(), 1)
    assert again.theta_m == mc.records[1].theta_m and again.beta == mc.records[1].beta


def test_first_rep_offset_selects_the_same_stream(mc):
    r = run_mc(SMALL, 1, first_rep=1)
    assert r.records[0].rep == 1 and r.records[0].theta_m == mc.records[1].theta_m


def test_threads_do_not_change_results(mc):
    par = run_mc(SMALL, 2, threads=2)
    for a, b in zip(par.records, mc.records):
        for name in PARAMS:
            assert getattr(a, name) == getattr(b, name)


def test_failures_become_records():
    res = run_mc(DGPConfig(n_firms=60, seed=1), 1, EstimationConfig(period=2))
    rec = res.records[0]
    assert not rec.success and rec.stage and rec.error
    assert math.isnan(rec.theta_m)
    table = summarize(res)
    assert table["failures"] == {"count": 1, "n": 1}
    assert table["theta_m"]["n"] == 0 and math.isnan(table["theta_m"]["mean"])


def test_summary_statistics_by_hand():
    recs = [RepRecord(rep=i, success=True, theta_m=v, tfp_corr=0.9, markup_corr=0.9, tfp_rmse=0.1,
                      markup_rmse=0.1, ks_pvalue=p) for i, (v, p) in enumerate([(0.38, 0.5), (0.42, 0.01), (0.43, 0.2)])]
    recs.append(RepRecord(rep=3, success=False, stage="step2", error="x"))
    res = MCResult(dgp=DGPConfig(), est=EstimationConfig(), records=recs)
    t = summarize(res)["theta_m"]
    v = np.array([0.38, 0.42, 0.43])
    assert t["mean"] == pytest.approx(v.mean()) and t["sd"] == pytest.approx(v.std(ddof=1))
    assert t["rmse"] == pytest.approx(math.sqrt(np.mean((v - 0.4) ** 2)))
    tab = summarize(res)
    assert tab["ks_pass"] == {"count": 2, "n": 3} and tab["failures"]["count"] == 1


def test_output_files(mc, tmp_path):
    table = summarize(mc, tmp_path, bins=5)
    rows = read_csv(tmp_path / "mc_results.csv")
    assert [int(r["rep"]) for r in rows] == [0, 1]
    assert float(rows[0]["theta_m"]) == mc.records[0].theta_m
    summ = {r["param"]: r for r in read_csv(tmp_path / "summary.csv")}
    assert set(summ) == set(PARAMS)
    assert float(summ["beta"]["mean"]) == table["beta"]["mean"]
    for name in PARAMS:
        h = read_csv(tmp_path / f"hist_{name}.csv")
        assert sum(int(r["count"]) for r in h) == 2
    sc = read_csv(tmp_path / "scatter_tfp.csv")
    assert len(sc) == sum(r.tfp_pairs.shape[0] for r in mc.records)
    assert (tmp_path / "scatter_markup.csv").exists()


def test_missing_output_directory(mc, tmp_path):
    with pytest.raises(FileNotFoundError):
        summarize(mc, tmp_path / "nope")


def test_reps_must_be_positive():
    with pytest.raises(ValueError):
        run_mc(SMALL, 0)

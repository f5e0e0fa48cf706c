"""Monte Carlo harness: simulate, estimate at t = T, and summarize."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import stats

from .estimator.pipeline import EstimationConfig, EstimationError, estimate_panel
from .simulator import DGPConfig, simulate_panel

__all__ = ["RepRecord", "MCResult", "run_mc", "run_replication", "summarize", "PARAMS", "N_SCATTER_REPS"]

PARAMS = ("theta_m", "theta_k", "theta_l", "rho", "beta", "gamma_err", "delta")
METRICS = ("tfp_rmse", "tfp_corr", "markup_rmse", "markup_corr", "ks_stat", "ks_pvalue", "n_clamped")
N_SCATTER_REPS = 20


@dataclass
class RepRecord:
    rep: int
    success: bool
    stage: str = ""
    error: str = ""
    theta_m: float = math.nan
    theta_k: float = math.nan
    theta_l: float = math.nan
    rho: float = math.nan
    beta: float = math.nan
    gamma_err: float = math.nan
    delta: float = math.nan
    tfp_rmse: float = math.nan
    tfp_corr: float = math.nan
    markup_rmse: float = math.nan
    markup_corr: float = math.nan
    ks_stat: float = math.nan
    ks_pvalue: float = math.nan
    n_clamped: float = math.nan
    # (true, estimated) pairs kept for the scatter files
    tfp_pairs: Optional[np.ndarray] = field(default=None, repr=False)
    markup_pairs: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class MCResult:
    dgp: DGPConfig
    est: EstimationConfig
    records: List[RepRecord]

    @property
    def n_success(self) -> int:
        return sum(r.success for r in self.records)

    @property
    def n_failure(self) -> int:
        return sum(not r.success for r in self.records)

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records if r.success], dtype=float)

    def truth(self) -> Dict[str, float]:
        th = self.dgp.theta
        return {
            "theta_m": th.theta_m, "theta_k": th.theta_k, "theta_l": th.theta_l, "rho": th.rho_omega,
            "beta": self.dgp.beta, "gamma_err": 0.0, "delta": self.dgp.delta,
        }


def run_replication(dgp: DGPConfig, est: EstimationConfig, rep: int, keep_pairs: bool = True) -> RepRecord:
    """One replication; failures become records, never exceptions."""
    try:
        sim = simulate_panel(dgp, rep)
    except Exception as exc:  # noqa: BLE001 - any failure is recorded
        return RepRecord(rep=rep, success=False, stage="simulate", error=str(exc))
    try:
        res = estimate_panel(sim.panel, est)
    except EstimationError as exc:
        return RepRecord(rep=rep, success=False, stage=exc.stage, error=str(exc))
    except Exception as exc:  # noqa: BLE001
        return RepRecord(rep=rep, success=False, stage="estimate", error=f"{type(exc).__name__}: {exc}")
    s, c = res.structural, res.copath
    truth = sim.panel.aligned(res.period, lags=(0,), firm_ids=res.firm_ids)[0]
    om, mu = truth["omega"], truth["markup"]
    ks = stats.kstest(res.u_hat, "uniform")
    rec = RepRecord(
        rep=rep, success=True,
        theta_m=s.theta_m, theta_k=s.theta_k, theta_l=s.theta_l, rho=res.fit2.rho_hat,
        beta=c.beta_hat, gamma_err=c.gamma_hat - sim.gamma[res.period - 1], delta=c.delta_hat,
        tfp_rmse=float(np.sqrt(np.mean((s.omega_hat - om) ** 2))),
        tfp_corr=float(np.corrcoef(s.omega_hat, om)[0, 1]),
        markup_rmse=float(np.sqrt(np.mean((s.mu_hat - mu) ** 2))),
        markup_corr=float(np.corrcoef(s.mu_hat, mu)[0, 1]),
        ks_stat=float(ks.statistic), ks_pvalue=float(ks.pvalue), n_clamped=float(res.clamped.sum()),
    )
    if keep_pairs:
        rec.tfp_pairs = np.c_[om, s.omega_hat]
        rec.markup_pairs = np.c_[mu, s.mu_hat]
    return rec


def _job(args):
    dgp, est, rep = args
    return run_replication(dgp, est, rep, keep_pairs=rep < N_SCATTER_REPS)


def run_mc(dgp: DGPConfig, reps: int, est: EstimationConfig = EstimationConfig(), threads: int = 1,
           first_rep: int = 0) -> MCResult:
    """Replications ``first_rep .. first_rep + reps - 1`` in replication order.

    Replication ``r`` draws from the stream ``(dgp.seed, r)``, so results do
    not depend on ``threads``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    jobs = [(dgp, est, first_rep + r) for r in range(reps)]
    threads = max(1, int(threads))
    if threads == 1:
        records = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_job, jobs))
    return MCResult(dgp=dgp, est=est, records=records)


# --------------------------------------------------------------------------
# summary files
# --------------------------------------------------------------------------


def _histogram(vals: np.ndarray, bins: int = 30):
    lo, hi = float(vals.min()), float(vals.max())
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi) if hi > lo else None)
    return counts, edges


def summarize(res: MCResult, out_dir=None, bins: int = 30) -> Dict[str, Dict[str, float]]:
    """Per-parameter mean, sd and RMSE; optionally writes the output files.

    Files: ``mc_results.csv``, ``summary.csv``, ``hist_<param>.csv`` and
    ``scatter_tfp.csv`` / ``scatter_markup.csv`` for the first 20
    replications.
    """
    truth = res.truth()
    table = {}
    for name in PARAMS:
        v = res.values(name)
        if v.size == 0:
            table[name] = {"true": truth[name], "mean": math.nan, "sd": math.nan, "rmse": math.nan, "n": 0}
            continue
        table[name] = {
            "true": truth[name],
            "mean": float(v.mean()),
            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "rmse": float(np.sqrt(np.mean((v - truth[name]) ** 2))),
            "n": int(v.size),
        }
    for name in ("tfp_corr", "markup_corr", "tfp_rmse", "markup_rmse"):
        v = res.values(name)
        table[name] = {"true": math.nan, "mean": float(v.mean()) if v.size else math.nan,
                       "median": float(np.median(v)) if v.size else math.nan, "n": int(v.size)}
    pv = res.values("ks_pvalue")
    table["ks_pass"] = {"count": int(np.sum(pv > 0.05)), "n": int(pv.size)}
    table["failures"] = {"count": res.n_failure, "n": len(res.records)}
    if out_dir is not None:
        _write_outputs(res, Path(out_dir), table, bins)
    return table


def _write_outputs(res: MCResult, out: Path, table, bins: int) -> None:
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    cols = ["rep", "success", "stage", "error", *PARAMS, *METRICS]
    with open(out / "mc_results.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in res.records:
            d = asdict(r)
            w.writerow([_cell(d[c]) for c in cols])
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "true", "mean", "sd", "rmse", "n"])
        for name in PARAMS:
            row = table[name]
            w.writerow([name] + [_cell(row[k]) for k in ("true", "mean", "sd", "rmse", "n")])
    for name in PARAMS:
        v = res.values(name)
        with open(out / f"hist_{name}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            if v.size:
                counts, edges = _histogram(v, bins)
                for lo, hi, cnt in zip(edges[:-1], edges[1:], counts):
                    w.writerow([_cell(lo), _cell(hi), int(cnt)])
    for fname, attr in (("scatter_tfp.csv", "tfp_pairs"), ("scatter_markup.csv", "markup_pairs")):
        with open(out / fname, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true", "estimated", "rep"])
            for r in res.records[:N_SCATTER_REPS]:
                pairs = getattr(r, attr)
                if r.success and pairs is not None:
                    for tv, ev in pairs:
                        w.writerow([_cell(tv), _cell(ev), r.rep])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    return str(v).replace("\n", " ")


def default_threads() -> int:
    return max(1, (os.cpu_count() or 1))

"""Command-line front end: simulate, estimate, counterfactual, montecarlo."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .equilibrium import ProductionParams, write_welfare_csv
from .estimator.pipeline import (
    EstimationConfig,
    EstimationError,
    counterfactual_from_estimates,
    estimate_panel,
    read_estimates,
    read_firm_estimates,
    write_estimates,
    write_firm_estimates,
)
from .montecarlo import run_mc, summarize
from .panel import read_panel, write_panel
from .simulator import DGPConfig, simulate_panel, write_metadata

__all__ = ["RunConfig", "ConfigError", "StageError", "load_config", "build_parser", "main"]

ESTIMATES_FILE = "estimates.txt"
FIRMS_FILE = "firm_estimates.csv"
WELFARE_FILE = "welfare.csv"

_DGP_KEYS = {
    "n_firms", "n_periods", "theta_m", "theta_k", "theta_l", "rho_omega", "sigma_eta", "rts",
    "ma_coef", "zeta_lo", "zeta_hi", "k_l_persistence", "k_l_omega_load", "k_l_shock_sd",
    "k_l_init_mean", "k_l_init_sd", "Phi", "delta", "beta", "seed",
}
_EST_KEYS = {f.name for f in fields(EstimationConfig)} | {"panel"}
_CF_KEYS = {"panel", "estimates"}
_TOP_KEYS = {"reps", "threads", "out"}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class RunConfig:
    dgp: DGPConfig
    est: EstimationConfig
    reps: Optional[int] = None
    threads: int = 1
    out: Optional[Path] = None
    panel: Optional[Path] = None
    estimates: Optional[Path] = None


def _check_keys(section: str, table: Dict[str, Any], allowed) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _dgp_from_table(tab: Dict[str, Any]) -> DGPConfig:
    tab = dict(tab)
    th_kw = {k: float(tab.pop(k)) for k in ("theta_m", "theta_k", "theta_l", "rho_omega", "sigma_eta") if k in tab}
    rts = tab.pop("rts", None)
    shares = (th_kw.pop("theta_m", 0.4), th_kw.pop("theta_k", 0.3), th_kw.pop("theta_l", 0.3))
    total = sum(shares)
    theta = ProductionParams.with_rts(float(rts) if rts is not None else total, shares=shares, **th_kw)
    kw: Dict[str, Any] = {"theta": theta}
    if "zeta_lo" in tab or "zeta_hi" in tab:
        kw["zeta_range"] = (float(tab.pop("zeta_lo", 0.0)), float(tab.pop("zeta_hi", 0.3)))
    for key, val in tab.items():
        kw[key] = int(val) if key in ("n_firms", "n_periods", "seed") else float(val)
    return DGPConfig(**kw)


def load_config(path=None) -> RunConfig:
    """Parse a TOML run file; every key is validated, unknown keys are errors."""
    raw: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    sections = {"dgp", "estimator", "counterfactual"}
    top = {k: v for k, v in raw.items() if k not in sections}
    _check_keys("top level", top, _TOP_KEYS)
    for name in sections & set(raw):
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    dgp_tab = raw.get("dgp", {})
    est_tab = dict(raw.get("estimator", {}))
    cf_tab = raw.get("counterfactual", {})
    _check_keys("dgp", dgp_tab, _DGP_KEYS)
    _check_keys("estimator", est_tab, _EST_KEYS)
    _check_keys("counterfactual", cf_tab, _CF_KEYS)
    try:
        dgp = _dgp_from_table(dgp_tab)
        panel = est_tab.pop("panel", None)
        est = EstimationConfig(**est_tab)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    reps = top.get("reps")
    if reps is not None and int(reps) < 1:
        raise ConfigError("reps must be at least 1")
    threads = int(top.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    return RunConfig(
        dgp=dgp, est=est, reps=None if reps is None else int(reps), threads=threads,
        out=Path(top["out"]) if "out" in top else None,
        panel=Path(cf_tab.get("panel", panel)) if cf_tab.get("panel", panel) else None,
        estimates=Path(cf_tab["estimates"]) if "estimates" in cf_tab else None,
    )


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags take precedence over the config file."""
    if args.seed is not None:
        cfg.dgp = replace(cfg.dgp, seed=int(args.seed))
    if args.rts is not None:
        if not args.rts > 0:
            raise ConfigError("--rts must be positive")
        cfg.dgp = cfg.dgp.with_rts(float(args.rts))
        cfg.est = replace(cfg.est, rts=float(args.rts))
    if args.reps is not None:
        if args.reps < 1:
            raise ConfigError("--reps must be at least 1")
        cfg.reps = int(args.reps)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.threads = int(args.threads)
    if args.out is not None:
        cfg.out = Path(args.out)
    if getattr(args, "panel", None) is not None:
        cfg.panel = Path(args.panel)
    if getattr(args, "estimates", None) is not None:
        cfg.estimates = Path(args.estimates)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out if cfg.out is not None else Path(".")
    if not out.is_dir():
        raise StageError("output", f"output directory {out} does not exist")
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    reps = cfg.reps or 1
    for rep in range(reps):
        try:
            sim = simulate_panel(cfg.dgp, rep)
        except Exception as exc:
            raise StageError("simulate", f"replication {rep}: {exc}") from exc
        stem = "" if reps == 1 else f"_rep{rep}"
        write_panel(sim.panel, out / f"panel{stem}.csv")
        write_metadata(out / f"metadata{stem}.txt", sim)


def cmd_estimate(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    if cfg.panel is None:
        raise StageError("input", "no panel given (--panel or [estimator] panel)")
    try:
        panel = read_panel(cfg.panel)
    except Exception as exc:
        raise StageError("input", str(exc)) from exc
    try:
        res = estimate_panel(panel, cfg.est)
    except EstimationError as exc:
        raise StageError(exc.stage, str(exc)) from exc
    write_estimates(out / ESTIMATES_FILE, res)
    write_firm_estimates(out / FIRMS_FILE, res)


def cmd_counterfactual(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    if cfg.panel is None or cfg.estimates is None:
        raise StageError("input", "need --panel and --estimates (directory with estimate files)")
    try:
        panel = read_panel(cfg.panel)
        est = read_estimates(cfg.estimates / ESTIMATES_FILE)
        firms = read_firm_estimates(cfg.estimates / FIRMS_FILE)
    except Exception as exc:
        raise StageError("input", str(exc)) from exc
    try:
        rep = counterfactual_from_estimates(panel, est, firms)
    except Exception as exc:
        raise StageError("equilibrium", str(exc)) from exc
    write_welfare_csv(out / WELFARE_FILE, rep)


def cmd_montecarlo(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    res = run_mc(cfg.dgp, cfg.reps or 100, cfg.est, threads=cfg.threads)
    table = summarize(res, out)
    print(f"replications: {len(res.records)}  failures: {res.n_failure}")
    for name in ("theta_m", "theta_k", "theta_l", "rho", "beta", "gamma_err", "delta"):
        row = table[name]
        print(f"{name:10s} true={row['true']:+.4f} mean={row['mean']:+.4f} sd={row['sd']:.4f} rmse={row['rmse']:.4f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "counterfactual": cmd_counterfactual,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run file with [dgp], [estimator], [counterfactual]")
    common.add_argument("--out", help="existing output directory (default: .)")
    common.add_argument("--seed", type=int, help="overrides [dgp] seed")
    common.add_argument("--threads", type=int, help="worker processes for replications")
    common.add_argument("--rts", type=float, help="returns to scale for simulation and estimation")
    common.add_argument("--reps", type=int, help="number of replications")
    parser = argparse.ArgumentParser(prog="revprod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write simulated panel(s) and metadata")
    p = sub.add_parser("estimate", parents=[common], help="run the four estimation steps on a panel")
    p.add_argument("--panel", help="panel CSV")
    p = sub.add_parser("counterfactual", parents=[common], help="MCE to marginal-cost-pricing welfare")
    p.add_argument("--panel", help="panel CSV used for estimation")
    p.add_argument("--estimates", help="directory holding estimates.txt and firm_estimates.csv")
    sub.add_parser("montecarlo", parents=[common], help="replications with summary files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"revprod {args.command}: failed at stage config: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"revprod {args.command}: failed at stage {exc.stage}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"revprod {args.command}: failed at stage output: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Firm panel data model, CSV I/O and material-share trimming."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

__all__ = [
    "PanelError",
    "REQUIRED_COLUMNS",
    "TRUTH_COLUMNS",
    "FirmPeriod",
    "Panel",
    "read_panel",
    "write_panel",
    "material_share",
    "trim_shares",
]

REQUIRED_COLUMNS = ("firm_id", "period", "r", "m", "k", "l")
TRUTH_COLUMNS = ("omega", "u", "y", "p", "markup")


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class FirmPeriod:
    firm_id: int
    period: int
    r: float
    m: float
    k: float
    l: float
    omega: Optional[float] = None
    u: Optional[float] = None
    y: Optional[float] = None
    p: Optional[float] = None
    markup: Optional[float] = None


class Panel:
    """Immutable columnar panel. Rows are sorted by (period, firm_id).

    Required columns are ``firm_id, period, r, m, k, l``; truth columns are
    all present or all absent.
    """

    def __init__(self, columns: Dict[str, np.ndarray]):
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise PanelError(f"missing column(s): {', '.join(missing)}")
        extra = set(columns) - set(REQUIRED_COLUMNS) - set(TRUTH_COLUMNS)
        if extra:
            raise PanelError(f"unknown column(s): {', '.join(sorted(extra))}")
        n = len(columns["firm_id"])
        cols = {}
        for name, vals in columns.items():
            arr = np.asarray(vals)
            if arr.shape != (n,):
                raise PanelError(f"column {name} has wrong length")
            if name in ("firm_id", "period"):
                if not np.all(np.asarray(arr, dtype=float) == np.round(np.asarray(arr, dtype=float))):
                    raise PanelError(f"column {name} must hold integers")
                arr = arr.astype(np.int64)
            else:
                arr = arr.astype(float)
                bad = np.flatnonzero(~np.isfinite(arr))
                if bad.size:
                    raise PanelError(f"non-finite value in column {name} at row {int(bad[0])}")
            cols[name] = arr
        truth = [c for c in TRUTH_COLUMNS if c in cols]
        if truth and len(truth) != len(TRUTH_COLUMNS):
            raise PanelError("truth columns must be all present or all absent")
        order = np.lexsort((cols["firm_id"], cols["period"]))
        cols = {k: v[order] for k, v in cols.items()}
        if n > 1:
            dup = (np.diff(cols["period"]) == 0) & (np.diff(cols["firm_id"]) == 0)
            if np.any(dup):
                i = int(np.flatnonzero(dup)[0])
                raise PanelError(
                    f"duplicate (firm, period) = ({cols['firm_id'][i]}, {cols['period'][i]})"
                )
        if truth:
            gap = np.abs(cols["r"] - cols["p"] - cols["y"])
            if np.any(gap > 1e-12 * np.maximum(1.0, np.abs(cols["r"]))):
                raise PanelError("truth columns violate r = p + y")
        for arr in cols.values():
            arr.setflags(write=False)
        self._cols = cols

    # -- basic access ---------------------------------------------------
    def __len__(self):
        return self._cols["firm_id"].size

    def __getitem__(self, name: str) -> np.ndarray:
        return self._cols[name]

    def __eq__(self, other):
        if not isinstance(other, Panel) or set(self._cols) != set(other._cols):
            return NotImplemented if not isinstance(other, Panel) else False
        return all(np.array_equal(self._cols[c], other._cols[c]) for c in self._cols)

    @property
    def columns(self):
        return [c for c in REQUIRED_COLUMNS + TRUTH_COLUMNS if c in self._cols]

    @property
    def has_truth(self) -> bool:
        return "omega" in self._cols

    @property
    def periods(self) -> np.ndarray:
        return np.unique(self._cols["period"])

    @property
    def n_firms(self) -> int:
        return int(np.unique(self._cols["firm_id"]).size)

    @property
    def records(self) -> Iterator[FirmPeriod]:
        names = self.columns
        for i in range(len(self)):
            vals = {c: self._cols[c][i].item() for c in names}
            yield FirmPeriod(**vals)

    def subset(self, mask) -> "Panel":
        mask = np.asarray(mask, dtype=bool)
        return Panel({k: v[mask] for k, v in self._cols.items()})

    def keep_firms(self, firm_ids) -> "Panel":
        return self.subset(np.isin(self._cols["firm_id"], np.asarray(firm_ids)))

    # -- period views ---------------------------------------------------
    def at(self, t: int) -> Dict[str, np.ndarray]:
        """Columns of period ``t`` sorted by firm id."""
        sel = self._cols["period"] == t
        return {k: v[sel] for k, v in self._cols.items()}

    def firms_with_lags(self, t: int, depth: int) -> np.ndarray:
        """Firm ids present at ``t, t-1, ..., t-depth`` (label arithmetic)."""
        ids = None
        for d in range(depth + 1):
            cur = self._cols["firm_id"][self._cols["period"] == t - d]
            ids = cur if ids is None else np.intersect1d(ids, cur)
        return np.sort(ids)

    def aligned(self, t: int, lags=(0,), firm_ids=None) -> Dict[int, Dict[str, np.ndarray]]:
        """Period-``t - lag`` columns for a common firm set, aligned by firm id."""
        if firm_ids is None:
            firm_ids = self.firms_with_lags(t, max(lags))
        out = {}
        for lag in lags:
            cur = self.at(t - lag)
            pos = np.searchsorted(cur["firm_id"], firm_ids)
            if np.any(pos >= cur["firm_id"].size) or np.any(cur["firm_id"][np.minimum(pos, cur["firm_id"].size - 1)] != firm_ids):
                raise PanelError(f"firms missing at period {t - lag}")
            out[lag] = {k: v[pos] for k, v in cur.items()}
        return out


def _fmt(x) -> str:
    return repr(int(x)) if isinstance(x, (int, np.integer)) else f"{float(x):.17g}"


def write_panel(panel: Panel, path) -> None:
    cols = panel.columns
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        data = [panel[c] for c in cols]
        for i in range(len(panel)):
            fh.write(",".join(_fmt(col[i]) for col in data) + "\n")


def read_panel(path) -> Panel:
    path = Path(path)
    if not path.exists():
        raise PanelError(f"no such file: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError("empty file") from None
        if list(header[: len(REQUIRED_COLUMNS)]) != list(REQUIRED_COLUMNS):
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            raise PanelError(f"header mismatch; missing column(s): {', '.join(missing) or 'order'}")
        extra = header[len(REQUIRED_COLUMNS):]
        if extra and extra != list(TRUTH_COLUMNS):
            raise PanelError(f"unexpected optional columns: {extra}")
        vals = {h: [] for h in header}
        for row_idx, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise PanelError(f"row {row_idx}: expected {len(header)} cells, got {len(row)}")
            for h, cell in zip(header, row):
                cell = cell.strip()
                try:
                    v = int(cell) if h in ("firm_id", "period") else float(cell)
                except ValueError:
                    raise PanelError(f"row {row_idx}: non-numeric cell {cell!r} in column {h}") from None
                if h not in ("firm_id", "period") and not math.isfinite(v):
                    raise PanelError(f"row {row_idx}: non-finite value in column {h}")
                vals[h].append(v)
    return Panel({h: np.array(v) for h, v in vals.items()})


def material_share(rec) -> float:
    """Material cost over revenue, ``exp(m - r)`` (log material price is 0)."""
    return math.exp(rec.m - rec.r)


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    n = sorted_vals.size
    rank = max(1, math.ceil(pct * n))
    return float(sorted_vals[min(rank, n) - 1])


def trim_shares(panel: Panel, lower_pct: float = 0.02, upper_pct: float = 0.98,
                by_period: bool = False) -> Panel:
    """Drop firms with material shares outside (0, 1) or in the tail bands.

    Bounds are cumulative fractions: ``lower_pct=0.02, upper_pct=0.98`` trims
    2% on each side. Percentiles use the nearest-rank rule and are computed
    once on the input sample (pooled over periods unless ``by_period``).
    A firm is dropped from the whole panel if any of its records is flagged.
    """
    if not 0 <= lower_pct < upper_pct <= 1:
        raise PanelError("need 0 <= lower_pct < upper_pct <= 1")
    share = np.exp(panel["m"] - panel["r"])
    bad = ~((share > 0) & (share < 1))
    if by_period:
        masks = [panel["period"] == t for t in np.unique(panel["period"])]
    else:
        masks = [np.ones(len(panel), dtype=bool)]
    for mask in masks:
        vals = np.sort(share[mask & ~bad])
        if vals.size == 0:
            continue
        if lower_pct > 0:
            lo = _nearest_rank(vals, lower_pct)
            bad |= mask & (share <= lo)
        if upper_pct < 1:
            hi = _nearest_rank(vals, upper_pct)
            bad |= mask & (share > hi)
    drop = np.unique(panel["firm_id"][bad])
    keep = ~np.isin(panel["firm_id"], drop)
    if not np.any(keep):
        raise PanelError("trimming removed every firm")
    return panel.subset(keep)

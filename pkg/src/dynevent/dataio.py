"""CSV ingestion, aggregation, and the writers shared by the CLI outputs.

All floating-point output uses 17 significant digits so repeated runs with
the same configuration are byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .model import EventDesign, PanelData

__all__ = [
    "ingest_csv",
    "aggregate_monthly",
    "panel_to_frame",
    "write_csv",
    "read_csv",
    "write_manifest",
    "read_manifest",
    "FLOAT_FORMAT",
]

FLOAT_FORMAT = "%.17g"

_DEFAULT_SCHEMA = {"unit": "unit", "time": "time", "outcome": "outcome"}


def ingest_csv(
    path,
    t0: int,
    J: int,
    p: int = 2,
    schema: dict | None = None,
) -> tuple[PanelData, EventDesign, np.ndarray]:
    """Load a long-format unit/time/outcome CSV into a balanced panel.

    Times must form a contiguous integer range; they are remapped to 0..T and
    t0 refers to the remapped axis.  Returns the panel, the event design, and
    the unit labels in row order.
    """
    cols = dict(_DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(cols)
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        cols.update(schema)
    df = pd.read_csv(path, float_precision="round_trip")
    missing_cols = [c for c in cols.values() if c not in df.columns]
    if missing_cols:
        raise ValueError(f"missing columns in {path}: {missing_cols}")
    df = df[[cols["unit"], cols["time"], cols["outcome"]]].copy()
    df.columns = ["unit", "time", "outcome"]
    times = np.sort(df["time"].unique())
    if not np.issubdtype(np.asarray(times).dtype, np.integer):
        as_int = times.astype(np.int64, casting="unsafe")
        if not np.array_equal(as_int, times):
            raise ValueError("time values must be integers")
        times = as_int
    if times.size < 2 or np.any(np.diff(times) != 1):
        raise ValueError(f"times do not form a contiguous integer range: {times.tolist()}")
    if df.duplicated(["unit", "time"]).any():
        dupes = df[df.duplicated(["unit", "time"])][["unit", "time"]].values.tolist()
        raise ValueError(f"duplicate (unit, time) rows: {dupes[:10]}")
    wide = df.pivot(index="unit", columns="time", values="outcome").sort_index()
    wide = wide.reindex(columns=times)
    if wide.isna().any().any():
        holes = [
            (unit, int(time))
            for unit, row in wide.iterrows()
            for time, val in row.items()
            if pd.isna(val)
        ]
        shown = ", ".join(f"({u}, {t})" for u, t in holes[:20])
        extra = f", and {len(holes) - 20} more" if len(holes) > 20 else ""
        raise ValueError(f"unbalanced panel; missing (unit, time) cells: {shown}{extra}")
    panel = PanelData(wide.to_numpy(dtype=float))
    design = EventDesign(t0=t0, J=J, p=p)
    design.validate_horizon(panel.T)
    return panel, design, wide.index.to_numpy()


def aggregate_monthly(
    path_or_frame,
    unit_col: str = "unit",
    year_col: str = "year",
    month_col: str = "month",
    value_col: str = "value",
) -> pd.DataFrame:
    """Average monthly rows to one observation per unit-year."""
    df = (
        pd.read_csv(path_or_frame)
        if not isinstance(path_or_frame, pd.DataFrame)
        else path_or_frame
    )
    needed = [unit_col, year_col, month_col, value_col]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValueError(f"missing columns: {missing}")
    months = df[month_col]
    if months.min() < 1 or months.max() > 12:
        raise ValueError("month values must lie in 1..12")
    out = (
        df.groupby([unit_col, year_col], sort=True)[value_col]
        .mean()
        .reset_index()
        .rename(columns={unit_col: "unit", year_col: "time", value_col: "outcome"})
    )
    return out


def panel_to_frame(panel: PanelData, unit_ids=None) -> pd.DataFrame:
    """Long-format unit/time/outcome frame, the inverse of ingest_csv."""
    n, T = panel.n_units, panel.T
    units = np.arange(n) if unit_ids is None else np.asarray(unit_ids)
    return pd.DataFrame(
        {
            "unit": np.repeat(units, T + 1),
            "time": np.tile(np.arange(T + 1), n),
            "outcome": panel.outcomes.ravel(),
        }
    )


def write_csv(frame: pd.DataFrame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_csv(path, required_columns=None) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip")
    if required_columns:
        missing = [c for c in required_columns if c not in df.columns]
        if missing:
            raise ValueError(f"{path} lacks expected columns: {missing}")
    return df


def write_manifest(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, no timestamps."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")

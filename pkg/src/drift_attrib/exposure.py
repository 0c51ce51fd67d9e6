"""Exposure construction: transported concentration series, per-birth
exposure windows, trade-weighted exporter concentration, and assembly of
the regression panel."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .grid import (
    Cell,
    ConcentrationSeries,
    GridLoadError,
    GridSpec,
    format_month,
    nearest_ocean_cell,
    parse_month,
)
from .transport import ScoreMatrix

logger = logging.getLogger(__name__)

# calendar-month offsets relative to the birth month, inclusive bounds
WINDOWS: dict[str, tuple[int, int]] = {
    "full": (-9, -1),
    "preconception": (-12, -10),
    "trimester1": (-9, -7),
    "trimester2": (-6, -4),
    "trimester3": (-3, -1),
    "postpartum": (0, 2),
}
PREGNANCY_WINDOW = (-9, -1)


class WindowExclusion(Exception):
    """A birth cannot be scored on a window; reason drives the report."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class BirthRecord:
    id: str
    lon: float
    lat: float
    admin1: str
    country: str
    birth_month: int  # flat month index
    lbw: int
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lbw not in (0, 1):
            raise ValueError(f"lbw must be 0 or 1, got {self.lbw}")


@dataclass(frozen=True)
class TradeFlow:
    importer: str
    exporter: str
    month: int
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("trade value must be nonnegative")


@dataclass
class ExposureSeries:
    """Per-receiver monthly exposure under one provenance."""

    receiver: Cell
    provenance: str  # local | transported_all | transported_200km
    values: dict[int, float]
    missing_senders: int = 0


def transported_series(matrix: ScoreMatrix, mp: ConcentrationSeries) -> dict[Cell, ExposureSeries]:
    """Sum score * sender concentration over senders, per receiver-month.

    Senders with missing concentration contribute zero and are counted.
    """
    if mp.freq != "month":
        raise ValueError("transported_series needs a monthly concentration series")
    sender_mp = {cell: mp.cell_series(cell) for cell in matrix.senders()}
    by_receiver: dict[Cell, list] = {}
    for (s, r), vec in matrix.values.items():
        by_receiver.setdefault(r, []).append((s, vec))
    out: dict[Cell, ExposureSeries] = {}
    for receiver in sorted(by_receiver):
        values = {ym: 0.0 for ym in matrix.months}
        missing = 0
        for s, vec in sorted(by_receiver[receiver], key=lambda x: x[0]):
            series = sender_mp[s]
            for ym, score in zip(matrix.months, vec):
                conc = series.get(ym)
                if conc is None:
                    missing += 1
                    continue
                values[ym] += score * conc
        out[receiver] = ExposureSeries(receiver=receiver, provenance="transported",
                                       values=values, missing_senders=missing)
    return out


def local_series(mp: ConcentrationSeries, receivers: Sequence[Cell]) -> dict[Cell, ExposureSeries]:
    """Each receiver's own monthly concentration (missing months omitted)."""
    if mp.freq != "month":
        raise ValueError("local_series needs a monthly concentration series")
    return {
        tuple(r): ExposureSeries(receiver=tuple(r), provenance="local",
                                 values=mp.cell_series(tuple(r)))
        for r in receivers
    }


def window_exposure(values: Mapping[int, float], birth_month: int,
                    window: tuple[int, int]) -> float:
    """ln of the summed monthly values over a calendar-month window.

    Raises WindowExclusion("missing_window") when any month of the window
    is absent, and ("nonpositive_exposure") when the sum is not positive.
    """
    lo, hi = min(window), max(window)
    total = 0.0
    for k in range(lo, hi + 1):
        val = values.get(birth_month + k)
        if val is None:
            raise WindowExclusion("missing_window")
        total += val
    if total <= 0.0:
        raise WindowExclusion("nonpositive_exposure")
    return float(np.log(total))


def exporter_weighted_mp(flows: Iterable[TradeFlow],
                         country_mp: Mapping[str, float]) -> float | None:
    """Trade-value-weighted mean of exporter coastal concentration for one
    importer-month. None when total imports are zero or no exporter has a
    concentration value."""
    total = 0.0
    weighted = 0.0
    for flow in flows:
        conc = country_mp.get(flow.exporter)
        if conc is None:
            continue
        total += flow.value
        weighted += flow.value * conc
    if total <= 0.0:
        return None
    return weighted / total


def assemble_panel(
    births: Sequence[BirthRecord],
    exposures: Mapping[str, Mapping[Cell, Mapping[int, float]]],
    spec: GridSpec,
    mask: np.ndarray,
    windows: Mapping[str, tuple[int, int]] | None = None,
    covariate_series: Mapping[str, Mapping[Cell, Mapping[int, float]]] | None = None,
) -> tuple[pd.DataFrame, dict[str, int]]:
    """One row per retained birth: outcome, logged window exposures per
    provenance, logged pregnancy-window covariate means, FE group labels.

    Births failing any requested window or covariate are excluded; the
    report counts exclusions by reason.
    """
    windows = dict(windows) if windows is not None else dict(WINDOWS)
    covariate_series = covariate_series or {}
    report = {"retained": 0, "missing_window": 0, "nonpositive_exposure": 0,
              "missing_covariate": 0}
    rows = []
    for birth in sorted(births, key=lambda b: b.id):
        receiver = nearest_ocean_cell(birth.lon, birth.lat, spec, mask)
        row = {
            "id": birth.id,
            "lbw": birth.lbw,
            "admin1": birth.admin1,
            "country": birth.country,
            "birth_month": format_month(birth.birth_month),
            "country_month": f"{birth.country}:{format_month(birth.birth_month)}",
            "receiver_lat_idx": receiver[0],
            "receiver_lon_idx": receiver[1],
        }
        try:
            for prov in sorted(exposures):
                series = exposures[prov].get(receiver, {})
                values = series.values if isinstance(series, ExposureSeries) else series
                for wname, window in windows.items():
                    row[f"log_mp_{prov}_{wname}"] = window_exposure(
                        values, birth.birth_month, window)
            for cov in sorted(covariate_series):
                series = covariate_series[cov].get(receiver, {})
                values = series.values if isinstance(series, ExposureSeries) else series
                lo, hi = PREGNANCY_WINDOW
                window_vals = []
                for k in range(lo, hi + 1):
                    val = values.get(birth.birth_month + k)
                    if val is None:
                        raise WindowExclusion("missing_covariate")
                    window_vals.append(val)
                mean = float(np.mean(window_vals))
                if mean <= 0.0:
                    raise WindowExclusion("missing_covariate")
                row[f"log_{cov}_preg"] = float(np.log(mean))
        except WindowExclusion as exc:
            report[exc.reason] += 1
            continue
        for name, value in birth.covariates.items():
            row[name] = value
        rows.append(row)
        report["retained"] += 1
    if not rows:
        raise ValueError(f"empty retained panel (exclusions: {report})")
    return pd.DataFrame(rows), report


BIRTH_BASE_COLUMNS = ["id", "lon", "lat", "admin1", "country", "birth_month", "lbw"]


def load_births(path) -> list[BirthRecord]:
    """Birth CSV: id,lon,lat,admin1,country,birth_month,lbw,<covariates...>."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[: len(BIRTH_BASE_COLUMNS)] != BIRTH_BASE_COLUMNS:
            raise GridLoadError(f"bad birth header {header}", row=1)
        covariate_names = header[len(BIRTH_BASE_COLUMNS):]
        births = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise GridLoadError(f"expected {len(header)} fields, got {len(row)}", row=i)
            try:
                births.append(BirthRecord(
                    id=row[0],
                    lon=float(row[1]),
                    lat=float(row[2]),
                    admin1=row[3],
                    country=row[4],
                    birth_month=parse_month(row[5]),
                    lbw=int(row[6]),
                    covariates={name: float(val) for name, val
                                in zip(covariate_names, row[7:])},
                ))
            except ValueError as exc:
                raise GridLoadError(str(exc), row=i) from exc
    return births


def write_births(births: Sequence[BirthRecord], path) -> None:
    covariate_names = sorted({k for b in births for k in b.covariates})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BIRTH_BASE_COLUMNS + covariate_names)
        for b in births:
            writer.writerow(
                [b.id, repr(b.lon), repr(b.lat), b.admin1, b.country,
                 format_month(b.birth_month), b.lbw]
                + [repr(float(b.covariates[k])) for k in covariate_names]
            )


def load_trade(path) -> list[TradeFlow]:
    """Trade CSV: importer,exporter,month,value."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["importer", "exporter", "month", "value"]:
            raise GridLoadError(f"bad trade header {header}", row=1)
        flows = []
        for i, row in enumerate(reader, start=2):
            try:
                flows.append(TradeFlow(importer=row[0], exporter=row[1],
                                       month=parse_month(row[2]), value=float(row[3])))
            except (ValueError, IndexError) as exc:
                raise GridLoadError(str(exc), row=i) from exc
    return flows


def write_panel(panel: pd.DataFrame, path) -> None:
    """Panel CSV with a schema comment naming the column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# columns: " + ",".join(panel.columns) + "\n")
        panel.to_csv(fh, index=False, lineterminator="\n")


def read_panel(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")

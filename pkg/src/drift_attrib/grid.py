"""Gridded field data model: CSV ingestion, land/ocean masks, cell lookup,
sender-lattice selection, and shoreline buffers.

All cells are identified by ``(iy, ix)`` integer pairs (latitude index,
longitude index) into a regular lon/lat lattice of cell centers.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
# km per degree of arc on the 6371 km sphere; shared by transport scoring
# so that distances and search radii are in the same degree units.
KM_PER_DEG = 111.195
# degree length used to convert the sender lattice pitch from km.
LATTICE_KM_PER_DEG = 111.32

Cell = tuple[int, int]


class GridLoadError(ValueError):
    """Malformed or inconsistent grid CSV input."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km on a sphere of radius 6371 km.

    Accepts scalars or numpy arrays (broadcasting).
    """
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(x, dtype=float)) for x in (lon1, lat1, lon2, lat2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def parse_month(text: str) -> int:
    """Parse ``YYYY-MM`` into a flat month index (year*12 + month-1)."""
    try:
        year, month = text.split("-")
        y, m = int(year), int(month)
    except ValueError as exc:
        raise ValueError(f"bad month {text!r}, expected YYYY-MM") from exc
    if not 1 <= m <= 12:
        raise ValueError(f"bad month {text!r}, month component out of range")
    return y * 12 + (m - 1)


def format_month(ym: int) -> str:
    return f"{ym // 12:04d}-{ym % 12 + 1:02d}"


def month_of(day: dt.date) -> int:
    return day.year * 12 + (day.month - 1)


def month_first_day(ym: int) -> dt.date:
    return dt.date(ym // 12, ym % 12 + 1, 1)


def days_in_month(ym: int) -> int:
    nxt = month_first_day(ym + 1)
    return (nxt - month_first_day(ym)).days


@dataclass(frozen=True)
class GridSpec:
    """Regular lon/lat lattice of cell centers."""

    lon0: float
    lat0: float
    nlon: int
    nlat: int
    dlon: float = 0.25
    dlat: float = 0.25
    lat_min: float = -37.0
    lat_max: float = 37.0

    def __post_init__(self):
        if self.dlon <= 0 or self.dlat <= 0:
            raise ValueError("cell sizes must be positive")
        if self.nlon < 1 or self.nlat < 1:
            raise ValueError("grid must contain at least one cell")
        lat_hi = self.lat0 + (self.nlat - 1) * self.dlat
        if self.lat0 < self.lat_min - 1e-9 or lat_hi > self.lat_max + 1e-9:
            raise ValueError(
                f"cell centers [{self.lat0}, {lat_hi}] leave the coverage band "
                f"[{self.lat_min}, {self.lat_max}]"
            )

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + np.arange(self.nlon) * self.dlon

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + np.arange(self.nlat) * self.dlat

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        iy, ix = cell
        return (self.lon0 + ix * self.dlon, self.lat0 + iy * self.dlat)

    def locate(self, lon: float, lat: float) -> Cell:
        """Map a coordinate onto the enclosing cell; raises when off-grid."""
        lat_hi = self.lat0 + (self.nlat - 1) * self.dlat
        if lat < self.lat0 - self.dlat / 2 - 1e-9 or lat > lat_hi + self.dlat / 2 + 1e-9:
            raise ValueError(f"latitude out of range: {lat}")
        lon_hi = self.lon0 + (self.nlon - 1) * self.dlon
        if lon < self.lon0 - self.dlon / 2 - 1e-9 or lon > lon_hi + self.dlon / 2 + 1e-9:
            raise ValueError(f"longitude out of range: {lon}")
        ix = int(round((lon - self.lon0) / self.dlon))
        iy = int(round((lat - self.lat0) / self.dlat))
        return (min(max(iy, 0), self.nlat - 1), min(max(ix, 0), self.nlon - 1))

    def snap(self, lon: float, lat: float) -> Cell:
        """Nearest cell center without the off-grid check (clamped)."""
        ix = int(round((lon - self.lon0) / self.dlon))
        iy = int(round((lat - self.lat0) / self.dlat))
        return (min(max(iy, 0), self.nlat - 1), min(max(ix, 0), self.nlon - 1))


@dataclass(frozen=True)
class SenderConfig:
    """Sender lattice: pitch in km and minimum distance to the shoreline."""

    buffer_km: float = 200.0
    spacing_km: float = 250.0

    def __post_init__(self):
        if self.buffer_km < 0:
            raise ValueError("buffer_km must be nonnegative")
        if self.spacing_km <= 0:
            raise ValueError("spacing_km must be positive")

    @property
    def res(self) -> float:
        """Lattice pitch in degrees."""
        return self.spacing_km / LATTICE_KM_PER_DEG


@dataclass(frozen=True)
class VectorFieldSeries:
    """Daily current vectors (m/s) on a grid; NaN on land cells."""

    spec: GridSpec
    days: tuple[dt.date, ...]
    u: np.ndarray  # (ndays, nlat, nlon)
    v: np.ndarray
    mask: np.ndarray  # (nlat, nlon) bool, True = ocean

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise ValueError("days must be strictly increasing")
        if not np.all(np.isfinite(self.u[:, self.mask])) or not np.all(
            np.isfinite(self.v[:, self.mask])
        ):
            raise ValueError("non-finite vector on an ocean cell")

    def day_index(self, day: dt.date) -> int | None:
        try:
            return self.days.index(day)
        except ValueError:
            return None

    @property
    def ocean_cells(self) -> list[Cell]:
        iy, ix = np.nonzero(self.mask)
        return list(zip(iy.tolist(), ix.tolist()))


@dataclass(frozen=True)
class ConcentrationSeries:
    """Per-cell nonnegative concentration by month or day; NaN = missing."""

    spec: GridSpec
    periods: tuple  # ints (flat month index) for monthly, dates for daily
    values: np.ndarray  # (nperiods, nlat, nlon)
    mask: np.ndarray
    freq: str = "month"  # "month" | "day"

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.periods, self.periods[1:])):
            raise ValueError("periods must be strictly increasing")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() < 0:
            raise ValueError("concentration values must be nonnegative")

    def period_index(self, period) -> int | None:
        try:
            return self.periods.index(period)
        except ValueError:
            return None

    def cell_series(self, cell: Cell) -> dict:
        """Period -> value for one cell, omitting missing periods."""
        iy, ix = cell
        col = self.values[:, iy, ix]
        return {p: float(x) for p, x in zip(self.periods, col) if np.isfinite(x)}


def _fmt(x: float) -> str:
    return repr(float(x))


def _open_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        yield from reader


def load_mask(path, spec: GridSpec) -> np.ndarray:
    """Load an explicit ocean mask CSV (header lon,lat,ocean)."""
    mask = np.zeros((spec.nlat, spec.nlon), dtype=bool)
    rows = _open_rows(path)
    header = next(rows, None)
    if header != ["lon", "lat", "ocean"]:
        raise GridLoadError(f"bad mask header {header}", row=1)
    for i, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise GridLoadError(f"expected 3 fields, got {len(row)}", row=i)
        try:
            lon, lat, ocean = float(row[0]), float(row[1]), int(row[2])
            if ocean not in (0, 1):
                raise ValueError("ocean flag must be 0 or 1")
            cell = spec.locate(lon, lat)
        except ValueError as exc:
            raise GridLoadError(str(exc), row=i) from exc
        mask[cell] = bool(ocean)
    return mask


def load_vector_field(path, spec: GridSpec, mask: np.ndarray | None = None) -> VectorFieldSeries:
    """Load a vector CSV (header lon,lat,date,u,v), rows in any order.

    Cells absent from the file are land unless an explicit mask says
    otherwise; an explicit all-ocean mask with absent rows is an error.
    """
    rows = _open_rows(path)
    header = next(rows, None)
    if header != ["lon", "lat", "date", "u", "v"]:
        raise GridLoadError(f"bad vector header {header}", row=1)
    seen: dict[tuple[dt.date, Cell], tuple[float, float]] = {}
    for i, row in enumerate(rows, start=2):
        if len(row) != 5:
            raise GridLoadError(f"expected 5 fields, got {len(row)}", row=i)
        try:
            lon, lat = float(row[0]), float(row[1])
            day = dt.date.fromisoformat(row[2])
            u, v = float(row[3]), float(row[4])
            cell = spec.locate(lon, lat)
        except ValueError as exc:
            raise GridLoadError(str(exc), row=i) from exc
        key = (day, cell)
        if key in seen:
            raise GridLoadError(f"duplicate (cell, day) entry {row[:3]}", row=i)
        seen[key] = (u, v)
    if not seen:
        raise GridLoadError("vector file contains no data rows")
    days = tuple(sorted({d for d, _ in seen}))
    for a, b in zip(days, days[1:]):
        if (b - a).days != 1:
            raise GridLoadError(f"gap in daily coverage between {a} and {b}")
    cells_with_data = {c for _, c in seen}
    if mask is None:
        mask = np.zeros((spec.nlat, spec.nlon), dtype=bool)
        for iy, ix in cells_with_data:
            mask[iy, ix] = True
    u = np.full((len(days), spec.nlat, spec.nlon), np.nan)
    v = np.full_like(u, np.nan)
    day_idx = {d: i for i, d in enumerate(days)}
    for (day, (iy, ix)), (uu, vv) in seen.items():
        u[day_idx[day], iy, ix] = uu
        v[day_idx[day], iy, ix] = vv
    return VectorFieldSeries(spec=spec, days=days, u=u, v=v, mask=mask)


def export_vector_field(series: VectorFieldSeries, path) -> None:
    """Write the canonical vector CSV: sorted by (date, lat, lon)."""
    spec = series.spec
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lon", "lat", "date", "u", "v"])
        for di, day in enumerate(series.days):
            for iy in range(spec.nlat):
                for ix in range(spec.nlon):
                    if not series.mask[iy, ix]:
                        continue
                    lon, lat = spec.cell_center((iy, ix))
                    writer.writerow(
                        [_fmt(lon), _fmt(lat), day.isoformat(),
                         _fmt(series.u[di, iy, ix]), _fmt(series.v[di, iy, ix])]
                    )


def load_concentration(path, spec: GridSpec, mask: np.ndarray | None = None) -> ConcentrationSeries:
    """Load a concentration CSV (header lon,lat,period,value)."""
    rows = _open_rows(path)
    header = next(rows, None)
    if header != ["lon", "lat", "period", "value"]:
        raise GridLoadError(f"bad concentration header {header}", row=1)
    seen: dict[tuple[object, Cell], float] = {}
    freq = None
    for i, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise GridLoadError(f"expected 4 fields, got {len(row)}", row=i)
        try:
            lon, lat = float(row[0]), float(row[1])
            if len(row[2]) == 7:
                period, this_freq = parse_month(row[2]), "month"
            else:
                period, this_freq = dt.date.fromisoformat(row[2]), "day"
            value = float(row[3])
            if value < 0:
                raise ValueError(f"negative concentration {value}")
            cell = spec.locate(lon, lat)
        except ValueError as exc:
            raise GridLoadError(str(exc), row=i) from exc
        if freq is None:
            freq = this_freq
        elif freq != this_freq:
            raise GridLoadError("mixed monthly and daily periods", row=i)
        key = (period, cell)
        if key in seen:
            raise GridLoadError(f"duplicate (cell, period) entry {row[:3]}", row=i)
        seen[key] = value
    if not seen:
        raise GridLoadError("concentration file contains no data rows")
    periods = tuple(sorted({p for p, _ in seen}))
    if mask is None:
        mask = np.zeros((spec.nlat, spec.nlon), dtype=bool)
        for _, (iy, ix) in seen:
            mask[iy, ix] = True
    values = np.full((len(periods), spec.nlat, spec.nlon), np.nan)
    per_idx = {p: i for i, p in enumerate(periods)}
    for (period, (iy, ix)), val in seen.items():
        values[per_idx[period], iy, ix] = val
    return ConcentrationSeries(spec=spec, periods=periods, values=values, mask=mask, freq=freq)


def export_concentration(series: ConcentrationSeries, path) -> None:
    spec = series.spec
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lon", "lat", "period", "value"])
        for pi, period in enumerate(series.periods):
            label = format_month(period) if series.freq == "month" else period.isoformat()
            for iy in range(spec.nlat):
                for ix in range(spec.nlon):
                    val = series.values[pi, iy, ix]
                    if not np.isfinite(val):
                        continue
                    lon, lat = spec.cell_center((iy, ix))
                    writer.writerow([_fmt(lon), _fmt(lat), label, _fmt(val)])


def nearest_ocean_cell(lon: float, lat: float, spec: GridSpec, mask: np.ndarray) -> Cell:
    """Ocean cell whose center is closest (great circle) to the point.

    Ties broken by lowest (lat index, lon index).
    """
    iy, ix = np.nonzero(mask)
    if iy.size == 0:
        raise ValueError("mask contains no ocean cell")
    lons = spec.lon0 + ix * spec.dlon
    lats = spec.lat0 + iy * spec.dlat
    d = haversine_km(lon, lat, lons, lats)
    best = d.min()
    # candidates already iterate in (iy, ix) order from np.nonzero
    k = int(np.nonzero(d == best)[0][0])
    return (int(iy[k]), int(ix[k]))


def coastal_cells(mask: np.ndarray) -> list[Cell]:
    """Ocean cells with a land cell among their 8 neighbors, in (iy, ix) order."""
    nlat, nlon = mask.shape
    out = []
    for iy in range(nlat):
        for ix in range(nlon):
            if not mask[iy, ix]:
                continue
            neighbors = mask[max(iy - 1, 0):iy + 2, max(ix - 1, 0):ix + 2]
            if not neighbors.all():
                out.append((iy, ix))
    return out


def distance_to_land_km(spec: GridSpec, mask: np.ndarray, cells: Sequence[Cell]) -> np.ndarray:
    """Min great-circle distance from each cell center to any land cell center.

    Infinite when the mask has no land.
    """
    ly, lx = np.nonzero(~mask)
    if ly.size == 0:
        return np.full(len(cells), np.inf)
    land_lons = spec.lon0 + lx * spec.dlon
    land_lats = spec.lat0 + ly * spec.dlat
    out = np.empty(len(cells))
    for i, cell in enumerate(cells):
        lon, lat = spec.cell_center(cell)
        out[i] = haversine_km(lon, lat, land_lons, land_lats).min()
    return out


def select_senders(spec: GridSpec, mask: np.ndarray, cfg: SenderConfig) -> list[Cell]:
    """Ocean cells on the res-pitch lattice at least buffer_km from land.

    The lattice is anchored at the grid origin; each lattice intersection
    maps to the nearest grid cell. Deterministic (iy, ix) order.
    """
    res = cfg.res
    lon_hi = spec.lon0 + (spec.nlon - 1) * spec.dlon
    lat_hi = spec.lat0 + (spec.nlat - 1) * spec.dlat
    candidates: set[Cell] = set()
    lat = spec.lat0
    while lat <= lat_hi + 1e-9:
        lon = spec.lon0
        while lon <= lon_hi + 1e-9:
            cell = spec.snap(lon, lat)
            if mask[cell] and spec.lat_min - 1e-9 <= lat <= spec.lat_max + 1e-9:
                candidates.add(cell)
            lon += res
        lat += res
    ordered = sorted(candidates)
    dist = distance_to_land_km(spec, mask, ordered)
    senders = [c for c, d in zip(ordered, dist) if d >= cfg.buffer_km]
    if not senders:
        logger.warning("sender selection returned 0 cells (of %d lattice candidates)", len(ordered))
    return senders


def shoreline_buffer_mean(
    conc: ConcentrationSeries, shoreline: Sequence[Cell], buffer_km: float
) -> dict:
    """Per-period unweighted mean over ocean cells within buffer_km of the
    given shoreline cells. Periods with no cell in the buffer are missing
    (absent from the result).
    """
    if not shoreline:
        raise ValueError("need at least one shoreline cell")
    spec = conc.spec
    iy, ix = np.nonzero(conc.mask)
    lons = spec.lon0 + ix * spec.dlon
    lats = spec.lat0 + iy * spec.dlat
    within = np.zeros(iy.size, dtype=bool)
    for cell in shoreline:
        lon, lat = spec.cell_center(cell)
        within |= haversine_km(lon, lat, lons, lats) <= buffer_km
    if not within.any():
        return {}
    sel_iy, sel_ix = iy[within], ix[within]
    out = {}
    for pi, period in enumerate(conc.periods):
        vals = conc.values[pi, sel_iy, sel_ix]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[period] = float(vals.mean())
    return out

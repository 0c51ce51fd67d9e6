"""Streamline tracing over daily current fields and downstream-intensity
scoring, with day- and month-level aggregation into a sparse score matrix.

A trace starts at a sender cell center, follows the interpolated current
one day per step, and at every step scores all receiver cells inside a
growing search disk with an exponential decay in (radius, off-axis angle,
distance). Traces stop when the next position leaves the convex hull of
ocean cell centers.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .grid import (
    Cell,
    GridSpec,
    KM_PER_DEG,
    VectorFieldSeries,
    days_in_month,
    format_month,
    haversine_km,
    month_first_day,
    month_of,
    parse_month,
)

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 24 * 3600
# meters per degree of longitude at the equator on the 6371 km sphere
METERS_PER_DEG_EQUATOR = math.pi / 180.0 * 6371.0e3
POLAR_LAT_LIMIT = 85.0


class PolarSingularity(RuntimeError):
    """Advection aborted: latitude too close to the pole."""


class OutsideOceanError(ValueError):
    """Position has no ocean support for interpolation."""


@dataclass(frozen=True)
class TransportParams:
    """Decay coefficients and trace schedule."""

    alpha: float = 0.8
    beta: float = 0.49
    gamma: float = 0.23
    rad0: float = 1.0
    rad_step: float = 0.05
    max_steps: int = 90
    theta_cutoff: float = 0.4

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "rad0", "rad_step", "theta_cutoff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    def rad(self, t: int) -> float:
        return self.rad0 + t * self.rad_step


@dataclass(frozen=True)
class TraceState:
    """Position and interpolated current of a streamline at one step."""

    sender: Cell
    day: dt.date
    t: int
    lon: float
    lat: float
    rad: float
    u: float
    v: float


@dataclass(frozen=True)
class StepScore:
    """Positive downstream intensity of one (sender, receiver, day, step)."""

    sender: Cell
    receiver: Cell
    day: dt.date
    t: int
    value: float


class OceanHull:
    """Point-in-convex-hull test over ocean cell centers (degree space).

    Degenerate layouts (single point, collinear centers) fall back to a
    tolerance-based segment test.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) == 0:
            raise ValueError("need an (n, 2) array of lon/lat points")
        self._tri = None
        self._points = points
        if len(points) >= 3:
            try:
                self._tri = Delaunay(points)
            except QhullError:
                pass  # collinear; segment fallback below

    @classmethod
    def from_series(cls, series: VectorFieldSeries) -> "OceanHull":
        iy, ix = np.nonzero(series.mask)
        if iy.size == 0:
            raise OutsideOceanError("mask contains no ocean cell")
        spec = series.spec
        pts = np.column_stack([spec.lon0 + ix * spec.dlon, spec.lat0 + iy * spec.dlat])
        return cls(pts)

    def contains(self, lon: float, lat: float) -> bool:
        if self._tri is not None:
            return bool(self._tri.find_simplex(np.array([[lon, lat]]))[0] >= 0)
        p = np.array([lon, lat])
        base = self._points[0]
        if len(self._points) == 1:
            return bool(np.allclose(p, base, atol=1e-9))
        axis = self._points[-1] - base
        norm = np.linalg.norm(axis)
        if norm == 0:
            return bool(np.allclose(p, base, atol=1e-9))
        axis = axis / norm
        rel = p - base
        along = rel @ axis
        perp = rel - along * axis
        ts = (self._points - base) @ axis
        return bool(np.linalg.norm(perp) <= 1e-9 and ts.min() - 1e-9 <= along <= ts.max() + 1e-9)


class ReceiverIndex:
    """Spatial index over receiver cell centers for disk queries.

    Queries run against a 3D KD-tree on unit-sphere coordinates (chord
    radius bound), then filter exactly by great-circle distance, so the
    result equals a full scan.
    """

    def __init__(self, spec: GridSpec, cells: Sequence[Cell]):
        self.spec = spec
        self.cells = [tuple(c) for c in cells]
        centers = np.array([spec.cell_center(c) for c in self.cells], dtype=float)
        if centers.size == 0:
            centers = centers.reshape(0, 2)
        self.lons = centers[:, 0] if len(centers) else np.empty(0)
        self.lats = centers[:, 1] if len(centers) else np.empty(0)
        self._tree = cKDTree(_unit_xyz(self.lons, self.lats)) if len(self.cells) else None

    def __len__(self) -> int:
        return len(self.cells)

    def query_disk(self, lon: float, lat: float, rad_deg: float) -> np.ndarray:
        """Indices of receivers within rad_deg (great-circle km / 111.195)."""
        if self._tree is None:
            return np.empty(0, dtype=int)
        # chord length for the bounding central angle, with boundary slack
        angle = min(rad_deg * KM_PER_DEG / 6371.0, math.pi)
        chord = 2.0 * math.sin(angle / 2.0) + 1e-12
        idx = self._tree.query_ball_point(_unit_xyz(lon, lat), chord)
        idx = np.asarray(sorted(idx), dtype=int)
        if idx.size == 0:
            return idx
        d = haversine_km(lon, lat, self.lons[idx], self.lats[idx]) / KM_PER_DEG
        return idx[d <= rad_deg]


def _unit_xyz(lon, lat) -> np.ndarray:
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def interpolate_current(series: VectorFieldSeries, day_index: int, lon: float, lat: float):
    """Bilinear interpolation of (u, v) at a position, using the 4 enclosing
    cell centers; degenerates to linear/nearest at grid edges. Land corners
    are dropped and the remaining weights renormalized.
    """
    spec = series.spec
    fx = (lon - spec.lon0) / spec.dlon
    fy = (lat - spec.lat0) / spec.dlat
    fx = min(max(fx, 0.0), spec.nlon - 1.0)
    fy = min(max(fy, 0.0), spec.nlat - 1.0)
    ix0 = min(int(math.floor(fx)), max(spec.nlon - 2, 0))
    iy0 = min(int(math.floor(fy)), max(spec.nlat - 2, 0))
    wx = fx - ix0
    wy = fy - iy0
    usum = vsum = wsum = 0.0
    for (iy, ix, w) in (
        (iy0, ix0, (1 - wy) * (1 - wx)),
        (iy0, min(ix0 + 1, spec.nlon - 1), (1 - wy) * wx),
        (min(iy0 + 1, spec.nlat - 1), ix0, wy * (1 - wx)),
        (min(iy0 + 1, spec.nlat - 1), min(ix0 + 1, spec.nlon - 1), wy * wx),
    ):
        if w == 0.0 or not series.mask[iy, ix]:
            continue
        usum += w * series.u[day_index, iy, ix]
        vsum += w * series.v[day_index, iy, ix]
        wsum += w
    if wsum == 0.0:
        raise OutsideOceanError(f"no ocean support at ({lon}, {lat})")
    return usum / wsum, vsum / wsum


def advect(lon: float, lat: float, u: float, v: float, metric: str = "faithful"):
    """One 24 h displacement of a position by the current vector.

    "faithful" divides both axis displacements by the longitude-degree
    length at the current latitude; "spherical" uses the meridian degree
    length for the latitude displacement instead.
    """
    if abs(lat) > POLAR_LAT_LIMIT:
        raise PolarSingularity(f"latitude {lat} beyond {POLAR_LAT_LIMIT} deg")
    lon_deg_m = METERS_PER_DEG_EQUATOR * math.cos(math.radians(lat))
    dlon = SECONDS_PER_DAY * u / lon_deg_m
    if metric == "faithful":
        dlat = SECONDS_PER_DAY * v / lon_deg_m
    elif metric == "spherical":
        dlat = SECONDS_PER_DAY * v / METERS_PER_DEG_EQUATOR
    else:
        raise ValueError(f"unknown advection metric {metric!r}")
    return lon + dlon, lat + dlat


def score_step(state: TraceState, receiver_lon: float, receiver_lat: float,
               params: TransportParams) -> float:
    """Downstream intensity of one receiver at the current trace state.

    Zero outside the search radius or beyond the angle cutoff; the decay
    exponent combines the search radius, the perpendicular scalar product
    of the receiver offset against the current direction, and the
    receiver-to-position distance in degree units.
    """
    dist = float(haversine_km(state.lon, state.lat, receiver_lon, receiver_lat)) / KM_PER_DEG
    if dist > state.rad:
        return 0.0
    lx = receiver_lon - state.lon
    ly = receiver_lat - state.lat
    lnorm = math.hypot(lx, ly)
    speed = math.hypot(state.u, state.v)
    if speed == 0.0:
        # direction undefined; only a co-located receiver scores
        return math.exp(-params.alpha * state.rad) if dist < 1e-12 else 0.0
    un, vn = state.u / speed, state.v / speed
    if lnorm > 0.0:
        cosang = (lx * un + ly * vn) / lnorm
        angle = math.acos(min(max(cosang, -1.0), 1.0))
        if angle > params.theta_cutoff:
            return 0.0
    theta = abs(vn * lx - un * ly)
    return math.exp(-params.alpha * state.rad - params.beta * theta - params.gamma * dist)


def _score_disk(state: TraceState, receivers: ReceiverIndex, params: TransportParams
                ) -> list[StepScore]:
    idx = receivers.query_disk(state.lon, state.lat, state.rad)
    out = []
    for k in idx:
        value = score_step(state, float(receivers.lons[k]), float(receivers.lats[k]), params)
        if value > 0.0:
            out.append(StepScore(state.sender, receivers.cells[k], state.day, state.t, value))
    return out


def trace_streamline(
    series: VectorFieldSeries,
    sender: Cell,
    start_day: dt.date,
    receivers: ReceiverIndex,
    params: TransportParams,
    metric: str = "faithful",
    hull: OceanHull | None = None,
) -> list[StepScore]:
    """Trace one streamline and score receivers at every step.

    Pure in (sender, start_day, series, params): safe to run concurrently.
    The trace truncates when field coverage ends, when the next position
    leaves the ocean convex hull, or (flagged) at the polar singularity.
    """
    sender = tuple(sender)
    if not series.mask[sender]:
        raise ValueError(f"sender cell {sender} is on land")
    if hull is None:
        hull = OceanHull.from_series(series)
    lon, lat = series.spec.cell_center(sender)
    scores: list[StepScore] = []
    for t in range(params.max_steps):
        day_index = series.day_index(start_day + dt.timedelta(days=t))
        if day_index is None:
            break  # field coverage ends
        try:
            u, v = interpolate_current(series, day_index, lon, lat)
        except OutsideOceanError:
            break
        state = TraceState(sender=sender, day=start_day, t=t, lon=lon, lat=lat,
                           rad=params.rad(t), u=u, v=v)
        scores.extend(_score_disk(state, receivers, params))
        try:
            nlon, nlat = advect(lon, lat, u, v, metric=metric)
        except PolarSingularity:
            logger.warning("trace %s %s truncated at step %d: polar singularity",
                           sender, start_day, t)
            break
        if not hull.contains(nlon, nlat):
            break
        lon, lat = nlon, nlat
    return scores


def trace_positions(
    series: VectorFieldSeries,
    sender: Cell,
    start_day: dt.date,
    params: TransportParams,
    metric: str = "faithful",
    hull: OceanHull | None = None,
) -> list[tuple[int, float, float]]:
    """Streamline positions (t, lon, lat) without scoring; diagnostics."""
    sender = tuple(sender)
    if not series.mask[sender]:
        raise ValueError(f"sender cell {sender} is on land")
    if hull is None:
        hull = OceanHull.from_series(series)
    lon, lat = series.spec.cell_center(sender)
    out = []
    for t in range(params.max_steps):
        day_index = series.day_index(start_day + dt.timedelta(days=t))
        if day_index is None:
            break
        try:
            u, v = interpolate_current(series, day_index, lon, lat)
        except OutsideOceanError:
            break
        out.append((t, lon, lat))
        try:
            nlon, nlat = advect(lon, lat, u, v, metric=metric)
        except PolarSingularity:
            break
        if not hull.contains(nlon, nlat):
            break
        lon, lat = nlon, nlat
    return out


def aggregate_daily(scores: Iterable[StepScore]) -> dict[tuple[Cell, Cell, dt.date], float]:
    """Sum step scores onto arrival days d' = d + t.

    Summation runs in sorted (sender, receiver, d', d, t) order so results
    are independent of how traces were partitioned across workers.
    """
    ordered = sorted(
        scores,
        key=lambda s: (s.sender, s.receiver, s.day + dt.timedelta(days=s.t),
                       s.day, s.t, s.value),
    )
    out: dict[tuple[Cell, Cell, dt.date], float] = {}
    for s in ordered:
        key = (s.sender, s.receiver, s.day + dt.timedelta(days=s.t))
        out[key] = out.get(key, 0.0) + s.value
    return out


def complete_months(period_start: dt.date, period_end: dt.date, max_steps: int) -> list[int]:
    """Months fully covered by the run: they begin at least max_steps days
    after the first field day and end no later than the last field day.
    """
    lead = period_start + dt.timedelta(days=max_steps)
    out = []
    ym = month_of(period_start)
    while month_first_day(ym) <= period_end:
        first = month_first_day(ym)
        last = month_first_day(ym + 1) - dt.timedelta(days=1)
        if first >= lead and last <= period_end:
            out.append(ym)
        ym += 1
    return out


@dataclass(frozen=True)
class ScoreMatrix:
    """Sparse (sender, receiver) -> per-month intensity, explicitly
    zero-filled over every complete month of the run."""

    spec: GridSpec
    months: tuple[int, ...]  # flat month indices
    values: dict[tuple[Cell, Cell], np.ndarray]

    def value(self, sender: Cell, receiver: Cell, ym: int) -> float:
        vec = self.values.get((tuple(sender), tuple(receiver)))
        if vec is None or ym not in self.months:
            return 0.0
        return float(vec[self.months.index(ym)])

    @property
    def pairs(self) -> list[tuple[Cell, Cell]]:
        return sorted(self.values)

    def senders(self) -> list[Cell]:
        return sorted({s for s, _ in self.values})

    def receivers(self) -> list[Cell]:
        return sorted({r for _, r in self.values})


def aggregate_monthly(
    daily: Mapping[tuple[Cell, Cell, dt.date], float],
    spec: GridSpec,
    period_start: dt.date,
    period_end: dt.date,
    max_steps: int,
) -> ScoreMatrix:
    """Average daily scores over calendar days per complete month, treating
    absent days as zero, and zero-fill every known pair across all complete
    months."""
    months = tuple(complete_months(period_start, period_end, max_steps))
    pairs = sorted({(s, r) for (s, r, _) in daily})
    values = {pair: np.zeros(len(months)) for pair in pairs}
    month_pos = {ym: i for i, ym in enumerate(months)}
    for (s, r, day) in sorted(daily):
        pos = month_pos.get(month_of(day))
        if pos is None:
            continue
        values[(s, r)][pos] += daily[(s, r, day)]
    for ym, pos in month_pos.items():
        ndays = days_in_month(ym)
        for pair in pairs:
            values[pair][pos] /= ndays
    return ScoreMatrix(spec=spec, months=months, values=values)


def write_score_matrix(matrix: ScoreMatrix, path) -> None:
    """CSV: sender_lon,sender_lat,receiver_lon,receiver_lat,month,score with
    zero-filled rows included; sorted by (sender, receiver, month)."""
    spec = matrix.spec
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sender_lon", "sender_lat", "receiver_lon", "receiver_lat",
                         "month", "score"])
        for (sender, receiver) in matrix.pairs:
            slon, slat = spec.cell_center(sender)
            rlon, rlat = spec.cell_center(receiver)
            vec = matrix.values[(sender, receiver)]
            for ym, val in zip(matrix.months, vec):
                writer.writerow([repr(slon), repr(slat), repr(rlon), repr(rlat),
                                 format_month(ym), repr(float(val))])


def read_score_matrix(path, spec: GridSpec) -> ScoreMatrix:
    months: set[int] = set()
    raw: dict[tuple[Cell, Cell], dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sender_lon", "sender_lat", "receiver_lon", "receiver_lat",
                      "month", "score"]:
            raise ValueError(f"bad score matrix header {header}")
        for row in reader:
            sender = spec.locate(float(row[0]), float(row[1]))
            receiver = spec.locate(float(row[2]), float(row[3]))
            ym = parse_month(row[4])
            months.add(ym)
            raw.setdefault((sender, receiver), {})[ym] = float(row[5])
    ordered = tuple(sorted(months))
    values = {}
    for pair, by_month in raw.items():
        values[pair] = np.array([by_month.get(ym, 0.0) for ym in ordered])
    return ScoreMatrix(spec=spec, months=ordered, values=values)

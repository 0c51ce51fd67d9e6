"""Seeded synthetic data: current fields, concentration fields, and birth
panels with known ground truth.

All randomness comes from numpy's PCG64 generator seeded from the config,
so a fixed seed reproduces byte-identical CSV outputs.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .grid import (
    Cell,
    ConcentrationSeries,
    GridSpec,
    VectorFieldSeries,
    format_month,
)
from .exposure import BirthRecord, window_exposure, WINDOWS

logger = logging.getLogger(__name__)

FIELD_KINDS = ("uniform", "gyre", "random_divfree")


@dataclass(frozen=True)
class DgpConfig:
    """Everything the generators need; seed fixes all outputs."""

    seed: int = 0
    spec: GridSpec = GridSpec(lon0=0.0, lat0=0.0, nlon=12, nlat=12, lat_max=37.0)
    field_kind: str = "uniform"
    field_speed: float = 0.5  # m/s
    n_days: int = 180
    start_day: dt.date = dt.date(2017, 4, 1)
    # concentration DGP: per-cell lognormal AR(1) in months
    ar1_rho: float = 0.3
    lognormal_sigma: float = 0.5
    mp_level: float = 1.0
    n_months: int = 30
    start_month: int = 2016 * 12  # 2016-01
    # birth panel DGP
    panel_size: int = 50_000
    lbw_base: float = 0.0276
    true_betas: dict = field(default_factory=dict)  # window name -> per-unit-prob slope
    n_admin1: int = 40
    n_countries: int = 4
    admin1_sd: float = 0.002
    country_month_sd: float = 0.002
    noise_sd: float = 0.0

    def __post_init__(self):
        if not 0 <= self.ar1_rho < 1:
            raise ValueError("ar1_rho must be in [0, 1)")
        if self.lognormal_sigma < 0:
            raise ValueError("lognormal_sigma must be nonnegative")
        if self.field_kind not in FIELD_KINDS:
            raise ValueError(f"field_kind must be one of {FIELD_KINDS}")


def _rng(cfg: DgpConfig, stream: str) -> np.random.Generator:
    # crc32 keeps the stream key stable across processes (str hash is not)
    return np.random.default_rng(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, zlib.crc32(stream.encode())])))


def border_land_mask(spec: GridSpec, width: int = 1) -> np.ndarray:
    """All-ocean interior with a land ring of the given width."""
    mask = np.zeros((spec.nlat, spec.nlon), dtype=bool)
    mask[width:spec.nlat - width, width:spec.nlon - width] = True
    return mask


def gen_current_field(cfg: DgpConfig, mask: np.ndarray | None = None) -> VectorFieldSeries:
    """Daily current vectors of the configured kind.

    uniform: constant eastward (field_speed, 0); gyre: solid-body rotation
    with tangential speed proportional to radius up to a rim; and
    random_divfree: centered-difference curl of a random smooth stream
    function (discretely divergence-free).
    """
    spec = cfg.spec
    if mask is None:
        mask = np.ones((spec.nlat, spec.nlon), dtype=bool)
    days = tuple(cfg.start_day + dt.timedelta(days=i) for i in range(cfg.n_days))
    u = np.zeros((cfg.n_days, spec.nlat, spec.nlon))
    v = np.zeros_like(u)
    if cfg.field_kind == "uniform":
        u[:] = cfg.field_speed
    elif cfg.field_kind == "gyre":
        cy = (spec.nlat - 1) / 2.0
        cx = (spec.nlon - 1) / 2.0
        rim = min(cy, cx)
        for iy in range(spec.nlat):
            for ix in range(spec.nlon):
                ry, rx = iy - cy, ix - cx
                r = math.hypot(ry, rx)
                s = cfg.field_speed * min(r / rim, 1.0) if rim > 0 else 0.0
                if r > 0:
                    u[:, iy, ix] = -s * ry / r
                    v[:, iy, ix] = s * rx / r
    else:  # random_divfree
        rng = _rng(cfg, "streamfunction")
        psi = rng.normal(size=(cfg.n_days, spec.nlat, spec.nlon))
        # light smoothing keeps speeds moderate without breaking the curl form
        for _ in range(2):
            psi = (psi + np.roll(psi, 1, axis=1) + np.roll(psi, -1, axis=1)
                   + np.roll(psi, 1, axis=2) + np.roll(psi, -1, axis=2)) / 5.0
        # u = -dpsi/dlat, v = dpsi/dlon, centered differences: the discrete
        # divergence with the same stencils cancels exactly
        u[:, 1:-1, :] = -(psi[:, 2:, :] - psi[:, :-2, :]) / 2.0
        v[:, :, 1:-1] = (psi[:, :, 2:] - psi[:, :, :-2]) / 2.0
        peak = max(np.abs(u).max(), np.abs(v).max(), 1e-12)
        u *= cfg.field_speed / peak
        v *= cfg.field_speed / peak
    u[:, ~mask] = np.nan
    v[:, ~mask] = np.nan
    return VectorFieldSeries(spec=spec, days=days, u=u, v=v, mask=mask)


def gen_mp_field(cfg: DgpConfig, mask: np.ndarray | None = None) -> ConcentrationSeries:
    """Monthly concentration: per cell, ln values follow an AR(1) with
    innovation scale lognormal_sigma; strictly positive."""
    spec = cfg.spec
    if mask is None:
        mask = np.ones((spec.nlat, spec.nlon), dtype=bool)
    rng = _rng(cfg, "concentration")
    periods = tuple(cfg.start_month + i for i in range(cfg.n_months))
    shape = (cfg.n_months, spec.nlat, spec.nlon)
    eps = rng.normal(scale=cfg.lognormal_sigma, size=shape)
    logv = np.empty(shape)
    # stationary start so early months match the long-run distribution
    stat_sd = cfg.lognormal_sigma / math.sqrt(1.0 - cfg.ar1_rho**2) if cfg.lognormal_sigma > 0 else 0.0
    logv[0] = rng.normal(scale=stat_sd, size=shape[1:]) if stat_sd > 0 else 0.0
    for m in range(1, cfg.n_months):
        logv[m] = cfg.ar1_rho * logv[m - 1] + eps[m]
    values = cfg.mp_level * np.exp(logv)
    values[:, ~mask] = np.nan
    return ConcentrationSeries(spec=spec, periods=periods, values=values, mask=mask)


def _draw_panel_arrays(cfg: DgpConfig, exposure, windows):
    """Shared DGP core: sampled cells/months, logged window exposures,
    outcomes, group assignments, and clamp count."""
    rng = _rng(cfg, "births")
    cells = sorted(exposure)
    if not cells:
        raise ValueError("exposure carries no receiver cells")
    months_avail = sorted({m for series in exposure.values() for m in series})
    lo = min(min(w) for w in windows.values())
    hi = max(max(w) for w in windows.values())
    avail = set(months_avail)
    valid_months = [m for m in months_avail
                    if all(m + k in avail for k in range(lo, hi + 1))]
    if not valid_months:
        raise ValueError("exposure coverage too short for the requested windows")
    admin1_of_cell = np.array([i % cfg.n_admin1 for i in range(len(cells))])
    country_of_admin1 = np.arange(cfg.n_admin1) % cfg.n_countries
    admin_fx = rng.normal(scale=cfg.admin1_sd, size=cfg.n_admin1)
    admin_fx -= admin_fx.mean()
    cm_fx = rng.normal(scale=cfg.country_month_sd,
                       size=(cfg.n_countries, len(valid_months)))
    cm_fx -= cm_fx.mean()

    cell_pick = rng.integers(0, len(cells), size=cfg.panel_size)
    month_pick = rng.integers(0, len(valid_months), size=cfg.panel_size)

    # one (cell, month) lookup table per window, then gather per birth
    table = {w: np.empty((len(cells), len(valid_months))) for w in windows}
    for ci, cell in enumerate(cells):
        series = exposure[cell]
        for mi, bm in enumerate(valid_months):
            for wname, window in windows.items():
                table[wname][ci, mi] = window_exposure(series, bm, window)
    logged = {w: table[w][cell_pick, month_pick] for w in windows}

    # centered exposures keep the population LBW rate at lbw_base
    prob = np.full(cfg.panel_size, cfg.lbw_base)
    for wname, beta in cfg.true_betas.items():
        x = logged[wname]
        prob += beta * (x - x.mean())
    admin_pick = admin1_of_cell[cell_pick]
    country_pick = country_of_admin1[admin_pick]
    prob += admin_fx[admin_pick] + cm_fx[country_pick, month_pick]
    if cfg.noise_sd > 0:
        prob += rng.normal(scale=cfg.noise_sd, size=cfg.panel_size)
    clamped = int(((prob < 0) | (prob > 1)).sum())
    prob = np.clip(prob, 0.0, 1.0)
    lbw = (rng.random(cfg.panel_size) < prob).astype(int)
    if clamped:
        logger.warning("clamped %d of %d probability draws", clamped, cfg.panel_size)
    return cells, valid_months, cell_pick, month_pick, admin_pick, country_pick, logged, lbw, clamped


def _truth_terms(cfg: DgpConfig, windows) -> dict[str, float]:
    return {f"log_mp_local_{w}": cfg.true_betas.get(w, 0.0) * 1000.0 for w in windows}


def gen_birth_panel(
    cfg: DgpConfig,
    exposure: dict[Cell, dict[int, float]],
    windows: dict[str, tuple[int, int]] | None = None,
) -> tuple[list[BirthRecord], dict[str, float], int]:
    """Births with a linear-probability LBW outcome on logged window
    exposures (centered), admin1 and country-month effects, and optional
    latent noise.

    Returns (births, truth terms per 1,000 births, clamp count). Births land
    on the receiver cells of the exposure mapping; each cell belongs to one
    admin1 region, each admin1 to one country.
    """
    windows = dict(windows) if windows is not None else dict(WINDOWS)
    cells, valid_months, cell_pick, month_pick, admin_pick, country_pick, _, lbw, clamped = \
        _draw_panel_arrays(cfg, exposure, windows)
    spec = cfg.spec
    births = []
    for i in range(cfg.panel_size):
        lon, lat = spec.cell_center(cells[cell_pick[i]])
        births.append(BirthRecord(
            id=f"b{i:07d}", lon=lon, lat=lat,
            admin1=f"adm{admin_pick[i]:03d}", country=f"c{country_pick[i]:02d}",
            birth_month=valid_months[month_pick[i]], lbw=int(lbw[i])))
    return births, _truth_terms(cfg, windows), clamped


def gen_panel_frame(
    cfg: DgpConfig,
    exposure: dict[Cell, dict[int, float]],
    windows: dict[str, tuple[int, int]] | None = None,
) -> tuple[pd.DataFrame, dict[str, float], int]:
    """Same DGP as gen_birth_panel, emitted directly as an analysis panel
    (identical to assembling the generated births against the same local
    exposure). Vectorized; meant for Monte Carlo studies."""
    windows = dict(windows) if windows is not None else dict(WINDOWS)
    cells, valid_months, cell_pick, month_pick, admin_pick, country_pick, logged, lbw, clamped = \
        _draw_panel_arrays(cfg, exposure, windows)
    months = np.array([format_month(m) for m in valid_months])[month_pick]
    countries = np.array([f"c{c:02d}" for c in range(cfg.n_countries)])[country_pick]
    frame = pd.DataFrame({
        "id": [f"b{i:07d}" for i in range(cfg.panel_size)],
        "lbw": lbw,
        "admin1": np.array([f"adm{a:03d}" for a in range(cfg.n_admin1)])[admin_pick],
        "country": countries,
        "birth_month": months,
        "country_month": np.char.add(np.char.add(countries, ":"), months),
        "receiver_lat_idx": np.array([c[0] for c in cells])[cell_pick],
        "receiver_lon_idx": np.array([c[1] for c in cells])[cell_pick],
    })
    for wname in windows:
        frame[f"log_mp_local_{wname}"] = logged[wname]
    return frame, _truth_terms(cfg, windows), clamped


def write_truth(truth: dict[str, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "true_value"])
        for term in sorted(truth):
            writer.writerow([term, repr(float(truth[term]))])


def read_truth(path) -> dict[str, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["term", "true_value"]:
            raise ValueError(f"bad truth header {header}")
        for row in reader:
            out[row[0]] = float(row[1])
    return out

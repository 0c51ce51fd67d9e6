"""End-to-end pipeline steps behind the CLI subcommands.

Each step reads inputs named in the run config, writes CSV artifacts into
the output directory, and returns a manifest of what it wrote. Trace work
can run across a process pool; aggregation sorts before summing, so
results do not depend on the worker partitioning.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import econometrics, exposure, grid, synth, transport
from .config import RunConfig

logger = logging.getLogger(__name__)


def _load_field(cfg: RunConfig) -> grid.VectorFieldSeries:
    mask_path = cfg.path("mask")
    mask = grid.load_mask(mask_path, cfg.grid) if mask_path else None
    currents = cfg.path("currents")
    if currents is None:
        raise ValueError("config names no currents file")
    return grid.load_vector_field(currents, cfg.grid, mask)


def _receiver_cells(mask: np.ndarray) -> list[grid.Cell]:
    cells = grid.coastal_cells(mask)
    if not cells:
        # all-ocean world: every ocean cell can receive
        iy, ix = np.nonzero(mask)
        cells = list(zip(iy.tolist(), ix.tolist()))
    return cells


# -- trace scheduling ---------------------------------------------------

_CTX: dict = {}


def _init_worker(series, receivers, params, metric):
    _CTX["series"] = series
    _CTX["receivers"] = receivers
    _CTX["params"] = params
    _CTX["metric"] = metric
    _CTX["hull"] = transport.OceanHull.from_series(series)


def _trace_task(task):
    sender, day = task
    return transport.trace_streamline(
        _CTX["series"], sender, day, _CTX["receivers"], _CTX["params"],
        metric=_CTX["metric"], hull=_CTX["hull"])


def run_traces(series, senders, days, receivers, params, metric, workers=1):
    """All (sender, day) traces, optionally across a process pool."""
    tasks = [(s, d) for s in sorted(senders) for d in days]
    if workers <= 1:
        _init_worker(series, receivers, params, metric)
        results = [_trace_task(t) for t in tasks]
        _CTX.clear()
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker,
            initargs=(series, receivers, params, metric),
        ) as pool:
            results = list(pool.map(_trace_task, tasks, chunksize=max(len(tasks) // (4 * workers), 1)))
    scores = [s for trace in results for s in trace]
    return scores


def build_score_matrix(cfg: RunConfig, series, senders, receivers_index):
    scores = run_traces(series, senders, series.days, receivers_index,
                        cfg.transport, cfg.advect_metric, workers=cfg.workers)
    daily = transport.aggregate_daily(scores)
    return transport.aggregate_monthly(
        daily, cfg.grid, series.days[0], series.days[-1], cfg.transport.max_steps)


# -- commands -----------------------------------------------------------


def run_synth(cfg: RunConfig) -> list[Path]:
    """Generate mask, currents, concentration, births, and the truth
    sidecar into the output directory."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dgp = cfg.dgp_config()
    border = int(cfg.synth.get("land_border", 1))
    mask = synth.border_land_mask(cfg.grid, width=border) if border > 0 \
        else np.ones((cfg.grid.nlat, cfg.grid.nlon), dtype=bool)

    field = synth.gen_current_field(dgp, mask)
    mp = synth.gen_mp_field(dgp, mask)
    receivers = _receiver_cells(mask)
    local = exposure.local_series(mp, receivers)
    births, truth, clamped = synth.gen_birth_panel(
        dgp, {cell: es.values for cell, es in local.items()}, cfg.windows)
    logger.info("synth: %d births, %d clamped draws", len(births), clamped)

    paths = []
    mask_path = out / "mask.csv"
    with open(mask_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lon", "lat", "ocean"])
        for iy in range(cfg.grid.nlat):
            for ix in range(cfg.grid.nlon):
                lon, lat = cfg.grid.cell_center((iy, ix))
                writer.writerow([repr(lon), repr(lat), int(mask[iy, ix])])
    paths.append(mask_path)
    grid.export_vector_field(field, out / "currents.csv")
    paths.append(out / "currents.csv")
    grid.export_concentration(mp, out / "mp.csv")
    paths.append(out / "mp.csv")
    exposure.write_births(births, out / "births.csv")
    paths.append(out / "births.csv")
    synth.write_truth(truth, out / "truth.csv")
    paths.append(out / "truth.csv")
    return paths


def run_score(cfg: RunConfig) -> list[Path]:
    """Trace all senders over all field days and write the monthly score
    matrices for the all-senders and buffered-senders configurations."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    series = _load_field(cfg)
    receivers = transport.ReceiverIndex(cfg.grid, _receiver_cells(series.mask))
    senders_all = grid.select_senders(
        cfg.grid, series.mask,
        grid.SenderConfig(buffer_km=0.0, spacing_km=cfg.senders.spacing_km))
    senders_far = set(grid.select_senders(cfg.grid, series.mask, cfg.senders))
    logger.info("score: %d senders (%d beyond %.0f km), %d receivers, %d days",
                len(senders_all), len(senders_far), cfg.senders.buffer_km,
                len(receivers), len(series.days))

    scores = run_traces(series, senders_all, series.days, receivers,
                        cfg.transport, cfg.advect_metric, workers=cfg.workers)
    daily_all = transport.aggregate_daily(scores)
    daily_far = {k: v for k, v in daily_all.items() if k[0] in senders_far}
    matrix_all = transport.aggregate_monthly(
        daily_all, cfg.grid, series.days[0], series.days[-1], cfg.transport.max_steps)
    matrix_far = transport.aggregate_monthly(
        daily_far, cfg.grid, series.days[0], series.days[-1], cfg.transport.max_steps)
    transport.write_score_matrix(matrix_all, out / "scores_all.csv")
    transport.write_score_matrix(matrix_far, out / "scores_far.csv")
    return [out / "scores_all.csv", out / "scores_far.csv"]


def run_trace_cmd(cfg: RunConfig) -> list[Path]:
    """Write streamline positions and per-(sender, day) heatmap grids for
    the configured diagnostic senders and start days."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    series = _load_field(cfg)
    hull = transport.OceanHull.from_series(series)
    trace_cfg = cfg.trace
    if "senders" in trace_cfg:
        senders = [cfg.grid.locate(lon, lat) for lon, lat in trace_cfg["senders"]]
    else:
        senders = grid.select_senders(cfg.grid, series.mask, cfg.senders)[:1]
    if not senders:
        raise ValueError("no trace sender available")
    for s in senders:
        if not series.mask[s]:
            raise ValueError(f"trace sender {s} is on land")
    if "days" in trace_cfg:
        days = [dt.date.fromisoformat(d) for d in trace_cfg["days"]]
        missing = [d for d in days if series.day_index(d) is None]
        if missing:
            raise ValueError(f"field coverage lacks days: {missing}")
    else:
        days = [series.days[0]]

    iy, ix = np.nonzero(series.mask)
    all_ocean = transport.ReceiverIndex(cfg.grid, list(zip(iy.tolist(), ix.tolist())))
    paths = []
    stream_path = out / "streamlines.csv"
    with open(stream_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sender_lon", "sender_lat", "start_day", "t", "lon", "lat"])
        for sender in senders:
            slon, slat = cfg.grid.cell_center(sender)
            for day in days:
                for t, lon, lat in transport.trace_positions(
                        series, sender, day, cfg.transport,
                        metric=cfg.advect_metric, hull=hull):
                    writer.writerow([repr(slon), repr(slat), day.isoformat(),
                                     t, repr(lon), repr(lat)])
    paths.append(stream_path)
    for sender in senders:
        slon, slat = cfg.grid.cell_center(sender)
        for day in days:
            scores = transport.trace_streamline(
                series, sender, day, all_ocean, cfg.transport,
                metric=cfg.advect_metric, hull=hull)
            sums: dict[grid.Cell, float] = {}
            for s in sorted(scores, key=lambda s: (s.receiver, s.t)):
                sums[s.receiver] = sums.get(s.receiver, 0.0) + s.value
            hm_path = out / f"heatmap_{slon}_{slat}_{day.isoformat()}.csv"
            with open(hm_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["lon", "lat", "score_sum"])
                for cell in sorted(sums):
                    lon, lat = cfg.grid.cell_center(cell)
                    writer.writerow([repr(lon), repr(lat), repr(sums[cell])])
            paths.append(hm_path)
    return paths


def run_exposure(cfg: RunConfig) -> list[Path]:
    """Build the per-birth analysis panel from the score matrices and the
    concentration series, plus the exclusion report."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    mask_path = cfg.path("mask")
    mask = grid.load_mask(mask_path, cfg.grid) if mask_path else None
    mp = grid.load_concentration(cfg.path("concentration"), cfg.grid, mask)
    births = exposure.load_births(cfg.path("births"))
    receivers = _receiver_cells(mp.mask)

    scores_all = cfg.path("scores_all") or out / "scores_all.csv"
    scores_far = cfg.path("scores_far") or out / "scores_far.csv"
    matrix_all = transport.read_score_matrix(scores_all, cfg.grid)
    matrix_far = transport.read_score_matrix(scores_far, cfg.grid)

    local = exposure.local_series(mp, receivers)
    trans_all = exposure.transported_series(matrix_all, mp)
    trans_far = exposure.transported_series(matrix_far, mp)
    exposures = {
        "local": {c: es.values for c, es in local.items()},
        "transported_all": {c: es.values for c, es in trans_all.items()},
        "transported_200km": {c: es.values for c, es in trans_far.items()},
    }
    panel, report = exposure.assemble_panel(
        births, exposures, cfg.grid, mp.mask, cfg.windows)
    exposure.write_panel(panel, out / "panel.csv")
    report_path = out / "exclusions.csv"
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reason", "count"])
        for reason in sorted(report):
            writer.writerow([reason, report[reason]])
    return [out / "panel.csv", report_path]


def run_regress(cfg: RunConfig) -> list[Path]:
    """Run every configured regression spec against the panel."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    panel_path = cfg.path("panel") or out / "panel.csv"
    panel = exposure.read_panel(panel_path)
    paths = []
    for name in cfg.regress_specs:
        if name in cfg.inline_specs:
            spec = econometrics.spec_from_dict(name, cfg.inline_specs[name])
        elif name in econometrics.PRESETS:
            spec = econometrics.PRESETS[name]
        else:
            known = ", ".join(sorted(econometrics.PRESETS))
            raise ValueError(f"unknown spec {name!r}; presets: {known}")
        result = econometrics.run_spec(panel, spec)
        path = out / f"results_{name}.csv"
        econometrics.write_result(result, path)
        logger.info("regress %s: n=%d, %d terms, %d FE iterations",
                    name, result.n, len(result.terms), result.fe_iterations)
        paths.append(path)
    return paths


def check_scores(cfg: RunConfig) -> list[str]:
    """Post-run invariant checks for the score step."""
    failures = []
    for name in ("scores_all.csv", "scores_far.csv"):
        path = cfg.out_dir / name
        if not path.exists():
            failures.append(f"{name}: missing output")
            continue
        matrix = transport.read_score_matrix(path, cfg.grid)
        # the step-score bound exp(-a*rad0) does not survive aggregation;
        # monthly values are only sign-constrained
        for pair, vec in matrix.values.items():
            if len(vec) != len(matrix.months):
                failures.append(f"{name}: pair {pair} lacks zero-fill")
            if (vec < 0).any():
                failures.append(f"{name}: pair {pair} carries a negative score")
    return failures

"""Run configuration: a single TOML file driving every pipeline command."""

from __future__ import annotations

import datetime as dt
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import GridSpec, SenderConfig
from .transport import TransportParams
from .exposure import WINDOWS
from .synth import DgpConfig


@dataclass
class RunConfig:
    base_dir: Path
    grid: GridSpec
    transport: TransportParams
    senders: SenderConfig
    period_start: dt.date
    period_end: dt.date
    files: dict
    windows: dict
    out_dir: Path
    workers: int = 1
    seed: int = 0
    advect_metric: str = "faithful"
    regress_specs: list = field(default_factory=lambda: ["eq1"])
    inline_specs: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)

    def path(self, key: str) -> Path | None:
        name = self.files.get(key)
        if name is None:
            return None
        p = Path(name)
        return p if p.is_absolute() else self.base_dir / p

    def dgp_config(self) -> DgpConfig:
        raw = dict(self.synth)
        raw.pop("land_border", None)  # pipeline-level key, not a DGP knob
        betas = raw.pop("true_betas", {})
        kinds = {f.name for f in DgpConfig.__dataclass_fields__.values()}
        kwargs = {k: v for k, v in raw.items() if k in kinds and k not in ("spec", "seed")}
        if "start_day" in kwargs:
            kwargs["start_day"] = dt.date.fromisoformat(kwargs["start_day"])
        if "start_month" in kwargs:
            from .grid import parse_month
            kwargs["start_month"] = parse_month(kwargs["start_month"])
        unknown = set(raw) - kinds
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return DgpConfig(seed=self.seed, spec=self.grid,
                         true_betas=dict(betas), **kwargs)


def load_config(path, out_dir=None, workers=None, seed=None,
                advect_metric=None) -> RunConfig:
    """Parse the TOML run config; CLI flags override file values."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    base_dir = path.parent

    grid_raw = data.get("grid")
    if grid_raw is None:
        raise ValueError("config lacks a [grid] section")
    grid = GridSpec(**grid_raw)
    transport = TransportParams(**data.get("transport", {}))
    senders = SenderConfig(**data.get("senders", {}))

    period = data.get("period", {})
    if "start" not in period or "end" not in period:
        raise ValueError("config lacks [period] start/end")
    period_start = dt.date.fromisoformat(period["start"])
    period_end = dt.date.fromisoformat(period["end"])
    if period_end < period_start:
        raise ValueError("period end precedes start")

    windows = {name: (int(lo), int(hi)) for name, (lo, hi)
               in data.get("windows", {}).items()} or dict(WINDOWS)

    regress = data.get("regress", {})
    out = Path(out_dir) if out_dir else base_dir / data.get("out", "out")
    return RunConfig(
        base_dir=base_dir,
        grid=grid,
        transport=transport,
        senders=senders,
        period_start=period_start,
        period_end=period_end,
        files=data.get("files", {}),
        windows=windows,
        out_dir=out,
        workers=int(workers if workers is not None else data.get("workers", 1)),
        seed=int(seed if seed is not None else data.get("seed", 0)),
        advect_metric=(advect_metric or data.get("advect_metric", "faithful")),
        regress_specs=list(regress.get("specs", ["eq1"])),
        inline_specs=data.get("specs", {}),
        synth=data.get("synth", {}),
        trace=data.get("trace", {}),
    )

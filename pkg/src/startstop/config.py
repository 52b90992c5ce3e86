"""Scenario files.

A scenario is a TOML document with optional top-level ``seed``, ``out``
and ``experiment`` keys plus ``[frame]``, ``[grid]``, ``[ofdm]``,
``[channel]`` and ``[experiment_params]`` tables. Keys mirror the dataclass
field names; anything unknown is rejected::

    seed = 7
    experiment = "loopback"

    [frame]
    n_bits = 10
    n_messages = 10
    n_tsfs = 4
    n_t = 32
    n_f = 32

    [grid]
    n_subcarriers = 96
    n_symbols = 14
    skip_shape = "cross"

    [channel]
    snr_db = 40.0
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .codec import FrameConfig
from .errors import ConfigError
from .grid import CROSS, GridDims
from .modem import OfdmParams, default_steps

FLAGSHIP = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=32, n_f=32)


@dataclass(frozen=True)
class ChannelSettings:
    snr_db: float = math.inf
    fading: str = "off"


@dataclass(frozen=True)
class ExperimentSettings:
    frames: int = 100
    trials: int = 1000
    snr_db: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    n_tx: int = 64
    n_k: int = 8


@dataclass(frozen=True)
class ScenarioConfig:
    frame: FrameConfig = FLAGSHIP
    grid: GridDims = GridDims()
    ofdm: OfdmParams = OfdmParams()
    channel: ChannelSettings = ChannelSettings()
    experiment: str = "loopback"
    params: ExperimentSettings = ExperimentSettings()
    out: str = "out"
    seed: int = 0
    steps: object = field(default=None, compare=False)

    def __post_init__(self):
        self.grid.check_fits(self.frame)
        steps = default_steps(self.frame, self.ofdm)
        shifts = (self.frame.n_t - 1) * steps.dt if self.frame.tsfs_enabled else 0
        if steps.dt < 1 or shifts >= self.ofdm.n_fft:
            raise ConfigError("time shifts do not fit in one symbol")
        if self.grid.n_subcarriers > self.ofdm.n_fft:
            raise ConfigError("grid has more subcarriers than FFT bins")
        object.__setattr__(self, "steps", steps)


def _build(cls, table, section):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return cls(**table)


def _grid(table):
    table = dict(table)
    if "reserved" in table:
        table["reserved"] = frozenset(tuple(re) for re in table["reserved"])
    if "skip_shape" in table and table["skip_shape"] != CROSS:
        table["skip_shape"] = tuple(table["skip_shape"])
    return _build(GridDims, table, "grid")


def _channel(table):
    table = dict(table)
    if table.get("snr_db") in ("inf", "off"):
        table["snr_db"] = math.inf
    return _build(ChannelSettings, table, "channel")


def _experiment(table):
    table = dict(table)
    if "snr_db" in table:
        table["snr_db"] = tuple(float(v) for v in table["snr_db"])
    return _build(ExperimentSettings, table, "experiment_params")


_TOP = {"seed", "out", "experiment", "frame", "grid", "ofdm", "channel", "experiment_params"}


def parse_scenario(doc: dict) -> ScenarioConfig:
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = {}
    if "frame" in doc:
        kw["frame"] = _build(FrameConfig, doc["frame"], "frame")
    if "grid" in doc:
        kw["grid"] = _grid(doc["grid"])
    if "ofdm" in doc:
        kw["ofdm"] = _build(OfdmParams, doc["ofdm"], "ofdm")
    if "channel" in doc:
        kw["channel"] = _channel(doc["channel"])
    if "experiment_params" in doc:
        kw["params"] = _experiment(doc["experiment_params"])
    for key in ("seed", "out", "experiment"):
        if key in doc:
            kw[key] = doc[key]
    if not isinstance(kw.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    return ScenarioConfig(**kw)


def load_scenario(path) -> ScenarioConfig:
    try:
        with open(Path(path), "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_scenario(doc)

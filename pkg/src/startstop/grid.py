"""Resource-grid model: counter traversal, skip regions, power boost.

REs are addressed as ``(subcarrier, symbol)`` and linearised frequency
first, ``index = symbol * n_subcarriers + subcarrier``. The counter walks
that order, skipping reserved REs and REs inside the skip region of an
earlier shifted stop bit. Skip regions are symmetric neighbourhoods, so the
later RE of any neighbouring pair always lies in the earlier RE's skip
region: two shifted stop bits can never be neighbours.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import FrameAllocation, FrameConfig, frame_length
from .errors import CapacityError, ConfigError
from .qam import constellation

CROSS = "cross"


@dataclass(frozen=True)
class GridDims:
    """Grid size plus layout rules.

    ``skip_shape`` is ``"cross"`` (4 neighbours) or a ``(d_sc, d_sym)``
    rectangle half-extent, e.g. ``(1, 1)`` for the 8-neighbourhood.
    """

    n_subcarriers: int = 96
    n_symbols: int = 14
    reserved: frozenset = frozenset()
    skip_shape: str | tuple = CROSS

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ConfigError("grid dimensions must be positive")
        reserved = frozenset((int(sc), int(sym)) for sc, sym in self.reserved)
        for sc, sym in reserved:
            if not (0 <= sc < self.n_subcarriers and 0 <= sym < self.n_symbols):
                raise ConfigError(f"reserved RE {(sc, sym)} outside the grid")
        object.__setattr__(self, "reserved", reserved)
        shape = self.skip_shape
        if shape != CROSS:
            shape = tuple(int(v) for v in shape)
            if len(shape) != 2 or min(shape) < 0 or max(shape) == 0:
                raise ConfigError(f"bad skip shape {self.skip_shape!r}")
            object.__setattr__(self, "skip_shape", shape)

    @property
    def n_res(self) -> int:
        return self.n_subcarriers * self.n_symbols

    @property
    def capacity(self) -> int:
        return self.n_res - len(self.reserved)

    @property
    def skip_size(self) -> int:
        """Nominal skip-region size for an interior RE."""
        if self.skip_shape == CROSS:
            return 4
        a, b = self.skip_shape
        return (2 * a + 1) * (2 * b + 1) - 1

    def linear(self, re) -> int:
        sc, sym = re
        return sym * self.n_subcarriers + sc

    def unlinear(self, index: int) -> tuple[int, int]:
        sym, sc = divmod(int(index), self.n_subcarriers)
        return sc, sym

    def check_fits(self, cfg: FrameConfig) -> int:
        if cfg.tsfs_enabled and cfg.n_tsfs != self.skip_size:
            raise ConfigError(
                f"n_tsfs={cfg.n_tsfs} does not match skip shape {self.skip_shape!r} "
                f"of size {self.skip_size}"
            )
        return frame_length(cfg, capacity=self.capacity)


def prb_dims(n_prb: int, n_symbols: int = 14, **kw) -> GridDims:
    return GridDims(n_subcarriers=12 * n_prb, n_symbols=n_symbols, **kw)


def skip_region(stop_re, dims: GridDims) -> frozenset:
    """Neighbourhood of ``stop_re`` kept free of other stop bits, clipped to the grid."""
    sc, sym = stop_re
    if dims.skip_shape == CROSS:
        cand = [(sc - 1, sym), (sc + 1, sym), (sc, sym - 1), (sc, sym + 1)]
    else:
        a, b = dims.skip_shape
        cand = [
            (sc + i, sym + j)
            for j in range(-b, b + 1)
            for i in range(-a, a + 1)
            if (i, j) != (0, 0)
        ]
    return frozenset(
        (c, s) for c, s in cand if 0 <= c < dims.n_subcarriers and 0 <= s < dims.n_symbols
    )


def _walk(dims, n_slots, triggers, skips=()):
    """Assign linear RE indices to slots ``0..n_slots-1``.

    ``triggers`` holds slots whose RE opens a skip region. Returns the
    slot->linear index array and the set of linear indices skipped.
    """
    blocked = np.zeros(dims.n_res, dtype=bool)
    for sc, sym in dims.reserved:
        blocked[dims.linear((sc, sym))] = True
    skipped = set()
    for idx in skips:
        if not blocked[idx]:
            blocked[idx] = True
            skipped.add(int(idx))
    out = np.empty(n_slots, dtype=np.int64)
    pos = 0
    for slot in range(n_slots):
        while pos < dims.n_res and blocked[pos]:
            pos += 1
        if pos >= dims.n_res:
            raise CapacityError(f"slot {slot} exceeds grid capacity")
        out[slot] = pos
        if slot in triggers:
            for re in skip_region(dims.unlinear(pos), dims):
                idx = dims.linear(re)
                if idx > pos and not blocked[idx]:
                    blocked[idx] = True
                    skipped.add(idx)
        pos += 1
    return out, frozenset(skipped)


def slot_to_re(slot: int, dims: GridDims, skips=()) -> tuple[int, int]:
    """RE of counter ``slot`` given a set of skipped linear RE indices."""
    if slot < 0:
        raise CapacityError("negative slot")
    table, _ = _walk(dims, slot + 1, frozenset(), skips)
    return dims.unlinear(table[slot])


def re_to_slot(re, dims: GridDims, skips=()) -> int:
    target = dims.linear(re)
    skips = frozenset(skips)
    if tuple(re) in dims.reserved or target in skips:
        raise CapacityError(f"RE {tuple(re)} is not a counter RE")
    slot = 0
    reserved = {dims.linear(r) for r in dims.reserved}
    for idx in range(target):
        if idx not in reserved and idx not in skips:
            slot += 1
    return slot


@dataclass(frozen=True)
class FrameLayout:
    """Physical placement of every active element of one frame."""

    dims: GridDims
    cfg: FrameConfig
    slot_index: np.ndarray = field(repr=False)  # slot -> linear RE index
    skipped: frozenset = field(repr=False)

    def re_of(self, slot: int) -> tuple[int, int]:
        return self.dims.unlinear(self.slot_index[slot])

    @property
    def perm_base(self) -> int:
        return 1 << self.cfg.n_bits

    @property
    def rep_base(self) -> int:
        return self.perm_base + self.cfg.n_messages**2

    def perm_res(self) -> list[list[tuple[int, int]]]:
        m = self.cfg.n_messages
        return [[self.re_of(self.perm_base + r * m + c) for c in range(m)] for r in range(m)]

    def rep_res(self, r: int) -> list[tuple[int, int]]:
        base = self.rep_base + r * self.cfg.r_extra
        return [self.re_of(base + k) for k in range(self.cfg.r_extra)]

    def footprint(self) -> int:
        """REs spanned from the frame origin to its last slot."""
        return int(self.slot_index[-1]) + 1 if self.slot_index.size else 0


def layout_frame(cfg: FrameConfig, dims: GridDims, stop_slots) -> FrameLayout:
    """Lay out a frame whose stop bits (counter order) sit at ``stop_slots``."""
    dims.check_fits(cfg)
    triggers = set()
    if cfg.tsfs_enabled:
        triggers.update(int(s) for s in stop_slots)
        rep_base = (1 << cfg.n_bits) + cfg.n_messages**2
        triggers.update(range(rep_base, rep_base + len(stop_slots) * cfg.r_extra))
    table, skipped = _walk(dims, cfg.n_slots, frozenset(triggers))
    return FrameLayout(dims=dims, cfg=cfg, slot_index=table, skipped=skipped)


def power_boost_db(n_loaded: int, n_active: int) -> float:
    if n_active < 1:
        raise ConfigError("power boost undefined without active REs")
    if n_loaded < n_active:
        raise ConfigError("reference load must be at least the active count")
    return 10 * math.log10(n_loaded / n_active)


def boost_amplitude(n_loaded: int, n_active: int) -> float:
    """Per-RE amplitude scale concentrating ``n_loaded`` unit REs onto ``n_active``."""
    return math.sqrt(10 ** (power_boost_db(n_loaded, n_active) / 10))


@dataclass(frozen=True)
class Pulse:
    """A shifted stop-bit instance synthesised on its own."""

    sc: int
    sym: int
    amplitude: complex
    n_t: int
    n_f: int


@dataclass
class ResourceGrid:
    """Grid content of one frame.

    ``base`` holds everything sent as plain OFDM (permutation pulses and
    unshifted stop bits); ``pulses`` holds stop instances with a non-zero
    shift index. ``amplitudes`` is their sum per RE.
    """

    dims: GridDims
    base: np.ndarray
    pulses: tuple = ()
    layout: FrameLayout | None = None
    gain: float = 1.0

    @property
    def amplitudes(self) -> np.ndarray:
        amp = self.base.copy()
        for p in self.pulses:
            amp[p.sc, p.sym] += p.amplitude
        return amp

    @property
    def tsfs_annotations(self) -> dict:
        return {(p.sc, p.sym): (p.n_t, p.n_f) for p in self.pulses}

    def power(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def nonzero_res(self) -> set:
        return {tuple(int(v) for v in re) for re in np.argwhere(np.abs(self.amplitudes) > 0)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subcarrier", "symbol", "real", "imag"])
        amp = self.amplitudes
        for sym in range(self.dims.n_symbols):
            for sc in range(self.dims.n_subcarriers):
                v = amp[sc, sym]
                w.writerow([sc, sym, repr(float(v.real)), repr(float(v.imag))])
        return buf.getvalue()


def empty_grid(dims: GridDims) -> ResourceGrid:
    return ResourceGrid(dims=dims, base=np.zeros((dims.n_subcarriers, dims.n_symbols), complex))


def populate_grid(alloc: FrameAllocation | None, dims: GridDims, n_loaded: int | None = None,
                  boost: bool = True) -> ResourceGrid:
    """Place an allocation on the grid with power boost.

    Active REs are scaled by ``sqrt(n_loaded / n_active)``; ``n_loaded``
    defaults to the counter length ``2**n_bits``. Total power then equals
    ``n_loaded`` exactly for constant-modulus payloads and on average
    otherwise.
    """
    if alloc is None or alloc.n_stops == 0:
        return empty_grid(dims)
    cfg = alloc.cfg
    layout = layout_frame(cfg, dims, alloc.stop_slots)
    n_loaded = (1 << cfg.n_bits) if n_loaded is None else n_loaded
    gain = boost_amplitude(n_loaded, alloc.active_count()) if boost else 1.0
    points = constellation(cfg.qam_bits)

    base = np.zeros((dims.n_subcarriers, dims.n_symbols), dtype=complex)
    pulses = []
    reps = alloc.repetition_slots()
    for r, slot in enumerate(alloc.stop_slots):
        amp = gain * points[alloc.qam_indices[r]]
        n_t, n_f = alloc.tsfs_indices[r]
        for s in (slot, *reps[r]):
            sc, sym = layout.re_of(s)
            if (n_t, n_f) == (0, 0):
                base[sc, sym] += amp
            else:
                pulses.append(Pulse(sc, sym, complex(amp), n_t, n_f))
    for s in alloc.permutation_slots():
        sc, sym = layout.re_of(s)
        base[sc, sym] += gain
    return ResourceGrid(dims=dims, base=base, pulses=tuple(pulses), layout=layout, gain=gain)

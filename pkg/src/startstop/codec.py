"""Bit sequences <-> start/stop frame allocations.

A message of ``n_bits`` bits is sent as a single stop bit whose counter
slot equals the message read as an LSB-first integer. ``M`` messages share
one counter; a row-major ``M x M`` permutation block tells the receiver
which message each stop bit (in counter order) belongs to. Optional extra
bits ride on each stop bit as a fractional time/frequency shift index and
a QAM symbol, and optional repetition copies of every stop bit follow the
permutation block.

Counter slot layout::

    [0, 2**n_bits)                         counter region
    [2**n_bits, 2**n_bits + M*M)           permutation block, row-major
    [.., .. + M*r_extra)                   repetition copies, per stop bit

Physical skip regions around shifted stop bits are a grid concern and are
handled in :mod:`startstop.grid`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, MalformedFrameError
from .qam import SUPPORTED_QAM_BITS

MAX_BITS = 20

START_STOP = "start+stop"
STOP_ONLY = "stop-only"


@dataclass(frozen=True)
class BitMessage:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not 1 <= len(bits) <= MAX_BITS:
            raise ConfigError(f"message length must be in [1, {MAX_BITS}], got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise ConfigError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @classmethod
    def from_value(cls, value: int, n_bits: int) -> "BitMessage":
        return cls(int_to_bits(value, n_bits))


@dataclass(frozen=True)
class MessageSet:
    messages: tuple[BitMessage, ...]

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, BitMessage) else BitMessage(m) for m in self.messages)
        if not msgs:
            raise ConfigError("a message set needs at least one message")
        if len({m.n_bits for m in msgs}) != 1:
            raise ConfigError("all messages in a set must have the same length")
        object.__setattr__(self, "messages", msgs)

    def __len__(self):
        return len(self.messages)

    def __iter__(self):
        return iter(self.messages)

    @property
    def n_bits(self) -> int:
        return self.messages[0].n_bits

    def concatenated(self) -> tuple[int, ...]:
        return tuple(b for m in self.messages for b in m.bits)


@dataclass(frozen=True)
class FrameConfig:
    """Frame parameters.

    ``n_tsfs`` is the skip-region size in REs; 0 disables time/frequency
    shifting (``n_t``/``n_f`` are then ignored).
    """

    n_bits: int = 10
    n_messages: int = 10
    n_tsfs: int = 0
    n_t: int = 1
    n_f: int = 1
    qam_bits: int = 0
    r_extra: int = 0

    def __post_init__(self):
        if not 1 <= self.n_bits <= MAX_BITS:
            raise ConfigError(f"n_bits must be in [1, {MAX_BITS}], got {self.n_bits}")
        if self.n_messages < 1:
            raise ConfigError("n_messages must be >= 1")
        if self.n_tsfs < 0 or self.r_extra < 0:
            raise ConfigError("n_tsfs and r_extra must be >= 0")
        if self.qam_bits not in SUPPORTED_QAM_BITS:
            raise ConfigError(f"qam_bits must be one of {SUPPORTED_QAM_BITS}")
        if self.n_tsfs > 0 and (self.n_t < 1 or self.n_f < 1):
            raise ConfigError("n_t and n_f must be >= 1 when TS-FS is enabled")

    @property
    def tsfs_enabled(self) -> bool:
        return self.n_tsfs > 0

    @property
    def tsfs_bits(self) -> int:
        if not self.tsfs_enabled:
            return 0
        return int(math.floor(math.log2(self.n_t * self.n_f)))

    @property
    def extra_bits(self) -> int:
        return self.tsfs_bits + self.qam_bits

    @property
    def copies(self) -> int:
        """Transmitted instances per stop bit (original plus repetitions)."""
        return 1 + self.r_extra

    @property
    def n_active(self) -> int:
        """Active REs in a frame: every stop instance plus one per permutation row."""
        return self.n_messages * self.copies + self.n_messages

    @property
    def n_slots(self) -> int:
        """Logical counter slots, excluding skip regions."""
        return counter_length(self.n_bits) + self.n_messages**2 + self.n_messages * self.r_extra


def int_to_bits(value: int, n_bits: int) -> tuple[int, ...]:
    if not 0 <= value < (1 << n_bits):
        raise ConfigError(f"value {value} does not fit in {n_bits} bits")
    return tuple((value >> i) & 1 for i in range(n_bits))


def bits_to_int(bits: Sequence[int]) -> int:
    return sum(int(b) << i for i, b in enumerate(bits))


def counter_value(msg: BitMessage) -> int:
    """n_c = sum_i 2**(i-1) * b_i with b_1 the least significant bit."""
    return bits_to_int(msg.bits)


def counter_length(n_bits: int) -> int:
    if not 1 <= n_bits <= MAX_BITS:
        raise ConfigError(f"n_bits must be in [1, {MAX_BITS}], got {n_bits}")
    return 1 << n_bits


def frame_length(cfg: FrameConfig, capacity: int | None = None) -> int:
    """Counter REs reserved for one frame (upper bound on the physical footprint)."""
    m = cfg.n_messages
    n_re = counter_length(cfg.n_bits) + m * m + m * cfg.r_extra + m * cfg.copies * cfg.n_tsfs
    if capacity is not None and n_re > capacity:
        raise CapacityError(f"frame needs {n_re} REs, grid offers {capacity}")
    return n_re


def compression_ratio(n_bits: int, mode: str = START_STOP) -> float:
    if n_bits < 1:
        raise ConfigError("n_bits must be >= 1")
    if mode == START_STOP:
        return 2 / n_bits
    if mode == STOP_ONLY:
        return 1 / n_bits
    raise ConfigError(f"unknown mode {mode!r}")


def stop_bit_capacity(cfg: FrameConfig) -> int:
    return cfg.n_bits + cfg.qam_bits + cfg.tsfs_bits


@dataclass(frozen=True)
class FrameAllocation:
    """Encoded frame, all per-stop fields listed in counter order.

    ``permutation[r]`` is the (0-based) message index of the r-th stop bit.
    Ties on a counter slot are ordered by extra payload, then message index.
    """

    cfg: FrameConfig
    stop_slots: tuple[int, ...]
    permutation: tuple[int, ...]
    tsfs_indices: tuple[tuple[int, int], ...]
    qam_indices: tuple[int, ...]
    extra_values: tuple[int, ...] = field(default=(), repr=False)

    @property
    def n_stops(self) -> int:
        return len(self.stop_slots)

    @property
    def perm_base(self) -> int:
        return counter_length(self.cfg.n_bits)

    @property
    def rep_base(self) -> int:
        return self.perm_base + self.cfg.n_messages**2

    def permutation_matrix(self) -> np.ndarray:
        m = self.cfg.n_messages
        p = np.zeros((m, m), dtype=np.int8)
        p[np.arange(len(self.permutation)), list(self.permutation)] = 1
        return p

    def permutation_slots(self) -> tuple[int, ...]:
        """Active slots of the permutation block, one per row."""
        m = self.cfg.n_messages
        return tuple(self.perm_base + r * m + col for r, col in enumerate(self.permutation))

    def repetition_slots(self) -> tuple[tuple[int, ...], ...]:
        r_extra = self.cfg.r_extra
        return tuple(
            tuple(self.rep_base + r * r_extra + k for k in range(r_extra))
            for r in range(self.n_stops)
        )

    def active_count(self) -> int:
        return self.n_stops * self.cfg.copies + len(self.permutation)

    def validate(self) -> None:
        cfg = self.cfg
        m = cfg.n_messages
        n = len(self.stop_slots)
        if not (len(self.permutation) == len(self.tsfs_indices) == len(self.qam_indices) == n):
            raise MalformedFrameError("per-stop fields have inconsistent lengths")
        if n != m:
            raise MalformedFrameError(f"expected {m} stop bits, got {n}")
        if sorted(self.permutation) != list(range(m)):
            raise MalformedFrameError("permutation is not a bijection")
        limit = counter_length(cfg.n_bits)
        for slot in self.stop_slots:
            if not 0 <= slot < limit:
                raise MalformedFrameError(f"stop slot {slot} outside counter range [0, {limit})")
        if list(self.stop_slots) != sorted(self.stop_slots):
            raise MalformedFrameError("stop slots are not in counter order")
        tsfs_limit = 1 << cfg.tsfs_bits
        for n_t, n_f in self.tsfs_indices:
            if cfg.tsfs_enabled:
                if not (0 <= n_t < cfg.n_t and 0 <= n_f < cfg.n_f):
                    raise MalformedFrameError(f"TS-FS index {(n_t, n_f)} outside grid")
                if n_t * cfg.n_f + n_f >= tsfs_limit:
                    raise MalformedFrameError(f"TS-FS index {(n_t, n_f)} is an unused hypothesis")
            elif (n_t, n_f) != (0, 0):
                raise MalformedFrameError("TS-FS index set while TS-FS is disabled")
        for q in self.qam_indices:
            if not 0 <= q < (1 << cfg.qam_bits):
                raise MalformedFrameError(f"QAM index {q} out of range")


def split_extra(value, cfg):
    tsfs_value = value & ((1 << cfg.tsfs_bits) - 1)
    qam_index = value >> cfg.tsfs_bits
    if cfg.tsfs_enabled:
        return divmod(tsfs_value, cfg.n_f), qam_index
    return (0, 0), qam_index


def join_extra(tsfs_index, qam_index, cfg):
    n_t, n_f = tsfs_index
    tsfs_value = n_t * cfg.n_f + n_f if cfg.tsfs_enabled else 0
    return tsfs_value | (qam_index << cfg.tsfs_bits)


def encode_frame(messages: MessageSet, cfg: FrameConfig, extra=None) -> FrameAllocation:
    """Map ``messages`` (and optional per-message extra bits) to an allocation.

    ``extra`` holds one bit sequence per message of exactly ``cfg.extra_bits``
    bits: the low ``tsfs_bits`` select the shift index ``n_t * n_f_count + n_f``,
    the rest the Gray-coded QAM label. Omitted extra bits are all zero.
    """
    if not isinstance(messages, MessageSet):
        messages = MessageSet(tuple(messages))
    m = len(messages)
    if m != cfg.n_messages or messages.n_bits != cfg.n_bits:
        raise ConfigError(
            f"message set is {m} x {messages.n_bits} bits, config expects "
            f"{cfg.n_messages} x {cfg.n_bits}"
        )
    if extra is None:
        extra = [()] * m if cfg.extra_bits == 0 else [(0,) * cfg.extra_bits] * m
    if len(extra) != m:
        raise ConfigError("need one extra-bit sequence per message")
    extra_values = []
    for bits in extra:
        if len(bits) != cfg.extra_bits:
            raise ConfigError(f"extra payload must have {cfg.extra_bits} bits, got {len(bits)}")
        if any(int(b) not in (0, 1) for b in bits):
            raise ConfigError("extra payload bits must be 0 or 1")
        extra_values.append(bits_to_int(bits))

    values = [counter_value(msg) for msg in messages]
    order = sorted(range(m), key=lambda i: (values[i], extra_values[i], i))
    tsfs, qam = [], []
    for i in order:
        t, q = split_extra(extra_values[i], cfg)
        tsfs.append(t)
        qam.append(q)
    alloc = FrameAllocation(
        cfg=cfg,
        stop_slots=tuple(values[i] for i in order),
        permutation=tuple(order),
        tsfs_indices=tuple(tsfs),
        qam_indices=tuple(qam),
        extra_values=tuple(extra_values[i] for i in order),
    )
    return alloc


def decode_frame(alloc: FrameAllocation):
    """Invert :func:`encode_frame`; returns ``(MessageSet, extra bit tuples)``."""
    alloc.validate()
    cfg = alloc.cfg
    m = cfg.n_messages
    msgs = [None] * m
    extras = [None] * m
    for slot, msg_index, t, q in zip(
        alloc.stop_slots, alloc.permutation, alloc.tsfs_indices, alloc.qam_indices
    ):
        msgs[msg_index] = BitMessage(int_to_bits(slot, cfg.n_bits))
        value = join_extra(t, q, cfg)
        extras[msg_index] = tuple((value >> i) & 1 for i in range(cfg.extra_bits))
    return MessageSet(tuple(msgs)), extras


def allocation_from_parts(cfg, stop_slots, permutation, tsfs_indices, qam_indices):
    """Build an allocation from receiver decisions (re-sorted into counter order)."""
    n = len(stop_slots)
    extra = [join_extra(tuple(tsfs_indices[r]), int(qam_indices[r]), cfg) for r in range(n)]
    order = sorted(range(n), key=lambda r: (stop_slots[r], extra[r], permutation[r]))
    return FrameAllocation(
        cfg=cfg,
        stop_slots=tuple(int(stop_slots[r]) for r in order),
        permutation=tuple(int(permutation[r]) for r in order),
        tsfs_indices=tuple(tuple(int(v) for v in tsfs_indices[r]) for r in order),
        qam_indices=tuple(int(qam_indices[r]) for r in order),
        extra_values=tuple(extra[r] for r in order),
    )


# -- text format -------------------------------------------------------------

_HEADER = "# startstop-frame v1"
_CFG_KEYS = ("n_bits", "n_messages", "n_tsfs", "n_t", "n_f", "qam_bits", "r_extra")


def dumps_allocation(alloc: FrameAllocation) -> str:
    """One record per stop bit: slot, message index, n_t, n_f, QAM index, copy count."""
    cfg = alloc.cfg
    lines = [_HEADER, " ".join(f"{k}={getattr(cfg, k)}" for k in _CFG_KEYS)]
    lines.append("# slot message n_t n_f qam copies")
    for slot, msg, (n_t, n_f), q in zip(
        alloc.stop_slots, alloc.permutation, alloc.tsfs_indices, alloc.qam_indices
    ):
        lines.append(f"{slot} {msg} {n_t} {n_f} {q} {cfg.copies}")
    return "\n".join(lines) + "\n"


def loads_allocation(text: str) -> FrameAllocation:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise MalformedFrameError("missing frame header")
    try:
        kv = dict(item.split("=", 1) for item in lines[1].split())
        cfg = FrameConfig(**{k: int(kv.pop(k)) for k in _CFG_KEYS})
    except (KeyError, ValueError) as exc:
        raise MalformedFrameError(f"bad config line: {lines[1]!r}") from exc
    if kv:
        raise MalformedFrameError(f"unknown config keys {sorted(kv)}")
    slots, perm, tsfs, qam = [], [], [], []
    for ln in lines[2:]:
        if ln.startswith("#"):
            continue
        fields = [int(v) for v in ln.split()]
        if len(fields) != 6:
            raise MalformedFrameError(f"bad record {ln!r}")
        slot, msg, n_t, n_f, q, copies = fields
        if copies != cfg.copies:
            raise MalformedFrameError(f"record copy count {copies} != {cfg.copies}")
        slots.append(slot)
        perm.append(msg)
        tsfs.append((n_t, n_f))
        qam.append(q)
    alloc = FrameAllocation(
        cfg=cfg,
        stop_slots=tuple(slots),
        permutation=tuple(perm),
        tsfs_indices=tuple(tsfs),
        qam_indices=tuple(qam),
        extra_values=tuple(join_extra(t, q, cfg) for t, q in zip(tsfs, qam)),
    )
    alloc.validate()
    return alloc

"""Zero-forcing precoding with exact operation counts.

A sparse transmit vector only touches the precoder columns of its
non-zero entries, so the multiplication count drops from
``N_tx * N_K`` to ``N_tx * nnz``. Counts are analytic (one complex
multiply per matrix entry used), which keeps every benchmark machine
independent.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .codec import BitMessage, FrameConfig, MessageSet, encode_frame, frame_length
from .errors import ConfigError, StartStopError
from .grid import GridDims, populate_grid


@dataclass(frozen=True)
class ChannelMatrix:
    """``N_K x N_tx`` channel of one PRB."""

    entries: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.entries, dtype=complex)
        if h.ndim != 2:
            raise StartStopError("channel matrix must be two-dimensional")
        if not np.all(np.isfinite(h)):
            raise StartStopError("channel matrix has non-finite entries")
        object.__setattr__(self, "entries", h)

    @property
    def n_k(self) -> int:
        return self.entries.shape[0]

    @property
    def n_tx(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def rayleigh(cls, n_k: int, n_tx: int, rng: np.random.Generator) -> "ChannelMatrix":
        z = rng.standard_normal((n_k, n_tx)) + 1j * rng.standard_normal((n_k, n_tx))
        return cls(z / np.sqrt(2))


@dataclass(frozen=True)
class Precoder:
    """``N_tx x N_K`` precoding matrix; ``rank_deficient`` marks a truncated inverse."""

    entries: np.ndarray
    rank: int
    rank_deficient: bool = False

    @property
    def n_tx(self) -> int:
        return self.entries.shape[0]

    @property
    def n_k(self) -> int:
        return self.entries.shape[1]


def pinv(h: ChannelMatrix, tol: float = 1e-12) -> Precoder:
    """Moore-Penrose inverse by SVD; singular values below ``tol * s_max`` count as zero."""
    u, s, vh = np.linalg.svd(h.entries, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    w = (vh.conj().T * inv_s) @ u.conj().T
    rank = int(np.count_nonzero(keep))
    return Precoder(w, rank, rank_deficient=rank < min(h.n_k, h.n_tx))


@dataclass(frozen=True)
class TransmitVector:
    """Per-RE vector over the ``N_K`` receive streams.

    ``support`` lists the non-zero positions; for a dense vector it is
    every position.
    """

    values: np.ndarray
    support: tuple[int, ...]

    @classmethod
    def dense(cls, values) -> "TransmitVector":
        v = np.asarray(values, dtype=complex)
        return cls(v, tuple(range(v.size)))

    @classmethod
    def sparse(cls, values) -> "TransmitVector":
        v = np.asarray(values, dtype=complex)
        return cls(v, tuple(int(i) for i in np.flatnonzero(v)))

    @property
    def nnz(self) -> int:
        return len(self.support)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.ndim != 1:
            raise StartStopError("transmit vector must be one-dimensional")
        outside = np.ones(v.size, dtype=bool)
        outside[list(self.support)] = False
        if np.any(v[outside] != 0):
            raise StartStopError("non-zero entry outside the declared support")
        object.__setattr__(self, "values", v)


@dataclass
class OpCounter:
    mults: int = 0
    adds: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(self.mults + other.mults, self.adds + other.adds)

    def __iadd__(self, other: "OpCounter"):
        self.mults += other.mults
        self.adds += other.adds
        return self


def _check_dims(w: Precoder, x: TransmitVector):
    if x.values.size != w.n_k:
        raise StartStopError(f"vector length {x.values.size} does not match N_K={w.n_k}")


def precode_dense(w: Precoder, x: TransmitVector, ctr: OpCounter) -> np.ndarray:
    _check_dims(w, x)
    ctr.mults += w.n_tx * w.n_k
    ctr.adds += w.n_tx * (w.n_k - 1)
    return w.entries @ x.values


def precode_sparse(w: Precoder, x: TransmitVector, ctr: OpCounter) -> np.ndarray:
    """``W x`` from the columns on the support of ``x`` only."""
    _check_dims(w, x)
    idx = list(x.support)
    ctr.mults += w.n_tx * len(idx)
    ctr.adds += w.n_tx * max(len(idx) - 1, 0)
    if not idx:
        return np.zeros(w.n_tx, dtype=complex)
    return w.entries[:, idx] @ x.values[idx]


@dataclass(frozen=True)
class BenchResult:
    label: str
    n_res: int
    active_res: int
    dense: OpCounter
    sparse: OpCounter

    @property
    def ratio(self) -> float:
        """Dense over sparse multiplication count (the reduction factor)."""
        return self.dense.mults / self.sparse.mults if self.sparse.mults else float("inf")

    @property
    def fraction(self) -> float:
        return self.sparse.mults / self.dense.mults


def frame_streams(cfg: FrameConfig, dims: GridDims, n_k: int, rng: np.random.Generator):
    """One start/stop frame per receive stream, flattened to the frame's
    ``frame_length`` counter REs: shape ``(n_k, frame_length)``.

    Counter values within a frame are drawn without replacement so every
    stop bit occupies its own RE.
    """
    n_re = frame_length(cfg, capacity=dims.capacity)
    usable = [dims.linear((sc, sym)) for sym in range(dims.n_symbols)
              for sc in range(dims.n_subcarriers) if (sc, sym) not in dims.reserved][:n_re]
    out = np.zeros((n_k, n_re), dtype=complex)
    for k in range(n_k):
        values = rng.choice(1 << cfg.n_bits, cfg.n_messages, replace=False)
        msgs = MessageSet(tuple(BitMessage.from_value(int(v), cfg.n_bits) for v in values))
        extra = [tuple(int(b) for b in rng.integers(0, 2, cfg.extra_bits))
                 for _ in range(cfg.n_messages)]
        grid = populate_grid(encode_frame(msgs, cfg, extra), dims, boost=False)
        flat = grid.amplitudes.T.reshape(-1)
        out[k] = flat[usable]
    return out


def frame_benchmark(cfg: FrameConfig, dims: GridDims, n_tx: int = 64, n_k: int = 8,
                    seed: int = 0, label: str = "") -> BenchResult:
    """Precode one frame per stream, RE by RE, densely and sparsely.

    Outputs of both paths are compared; the counters give the exact cost.
    """
    if n_k > n_tx:
        raise ConfigError("zero forcing needs N_K <= N_tx")
    rng = np.random.default_rng(seed)
    w = pinv(ChannelMatrix.rayleigh(n_k, n_tx, rng))
    streams = frame_streams(cfg, dims, n_k, rng)
    dense, sparse = OpCounter(), OpCounter()
    active = 0
    for col in streams.T:
        a = precode_dense(w, TransmitVector.dense(col), dense)
        x = TransmitVector.sparse(col)
        active += x.nnz
        b = precode_sparse(w, x, sparse)
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12 * max(1.0, float(np.max(np.abs(a))))):
            raise StartStopError("sparse and dense precoding disagree")
    return BenchResult(label or repr(cfg), streams.shape[1], active // n_k, dense, sparse)


def bench_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "n_res", "active_res", "dense_mults", "sparse_mults", "ratio"])
    for r in results:
        w.writerow([r.label, r.n_res, r.active_res, r.dense.mults, r.sparse.mults,
                     f"{r.ratio:.4f}"])
    return buf.getvalue()


@dataclass(frozen=True)
class BandwidthProfile:
    """Numerology of one carrier: PRB count, symbols per TTI and TTI length."""

    name: str = "NR 20 MHz"
    n_prb: int = 100
    symbols_per_tti: int = 14
    tti_s: float = 1e-3
    subcarriers_per_prb: int = 12

    @property
    def n_subcarriers(self) -> int:
        return self.n_prb * self.subcarriers_per_prb


NR_20MHZ = BandwidthProfile()


@dataclass(frozen=True)
class ComplexityReport:
    profile: BandwidthProfile
    inversions_per_s: float
    products_per_s_per_subcarrier: float
    products_per_s: float
    sparsity: float = field(default=1.0)

    @property
    def effective_per_s_per_subcarrier(self) -> float:
        """Matrix-vector products per second and subcarrier after skipping empty REs."""
        return self.products_per_s_per_subcarrier * self.sparsity


def system_complexity(profile: BandwidthProfile = NR_20MHZ, sparsity: float = 1.0) -> ComplexityReport:
    """Precoder workload: one inversion per PRB and TTI, one product per RE.

    ``sparsity`` is the active-RE fraction; with sparse transmit vectors
    the product rate scales with it.
    """
    if not 0 < sparsity <= 1:
        raise ConfigError("sparsity must be in (0, 1]")
    ttis = 1.0 / profile.tti_s
    per_sc = profile.symbols_per_tti * ttis
    return ComplexityReport(
        profile=profile,
        inversions_per_s=profile.n_prb * ttis,
        products_per_s_per_subcarrier=per_sc,
        products_per_s=per_sc * profile.n_subcarriers,
        sparsity=sparsity,
    )

"""Waveform synthesis with fractional time/frequency-shifted stop bits and
template-bank detection.

Conventions
-----------
* Grid subcarrier ``sc`` sits on FFT bin ``sc - n_subcarriers // 2``.
* Transforms are unitary (``norm="ortho"``), so a unit RE produces a unit
  receiver bin and per-sample noise variance equals per-bin variance.
* A stop bit with shift index ``(n_t, n_f)`` is a CP-extended tone at
  ``bin + n_f * df`` started ``n_t * dt`` samples early. The early start is
  linear: its head lands in the previous symbol's FFT window and is lost
  before the first symbol.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .codec import FrameConfig
from .errors import ConfigError, StartStopError
from .grid import ResourceGrid
from .qam import constellation, slice_symbols


@dataclass(frozen=True)
class OfdmParams:
    n_fft: int = 2048
    cp_len: int = 144
    subcarrier_spacing: float = 15e3

    def __post_init__(self):
        if self.n_fft < 8:
            raise ConfigError("n_fft too small")
        if not 0 <= self.cp_len < self.n_fft:
            raise ConfigError("cp_len must be in [0, n_fft)")

    @property
    def sample_rate(self) -> float:
        return self.n_fft * self.subcarrier_spacing

    @property
    def symbol_len(self) -> int:
        return self.n_fft + self.cp_len


@dataclass(frozen=True)
class ShiftSteps:
    """Time step in samples and frequency step in subcarrier spacings."""

    dt: int
    df: float


def default_steps(cfg: FrameConfig, params: OfdmParams) -> ShiftSteps:
    """``dt = n_fft/16`` (finer when more than 16 time shifts are configured)
    and ``df = 1/(2 n_f)`` so all frequency shifts stay below half a subcarrier."""
    n_t = cfg.n_t if cfg.tsfs_enabled else 1
    n_f = cfg.n_f if cfg.tsfs_enabled else 1
    return ShiftSteps(dt=params.n_fft // max(16, n_t), df=1.0 / (2 * n_f))


@dataclass(frozen=True)
class TsFsIndex:
    n_t: int
    n_f: int


@dataclass
class FrameWaveform:
    samples: np.ndarray
    params: OfdmParams
    n_symbols: int

    def __post_init__(self):
        expected = self.n_symbols * self.params.symbol_len
        if self.samples.shape != (expected,):
            raise StartStopError(f"waveform must have {expected} samples")

    def energy(self) -> float:
        return float(np.vdot(self.samples, self.samples).real)

    def to_bytes(self) -> bytes:
        """Interleaved re/im float64, little endian."""
        out = np.empty(2 * self.samples.size, dtype="<f8")
        out[0::2] = self.samples.real
        out[1::2] = self.samples.imag
        return out.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: OfdmParams, n_symbols: int) -> "FrameWaveform":
        raw = np.frombuffer(data, dtype="<f8")
        return cls(raw[0::2] + 1j * raw[1::2], params, n_symbols)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "real", "imag"])
        for i, v in enumerate(self.samples):
            w.writerow([i, repr(float(v.real)), repr(float(v.imag))])
        return buf.getvalue()


def bin_of(sc, n_subcarriers: int):
    return np.asarray(sc) - n_subcarriers // 2


def plain_ofdm(amplitudes: np.ndarray, params: OfdmParams) -> np.ndarray:
    """IFFT + cyclic prefix for an ``(n_subcarriers, n_symbols)`` grid."""
    n_sc, n_sym = amplitudes.shape
    n, cp = params.n_fft, params.cp_len
    if n_sc > n:
        raise ConfigError("n_fft must be at least the number of subcarriers")
    spec = np.zeros((n, n_sym), dtype=complex)
    spec[bin_of(np.arange(n_sc), n_sc) % n, :] = amplitudes
    body = np.fft.ifft(spec, axis=0, norm="ortho")
    frame = np.concatenate([body[n - cp:, :], body], axis=0) if cp else body
    return frame.T.reshape(-1)


def pulse_samples(k: int, amplitude: complex, shift: int, eps: float, params: OfdmParams):
    """Samples of one CP-extended tone and its start offset relative to its symbol."""
    n, cp = params.n_fft, params.cp_len
    m = np.arange(-cp, n)
    tone = amplitude / np.sqrt(n) * np.exp(2j * np.pi * (k + eps) * m / n)
    return tone, -shift


def _check_shift(shift, params):
    if not 0 <= shift < params.n_fft:
        raise ConfigError(f"time shift {shift} must be in [0, n_fft)")


def synthesize(grid: ResourceGrid, params: OfdmParams, steps: ShiftSteps | None = None) -> FrameWaveform:
    """Frame waveform: plain OFDM for ``grid.base`` plus overlap-added shifted pulses."""
    dims = grid.dims
    samples = plain_ofdm(grid.base, params).astype(complex)
    if grid.pulses and steps is None:
        raise ConfigError("shift steps required for shifted pulses")
    total = samples.size
    for p in grid.pulses:
        shift = p.n_t * steps.dt
        _check_shift(shift, params)
        k = int(bin_of(p.sc, dims.n_subcarriers))
        tone, offset = pulse_samples(k, p.amplitude, shift, p.n_f * steps.df, params)
        start = p.sym * params.symbol_len + offset
        lo = max(start, 0)
        hi = min(start + tone.size, total)
        samples[lo:hi] += tone[lo - start:hi - start]
    return FrameWaveform(samples, params, dims.n_symbols)


def demodulate(samples, params: OfdmParams, n_symbols: int) -> np.ndarray:
    """CP removal + FFT; returns all ``n_fft`` bins per symbol, shape ``(n_fft, n_symbols)``."""
    if isinstance(samples, FrameWaveform):
        samples = samples.samples
    blocks = np.asarray(samples).reshape(n_symbols, params.symbol_len)[:, params.cp_len:]
    return np.fft.fft(blocks, axis=1, norm="ortho").T


def _geom(theta, length):
    """sum_{u < length} exp(1j * theta * u), stable near theta = 0."""
    theta = np.asarray(theta, dtype=float)
    half = theta / 2
    den = np.sin(half)
    safe = np.where(den == 0, 1.0, den)
    length = np.asarray(length, dtype=float)
    ratio = np.where(den == 0, length, np.sin(length * half) / safe)
    return np.exp(1j * half * (length - 1)) * ratio


def pulse_response(k: int, shift: int, eps: float, params: OfdmParams, offsets=None):
    """Receiver FFT output of one unit stop pulse on bin ``k``.

    Returns ``(prev, own)``: bins ``k + offsets`` in the previous and own
    symbol windows (closed form of the truncated-tone DFT). ``offsets``
    defaults to all ``n_fft`` bins in natural order starting at ``-k``, so
    the arrays are indexed by absolute FFT bin.
    """
    n, cp = params.n_fft, params.cp_len
    _check_shift(shift, params)
    if offsets is None:
        offsets = (np.arange(n) - k + n // 2) % n - n // 2
    d = np.asarray(offsets, dtype=float)
    theta = 2 * np.pi * (eps - d) / n
    own = np.exp(2j * np.pi * (k + eps) * shift / n) * _geom(theta, n - shift) / n
    if shift:
        prev = (np.exp(2j * np.pi * (k + eps) * (shift - n - cp) / n)
                * np.exp(1j * theta * (n - shift)) * _geom(theta, shift) / n)
    else:
        prev = np.zeros_like(own)
    return prev, own


@dataclass
class Detection:
    re: tuple
    occupied: bool
    n_t: int
    n_f: int
    qam_index: int
    gain: complex
    score: float
    clipped: bool = False

    @property
    def tsfs(self) -> TsFsIndex:
        return TsFsIndex(self.n_t, self.n_f)


@dataclass
class TemplateBank:
    """Patch templates of every used shift hypothesis, computed on bin 0.

    A patch is bins ``k-width..k+width`` of the previous and own symbol
    windows. Moving a template to bin ``k`` only multiplies each window by
    a phase (``exp(2j pi k s/n)`` own, ``exp(2j pi k (s-cp)/n)`` previous).
    """

    cfg: FrameConfig
    params: OfdmParams
    steps: ShiftSteps
    width: int = 2
    hyps: np.ndarray = field(init=False, repr=False)
    shifts: np.ndarray = field(init=False, repr=False)
    eps: np.ndarray = field(init=False, repr=False)
    t_prev: np.ndarray = field(init=False, repr=False)
    t_own: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cfg, params = self.cfg, self.params
        if cfg.tsfs_enabled:
            count = 1 << cfg.tsfs_bits
            hyps = np.array([divmod(v, cfg.n_f) for v in range(count)], dtype=np.int64)
        else:
            hyps = np.zeros((1, 2), dtype=np.int64)
        self.hyps = hyps
        self.shifts = hyps[:, 0] * self.steps.dt
        self.eps = hyps[:, 1] * self.steps.df
        if self.shifts.max() >= params.n_fft:
            raise ConfigError(
                f"largest time shift {self.shifts.max()} exceeds one symbol ({params.n_fft})"
            )
        offsets = np.arange(-self.width, self.width + 1)
        prev, own = zip(*(pulse_response(0, int(s), float(e), params, offsets)
                          for s, e in zip(self.shifts, self.eps)))
        self.t_prev = np.array(prev)
        self.t_own = np.array(own)
        self.e_prev = np.sum(np.abs(self.t_prev) ** 2, axis=1)
        self.e_own = np.sum(np.abs(self.t_own) ** 2, axis=1)
        self._roots = np.exp(2j * np.pi * np.arange(params.n_fft) / params.n_fft)
        self._responses = {}
        self._spectra = None

    @property
    def size(self) -> int:
        return len(self.hyps)

    def wide(self, offsets):
        """Untruncated ``(prev, own)`` templates of every hypothesis on bin 0
        at the given bin offsets, shape ``(H, len(offsets))``."""
        n, cp = self.params.n_fft, self.params.cp_len
        d = np.asarray(offsets, dtype=float)[None, :]
        s = self.shifts[:, None].astype(float)
        e = self.eps[:, None]
        theta = 2 * np.pi * (e - d) / n
        own = np.exp(2j * np.pi * e * s / n) * _geom(theta, n - s) / n
        prev = (np.exp(2j * np.pi * e * (s - n - cp) / n) * np.exp(1j * theta * (n - s))
                * _geom(theta, s) / n)
        return prev, own

    def spectra(self):
        """DFT over bins of every hypothesis' full bin-0 response plus the
        full response energies: ``(F_prev, F_own, e_prev, e_own)``."""
        if self._spectra is None:
            n = self.params.n_fft
            prev, own = self.wide((np.arange(n) + n // 2) % n - n // 2)
            self._spectra = (np.fft.fft(prev, axis=1), np.fft.fft(own, axis=1),
                             np.sum(np.abs(prev) ** 2, axis=1), np.sum(np.abs(own) ** 2, axis=1))
        return self._spectra

    def matched(self, y: np.ndarray, ks, sym: int):
        """Exact (untruncated) inner products and energies of every
        hypothesis placed on bins ``ks`` of symbol ``sym``, shape ``(H, len(ks))``."""
        f_prev, f_own, e_prev, e_own = self.spectra()
        n, cp = self.params.n_fft, self.params.cp_len
        ks = np.asarray(ks, dtype=np.int64) % n
        # circular cross-correlation of the window with each bin-0 response
        corr = np.fft.ifft(np.fft.fft(y[:, sym])[None, :] * f_own.conj(), axis=1)[:, ks]
        inner = corr * self._roots[(ks[None, :] * self.shifts[:, None]) % n].conj()
        energy = e_own.copy()
        if sym > 0:
            corr = np.fft.ifft(np.fft.fft(y[:, sym - 1])[None, :] * f_prev.conj(), axis=1)[:, ks]
            inner += corr * self._roots[(ks[None, :] * (self.shifts[:, None] - cp)) % n].conj()
            energy += e_prev
        return inner, energy

    def index_of(self, n_t: int, n_f: int) -> int:
        if not self.cfg.tsfs_enabled:
            return 0
        return n_t * self.cfg.n_f + n_f

    def phases(self, k):
        # shifts are whole samples, so every phase is an n-th root of unity
        k = np.asarray(k, dtype=np.int64)[..., None]
        n, cp = self.params.n_fft, self.params.cp_len
        own = self._roots[(k * self.shifts) % n]
        prev = self._roots[(k * (self.shifts - cp)) % n]
        return prev, own

    def patches(self, y: np.ndarray, ks, syms):
        """Extract ``(prev, own, has_prev)`` patches from demodulated bins ``y``."""
        n = self.params.n_fft
        ks = np.asarray(ks)
        syms = np.asarray(syms)
        cols = (ks[:, None] + np.arange(-self.width, self.width + 1)) % n
        own = y[cols, syms[:, None]]
        has_prev = syms > 0
        prev = y[cols, np.maximum(syms - 1, 0)[:, None]] * has_prev[:, None]
        return prev, own, has_prev

    def correlate(self, y: np.ndarray, ks, syms):
        """Inner products ``<patch, template>`` and template energies, shape ``(n, H)``."""
        prev, own, has_prev = self.patches(y, ks, syms)
        ph_prev, ph_own = self.phases(ks)
        inner = (own @ self.t_own.conj().T) * ph_own.conj()
        inner += (prev @ self.t_prev.conj().T) * ph_prev.conj() * has_prev[:, None]
        energy = self.e_own[None, :] + self.e_prev[None, :] * has_prev[:, None]
        patch_energy = np.sum(np.abs(own) ** 2, axis=1) + np.sum(np.abs(prev) ** 2, axis=1)
        return inner, energy, patch_energy

    def response(self, h: int, k: int):
        """Full-width ``(prev, own)`` response of hypothesis ``h`` on bin ``k``,
        indexed by absolute FFT bin."""
        base = self._responses.get(h)
        if base is None:
            base = pulse_response(0, int(self.shifts[h]), float(self.eps[h]), self.params)
            self._responses[h] = base
        n, cp = self.params.n_fft, self.params.cp_len
        k, s = int(k), int(self.shifts[h])
        return (np.roll(base[0], k) * self._roots[(k * (s - cp)) % n],
                np.roll(base[1], k) * self._roots[(k * s) % n])


def decide(inner, energy, gain: float, qam_bits: int, threshold: float = 0.5):
    """GLRT over shift hypotheses, then QAM slicing of the gain estimate.

    ``inner``/``energy`` have shape ``(..., H)``. Returns
    ``(h, qam_index, gain_estimate, captured_energy, occupied)``.
    """
    captured = np.abs(inner) ** 2 / energy
    h = np.argmax(captured, axis=-1)
    take = np.expand_dims(h, -1)
    c = np.take_along_axis(inner, take, -1)[..., 0] / np.take_along_axis(energy, take, -1)[..., 0]
    q = slice_symbols(c / gain, qam_bits)
    point = constellation(qam_bits)[q]
    occupied = np.real(np.conj(point) * c / gain) >= threshold * np.abs(point) ** 2
    return h, q, c, np.take_along_axis(captured, take, -1)[..., 0], occupied


def detect(received, res, bank: TemplateBank, n_subcarriers: int, gain: float = 1.0,
           threshold: float = 0.5) -> list[Detection]:
    """Per-RE template detection.

    ``received`` is a :class:`FrameWaveform` or demodulated bins. A stop
    is declared when its projection onto the best hypothesis reaches
    ``threshold`` of the template energy (0.5 is the ML boundary between
    "empty" and that hypothesis). Scores are normalised by patch energy,
    so the chosen shift index does not depend on the received scale.
    """
    if isinstance(received, FrameWaveform):
        y = demodulate(received, received.params, received.n_symbols)
    else:
        y = received
    res = list(res)
    if not res:
        return []
    sc = np.array([r[0] for r in res])
    sym = np.array([r[1] for r in res])
    ks = bin_of(sc, n_subcarriers)
    inner, energy, patch_energy = bank.correlate(y, ks, sym)
    h, q, c, captured, occ = decide(inner, energy, gain, bank.cfg.qam_bits, threshold)
    out = []
    for i, re in enumerate(res):
        score = float(captured[i] / patch_energy[i]) if patch_energy[i] > 0 else 0.0
        n_t, n_f = bank.hyps[h[i]]
        out.append(Detection(
            re=tuple(re), occupied=bool(occ[i]) and patch_energy[i] > 0, n_t=int(n_t),
            n_f=int(n_f), qam_index=int(q[i]), gain=complex(c[i]), score=score,
            clipped=bool(sym[i] == 0),
        ))
    return out


def combine_repetitions(inner, energy):
    """Coherently fuse per-copy correlations, shape ``(R, ..., H)`` -> ``(..., H)``.

    Sums inner products and template energies before the argmax, which is
    maximum-ratio combining for copies sharing one hypothesis.
    """
    inner = np.asarray(inner)
    energy = np.asarray(energy, dtype=float)
    if inner.shape != energy.shape:
        energy = np.broadcast_to(energy, inner.shape)
    return inner.sum(axis=0), energy.sum(axis=0)


def ici_profile(eps: float, params: OfdmParams, span: int = 2) -> np.ndarray:
    """Receiver magnitudes at the stop subcarrier and its ``±span`` neighbours
    for a unit tone offset by ``eps`` subcarriers (Dirichlet kernel)."""
    _, own = pulse_response(0, 0, eps, params, np.arange(-span, span + 1))
    return np.abs(own)


def isi_profile(shift: int, params: OfdmParams) -> tuple[float, float]:
    """Energy split of a left-shifted unit pulse between its own and the
    adjacent (previous) symbol window, measured on a synthesised waveform."""
    _check_shift(shift, params)
    n, sl = params.n_fft, params.symbol_len
    tone, offset = pulse_samples(0, 1.0, shift, 0.0, params)
    frame = np.zeros(2 * sl, dtype=complex)
    start = sl + offset
    frame[start:start + tone.size] = tone
    prev = frame[params.cp_len:sl]
    own = frame[sl + params.cp_len:]
    e_prev = float(np.vdot(prev, prev).real)
    e_own = float(np.vdot(own, own).real)
    total = e_prev + e_own
    return e_own / total, e_prev / total

"""Channel impairments: AWGN, per-subcarrier flat fading, interference.

Every random draw goes through a :class:`numpy.random.Generator` built
from an explicit seed, so applying a channel is a pure function of its
input and seed. :func:`trial_rngs` derives independent per-trial streams
from one master seed for parallel Monte Carlo runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, StartStopError
from .grid import ResourceGrid
from .modem import FrameWaveform, OfdmParams, ShiftSteps, synthesize

FADING_OFF = "off"
FADING_FLAT = "flat-per-subcarrier"


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = math.inf
    fading: str = FADING_OFF
    interferers: tuple = ()  # (ResourceGrid | FrameWaveform, coupling_db) pairs
    rng_seed: int = 0

    def __post_init__(self):
        if self.fading not in (FADING_OFF, FADING_FLAT):
            raise ConfigError(f"unknown fading mode {self.fading!r}")
        if math.isnan(self.snr_db):
            raise ConfigError("snr_db must be a number")
        for item in self.interferers:
            if len(item) != 2:
                raise ConfigError("interferers are (grid, coupling_db) pairs")
            coupling = float(item[1])
            if math.isnan(coupling) or coupling == math.inf:
                raise ConfigError(f"coupling gain must be finite or -inf, got {coupling}")
        object.__setattr__(self, "interferers", tuple(self.interferers))

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def trial_rngs(seed: int, n_trials: int) -> list[np.random.Generator]:
    """Independent generators for ``n_trials`` parallel trials of one run."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_trials)]


def complex_noise(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples with ``E|n|^2 = variance``."""
    scale = math.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def noise_variance(signal_power: float, snr_db: float) -> float:
    if snr_db == math.inf:
        return 0.0
    return signal_power / 10 ** (snr_db / 10)


def awgn(wave: FrameWaveform, cfg: ChannelConfig, rng: np.random.Generator | None = None,
         noise_power: float | None = None) -> FrameWaveform:
    """Add white Gaussian noise at ``cfg.snr_db`` relative to the mean sample power.

    ``noise_power`` overrides the calibration with an absolute per-sample
    variance (used when SNR is defined per resource element rather than
    per sample).
    """
    if cfg.snr_db == math.inf and noise_power is None:
        return wave
    if noise_power is None:
        power = float(np.mean(np.abs(wave.samples) ** 2))
        if power <= 0:
            raise StartStopError("cannot calibrate noise on a zero-power waveform")
        noise_power = noise_variance(power, cfg.snr_db)
    rng = cfg.rng() if rng is None else rng
    noisy = wave.samples + complex_noise(rng, wave.samples.shape, noise_power)
    return replace(wave, samples=noisy)


def rayleigh_gains(rng: np.random.Generator, n_fft: int) -> np.ndarray:
    """Unit-mean-power complex Gaussian gain per FFT bin."""
    return complex_noise(rng, n_fft, 1.0)


def flat_fading(wave: FrameWaveform, gains: np.ndarray) -> FrameWaveform:
    """Scale every FFT bin of every symbol body by its gain; the cyclic
    prefix is rebuilt from the faded body."""
    p = wave.params
    n, cp = p.n_fft, p.cp_len
    blocks = wave.samples.reshape(wave.n_symbols, p.symbol_len)
    body = np.fft.ifft(np.fft.fft(blocks[:, cp:], axis=1) * gains[None, :], axis=1)
    out = np.concatenate([body[:, n - cp:], body], axis=1) if cp else body
    return replace(wave, samples=out.reshape(-1))


def _as_waveform(item, params: OfdmParams, steps: ShiftSteps | None) -> FrameWaveform:
    if isinstance(item, FrameWaveform):
        if item.params != params:
            raise StartStopError("interferer waveform uses different OFDM parameters")
        return item
    if isinstance(item, ResourceGrid):
        return synthesize(item, params, steps)
    raise StartStopError(f"unsupported interferer type {type(item).__name__}")


def inject_interference(victim: FrameWaveform, interferers, params: OfdmParams,
                        steps: ShiftSteps | None = None) -> FrameWaveform:
    """Add each interferer scaled by its amplitude coupling ``10**(dB/20)``.

    Interferers are ``(grid_or_waveform, coupling_db)`` pairs; a coupling of
    ``-inf`` contributes nothing.
    """
    if victim.params != params:
        raise StartStopError("victim waveform uses different OFDM parameters")
    samples = victim.samples.copy()
    for item, coupling_db in interferers:
        if coupling_db == -math.inf:
            continue
        wave = _as_waveform(item, params, steps)
        if wave.samples.shape != samples.shape:
            raise StartStopError("interferer frame length differs from the victim")
        samples += 10 ** (coupling_db / 20) * wave.samples
    return replace(victim, samples=samples)


@dataclass
class Channel:
    """Applies fading first, then interference, then noise."""

    cfg: ChannelConfig
    params: OfdmParams
    steps: ShiftSteps | None = None
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = self.cfg.rng()

    def __call__(self, wave: FrameWaveform, noise_power: float | None = None) -> FrameWaveform:
        if self.cfg.fading == FADING_FLAT:
            wave = flat_fading(wave, rayleigh_gains(self._rng, self.params.n_fft))
        if self.cfg.interferers:
            wave = inject_interference(wave, self.cfg.interferers, self.params, self.steps)
        return awgn(wave, self.cfg, self._rng, noise_power)


def interference_energy(wave: FrameWaveform) -> float:
    """Mean energy per sample of an interferer contribution."""
    return float(np.mean(np.abs(wave.samples) ** 2))

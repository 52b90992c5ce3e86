"""Efficiency figures, SINR budget and detection-error Monte Carlo.

The Monte Carlo works in the receiver's patch domain: a single stop bit on
an interior RE (both FFT windows observed) plus white Gaussian noise of
variance ``sigma**2`` per bin. SNR is per resource element, i.e. a unit
QAM point against ``sigma**2``, so the template-bank size is the only
thing that differs between two configurations compared at equal SNR.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .codec import FrameConfig, compression_ratio, frame_length
from .grid import power_boost_db
from .modem import OfdmParams, ShiftSteps, TemplateBank, combine_repetitions, decide, default_steps
from .qam import constellation

DB_PER_BIT = 3.0
OFDM_REFERENCE_BPCU = 1.0  # fully loaded grid, one bit per RE


def data_rate_efficiency(total_bits: int, total_res: int) -> float:
    if total_res < 1:
        raise ValueError("total_res must be >= 1")
    return total_bits / total_res


def delta_sinr_estimate(extra_bits: int) -> float:
    """Rule-of-thumb SINR increase for ``extra_bits`` more bits per stop bit."""
    if extra_bits < 0:
        raise ValueError("extra_bits must be >= 0")
    return DB_PER_BIT * extra_bits


@dataclass(frozen=True)
class LinkBudget:
    boost_db: float
    delta_sinr_db: float

    @property
    def gap_db(self) -> float:
        return self.delta_sinr_db - self.boost_db


def link_budget(cfg: FrameConfig, n_loaded: int | None = None) -> LinkBudget:
    """Power boost from sparsity against the SINR the shift bits cost.

    Only the shift bits are charged; QAM payload bits ride on the usual
    constellation budget. Without TS-FS there is nothing to compensate.
    """
    n_loaded = (1 << cfg.n_bits) if n_loaded is None else n_loaded
    extra = cfg.tsfs_bits
    if extra == 0:
        return LinkBudget(0.0, 0.0)
    return LinkBudget(power_boost_db(n_loaded, cfg.n_active), delta_sinr_estimate(extra))


@dataclass(frozen=True)
class EfficiencyReport:
    gamma_s: float
    gamma_ofdm_ref: float
    compression: float
    boost_db: float
    sparsity: float

    @classmethod
    def of(cls, cfg: FrameConfig, n_loaded: int | None = None) -> "EfficiencyReport":
        n_re = frame_length(cfg)
        n_loaded = (1 << cfg.n_bits) if n_loaded is None else n_loaded
        bits = cfg.n_messages * (cfg.n_bits + cfg.extra_bits)
        return cls(
            gamma_s=data_rate_efficiency(bits, n_re),
            gamma_ofdm_ref=OFDM_REFERENCE_BPCU,
            compression=compression_ratio(cfg.n_bits),
            boost_db=power_boost_db(n_loaded, cfg.n_active),
            sparsity=cfg.n_active / n_re,
        )


# -- Monte Carlo -----------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    snr_db: float
    errors: int
    trials: int
    ci_low: float
    ci_high: float

    @property
    def error_rate(self) -> float:
        return self.errors / self.trials


def wilson_interval(errors: int, trials: int) -> tuple[float, float]:
    ci = binomtest(errors, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _cnoise(rng, shape, sigma):
    return sigma / math.sqrt(2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_errors(bank: TemplateBank, snr_db: float, trials: int, rng: np.random.Generator,
                    copies: int = 1, batch: int = 2000) -> int:
    """Count hypothesis errors (wrong shift or wrong QAM symbol) of single
    stop bits sent ``copies`` times and fused coherently."""
    cfg = bank.cfg
    points = constellation(cfg.qam_bits)
    sigma = 10 ** (-snr_db / 20)
    e_tot = bank.e_own + bank.e_prev
    errors = 0
    done = 0
    while done < trials:
        n = min(batch, trials - done)
        h = rng.integers(0, bank.size, n)
        q = rng.integers(0, points.size, n)
        inner = np.zeros((n, bank.size), dtype=complex)
        for _ in range(copies):
            k = rng.integers(-64, 64, n)
            ph_prev, ph_own = bank.phases(k)
            rows = np.arange(n)
            amp = points[q][:, None]
            own = amp * bank.t_own[h] * ph_own[rows, h][:, None]
            prev = amp * bank.t_prev[h] * ph_prev[rows, h][:, None]
            own = own + _cnoise(rng, own.shape, sigma)
            prev = prev + _cnoise(rng, prev.shape, sigma)
            inner += (own @ bank.t_own.conj().T) * ph_own.conj()
            inner += (prev @ bank.t_prev.conj().T) * ph_prev.conj()
        energy = np.broadcast_to(copies * e_tot, inner.shape)
        hh, qq, _, _, _ = decide(inner, energy, 1.0, cfg.qam_bits)
        errors += int(np.count_nonzero((hh != h) | (qq != q)))
        done += n
    return errors


def sweep_detection_error(cfg: FrameConfig, snrs, trials: int, seed: int = 0,
                          params: OfdmParams | None = None, steps: ShiftSteps | None = None,
                          copies: int = 1) -> list[CurvePoint]:
    """Hypothesis-error rate against per-RE SNR; one independent seed
    stream per SNR point, so each point is reproducible on its own."""
    params = params or OfdmParams()
    steps = steps or default_steps(cfg, params)
    bank = TemplateBank(cfg, params, steps)
    streams = np.random.SeedSequence(seed).spawn(len(snrs))
    out = []
    for snr, ss in zip(snrs, streams):
        errors = simulate_errors(bank, float(snr), trials, np.random.default_rng(ss), copies)
        lo, hi = wilson_interval(errors, trials)
        out.append(CurvePoint(float(snr), errors, trials, lo, hi))
    return out


def curve_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["snr_db", "error_rate", "ci_low", "ci_high", "trials"])
    for p in points:
        w.writerow([f"{p.snr_db:g}", f"{p.error_rate:.6g}", f"{p.ci_low:.6g}",
                    f"{p.ci_high:.6g}", p.trials])
    return buf.getvalue()


def is_monotone(points) -> bool:
    """Nonincreasing within confidence: each rate is below the previous upper bound."""
    return all(b.error_rate <= a.ci_high for a, b in zip(points, points[1:]))


def snr_at_error(points, target: float) -> float:
    """SNR where the curve first crosses ``target``, interpolating log10(rate)
    linearly in dB. NaN when the curve never crosses."""
    for a, b in zip(points, points[1:]):
        if a.error_rate >= target > b.error_rate:
            la = math.log10(a.error_rate)
            lb = math.log10(b.error_rate) if b.errors else math.log10(0.5 / b.trials)
            t = (la - math.log10(target)) / (la - lb)
            return a.snr_db + t * (b.snr_db - a.snr_db)
    return math.nan

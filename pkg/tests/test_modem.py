import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from startstop.codec import BitMessage, FrameConfig, MessageSet, encode_frame
from startstop.errors import ConfigError, StartStopError
from startstop.grid import GridDims, Pulse, ResourceGrid, populate_grid
from startstop.modem import (
    FrameWaveform,
    OfdmParams,
    ShiftSteps,
    TemplateBank,
    bin_of,
    combine_repetitions,
    decide,
    default_steps,
    demodulate,
    detect,
    ici_profile,
    isi_profile,
    plain_ofdm,
    pulse_response,
    synthesize,
)
from startstop.qam import constellation

SMALL = OfdmParams(n_fft=64, cp_len=8)
SMALL_DIMS = GridDims(n_subcarriers=24, n_symbols=4)


def direct_ofdm(amplitudes, params):
    # oracle: explicit sum of complex exponentials, no FFT
    n, cp = params.n_fft, params.cp_len
    n_sc, n_sym = amplitudes.shape
    m = np.arange(-cp, n)
    out = []
    for sym in range(n_sym):
        x = np.zeros(m.size, dtype=complex)
        for sc in range(n_sc):
            k = sc - n_sc // 2
            x += amplitudes[sc, sym] * np.exp(2j * np.pi * k * m / n) / np.sqrt(n)
        out.append(x)
    return np.concatenate(out)


def random_grid(rng, dims=SMALL_DIMS):
    amp = rng.normal(size=(dims.n_subcarriers, dims.n_symbols)) + 1j * rng.normal(
        size=(dims.n_subcarriers, dims.n_symbols))
    return amp


class TestSynthesis:
    def test_plain_ofdm_matches_direct_sum(self):
        amp = random_grid(np.random.default_rng(1))
        assert np.max(np.abs(plain_ofdm(amp, SMALL) - direct_ofdm(amp, SMALL))) < 1e-12

    def test_zero_shift_pulses_equal_plain_ofdm(self):
        rng = np.random.default_rng(2)
        amp = random_grid(rng)
        pulses = tuple(Pulse(sc, sym, complex(amp[sc, sym]), 0, 0)
                       for sc in range(0, 24, 3) for sym in range(4))
        base = amp.copy()
        for p in pulses:
            base[p.sc, p.sym] = 0
        grid = ResourceGrid(dims=SMALL_DIMS, base=base, pulses=pulses)
        wave = synthesize(grid, SMALL, ShiftSteps(dt=4, df=0.25))
        assert np.max(np.abs(wave.samples - direct_ofdm(amp, SMALL))) < 1e-10

    def test_parseval_per_symbol(self):
        amp = random_grid(np.random.default_rng(3))
        y = demodulate(plain_ofdm(amp, SMALL), SMALL, 4)
        body = plain_ofdm(amp, SMALL).reshape(4, -1)[:, SMALL.cp_len:]
        for sym in range(4):
            grid_power = np.sum(np.abs(amp[:, sym]) ** 2)
            assert np.sum(np.abs(body[sym]) ** 2) == pytest.approx(grid_power, rel=1e-9)
            assert np.sum(np.abs(y[:, sym]) ** 2) == pytest.approx(grid_power, rel=1e-9)

    def test_flagship_frame_without_shifts_is_plain_ofdm(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, qam_bits=4)
        msgs = MessageSet(tuple(BitMessage.from_value(7 * i, 10) for i in range(10)))
        grid = populate_grid(encode_frame(msgs, cfg), GridDims())
        params = OfdmParams()
        wave = synthesize(grid, params, default_steps(cfg, params))
        assert np.max(np.abs(wave.samples - plain_ofdm(grid.amplitudes, params))) < 1e-10
        assert wave.samples.size == 14 * (2048 + 144)

    def test_shift_leaks_into_previous_window(self):
        params = OfdmParams()
        dims = GridDims()
        grid = ResourceGrid(dims=dims, base=np.zeros((96, 14), complex),
                            pulses=(Pulse(40, 3, 1.0, 1, 0),))
        y = demodulate(synthesize(grid, params, ShiftSteps(dt=270, df=0.0)), params, 14)
        prev = np.sum(np.abs(y[:, 2]) ** 2)
        own = np.sum(np.abs(y[:, 3]) ** 2)
        assert prev / (prev + own) == pytest.approx(270 / 2048, abs=1e-9)
        assert np.sum(np.abs(y[:, [0, 1, 4]]) ** 2) < 1e-20

    def test_half_bin_shift_magnitude(self):
        params = OfdmParams()
        grid = ResourceGrid(dims=GridDims(), base=np.zeros((96, 14), complex),
                            pulses=(Pulse(40, 3, 1.0, 0, 1),))
        y = demodulate(synthesize(grid, params, ShiftSteps(dt=128, df=0.5)), params, 14)
        k = int(bin_of(40, 96)) % 2048
        assert abs(y[k, 3]) == pytest.approx(0.6366, abs=1e-4)
        assert abs(y[k - 1, 3]) == pytest.approx(abs(y[k + 2, 3]), rel=1e-9)

    def test_shift_beyond_symbol(self):
        grid = ResourceGrid(dims=SMALL_DIMS, base=np.zeros((24, 4), complex),
                            pulses=(Pulse(3, 1, 1.0, 2, 0),))
        with pytest.raises(ConfigError):
            synthesize(grid, SMALL, ShiftSteps(dt=40, df=0.0))
        with pytest.raises(ConfigError):
            synthesize(grid, SMALL, None)

    def test_too_many_subcarriers(self):
        with pytest.raises(ConfigError):
            plain_ofdm(np.zeros((65, 1)), SMALL)


class TestPulseResponse:
    @pytest.mark.parametrize("shift,eps,sym", [(0, 0.0, 2), (20, 0.25, 2), (37, 0.4, 0), (63, 0.1, 1)])
    def test_closed_form_matches_fft(self, shift, eps, sym):
        sc = 5
        k = int(bin_of(sc, 24))
        pulses = (Pulse(sc, sym, 1.0, 1, 1),)
        grid = ResourceGrid(dims=SMALL_DIMS, base=np.zeros((24, 4), complex), pulses=pulses)
        y = demodulate(synthesize(grid, SMALL, ShiftSteps(dt=shift, df=eps)), SMALL, 4)
        prev, own = pulse_response(k, shift, eps, SMALL)
        assert np.max(np.abs(y[:, sym] - own)) < 1e-12
        if sym > 0:
            assert np.max(np.abs(y[:, sym - 1] - prev)) < 1e-12

    def test_bank_response_and_wide_templates(self):
        cfg = FrameConfig(n_bits=6, n_messages=2, n_tsfs=4, n_t=4, n_f=8)
        bank = TemplateBank(cfg, SMALL, default_steps(cfg, SMALL))
        for h in (0, 5, 31):
            for k in (-7, 0, 9):
                prev, own = pulse_response(k, int(bank.shifts[h]), float(bank.eps[h]), SMALL)
                b_prev, b_own = bank.response(h, k)
                assert np.max(np.abs(prev - b_prev)) < 1e-12
                assert np.max(np.abs(own - b_own)) < 1e-12
        offsets = np.arange(-3, 4)
        w_prev, w_own = bank.wide(offsets)
        for h in (0, 17):
            prev, own = pulse_response(0, int(bank.shifts[h]), float(bank.eps[h]), SMALL, offsets)
            assert np.max(np.abs(w_prev[h] - prev)) < 1e-12
            assert np.max(np.abs(w_own[h] - own)) < 1e-12

    def test_matched_filter_equals_full_inner_product(self):
        cfg = FrameConfig(n_bits=6, n_messages=2, n_tsfs=4, n_t=4, n_f=8)
        bank = TemplateBank(cfg, SMALL, default_steps(cfg, SMALL))
        rng = np.random.default_rng(4)
        y = rng.normal(size=(64, 3)) + 1j * rng.normal(size=(64, 3))
        inner, energy = bank.matched(y, [3, -5], 1)
        for j, k in enumerate((3, -5)):
            for h in (0, 9, 30):
                prev, own = bank.response(h, k)
                assert inner[h, j] == pytest.approx(np.vdot(own, y[:, 1]) + np.vdot(prev, y[:, 0]))
                assert energy[h] == pytest.approx(np.vdot(own, own).real + np.vdot(prev, prev).real)


class TestProfiles:
    def test_ici_zero_offset(self):
        prof = ici_profile(0.0, OfdmParams())
        assert prof[2] == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.delete(prof, 2)) < 1e-12

    def test_ici_half_bin_against_brute_force_dft(self):
        n = 2048
        m = np.arange(n)
        tone = np.exp(2j * np.pi * 0.5 * m / n) / np.sqrt(n)
        oracle = abs(np.sum(tone) / np.sqrt(n))
        assert ici_profile(0.5, OfdmParams())[2] == pytest.approx(oracle, abs=1e-12)
        assert oracle == pytest.approx(2 / np.pi, abs=1e-4)

    def test_ici_symmetric_leakage_at_half_bin(self):
        prof = ici_profile(0.5, OfdmParams())
        assert prof[1] == pytest.approx(prof[4], rel=1e-12)
        assert prof[2] == pytest.approx(prof[3], rel=1e-12)

    def test_ici_monotone(self):
        centers = [ici_profile(i / 12, OfdmParams())[2] for i in range(7)]
        assert all(a > b for a, b in zip(centers, centers[1:]))

    def test_isi_no_shift(self):
        assert isi_profile(0, OfdmParams()) == (1.0, 0.0)

    @pytest.mark.parametrize("cp", [0, 144])
    def test_isi_window_count(self, cp):
        own, adj = isi_profile(270, OfdmParams(cp_len=cp))
        assert adj == pytest.approx(270 / 2048, abs=1e-9)
        assert own + adj == pytest.approx(1.0, abs=1e-12)

    def test_isi_monotone_over_sixteen_shifts(self):
        adj = [isi_profile(i * 128, OfdmParams())[1] for i in range(16)]
        assert all(a < b for a, b in zip(adj, adj[1:]))
        assert isi_profile(180, OfdmParams())[1] < isi_profile(270, OfdmParams())[1]

    def test_isi_bounds(self):
        with pytest.raises(ConfigError):
            isi_profile(2048, OfdmParams())

    @given(st.integers(0, 2047))
    def test_isi_fractions_sum_to_one(self, shift):
        own, adj = isi_profile(shift, OfdmParams())
        assert own + adj == pytest.approx(1.0, abs=1e-9)


def single_stop(cfg, params, steps, h, q, sc=40, sym=5, gain=1.0):
    n_t, n_f = divmod(h, cfg.n_f)
    amp = gain * constellation(cfg.qam_bits)[q]
    grid = ResourceGrid(dims=GridDims(), base=np.zeros((96, 14), complex),
                        pulses=(Pulse(sc, sym, complex(amp), n_t, n_f),))
    return synthesize(grid, params, steps)


class TestDetection:
    def test_exhaustive_noise_free_5x6_qpsk(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6, qam_bits=2)
        params = OfdmParams()
        steps = default_steps(cfg, params)
        bank = TemplateBank(cfg, params, steps)
        for h in range(bank.size):
            for q in range(4):
                det = detect(single_stop(cfg, params, steps, h, q), [(40, 5)], bank, 96)[0]
                assert det.occupied
                assert (det.n_t, det.n_f) == tuple(bank.hyps[h])
                assert det.qam_index == q

    def test_empty_slot(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6, qam_bits=2)
        params = OfdmParams()
        steps = default_steps(cfg, params)
        bank = TemplateBank(cfg, params, steps)
        det = detect(single_stop(cfg, params, steps, 7, 1), [(70, 9)], bank, 96)[0]
        assert not det.occupied
        assert det.score == 0.0

    def test_first_symbol_flagged_clipped(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6)
        params = OfdmParams()
        steps = default_steps(cfg, params)
        bank = TemplateBank(cfg, params, steps)
        det = detect(single_stop(cfg, params, steps, 12, 0, sym=0), [(40, 0)], bank, 96)[0]
        assert det.clipped and det.occupied and (det.n_t, det.n_f) == (2, 0)

    @given(st.integers(0, 31), st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3))
    def test_argmax_invariant_to_scaling(self, h, scale):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=4, n_f=8, qam_bits=2)
        params = OfdmParams()
        steps = default_steps(cfg, params)
        bank = TemplateBank(cfg, params, steps)
        y = demodulate(single_stop(cfg, params, steps, h, 2), params, 14)
        base = detect(y, [(40, 5)], bank, 96)[0]
        scaled = detect(y * scale, [(40, 5)], bank, 96)[0]
        assert (scaled.n_t, scaled.n_f) == (base.n_t, base.n_f)
        assert scaled.score == pytest.approx(base.score, rel=1e-9)

    def test_unused_hypotheses_excluded(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6)
        bank = TemplateBank(cfg, OfdmParams(), default_steps(cfg, OfdmParams()))
        assert bank.size == 16

    def test_bank_rejects_oversized_shift(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=4, n_f=8)
        with pytest.raises(ConfigError):
            TemplateBank(cfg, OfdmParams(), ShiftSteps(dt=1024, df=0.1))


class TestCombining:
    def setup_method(self):
        self.cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=4, n_f=8, qam_bits=2)
        self.params = OfdmParams()
        self.bank = TemplateBank(self.cfg, self.params, default_steps(self.cfg, self.params))

    def test_single_copy_is_identity(self):
        rng = np.random.default_rng(5)
        inner = rng.normal(size=(1, 3, 32)) + 1j * rng.normal(size=(1, 3, 32))
        energy = rng.uniform(1, 2, size=(1, 3, 32))
        fused_inner, fused_energy = combine_repetitions(inner, energy)
        assert np.array_equal(fused_inner, inner[0])
        assert np.array_equal(fused_energy, energy[0])

    def test_noise_free_fusion_matches_single(self):
        steps = default_steps(self.cfg, self.params)
        y = demodulate(single_stop(self.cfg, self.params, steps, 21, 3), self.params, 14)
        inner, energy, _ = self.bank.correlate(y, [int(bin_of(40, 96))], [5])
        single = decide(inner[0], energy[0], 1.0, 2)
        fused = decide(*combine_repetitions([inner[0]] * 4, [energy[0]] * 4), 1.0, 2)
        assert (single[0], single[1]) == (fused[0], fused[1]) == (21, 3)

    def test_coherent_gain_close_to_ten_log_r(self):
        # oracle: output SNR of the matched statistic for the true hypothesis
        rng = np.random.default_rng(6)
        h, copies, trials, sigma = 9, 4, 20000, 0.5
        t_prev, t_own = self.bank.t_prev[h], self.bank.t_own[h]
        template = np.concatenate([t_prev, t_own])
        e = np.vdot(template, template).real

        def stats(r):
            noise = (rng.normal(size=(r, trials, template.size))
                     + 1j * rng.normal(size=(r, trials, template.size))) * sigma / np.sqrt(2)
            inner = e + noise @ template.conj()
            return np.sum(inner, axis=0)

        def snr(fused, r):
            return np.abs(np.mean(fused)) ** 2 / np.var(fused)

        gain_db = 10 * np.log10(snr(stats(copies), copies) / snr(stats(1), 1))
        assert gain_db == pytest.approx(10 * np.log10(copies), abs=1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            combine_repetitions(np.zeros((2, 4)), np.zeros((3, 4)))


class TestWaveformIo:
    def test_bytes_round_trip(self):
        amp = random_grid(np.random.default_rng(7))
        wave = FrameWaveform(plain_ofdm(amp, SMALL), SMALL, 4)
        data = wave.to_bytes()
        assert len(data) == 16 * wave.samples.size
        back = FrameWaveform.from_bytes(data, SMALL, 4)
        assert np.array_equal(back.samples, wave.samples)
        assert np.frombuffer(data[:8], "<f8")[0] == wave.samples[0].real

    def test_length_enforced(self):
        with pytest.raises(StartStopError):
            FrameWaveform(np.zeros(10, complex), SMALL, 4)

    def test_csv(self):
        wave = FrameWaveform(np.zeros(4 * 72, complex), SMALL, 4)
        lines = wave.to_csv().splitlines()
        assert lines[0] == "sample,real,imag"
        assert len(lines) == 1 + 4 * 72


class TestSteps:
    def test_defaults(self):
        params = OfdmParams()
        assert default_steps(FrameConfig(n_tsfs=4, n_t=5, n_f=6), params) == ShiftSteps(128, 1 / 12)
        assert default_steps(FrameConfig(n_tsfs=4, n_t=32, n_f=32), params) == ShiftSteps(64, 1 / 64)
        assert default_steps(FrameConfig(), params) == ShiftSteps(128, 0.5)

    @pytest.mark.parametrize("kw", [dict(n_fft=4), dict(cp_len=2048), dict(cp_len=-1)])
    def test_params_validation(self, kw):
        with pytest.raises(ConfigError):
            OfdmParams(**kw)

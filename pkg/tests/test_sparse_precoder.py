import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from startstop.codec import FrameConfig
from startstop.errors import ConfigError, StartStopError
from startstop.grid import GridDims
from startstop.sparse_precoder import (
    NR_20MHZ,
    BandwidthProfile,
    ChannelMatrix,
    OpCounter,
    TransmitVector,
    bench_csv,
    frame_benchmark,
    pinv,
    precode_dense,
    precode_sparse,
    system_complexity,
)

FLAGSHIP = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=32, n_f=32)


def random_h(rng, n_k, n_tx):
    return ChannelMatrix.rayleigh(n_k, n_tx, rng)


def assert_penrose(h, w, tol=1e-9):
    hw, wh = h @ w, w @ h
    scale = max(1.0, np.linalg.norm(h) * np.linalg.norm(w))
    assert np.linalg.norm(hw @ h - h) <= tol * scale * np.linalg.norm(h)
    assert np.linalg.norm(wh @ w - w) <= tol * scale * np.linalg.norm(w)
    assert np.linalg.norm(hw - hw.conj().T) <= tol * scale
    assert np.linalg.norm(wh - wh.conj().T) <= tol * scale


class TestPinv:
    def test_identity(self):
        w = pinv(ChannelMatrix(np.eye(4)))
        assert np.allclose(w.entries, np.eye(4), atol=1e-15)
        assert not w.rank_deficient

    def test_two_by_four_right_inverse(self):
        h = random_h(np.random.default_rng(0), 2, 4)
        w = pinv(h)
        assert np.linalg.norm(h.entries @ w.entries - np.eye(2)) < 1e-9

    def test_row_of_ones(self):
        w = pinv(ChannelMatrix(np.ones((1, 4))))
        assert np.allclose(w.entries, np.full((4, 1), 0.25), atol=1e-15)

    def test_closed_form_oracle(self):
        h = random_h(np.random.default_rng(1), 8, 64).entries
        oracle = h.conj().T @ np.linalg.inv(h @ h.conj().T)
        assert np.max(np.abs(pinv(ChannelMatrix(h)).entries - oracle)) < 1e-12

    @settings(max_examples=40)
    @given(st.integers(1, 64), st.integers(0, 64), st.integers(0, 2**32 - 1))
    def test_penrose_conditions(self, n_k, extra, seed):
        n_tx = min(64, n_k + extra)
        h = random_h(np.random.default_rng(seed), n_k, n_tx)
        w = pinv(h)
        assert w.entries.shape == (n_tx, n_k)
        assert_penrose(h.entries, w.entries)
        assert np.linalg.norm(h.entries @ w.entries - np.eye(n_k)) < 1e-9 * np.linalg.cond(h.entries)

    def test_rank_deficient_flagged(self):
        rng = np.random.default_rng(2)
        a = random_h(rng, 3, 1).entries @ random_h(rng, 1, 6).entries
        w = pinv(ChannelMatrix(a))
        assert w.rank == 1 and w.rank_deficient
        assert_penrose(a, w.entries)

    @pytest.mark.parametrize("bad", [np.ones(3), np.array([[1.0, np.nan]])])
    def test_invalid_matrix(self, bad):
        with pytest.raises(StartStopError):
            ChannelMatrix(bad)


class TestPrecode:
    def setup_method(self):
        self.w = pinv(random_h(np.random.default_rng(3), 8, 64))

    def test_dense_counts_even_for_zero(self):
        ctr = OpCounter()
        out = precode_dense(self.w, TransmitVector.dense(np.zeros(8)), ctr)
        assert not out.any() and ctr.mults == 512

    def test_sparse_zero_costs_nothing(self):
        ctr = OpCounter()
        out = precode_sparse(self.w, TransmitVector.sparse(np.zeros(8)), ctr)
        assert out.shape == (64,) and not out.any() and ctr.mults == 0

    def test_single_nonzero(self):
        x = np.zeros(8, complex)
        x[5] = 1 - 2j
        ctr = OpCounter()
        out = precode_sparse(self.w, TransmitVector.sparse(x), ctr)
        assert ctr.mults == 64
        assert np.allclose(out, self.w.entries[:, 5] * x[5], rtol=1e-14)

    def test_sparse_equals_dense_randomized(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(10_000):
            nnz = rng.integers(0, 9)
            x = np.zeros(8, complex)
            idx = rng.choice(8, nnz, replace=False)
            x[idx] = rng.standard_normal(nnz) + 1j * rng.standard_normal(nnz)
            a = precode_dense(self.w, TransmitVector.dense(x), OpCounter())
            b = precode_sparse(self.w, TransmitVector.sparse(x), OpCounter())
            worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))
        assert worst < 1e-12

    @given(st.lists(st.booleans(), min_size=8, max_size=8))
    def test_count_ratio_is_support_fraction(self, mask):
        x = np.where(mask, 1.0 + 1j, 0.0)
        dense, sparse = OpCounter(), OpCounter()
        precode_dense(self.w, TransmitVector.dense(x), dense)
        precode_sparse(self.w, TransmitVector.sparse(x), sparse)
        assert sparse.mults * 8 == dense.mults * sum(mask)

    def test_dimension_mismatch(self):
        with pytest.raises(StartStopError):
            precode_dense(self.w, TransmitVector.dense(np.ones(7)), OpCounter())
        with pytest.raises(StartStopError):
            precode_sparse(self.w, TransmitVector.sparse(np.ones(9)), OpCounter())

    def test_support_must_cover_nonzeros(self):
        with pytest.raises(StartStopError):
            TransmitVector(np.array([1.0, 2.0]), (0,))

    def test_counter_merge(self):
        a, b = OpCounter(3, 2), OpCounter(5, 1)
        assert a.merge(b) == OpCounter(8, 3)
        a += b
        assert a == OpCounter(8, 3)


class TestBenchmark:
    def test_flagship_ratio(self):
        r = frame_benchmark(FLAGSHIP, GridDims(), seed=0)
        assert (r.n_res, r.active_res) == (1164, 20)
        assert r.sparse.mults * 1164 == r.dense.mults * 20
        assert r.ratio == pytest.approx(1164 / 20, abs=1e-12)

    def test_csv(self):
        r = frame_benchmark(FLAGSHIP, GridDims(), seed=0, label="flagship")
        lines = bench_csv([r]).splitlines()
        assert lines[0] == "config,n_res,active_res,dense_mults,sparse_mults,ratio"
        assert lines[1] == "flagship,1164,20,595968,10240,58.2000"

    def test_needs_more_transmitters(self):
        with pytest.raises(ConfigError):
            frame_benchmark(FLAGSHIP, GridDims(), n_tx=4, n_k=8)


class TestComplexity:
    def test_nr_20mhz(self):
        rep = system_complexity()
        assert NR_20MHZ.n_subcarriers == 1200
        assert rep.products_per_s_per_subcarrier == 14000
        assert rep.inversions_per_s == 100_000
        assert rep.products_per_s == 14000 * 1200

    def test_sparsity_scaling(self):
        rep = system_complexity(sparsity=20 / 1164)
        assert rep.effective_per_s_per_subcarrier == pytest.approx(240.55, abs=0.01)

    def test_linear_in_profile(self):
        base = system_complexity(BandwidthProfile(n_prb=10, symbols_per_tti=7, tti_s=5e-4))
        twice = system_complexity(BandwidthProfile(n_prb=20, symbols_per_tti=14, tti_s=5e-4))
        assert twice.inversions_per_s == 2 * base.inversions_per_s
        assert twice.products_per_s == 4 * base.products_per_s

    @pytest.mark.parametrize("s", [0.0, 1.5])
    def test_bad_sparsity(self, s):
        with pytest.raises(ConfigError):
            system_complexity(sparsity=s)

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from startstop.codec import (
    START_STOP,
    STOP_ONLY,
    BitMessage,
    FrameConfig,
    MessageSet,
    allocation_from_parts,
    compression_ratio,
    counter_length,
    counter_value,
    decode_frame,
    dumps_allocation,
    encode_frame,
    frame_length,
    int_to_bits,
    loads_allocation,
    stop_bit_capacity,
)
from startstop.errors import CapacityError, ConfigError, MalformedFrameError


def lsb_first_value(bits):
    # independent oracle: read the bit string MSB-first through int()
    return int("".join(str(b) for b in reversed(bits)), 2)


def msgs(*values, n_bits=10):
    return MessageSet(tuple(BitMessage.from_value(v, n_bits) for v in values))


class TestCounterValue:
    def test_all_zero(self):
        assert counter_value(BitMessage((0,) * 10)) == 0

    def test_first_bit_is_least_significant(self):
        assert counter_value(BitMessage((1,) + (0,) * 9)) == 1

    def test_twenty_ones(self):
        assert counter_value(BitMessage((1,) * 20)) == 2**20 - 1

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=20))
    def test_matches_string_oracle(self, bits):
        assert counter_value(BitMessage(tuple(bits))) == lsb_first_value(bits)

    @pytest.mark.parametrize("n_bits", [1, 4, 8])
    def test_bijection(self, n_bits):
        seen = {counter_value(BitMessage(b)) for b in itertools.product((0, 1), repeat=n_bits)}
        assert seen == set(range(2**n_bits))

    @pytest.mark.parametrize("bits", [(), (0,) * 21, (0, 2)])
    def test_rejects_bad_messages(self, bits):
        with pytest.raises(ConfigError):
            BitMessage(bits)


class TestLengths:
    @pytest.mark.parametrize("n_bits,expected", [(10, 1024), (20, 1048576), (1, 2)])
    def test_counter_length(self, n_bits, expected):
        assert counter_length(n_bits) == expected

    @pytest.mark.parametrize("n_bits", [0, 21, -3])
    def test_counter_length_bounds(self, n_bits):
        with pytest.raises(ConfigError):
            counter_length(n_bits)

    @pytest.mark.parametrize(
        "n_tsfs,r_extra,expected", [(0, 0, 1124), (4, 0, 1164), (0, 20, 1324)]
    )
    def test_frame_length_published_cases(self, n_tsfs, r_extra, expected):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=n_tsfs, n_t=4, n_f=8, r_extra=r_extra)
        assert frame_length(cfg) == expected

    def test_frame_length_combined_case(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=4, n_f=8, r_extra=20)
        assert frame_length(cfg) == 1024 + 100 + 200 + 10 * 21 * 4

    def test_frame_length_capacity(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=4, n_f=8)
        assert frame_length(cfg, capacity=1164) == 1164
        with pytest.raises(CapacityError):
            frame_length(cfg, capacity=1163)

    @given(
        st.integers(1, 12), st.integers(1, 12), st.sampled_from([0, 4, 8]), st.integers(0, 5),
        st.sampled_from(["n_bits", "n_messages", "n_tsfs", "r_extra"]),
    )
    def test_frame_length_monotone(self, n_bits, m, n_tsfs, r_extra, field):
        base = dict(n_bits=n_bits, n_messages=m, n_tsfs=n_tsfs, n_t=2, n_f=2, r_extra=r_extra)
        bigger = dict(base)
        bigger[field] += 1 if field != "n_tsfs" else 4
        assert frame_length(FrameConfig(**bigger)) >= frame_length(FrameConfig(**base))

    @pytest.mark.parametrize(
        "n_bits,mode,expected", [(20, START_STOP, 0.1), (10, STOP_ONLY, 0.1), (2, START_STOP, 1.0)]
    )
    def test_compression_ratio(self, n_bits, mode, expected):
        assert compression_ratio(n_bits, mode) == pytest.approx(expected, abs=1e-15)

    def test_compression_ratio_rejects(self):
        with pytest.raises(ConfigError):
            compression_ratio(0)
        with pytest.raises(ConfigError):
            compression_ratio(10, "both")

    @pytest.mark.parametrize(
        "cfg,expected",
        [
            (FrameConfig(n_bits=10, qam_bits=8, n_tsfs=4, n_t=32, n_f=32), 28),
            (FrameConfig(n_bits=10), 10),
            (FrameConfig(n_bits=10, n_tsfs=4, n_t=5, n_f=6), 14),
        ],
    )
    def test_stop_bit_capacity(self, cfg, expected):
        assert stop_bit_capacity(cfg) == expected


class TestEncode:
    def test_single_zero_message(self):
        cfg = FrameConfig(n_bits=10, n_messages=1)
        alloc = encode_frame(msgs(0), cfg)
        assert alloc.stop_slots == (0,)
        assert alloc.permutation == (0,)

    def test_ten_messages_twenty_active(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6)
        alloc = encode_frame(msgs(*range(3, 103, 10)), cfg)
        assert alloc.active_count() == 20
        assert len(alloc.stop_slots) + len(alloc.permutation_slots()) == 20

    def test_two_messages_sorted_with_remap(self):
        cfg = FrameConfig(n_bits=10, n_messages=2)
        alloc = encode_frame(msgs(5, 3), cfg)
        assert alloc.stop_slots == (3, 5)
        # counter-order stop 1 belongs to message 2 and vice versa
        assert alloc.permutation == (1, 0)

    @pytest.mark.parametrize("values", list(itertools.permutations([2, 7, 11])))
    def test_permutation_oracle(self, values):
        cfg = FrameConfig(n_bits=4, n_messages=3)
        alloc = encode_frame(msgs(*values, n_bits=4), cfg)
        # brute force: the bijection that sorts the values
        for perm in itertools.permutations(range(3)):
            if [values[i] for i in perm] == sorted(values):
                assert alloc.permutation == perm
        p = alloc.permutation_matrix()
        assert (p.sum(axis=0) == 1).all() and (p.sum(axis=1) == 1).all()

    def test_tie_ordered_by_payload(self):
        cfg = FrameConfig(n_bits=4, n_messages=2, qam_bits=2)
        alloc = encode_frame(msgs(9, 9, n_bits=4), cfg, extra=[(1, 1), (0, 1)])
        assert alloc.stop_slots == (9, 9)
        assert alloc.permutation == (1, 0)

    def test_identical_messages_tie_by_index(self):
        cfg = FrameConfig(n_bits=4, n_messages=3)
        alloc = encode_frame(msgs(6, 6, 6, n_bits=4), cfg)
        assert alloc.permutation == (0, 1, 2)

    def test_rejects_wrong_set(self):
        with pytest.raises(ConfigError):
            encode_frame(msgs(1, 2), FrameConfig(n_bits=10, n_messages=3))
        with pytest.raises(ConfigError):
            encode_frame(msgs(1, 2, n_bits=4), FrameConfig(n_bits=10, n_messages=2))

    def test_rejects_bad_extra(self):
        cfg = FrameConfig(n_bits=4, n_messages=1, qam_bits=2)
        with pytest.raises(ConfigError):
            encode_frame(msgs(1, n_bits=4), cfg, extra=[(1,)])
        with pytest.raises(ConfigError):
            encode_frame(msgs(1, n_bits=4), cfg, extra=[(1, 2)])

    def test_repetition_slots_follow_permutation_block(self):
        cfg = FrameConfig(n_bits=4, n_messages=2, r_extra=3)
        alloc = encode_frame(msgs(1, 2, n_bits=4), cfg)
        assert alloc.repetition_slots() == ((20, 21, 22), (23, 24, 25))
        assert alloc.active_count() == 2 * 4 + 2


class TestDecode:
    def test_exhaustive_single_message(self):
        cfg = FrameConfig(n_bits=10, n_messages=1)
        for v in range(1024):
            sent = msgs(v)
            assert decode_frame(encode_frame(sent, cfg))[0] == sent

    def test_slot_zero_is_all_zero_message(self):
        cfg = FrameConfig(n_bits=10, n_messages=1)
        alloc = allocation_from_parts(cfg, [0], [0], [(0, 0)], [0])
        got, _ = decode_frame(alloc)
        assert got.messages[0].bits == (0,) * 10

    def test_hundred_bits_back(self):
        cfg = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=5, n_f=6)
        sent = msgs(*[(37 * i + 5) % 1024 for i in range(10)])
        got, _ = decode_frame(encode_frame(sent, cfg))
        assert got.concatenated() == sent.concatenated()
        assert len(got.concatenated()) == 100

    def test_non_bijective_permutation(self):
        cfg = FrameConfig(n_bits=4, n_messages=2)
        with pytest.raises(MalformedFrameError):
            decode_frame(allocation_from_parts(cfg, [1, 2], [0, 0], [(0, 0)] * 2, [0, 0]))

    def test_slot_out_of_range(self):
        cfg = FrameConfig(n_bits=4, n_messages=1)
        with pytest.raises(MalformedFrameError):
            decode_frame(allocation_from_parts(cfg, [16], [0], [(0, 0)], [0]))

    def test_unused_hypothesis_rejected(self):
        cfg = FrameConfig(n_bits=4, n_messages=1, n_tsfs=4, n_t=5, n_f=6)
        with pytest.raises(MalformedFrameError):
            decode_frame(allocation_from_parts(cfg, [3], [0], [(4, 5)], [0]))


frame_configs = st.builds(
    FrameConfig,
    n_bits=st.integers(1, 20),
    n_messages=st.integers(1, 20),
    n_tsfs=st.sampled_from([0, 4, 8]),
    n_t=st.integers(1, 32),
    n_f=st.integers(1, 32),
    qam_bits=st.sampled_from([0, 2, 4, 6, 8]),
    r_extra=st.integers(0, 20),
)


@st.composite
def frames(draw):
    cfg = draw(frame_configs)
    values = draw(st.lists(st.integers(0, 2**cfg.n_bits - 1), min_size=cfg.n_messages,
                           max_size=cfg.n_messages))
    extra = [tuple(draw(st.lists(st.integers(0, 1), min_size=cfg.extra_bits,
                                 max_size=cfg.extra_bits)))
             for _ in range(cfg.n_messages)]
    return cfg, msgs(*values, n_bits=cfg.n_bits), extra


class TestProperties:
    @given(frames())
    def test_round_trip(self, frame):
        cfg, sent, extra = frame
        got, got_extra = decode_frame(encode_frame(sent, cfg, extra))
        assert got == sent
        assert [tuple(e) for e in got_extra] == extra

    @given(frames())
    def test_active_count(self, frame):
        cfg, sent, extra = frame
        alloc = encode_frame(sent, cfg, extra)
        assert alloc.active_count() == cfg.n_messages * (1 + cfg.r_extra) + cfg.n_messages
        assert alloc.active_count() == cfg.n_active

    @given(frames())
    def test_permutation_matrix_is_doubly_stochastic(self, frame):
        cfg, sent, extra = frame
        p = encode_frame(sent, cfg, extra).permutation_matrix()
        assert set(np.unique(p)) <= {0, 1}
        assert (p.sum(axis=0) == 1).all() and (p.sum(axis=1) == 1).all()

    @given(frames())
    def test_text_format_round_trip(self, frame):
        cfg, sent, extra = frame
        alloc = encode_frame(sent, cfg, extra)
        back = loads_allocation(dumps_allocation(alloc))
        assert back == alloc
        assert decode_frame(back)[0] == sent

    @given(st.integers(1, 20), st.data())
    def test_bits_round_trip(self, n_bits, data):
        value = data.draw(st.integers(0, 2**n_bits - 1))
        assert counter_value(BitMessage(int_to_bits(value, n_bits))) == value


class TestTextFormat:
    def test_golden_record_layout(self):
        cfg = FrameConfig(n_bits=4, n_messages=2, n_tsfs=4, n_t=2, n_f=2, qam_bits=2, r_extra=1)
        alloc = encode_frame(msgs(5, 3, n_bits=4), cfg, extra=[(1, 0, 1, 1), (0, 1, 0, 0)])
        text = dumps_allocation(alloc)
        assert text.splitlines()[3:] == ["3 1 1 0 0 2", "5 0 0 1 3 2"]

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "# wrong header\n",
            "# startstop-frame v1\nn_bits=4\n",
            "# startstop-frame v1\nn_bits=4 n_messages=1 n_tsfs=0 n_t=1 n_f=1 qam_bits=0 r_extra=0\n1 0 0 0\n",
            "# startstop-frame v1\nn_bits=4 n_messages=1 n_tsfs=0 n_t=1 n_f=1 qam_bits=0 r_extra=0\n1 0 0 0 0 2\n",
        ],
    )
    def test_malformed(self, text):
        with pytest.raises(MalformedFrameError):
            loads_allocation(text)

import numpy as np
import pytest
from scipy.special import erfc

from semsatlink.channel import (
    NUM_SUBCARRIERS,
    ChannelProfile,
    ChannelRealization,
    ChannelState,
    PathTap,
    sample_channel,
)
from semsatlink.ofdm import (
    DATA_SLOTS,
    NUM_SLOTS,
    PILOT_SEQUENCE,
    PILOT_SLOTS,
    OfdmFrame,
    build_frame,
    estimate_and_equalize,
    extract_payload,
    frame_capacity_bits,
    modulate_grid,
    ofdm_demodulate,
    ofdm_modulate,
    qam_demap,
    qam_map,
    transmit_bits,
)


def identity_channel():
    return ChannelRealization([PathTap(1.0 + 0j, 0.0, 0)], 30.72e6)


def clear_state(snr_db=np.inf):
    return ChannelState(snr_db, np.zeros(NUM_SUBCARRIERS, bool))


def dft_direct(x):
    """O(N^2) direct summation, orthonormal convention."""
    n = x.size
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return mat @ x / np.sqrt(n)


class TestQamMap:
    def test_corner_16(self):
        np.testing.assert_allclose(qam_map([0, 0, 0, 0], 16),
                                   [(-3 - 3j) / np.sqrt(10)], atol=1e-15)

    def test_corner_4(self):
        np.testing.assert_allclose(qam_map([0, 0], 4),
                                   [(-1 - 1j) / np.sqrt(2)], atol=1e-15)

    def test_unit_average_energy(self):
        all_bits = ((np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1)
        symbols = qam_map(all_bits.ravel(), 16)
        assert np.mean(np.abs(symbols) ** 2) == pytest.approx(1.0, abs=1e-12)
        all2 = ((np.arange(4)[:, None] >> np.arange(1, -1, -1)) & 1)
        symbols4 = qam_map(all2.ravel(), 4)
        assert np.mean(np.abs(symbols4) ** 2) == pytest.approx(1.0,
                                                               abs=1e-12)

    def test_gray_property_adjacent_points_differ_one_bit(self):
        all_bits = ((np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1)
        symbols = qam_map(all_bits.ravel(), 16)
        scaled = symbols * np.sqrt(10)
        for i in range(16):
            for j in range(16):
                dist = abs(scaled[i] - scaled[j])
                if abs(dist - 2.0) < 1e-9:  # nearest neighbors
                    differ = np.sum(all_bits[i] != all_bits[j])
                    assert differ == 1

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            qam_map([0, 0], 8)

    def test_indivisible_bits(self):
        with pytest.raises(ValueError):
            qam_map([0, 0, 0], 16)


class TestQamDemap:
    def test_exhaustive_round_trip_16(self):
        all_bits = ((np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1)
        bits = all_bits.ravel()
        hard, _ = qam_demap(qam_map(bits, 16), 16, 1.0)
        np.testing.assert_array_equal(hard, bits)

    def test_exhaustive_round_trip_4(self):
        all_bits = ((np.arange(4)[:, None] >> np.arange(1, -1, -1)) & 1)
        bits = all_bits.ravel()
        hard, _ = qam_demap(qam_map(bits, 4), 4, 1.0)
        np.testing.assert_array_equal(hard, bits)

    def test_boundary_symbol_zero_llr(self):
        # real part 0 sits exactly between the two I-axis half-planes:
        # the first bit of a 4-QAM symbol is undecidable
        _, llrs = qam_demap(np.array([0.0 + 0.5j]), 4, 1.0)
        assert llrs[0] == 0.0

    def test_llr_sign_flips_across_boundary(self):
        _, l_neg = qam_demap(np.array([-0.2 + 0.5j]), 4, 1.0)
        _, l_pos = qam_demap(np.array([+0.2 + 0.5j]), 4, 1.0)
        assert l_neg[0] > 0 and l_pos[0] < 0
        assert l_neg[0] == pytest.approx(-l_pos[0], abs=1e-12)

    def test_llr_sign_matches_hard_bit(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=500) + 1j * rng.normal(size=500)
        hard, llrs = qam_demap(y, 16, 0.5)
        np.testing.assert_array_equal(hard, (llrs < 0).astype(np.uint8))

    def test_noise_variance_scales_llrs(self):
        y = np.array([0.8 - 0.3j])
        _, l1 = qam_demap(y, 16, 1.0)
        _, l2 = qam_demap(y, 16, 2.0)
        np.testing.assert_allclose(l1, 2.0 * l2, atol=1e-12)


class TestFrame:
    def test_capacities(self):
        assert frame_capacity_bits(16) == 32768
        assert frame_capacity_bits(4) == 16384

    def test_build_extract_inverse(self):
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, 32768).astype(np.uint8)
        frame = build_frame(bits, 16)
        np.testing.assert_array_equal(extract_payload(frame), bits)

    def test_partial_payload_round_trip(self):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, 5000).astype(np.uint8)
        frame = build_frame(bits, 16)
        assert frame.payload_len == 5000
        np.testing.assert_array_equal(extract_payload(frame), bits)

    def test_oversized_rejected(self):
        with pytest.raises(ValueError, match="capacity"):
            build_frame(np.zeros(32769, dtype=np.uint8), 16)

    def test_pilots_in_place(self):
        frame = build_frame(np.zeros(100, dtype=np.uint8), 16)
        for slot in PILOT_SLOTS:
            np.testing.assert_array_equal(frame.grid[slot], PILOT_SEQUENCE)

    def test_restricted_subcarriers(self):
        allowed = np.zeros(NUM_SUBCARRIERS, bool)
        allowed[:256] = True
        assert frame_capacity_bits(16, allowed) == 16384
        bits = np.random.default_rng(3).integers(0, 2, 16384).astype(
            np.uint8)
        frame = build_frame(bits, 16, allowed)
        # blocked columns carry no energy in data slots
        data = frame.grid[list(DATA_SLOTS)]
        assert np.all(data[:, 256:] == 0)
        np.testing.assert_array_equal(extract_payload(frame), bits)


class TestModulation:
    def test_round_trip(self):
        rng = np.random.default_rng(4)
        grid = (rng.normal(size=(NUM_SLOTS, NUM_SUBCARRIERS))
                + 1j * rng.normal(size=(NUM_SLOTS, NUM_SUBCARRIERS)))
        samples = modulate_grid(grid, 64)
        back = ofdm_demodulate(samples, 64)
        assert np.abs(back - grid).max() < 1e-9

    def test_single_subcarrier_is_complex_exponential(self):
        grid = np.zeros((1, NUM_SUBCARRIERS), dtype=complex)
        k = 7
        grid[0, k] = 1.0
        samples = modulate_grid(grid, 0)
        n = np.arange(NUM_SUBCARRIERS)
        expected = np.exp(2j * np.pi * k * n / NUM_SUBCARRIERS) / np.sqrt(
            NUM_SUBCARRIERS)
        np.testing.assert_allclose(samples, expected, atol=1e-12)

    def test_fft_matches_direct_summation(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=NUM_SUBCARRIERS) + 1j * rng.normal(
            size=NUM_SUBCARRIERS)
        via_fft = np.fft.fft(x, norm="ortho")
        assert np.abs(via_fft - dft_direct(x)).max() < 1e-9

    def test_bad_sample_count(self):
        with pytest.raises(ValueError, match="multiple"):
            ofdm_demodulate(np.zeros(1000, dtype=complex), 64)

    def test_cp_range_checked(self):
        with pytest.raises(ValueError):
            modulate_grid(np.zeros((1, NUM_SUBCARRIERS)), 512)


class TestEqualization:
    def test_flat_gain_two(self):
        bits = np.random.default_rng(6).integers(0, 2, 32768).astype(
            np.uint8)
        frame = build_frame(bits, 16)
        raw = 2.0 * frame.grid
        eq, h_est, erasures, _ = estimate_and_equalize(raw, 64)
        data = frame.grid[list(DATA_SLOTS)]
        assert not erasures.any()
        assert np.abs(eq - data).max() < 1e-9
        assert np.abs(h_est - 2.0).max() < 1e-9

    def test_static_multipath_residual(self):
        rng = np.random.default_rng(7)
        bits = rng.integers(0, 2, 32768).astype(np.uint8)
        frame = build_frame(bits, 16)
        h = sample_channel(ChannelProfile(normalized_doppler=0.0), 3)
        samples = ofdm_modulate(frame, 64)
        raw = ofdm_demodulate(
            np.asarray(__import__("semsatlink.channel",
                                  fromlist=["apply_channel"]).apply_channel(
                samples, h)), 64)
        eq, h_est, erasures, _ = estimate_and_equalize(raw, 64)
        data = frame.grid[list(DATA_SLOTS)]
        # closed-form frequency response oracle
        k = np.arange(NUM_SUBCARRIERS)
        h_true = sum(t.gain * np.exp(-2j * np.pi * k * t.delay_samples
                                     / NUM_SUBCARRIERS) for t in h.taps)
        assert np.abs(h_est - h_true[None, :]).max() < 1e-6
        keep = ~erasures
        assert np.abs((eq - data)[keep]).max() < 1e-6

    def test_all_zero_channel_flags_erasures(self):
        raw = np.zeros((NUM_SLOTS, NUM_SUBCARRIERS), dtype=complex)
        eq, _, erasures, _ = estimate_and_equalize(raw, 64)
        assert erasures.all()
        assert np.isfinite(eq).all()

    def test_channel_scaling_invariance(self):
        rng = np.random.default_rng(8)
        bits = rng.integers(0, 2, 32768).astype(np.uint8)
        frame = build_frame(bits, 16)
        h = sample_channel(ChannelProfile(normalized_doppler=0.0), 1)
        from semsatlink.channel import apply_channel
        raw = ofdm_demodulate(apply_channel(ofdm_modulate(frame, 64), h),
                              64)
        c = 0.37 - 1.2j
        eq1, _, er1, _ = estimate_and_equalize(raw, 64)
        eq2, _, er2, _ = estimate_and_equalize(c * raw, 64)
        np.testing.assert_array_equal(er1, er2)
        assert np.abs(eq1 - eq2).max() < 1e-9


class TestTransmitBits:
    def test_noiseless_identity_round_trip_million_bits(self):
        rng = np.random.default_rng(9)
        bits = rng.integers(0, 2, 1_000_000).astype(np.uint8)
        result = transmit_bits(bits, 16, identity_channel(), clear_state(),
                               rng_seed=0)
        assert np.array_equal(result.bits, bits)

    def test_flat_awgn_16qam_ber_matches_analytic(self):
        # Es/N0 = 14 dB: Gray-coded approximation (3/8) erfc(sqrt(g/10))
        rng = np.random.default_rng(10)
        bits = rng.integers(0, 2, 1_000_448).astype(np.uint8)
        result = transmit_bits(bits, 16, identity_channel(),
                               clear_state(14.0), rng_seed=1)
        ber = np.mean(result.bits != bits)
        analytic = 3 / 8 * erfc(np.sqrt(10 ** 1.4 / 10))
        assert abs(ber - analytic) <= 0.15 * analytic

    def test_cci_errors_concentrated_on_masked_subcarriers(self):
        rng = np.random.default_rng(11)
        bits = rng.integers(0, 2, 98304).astype(np.uint8)  # 3 frames
        mask = np.zeros(NUM_SUBCARRIERS, bool)
        mask[rng.permutation(NUM_SUBCARRIERS)[:256]] = True
        state = ChannelState(np.inf, mask)
        result = transmit_bits(bits, 16, identity_channel(), state,
                               rng_seed=2, cci_power_ratio=100.0)
        errors = result.bits != bits
        assert errors.any()
        on_masked = mask[result.subcarrier_index[errors]]
        assert on_masked.mean() > 0.95

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        bits = rng.integers(0, 2, 4000).astype(np.uint8)
        h = sample_channel(ChannelProfile(), 4)
        state = clear_state(5.0)
        a = transmit_bits(bits, 16, h, state, rng_seed=3)
        b = transmit_bits(bits, 16, h, state, rng_seed=3)
        np.testing.assert_array_equal(a.bits, b.bits)
        np.testing.assert_array_equal(a.llrs, b.llrs)

    def test_multipath_doppler_tracks_selective_fading_oracle(self):
        # frequency-selective fading sets the uncoded BER floor; the
        # receiver must stay close to the perfect-CSI analytic average
        rng = np.random.default_rng(13)
        bits = rng.integers(0, 2, 131072).astype(np.uint8)
        h = sample_channel(ChannelProfile(), 5)
        result = transmit_bits(bits, 16, h, clear_state(20.0), rng_seed=4)
        measured = np.mean(result.bits != bits)
        k = np.arange(NUM_SUBCARRIERS)
        h_true = sum(t.gain * np.exp(-2j * np.pi * k * t.delay_samples
                                     / NUM_SUBCARRIERS) for t in h.taps)
        snr_k = 10 ** 2.0 * np.abs(h_true) ** 2
        analytic = np.mean(3 / 8 * erfc(np.sqrt(snr_k / 10)))
        # headroom covers inter-carrier interference from the Doppler
        # ramp and residual tracking error
        assert 0.5 * analytic < measured < 1.6 * analytic

    def test_avoidance_zero_payload_corruption(self):
        rng = np.random.default_rng(14)
        mask = np.zeros(NUM_SUBCARRIERS, bool)
        mask[rng.permutation(NUM_SUBCARRIERS)[:200]] = True
        bits = rng.integers(0, 2, 16384).astype(np.uint8)
        state = ChannelState(np.inf, mask)
        result = transmit_bits(bits, 16, identity_channel(), state,
                               rng_seed=5, data_subcarriers=~mask)
        np.testing.assert_array_equal(result.bits, bits)

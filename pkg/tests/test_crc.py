import numpy as np
import pytest

from semsatlink.crc import (
    CRC_BITS,
    append_crc,
    check_crc,
    crc32_bits,
    crc32_bytes,
)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8),
                         bitorder="little")


def crc32_longdiv_oracle(bits) -> int:
    """Bitwise long-division reference: transmission-order stream with
    32 appended zeros and the first 32 bits inverted, divided by the
    forward generator 0x104C11DB7 most-significant-bit first; the
    remainder is read LSB-first and complemented."""
    work = list(int(b) for b in bits) + [0] * 32
    for i in range(min(32, len(work))):
        work[i] ^= 1
    gen = [(0x104C11DB7 >> (32 - j)) & 1 for j in range(33)]
    for i in range(len(work) - 32):
        if work[i]:
            for j in range(33):
                work[i + j] ^= gen[j]
    value = 0
    for i, b in enumerate(work[-32:]):
        value |= b << i
    return value ^ 0xFFFFFFFF


class TestKnownAnswers:
    def test_check_string(self):
        bits = bytes_to_bits(b"123456789")
        assert crc32_bits(bits) == 0xCBF43926
        assert crc32_longdiv_oracle(bits) == 0xCBF43926

    def test_empty(self):
        assert crc32_bits(np.array([], dtype=np.uint8)) == 0x00000000
        assert crc32_longdiv_oracle([]) == 0x00000000

    def test_bytes_variant(self):
        assert crc32_bytes(b"123456789") == 0xCBF43926


class TestOracleAgreement:
    def test_random_bit_lengths(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(1, 200))
            bits = rng.integers(0, 2, n).astype(np.uint8)
            assert crc32_bits(bits) == crc32_longdiv_oracle(bits)

    def test_non_byte_aligned_tail(self):
        rng = np.random.default_rng(1)
        for n in (1, 7, 9, 15, 33, 701):
            bits = rng.integers(0, 2, n).astype(np.uint8)
            assert crc32_bits(bits) == crc32_longdiv_oracle(bits)


class TestErrorDetection:
    def test_single_bit_flip_always_detected(self):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, 100_000).astype(np.uint8)
        base = crc32_bits(bits)
        for _ in range(1000):
            pos = int(rng.integers(0, bits.size))
            flipped = bits.copy()
            flipped[pos] ^= 1
            assert crc32_bits(flipped) != base

    def test_double_bit_errors_detected(self):
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2, 4096).astype(np.uint8)
        base = crc32_bits(bits)
        for _ in range(300):
            i, j = rng.integers(0, bits.size, 2)
            if i == j:
                continue
            flipped = bits.copy()
            flipped[i] ^= 1
            flipped[j] ^= 1
            assert crc32_bits(flipped) != base

    def test_burst_errors_detected(self):
        rng = np.random.default_rng(4)
        bits = rng.integers(0, 2, 60_000).astype(np.uint8)
        base = crc32_bits(bits)
        for _ in range(200):
            start = int(rng.integers(0, bits.size - 32))
            length = int(rng.integers(2, 33))
            flipped = bits.copy()
            flipped[start:start + length] ^= rng.integers(
                0, 2, length).astype(np.uint8) | np.uint8(0)
            if np.array_equal(flipped, bits):
                continue
            assert crc32_bits(flipped) != base


class TestFraming:
    def test_append_check_round_trip(self):
        rng = np.random.default_rng(5)
        payload = rng.integers(0, 2, 777).astype(np.uint8)
        framed = append_crc(payload)
        assert framed.size == payload.size + CRC_BITS
        assert check_crc(framed)

    def test_corruption_caught(self):
        rng = np.random.default_rng(6)
        framed = append_crc(rng.integers(0, 2, 500).astype(np.uint8))
        framed[123] ^= 1
        assert not check_crc(framed)

    def test_short_input_fails(self):
        assert not check_crc(np.zeros(10, dtype=np.uint8))

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            crc32_bits(np.array([0, 1, 2]))

"""Tests for the block-DCT codec.

The transform is checked against scipy's orthonormal DCT as an
independent oracle, the zigzag scan against the published scan order,
and the entropy stage by exact round trips including corner cases the
run-length code must handle (long zero runs, a lone coefficient in the
last scan position). Stream robustness is a hard requirement: decoding
corrupted or truncated payloads must flag failure, never raise.
"""

import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st

from semsatlink.dataset import SceneSpec, generate_scene
from semsatlink.dctcodec import (
    _DCT,
    BLOCK,
    DEFAULT_QUALITY,
    HEADER_BITS,
    ZIGZAG,
    BitReader,
    BitWriter,
    CompressedImage,
    StreamError,
    _decode_block,
    _encode_block,
    compressed_from_bits,
    compressed_to_bits,
    dct_decode,
    dct_encode,
    quant_table,
)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(((a - b) ** 2).mean())
    return 10.0 * np.log10(1.0 / max(mse, 1e-12))


def small_scene(seed: int) -> np.ndarray:
    return generate_scene(SceneSpec(height=64, width=128),
                          rng_seed=seed).image


# ---------------------------------------------------------------------------
# transform building blocks


def test_dct_matrix_is_orthonormal():
    eye = _DCT @ _DCT.T
    assert np.abs(eye - np.eye(BLOCK)).max() < 1e-12


def test_forward_transform_matches_scipy_oracle():
    rng = np.random.default_rng(11)
    block = rng.normal(size=(BLOCK, BLOCK))
    mine = _DCT @ block @ _DCT.T

    oracle = scipy.fft.dctn(block, type=2, norm="ortho")
    assert np.abs(mine - oracle).max() < 1e-12


def test_zigzag_matches_the_published_scan_order():
    published = [
        0, 1, 8, 16, 9, 2, 3, 10,
        17, 24, 32, 25, 18, 11, 4, 5,
        12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13, 6, 7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36,
        29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46,
        53, 60, 61, 54, 47, 55, 62, 63,
    ]
    assert ZIGZAG.tolist() == published


def test_quant_table_endpoints():
    assert (quant_table(100) == 1.0).all()
    assert (quant_table(50) == np.array([
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ])).all()
    assert quant_table(1).max() == 255.0
    with pytest.raises(ValueError):
        quant_table(0)
    with pytest.raises(ValueError):
        quant_table(101)


# ---------------------------------------------------------------------------
# bit-level entropy stage


def test_bit_writer_reader_round_trip():
    writer = BitWriter()
    writer.put(0xABC, 12)
    writer.put(1, 1)
    writer.put(0, 3)
    reader = BitReader(writer.to_array())
    assert reader.take(12) == 0xABC
    assert reader.take(1) == 1
    assert reader.take(3) == 0
    with pytest.raises(StreamError):
        reader.take(1)


def _block_round_trip(zz: np.ndarray) -> np.ndarray:
    writer = BitWriter()
    _encode_block(writer, zz, 0)
    return _decode_block(BitReader(writer.to_array()))


def test_block_round_trip_lone_last_coefficient():
    zz = np.zeros(64, dtype=np.int64)
    zz[63] = 5
    assert np.array_equal(_block_round_trip(zz), zz)


def test_block_round_trip_dense_block():
    rng = np.random.default_rng(12)
    zz = rng.integers(-1000, 1001, size=64)
    zz[zz == 0] = 7
    assert np.array_equal(_block_round_trip(zz), zz)


def test_block_round_trip_all_zero():
    zz = np.zeros(64, dtype=np.int64)
    assert np.array_equal(_block_round_trip(zz), zz)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=-10000, max_value=10000),
                min_size=64, max_size=64))
def test_block_round_trip_property(values):
    zz = np.array(values, dtype=np.int64)
    assert np.array_equal(_block_round_trip(zz), zz)


# ---------------------------------------------------------------------------
# image round trips


def test_uniform_gray_compresses_to_dc_only():
    image = np.full((64, 64, 3), 0.5)
    c = dct_encode(image, 75)
    raw_bits = 64 * 64 * 3 * 8
    assert c.bit_length < 0.02 * raw_bits
    out, ok = dct_decode(c)
    assert ok
    assert np.abs(out - image).max() < 0.02


def test_quality_90_scene_psnr():
    for seed in range(3):
        img = small_scene(seed)
        out, ok = dct_decode(dct_encode(img, 90))
        assert ok
        assert psnr(img, out) >= 35.0


def test_quality_100_near_lossless():
    img = small_scene(3)
    out, ok = dct_decode(dct_encode(img, 100))
    assert ok
    assert psnr(img, out) >= 50.0


def test_bitrate_increases_with_quality():
    img = small_scene(4)
    sizes = [dct_encode(img, q).bit_length for q in (30, 60, 90)]
    assert sizes[0] < sizes[1] < sizes[2]


def test_full_scale_scene_hits_reference_budget():
    img = generate_scene(SceneSpec(height=256, width=512),
                         rng_seed=0).image
    c = dct_encode(img, DEFAULT_QUALITY)
    assert 115_000 <= c.bit_length <= 175_000


def test_encode_input_validation():
    with pytest.raises(ValueError):
        dct_encode(np.zeros((60, 64, 3)), 75)
    with pytest.raises(ValueError):
        dct_encode(np.zeros((64, 64)), 75)
    with pytest.raises(ValueError):
        dct_encode(np.zeros((64, 64, 3)), 0)


# ---------------------------------------------------------------------------
# serialization and robustness


def test_serialization_round_trip():
    img = small_scene(5)
    c = dct_encode(img, 70)
    bits = compressed_to_bits(c)
    assert bits.size == c.bit_length
    back = compressed_from_bits(bits)
    assert (back.height, back.width, back.quality) == (64, 128, 70)
    assert np.array_equal(back.payload, c.payload)
    out_a, _ = dct_decode(c)
    out_b, _ = dct_decode(back)
    assert np.array_equal(out_a, out_b)


def test_from_bits_rejects_corrupt_headers():
    img = small_scene(6)
    bits = compressed_to_bits(dct_encode(img, 70))
    short = bits[:HEADER_BITS - 1]
    with pytest.raises(ValueError):
        compressed_from_bits(short)
    bad_quality = bits.copy()
    bad_quality[32:40] = [1, 1, 1, 1, 1, 1, 1, 1]  # quality 255
    with pytest.raises(ValueError):
        compressed_from_bits(bad_quality)
    bad_dims = bits.copy()
    bad_dims[:16] = 0  # height 0
    with pytest.raises(ValueError):
        compressed_from_bits(bad_dims)


def test_truncated_payload_flags_failure_with_correct_shape():
    img = small_scene(7)
    c = dct_encode(img, 70)
    cut = CompressedImage(height=c.height, width=c.width,
                          quality=c.quality,
                          payload=c.payload[:c.payload.size // 3])
    out, ok = dct_decode(cut)
    assert not ok
    assert out.shape == (64, 128, 3)
    assert np.isfinite(out).all()


def test_random_bit_flips_never_crash_the_decoder():
    img = small_scene(8)
    c = dct_encode(img, 70)
    rng = np.random.default_rng(13)
    for _ in range(200):
        payload = c.payload.copy()
        flips = rng.choice(payload.size,
                           size=rng.integers(1, 50), replace=False)
        payload[flips] ^= 1
        out, ok = dct_decode(CompressedImage(
            height=c.height, width=c.width,
            quality=c.quality, payload=payload))
        assert out.shape == (64, 128, 3)
        assert np.isfinite(out).all()
        assert 0.0 <= out.min() and out.max() <= 1.0

"""Block-DCT image codec with a fixed prefix entropy code.

The layout follows the classic transform-coding recipe: 8x8 orthonormal
DCT per channel, quality-scaled quantization against a standard
luminance table, zigzag scan, difference-coded DC terms, and run-length
coded AC terms. The entropy stage is a fixed (non-adaptive) prefix
code. Every DC difference is a 4-bit magnitude category plus that many
mantissa bits. The AC tokens are '0' to end the block, '10' to extend
a zero run by sixteen, and '11' followed by a 4-bit run, a 4-bit
category, and the mantissa for each nonzero coefficient. The one-bit
terminator keeps empty blocks at five bits, so flat images shrink to
well under two percent of raw size.

Serialized streams start with a 40-bit header (height 16, width 16,
quality 8), all fields most-significant-bit first. Decoding a corrupted
stream never raises; it fills what it can and reports a failure flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK = 8
HEADER_BITS = 40
# tuned so a full-scale 512x256 synthetic scene lands near the
# reference compressed budget of roughly 144 Kbits
DEFAULT_QUALITY = 50

# standard luminance quantization table
_BASE_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _zigzag_order() -> np.ndarray:
    order = []
    for s in range(2 * BLOCK - 1):
        diag = [(i, s - i) for i in range(BLOCK) if 0 <= s - i < BLOCK]
        if s % 2 == 0:
            diag.reverse()
        order.extend(i * BLOCK + j for i, j in diag)
    return np.array(order)


ZIGZAG = _zigzag_order()
_UNZIGZAG = np.argsort(ZIGZAG)


def _dct_matrix() -> np.ndarray:
    i = np.arange(BLOCK)[:, None]
    j = np.arange(BLOCK)[None, :]
    mat = np.cos((2 * j + 1) * i * np.pi / (2 * BLOCK))
    mat[0] *= np.sqrt(1.0 / BLOCK)
    mat[1:] *= np.sqrt(2.0 / BLOCK)
    return mat


_DCT = _dct_matrix()


def quant_table(quality: int) -> np.ndarray:
    """Quality-scaled integer quantization steps (higher is finer)."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((_BASE_QUANT * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


class StreamError(Exception):
    """Raised internally when a bitstream cannot be parsed further."""


class BitWriter:
    def __init__(self):
        self._bits = []

    def put(self, value: int, nbits: int) -> None:
        for shift in range(nbits - 1, -1, -1):
            self._bits.append((value >> shift) & 1)

    def __len__(self) -> int:
        return len(self._bits)

    def to_array(self) -> np.ndarray:
        return np.array(self._bits, dtype=np.uint8)


class BitReader:
    def __init__(self, bits: np.ndarray):
        self._bits = np.asarray(bits).astype(np.uint8)
        self.pos = 0

    def remaining(self) -> int:
        return self._bits.size - self.pos

    def take(self, nbits: int) -> int:
        if nbits > self.remaining():
            raise StreamError("bitstream exhausted")
        value = 0
        for b in self._bits[self.pos:self.pos + nbits]:
            value = (value << 1) | int(b)
        self.pos += nbits
        return value


def _put_mantissa(writer: BitWriter, value: int, size: int) -> None:
    writer.put(value if value > 0 else value + (1 << size) - 1, size)


def _take_mantissa(reader: BitReader, size: int) -> int:
    raw = reader.take(size)
    if raw >= 1 << (size - 1):
        return raw
    return raw - (1 << size) + 1


def _encode_block(writer: BitWriter, zz: np.ndarray, dc_pred: int) -> int:
    """Append one zigzagged coefficient block; returns its DC term."""
    dc = int(zz[0])
    diff = dc - dc_pred
    size = int(abs(diff)).bit_length()
    writer.put(size, 4)
    if size:
        _put_mantissa(writer, diff, size)
    run = 0
    for coeff in zz[1:]:
        coeff = int(coeff)
        if coeff == 0:
            run += 1
            continue
        while run >= 16:
            writer.put(0b10, 2)
            run -= 16
        size = abs(coeff).bit_length()
        writer.put(0b11, 2)
        writer.put(run, 4)
        writer.put(size, 4)
        _put_mantissa(writer, coeff, size)
        run = 0
    writer.put(0, 1)  # end of block
    return dc


def _decode_block(reader: BitReader) -> np.ndarray:
    """Parse one block; DC holds the raw difference, not the level."""
    zz = np.zeros(BLOCK * BLOCK, dtype=np.int64)
    size = reader.take(4)
    if size:
        zz[0] = _take_mantissa(reader, size)
    k = 1
    while True:
        if reader.take(1) == 0:  # end of block
            return zz
        if reader.take(1) == 0:  # sixteen-zero extension
            k += 16
            if k > BLOCK * BLOCK:
                raise StreamError("zero run overflows block")
            continue
        run = reader.take(4)
        size = reader.take(4)
        if size == 0:
            raise StreamError("empty coefficient category")
        k += run
        if k >= BLOCK * BLOCK:
            raise StreamError("coefficient index overflows block")
        zz[k] = _take_mantissa(reader, size)
        k += 1


@dataclass
class CompressedImage:
    """Entropy-coded image plus the header needed to invert it."""

    height: int
    width: int
    quality: int
    payload: np.ndarray  # uint8 bit array, entropy-coded coefficients
    bit_length: int = field(init=False)

    def __post_init__(self):
        if self.height % BLOCK or self.width % BLOCK:
            raise ValueError("dimensions must be multiples of 8")
        if not 1 <= self.quality <= 100:
            raise ValueError("quality must be in [1, 100]")
        self.payload = np.asarray(self.payload, dtype=np.uint8)
        self.bit_length = HEADER_BITS + int(self.payload.size)


def compressed_to_bits(c: CompressedImage) -> np.ndarray:
    writer = BitWriter()
    writer.put(c.height, 16)
    writer.put(c.width, 16)
    writer.put(c.quality, 8)
    return np.concatenate([writer.to_array(), c.payload])


def compressed_from_bits(bits: np.ndarray) -> CompressedImage:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size < HEADER_BITS:
        raise ValueError("bitstream shorter than its header")
    reader = BitReader(bits[:HEADER_BITS])
    height = reader.take(16)
    width = reader.take(16)
    quality = reader.take(8)
    if height == 0 or width == 0 or height % BLOCK or width % BLOCK:
        raise ValueError("corrupt header: bad dimensions")
    if not 1 <= quality <= 100:
        raise ValueError("corrupt header: bad quality")
    return CompressedImage(height=height, width=width, quality=quality,
                           payload=bits[HEADER_BITS:])


def _to_blocks(channel: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    tiles = channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return tiles.transpose(0, 2, 1, 3).reshape(-1, BLOCK, BLOCK)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    tiles = blocks.reshape(h // BLOCK, w // BLOCK, BLOCK, BLOCK)
    return tiles.transpose(0, 2, 1, 3).reshape(h, w)


def dct_encode(image: np.ndarray,
               quality: int = DEFAULT_QUALITY) -> CompressedImage:
    """Compress an (H, W, 3) image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w, _ = image.shape
    if h % BLOCK or w % BLOCK:
        raise ValueError("dimensions must be multiples of 8")
    if h >= 1 << 16 or w >= 1 << 16:
        raise ValueError("dimensions exceed the 16-bit header fields")
    steps = quant_table(quality)
    writer = BitWriter()
    for ch in range(3):
        blocks = _to_blocks(image[:, :, ch] * 255.0 - 128.0)
        coeffs = np.einsum("ij,bjk,lk->bil", _DCT, blocks, _DCT)
        quantized = np.rint(coeffs / steps).astype(np.int64)
        zz = quantized.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG]
        dc_pred = 0
        for row in zz:
            dc_pred = _encode_block(writer, row, dc_pred)
    return CompressedImage(height=h, width=w, quality=quality,
                           payload=writer.to_array())


def dct_decode(c: CompressedImage):
    """Reconstruct the image; returns (image, ok).

    ok is False when the payload could not be parsed to the end; the
    unparsed remainder decodes as flat mid-gray so the output always
    has shape (height, width, 3).
    """
    steps = quant_table(c.quality)
    blocks_per_channel = (c.height // BLOCK) * (c.width // BLOCK)
    zz_all = np.zeros((3, blocks_per_channel, BLOCK * BLOCK),
                      dtype=np.int64)
    reader = BitReader(c.payload)
    ok = True
    try:
        for ch in range(3):
            dc_pred = 0
            for b in range(blocks_per_channel):
                zz = _decode_block(reader)
                dc_pred += int(zz[0])
                zz[0] = dc_pred
                zz_all[ch, b] = zz
    except StreamError:
        ok = False
    image = np.empty((c.height, c.width, 3))
    for ch in range(3):
        quantized = zz_all[ch][:, _UNZIGZAG].reshape(-1, BLOCK, BLOCK)
        coeffs = quantized * steps
        blocks = np.einsum("ji,bjk,kl->bil", _DCT, coeffs, _DCT)
        channel = _from_blocks(blocks, c.height, c.width)
        image[:, :, ch] = np.clip((channel + 128.0) / 255.0, 0.0, 1.0)
    return image, ok

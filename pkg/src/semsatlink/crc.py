"""Standard CRC-32 over bit arrays.

Bit streams are the native currency of the link simulator, so the
checksum is defined directly on bits: bytes enter LSB-first, matching
the usual reflected CRC-32 (polynomial 0x04C11DB7, initial register
all ones, final complement). The implementation is table-driven over
packed bytes with a bit-at-a-time tail for lengths that are not a
multiple of eight.
"""

from __future__ import annotations

import numpy as np

CRC32_POLY = 0x04C11DB7
_REFLECTED_POLY = 0xEDB88320

CRC_BITS = 32


def _build_table() -> np.ndarray:
    table = np.empty(256, dtype=np.uint32)
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ (_REFLECTED_POLY if crc & 1 else 0)
        table[byte] = crc
    return table


_TABLE = _build_table()


def crc32_bits(bits: np.ndarray) -> int:
    """Checksum of a 0/1 bit array, first bit processed first."""
    bits = np.asarray(bits).ravel().astype(np.uint8)
    if np.any(bits > 1):
        raise ValueError("input must contain only 0s and 1s")
    crc = 0xFFFFFFFF
    full = bits.size // 8 * 8
    if full:
        packed = np.packbits(bits[:full], bitorder="little")
        for byte in packed.tolist():
            crc = (crc >> 8) ^ int(_TABLE[(crc ^ byte) & 0xFF])
    for bit in bits[full:].tolist():
        crc = (crc >> 1) ^ (_REFLECTED_POLY if (crc ^ bit) & 1 else 0)
    return crc ^ 0xFFFFFFFF


def crc32_bytes(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc = (crc >> 8) ^ int(_TABLE[(crc ^ byte) & 0xFF])
    return crc ^ 0xFFFFFFFF


def append_crc(bits: np.ndarray) -> np.ndarray:
    """Payload followed by its 32 checksum bits (LSB first)."""
    bits = np.asarray(bits).ravel().astype(np.uint8)
    value = crc32_bits(bits)
    tail = np.array([(value >> i) & 1 for i in range(CRC_BITS)],
                    dtype=np.uint8)
    return np.concatenate([bits, tail])


def check_crc(bits_with_tail: np.ndarray) -> bool:
    """Verify a stream produced by append_crc."""
    bits_with_tail = np.asarray(bits_with_tail).ravel().astype(np.uint8)
    if bits_with_tail.size < CRC_BITS:
        return False
    body = bits_with_tail[:-CRC_BITS]
    tail = bits_with_tail[-CRC_BITS:]
    value = crc32_bits(body)
    expected = np.array([(value >> i) & 1 for i in range(CRC_BITS)],
                        dtype=np.uint8)
    return bool(np.array_equal(tail, expected))

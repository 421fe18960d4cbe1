"""Classic image transmission: transform codec, CRC-32, LDPC, 4-QAM.

One shot of the conventional pipeline. The compressed image is framed
as [length:32][serialized image][crc:32], where the 32-bit length
counts the serialized image bits and the checksum covers the length
field plus the image bits. The frame is zero-padded to a multiple of
the LDPC info length, encoded block by block, carried over the 4-QAM
OFDM path, soft-demapped, and decoded. Acceptance is decided by the
single image-level checksum: FAILURE is a returned value, never an
exception.

When the interference mask is known, the transmitter can leave the
masked subcarriers unused instead of pushing coded bits through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import ChannelRealization, ChannelState
from .crc import CRC_BITS, append_crc, check_crc
from .dctcodec import (
    DEFAULT_QUALITY,
    CompressedImage,
    compressed_from_bits,
    compressed_to_bits,
    dct_decode,
    dct_encode,
)
from .ldpc import DEFAULT_MAX_ITER, LdpcCode, ldpc_decode, ldpc_encode, \
    make_ldpc_code
from .ofdm import bits_per_symbol, transmit_bits

LENGTH_BITS = 32


@dataclass
class BaselineResult:
    """Outcome of one classic transmission attempt."""

    success: bool
    image: Optional[np.ndarray]
    reason: Optional[str]  # None on success, else "crc" or "header"
    compressed: Optional[CompressedImage]
    decode_ok: bool
    ldpc_converged: float
    coded_bits: int
    ofdm_symbols: int
    est_snr_db: float


def frame_compressed_bits(stream: np.ndarray, k: int) -> np.ndarray:
    """Length-prefix, checksum, and pad a serialized image stream."""
    stream = np.asarray(stream, dtype=np.uint8).ravel()
    length = np.array([(stream.size >> s) & 1
                       for s in range(LENGTH_BITS - 1, -1, -1)],
                      dtype=np.uint8)
    framed = append_crc(np.concatenate([length, stream]))
    pad = (-framed.size) % k
    return np.concatenate([framed, np.zeros(pad, dtype=np.uint8)])


def parse_framed_bits(info: np.ndarray) -> Optional[np.ndarray]:
    """Recover the serialized image, or None when the checksum fails."""
    info = np.asarray(info, dtype=np.uint8).ravel()
    if info.size < LENGTH_BITS + CRC_BITS:
        return None
    length = 0
    for b in info[:LENGTH_BITS]:
        length = (length << 1) | int(b)
    end = LENGTH_BITS + length + CRC_BITS
    if length == 0 or end > info.size:
        return None
    if not check_crc(info[:end]):
        return None
    return info[LENGTH_BITS:LENGTH_BITS + length]


def classic_coded_bits(compressed_bit_length: int,
                       code: Optional[LdpcCode] = None) -> int:
    """Channel bits the classic pipeline spends on one image."""
    code = code or make_ldpc_code()
    framed = LENGTH_BITS + compressed_bit_length + CRC_BITS
    blocks = -(-framed // code.k)
    return blocks * code.n


def classic_ofdm_symbols(compressed_bit_length: int,
                         code: Optional[LdpcCode] = None) -> int:
    """4-QAM data symbols the classic pipeline occupies."""
    return classic_coded_bits(compressed_bit_length, code) \
        // bits_per_symbol(4)


def baseline_transmit(image: np.ndarray, h: ChannelRealization,
                      state: ChannelState, rng_seed: int,
                      quality: int = DEFAULT_QUALITY,
                      code: Optional[LdpcCode] = None,
                      avoid_cci: bool = False,
                      cci_power_ratio: float = 100.0,
                      ldpc_max_iter: int = DEFAULT_MAX_ITER,
                      ) -> BaselineResult:
    """Compress, protect, transmit, and decode one image."""
    code = code or make_ldpc_code()
    compressed = dct_encode(image, quality)
    framed = frame_compressed_bits(compressed_to_bits(compressed), code.k)
    codewords = ldpc_encode(framed.reshape(-1, code.k), code)
    data_subcarriers = None
    if avoid_cci:
        if state.cci_mask.all():
            raise ValueError("cannot avoid interference on every "
                             "subcarrier")
        data_subcarriers = ~state.cci_mask
    link = transmit_bits(codewords.ravel(), order=4, h=h, state=state,
                         rng_seed=rng_seed,
                         cci_power_ratio=cci_power_ratio,
                         data_subcarriers=data_subcarriers)
    llrs = link.llrs.reshape(-1, code.n)
    decoded, converged = ldpc_decode(llrs, code, max_iter=ldpc_max_iter)
    stream = parse_framed_bits(decoded.ravel())
    coded_bits = codewords.size
    symbols = coded_bits // bits_per_symbol(4)
    base = dict(compressed=compressed,
                ldpc_converged=float(converged.mean()),
                coded_bits=coded_bits, ofdm_symbols=symbols,
                est_snr_db=link.est_snr_db)
    if stream is None:
        return BaselineResult(success=False, image=None, reason="crc",
                              decode_ok=False, **base)
    try:
        received = compressed_from_bits(stream)
    except ValueError:
        return BaselineResult(success=False, image=None, reason="header",
                              decode_ok=False, **base)
    out, ok = dct_decode(received)
    return BaselineResult(success=True, image=out, reason=None,
                          decode_ok=ok, **base)

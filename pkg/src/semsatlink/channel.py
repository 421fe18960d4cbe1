"""Non-terrestrial multipath channel with Doppler, AWGN, and co-channel
interference.

The channel is a tapped delay line: each tap carries a complex gain, a
Doppler shift, and a delay quantized to whole samples. Tap gains have
deterministic magnitudes from the power-delay profile and uniformly
random phases, which keeps both the per-realization normalization
(sum of |gain|^2 = 1) and the ensemble power ratios exact.

Co-channel interference is modeled as additive complex Gaussian noise
on a per-subcarrier mask, standing in for foreign transmissions whose
content the link does not know.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

NUM_SUBCARRIERS = 512
SPEED_OF_LIGHT = 299_792_458.0

DEFAULT_POWERS_DB = (0.0, -4.0, -8.0)
DEFAULT_DELAYS_NS = (0.0, 100.0, 250.0)
DEFAULT_SAMPLE_RATE = 30.72e6
DEFAULT_NORMALIZED_DOPPLER = 1e-4
DEFAULT_CCI_POWER_RATIO = 100.0

# Doppler magnitudes are drawn uniformly from this band times the maximum.
_DOPPLER_BAND = (0.9, 1.0)


@dataclass
class ChannelProfile:
    """Power-delay profile plus Doppler parameterization."""

    powers_db: Tuple[float, ...] = DEFAULT_POWERS_DB
    delays_ns: Tuple[float, ...] = DEFAULT_DELAYS_NS
    normalized_doppler: float = DEFAULT_NORMALIZED_DOPPLER
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if len(self.powers_db) == 0:
            raise ValueError("profile needs at least one tap")
        if len(self.powers_db) != len(self.delays_ns):
            raise ValueError(f"{len(self.powers_db)} powers vs "
                             f"{len(self.delays_ns)} delays")
        if any(d < 0 for d in self.delays_ns):
            raise ValueError("negative tap delay")
        if list(self.delays_ns) != sorted(set(self.delays_ns)):
            raise ValueError("tap delays must be strictly increasing")
        if self.normalized_doppler < 0:
            raise ValueError("normalized Doppler cannot be negative")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    def delay_samples(self) -> List[int]:
        return [int(round(d * 1e-9 * self.sample_rate))
                for d in self.delays_ns]

    def max_doppler_hz(self) -> float:
        return self.normalized_doppler * self.sample_rate


@dataclass
class PathTap:
    gain: complex
    doppler_hz: float
    delay_samples: int

    def __post_init__(self):
        if abs(self.gain) <= 0:
            raise ValueError("tap gain magnitude must be positive")
        if self.delay_samples < 0:
            raise ValueError("tap delay cannot be negative")


@dataclass
class ChannelRealization:
    """Tap set for one coherence interval.

    Realizations drawn by sample_channel always carry unit total tap
    power; hand-built ones may use any gains (e.g. a single attenuating
    tap), so normalization is checked at the sampling site, not here.
    """

    taps: List[PathTap]
    sample_rate: float

    def __post_init__(self):
        if not self.taps:
            raise ValueError("realization needs at least one tap")
        delays = [t.delay_samples for t in self.taps]
        if delays != sorted(set(delays)):
            raise ValueError("tap delays must be strictly increasing after "
                             "quantization; adjust profile or sample rate")

    def total_power(self) -> float:
        return float(sum(abs(t.gain) ** 2 for t in self.taps))


@dataclass
class ChannelState:
    """What the link currently knows: SNR and the interference mask."""

    snr_db: float
    cci_mask: np.ndarray

    def __post_init__(self):
        self.cci_mask = np.asarray(self.cci_mask, dtype=bool)
        if self.cci_mask.shape != (NUM_SUBCARRIERS,):
            raise ValueError(f"mask must cover {NUM_SUBCARRIERS} "
                             f"subcarriers, got {self.cci_mask.shape}")


def doppler_from_speed(speed_mps: float, carrier_hz: float) -> float:
    """Doppler shift in Hz for a given platform speed and carrier."""
    return speed_mps / SPEED_OF_LIGHT * carrier_hz


def sample_channel(profile: ChannelProfile,
                   rng_seed: int) -> ChannelRealization:
    """Draw one realization: random phases, Doppler near its maximum."""
    rng = np.random.default_rng([10, rng_seed])
    powers = 10.0 ** (np.asarray(profile.powers_db) / 10.0)
    powers /= powers.sum()
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(powers))
    vmax = profile.max_doppler_hz()
    dopplers = rng.uniform(*_DOPPLER_BAND, size=len(powers)) * vmax
    taps = [PathTap(gain=np.sqrt(p) * np.exp(1j * phi),
                    doppler_hz=float(v), delay_samples=d)
            for p, phi, v, d in zip(powers, phases, dopplers,
                                    profile.delay_samples())]
    realization = ChannelRealization(taps, profile.sample_rate)
    assert abs(realization.total_power() - 1.0) < 1e-12
    return realization


def apply_channel(x: np.ndarray, h: ChannelRealization) -> np.ndarray:
    """Tapped-delay-line output with per-tap phase ramps.

    y[n] = sum_l gain_l * exp(j 2 pi v_l n / f_s) * x[n - d_l]
    """
    x = np.asarray(x, dtype=complex)
    n = np.arange(x.size)
    y = np.zeros_like(x)
    for tap in h.taps:
        shifted = np.zeros_like(x)
        d = tap.delay_samples
        if d < x.size:
            shifted[d:] = x[:x.size - d]
        ramp = np.exp(2j * np.pi * tap.doppler_hz / h.sample_rate * n)
        y += tap.gain * ramp * shifted
    return y


def add_awgn(x: np.ndarray, snr_db: float, rng_seed: int) -> np.ndarray:
    """Complex white Gaussian noise scaled to the measured signal power.

    snr_db = inf disables noise entirely.
    """
    x = np.asarray(x, dtype=complex)
    if x.size == 0:
        raise ValueError("empty input")
    if np.isinf(snr_db) and snr_db > 0:
        return x.copy()
    rng = np.random.default_rng([11, rng_seed])
    signal_power = float(np.mean(np.abs(x) ** 2))
    noise_power = signal_power * 10.0 ** (-snr_db / 10.0)
    scale = np.sqrt(noise_power / 2.0)
    noise = scale * (rng.standard_normal(x.shape)
                     + 1j * rng.standard_normal(x.shape))
    return x + noise


def sample_cci_mask(fraction: float, rng_seed: int) -> np.ndarray:
    """Each subcarrier is interfered independently with this probability."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    rng = np.random.default_rng([12, rng_seed])
    return rng.random(NUM_SUBCARRIERS) < fraction


def inject_cci(grid: np.ndarray, mask: np.ndarray, power_ratio: float,
               rng_seed: int) -> np.ndarray:
    """Add interference noise to the masked subcarrier columns.

    grid is a (slots, subcarriers) frequency-domain frame. Interference
    power per masked resource element is power_ratio times the mean
    symbol power of the grid. Unmasked columns are returned bit-exact.
    """
    if power_ratio <= 0:
        raise ValueError("power_ratio must be positive")
    grid = np.asarray(grid, dtype=complex)
    mask = np.asarray(mask, dtype=bool)
    if grid.ndim != 2 or grid.shape[1] != mask.size:
        raise ValueError(f"grid {grid.shape} does not match mask "
                         f"({mask.size} subcarriers)")
    out = grid.copy()
    hit = np.flatnonzero(mask)
    if hit.size == 0:
        return out
    rng = np.random.default_rng([13, rng_seed])
    power = power_ratio * float(np.mean(np.abs(grid) ** 2))
    scale = np.sqrt(power / 2.0)
    shape = (grid.shape[0], hit.size)
    out[:, hit] += scale * (rng.standard_normal(shape)
                            + 1j * rng.standard_normal(shape))
    return out


def make_condition_vector(state: ChannelState) -> np.ndarray:
    """Selector input: mask bits then the SNR repeated, length 1024."""
    return np.concatenate([state.cci_mask.astype(float),
                           np.full(NUM_SUBCARRIERS, float(state.snr_db))])

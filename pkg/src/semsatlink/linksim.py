"""Discrete-event HARQ simulation over UT -> satellite -> gateway.

One episode is a single-threaded event loop: the UT transmits an
image, the satellite either regenerates the bits (running the rough
detector in regenerative mode) or relays the waveform, and the gateway
decodes, reconstructs, and runs the fine detector. NACKs propagate
back over the control channel and trigger retransmissions until the
limit is hit. Every step is timestamped so delay accounting is exact.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detectors as det
from .baseline import frame_compressed_bits, parse_framed_bits
from .channel import (ChannelProfile, ChannelRealization, ChannelState,
                      PathTap, make_condition_vector, sample_cci_mask,
                      sample_channel)
from .codec import (CodecBundle, additional_encode, bits_to_payload,
                    decode, encode, oracle_planes, paired_decode,
                    reconstruct, select_pair)
from .crc import CRC_BITS, append_crc, check_crc
from .dataset import Scene
from .dctcodec import (DEFAULT_QUALITY, StreamError, compressed_from_bits,
                       compressed_to_bits, dct_decode, dct_encode)
from .detectors import DetectorBank, fine_score, parity_encode, rough_score
from .ldpc import ldpc_decode, ldpc_encode, make_ldpc_code
from .metrics import required_mse
from .ofdm import transmit_bits

EVENT_KINDS = ("TX", "RX", "ROUGH_ACK", "ROUGH_NACK", "FINE_ACK",
               "FINE_NACK", "RETX", "GIVE_UP")
TERMINAL_KINDS = ("FINE_ACK", "GIVE_UP")
MODES = ("regenerative", "transparent")
DETECTOR_MODES = ("oracle", "trained", "crc-baseline")
PIPELINES = ("semantic", "adaptive-semantic", "classic")

DEFAULT_DELAY_RANGE_MS = (2.0, 20.0)
DEFAULT_RETRANSMISSION_LIMIT = 4


# ---------------------------------------------------------------------------
# Event queue core


class EventQueue:
    """Min-time event queue with FIFO tie-break by insertion order."""

    def __init__(self):
        self._heap: List[Tuple[float, int, object]] = []
        self._seq = 0
        self._now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def now(self) -> float:
        return self._now

    def push(self, t: float, item) -> None:
        if t < self._now:
            raise RuntimeError(f"event scheduled in the past: {t} < "
                               f"{self._now}")
        heapq.heappush(self._heap, (float(t), self._seq, item))
        self._seq += 1

    def pop(self):
        t, _, item = heapq.heappop(self._heap)
        self._now = t
        return t, item


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Event:
    t_ms: float
    node: str
    kind: str
    detail: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass
class Scenario:
    """Everything that parametrizes one link configuration."""

    uplink_snr_db: float = 10.0
    downlink_snr_db: float = 10.0
    uplink_cci_fraction: float = 0.0
    downlink_cci_fraction: float = 0.0
    mode: str = "regenerative"
    pipeline: str = "semantic"
    detector_mode: str = "oracle"
    delay_range_ms: Tuple[float, float] = DEFAULT_DELAY_RANGE_MS
    uplink_delay_ms: Optional[float] = None
    downlink_delay_ms: Optional[float] = None
    processing_delay_ms: float = 0.0
    retransmission_limit: int = DEFAULT_RETRANSMISSION_LIMIT
    resend_cached: bool = True
    decision_threshold: float = det.DEFAULT_DECISION_THRESHOLD
    baseline_quality: int = DEFAULT_QUALITY
    profile: Optional[ChannelProfile] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.detector_mode not in DETECTOR_MODES:
            raise ValueError(f"unknown detector mode "
                             f"{self.detector_mode!r}")
        if self.pipeline == "classic" and self.detector_mode != \
                "crc-baseline":
            raise ValueError("the classic pipeline verifies delivery "
                             "with its own CRC; use detector mode "
                             "'crc-baseline'")
        if self.pipeline == "adaptive-semantic" and self.detector_mode \
                == "trained":
            raise ValueError("trained detectors operate on full-rate "
                             "codewords; use oracle or crc-baseline "
                             "detection with the adaptive pipeline")
        lo, hi = self.delay_range_ms
        if lo < 0 or hi < lo:
            raise ValueError(f"bad delay range {self.delay_range_ms}")
        for name in ("uplink_delay_ms", "downlink_delay_ms"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.processing_delay_ms < 0:
            raise ValueError("processing delay must be >= 0")
        if self.retransmission_limit < 0:
            raise ValueError("retransmission limit must be >= 0")
        for name in ("uplink_cci_fraction", "downlink_cci_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class LinkTrace:
    """Timestamped record of one episode."""

    events: List[Event] = field(default_factory=list)
    final_verdict: str = ""
    total_delay_ms: float = 0.0
    retransmission_count: int = 0
    diagnostics: Dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.final_verdict == "FINE_ACK"


def trace_to_rows(trace: LinkTrace, episode_id: int):
    """One CSV-ready tuple per event."""
    return [(episode_id, e.t_ms, e.node, e.kind, e.detail)
            for e in trace.events]


# ---------------------------------------------------------------------------
# Channel plumbing


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))


def _compose_realizations(up: ChannelRealization,
                          down: ChannelRealization
                          ) -> ChannelRealization:
    """Cascade of two tapped-delay lines for the transparent relay.

    Composite taps multiply pairwise gains, add delays and Doppler;
    coinciding delays merge. The bent pipe therefore sees both
    channels' selectivity in one realization."""
    merged: Dict[int, PathTap] = {}
    for a in up.taps:
        for b in down.taps:
            d = a.delay_samples + b.delay_samples
            gain = a.gain * b.gain
            dop = a.doppler_hz + b.doppler_hz
            if d in merged:
                prev = merged[d]
                merged[d] = PathTap(prev.gain + gain,
                                    (prev.doppler_hz + dop) / 2.0, d)
            else:
                merged[d] = PathTap(gain, dop, d)
    taps = [merged[d] for d in sorted(merged)]
    return ChannelRealization(taps, up.sample_rate)


def _harmonic_snr_db(up_db: float, down_db: float) -> float:
    """Effective SNR when satellite noise rides through the bent pipe."""
    if np.isinf(up_db) and np.isinf(down_db):
        return float("inf")
    inv = 0.0
    for v in (up_db, down_db):
        if not np.isinf(v):
            inv += 10.0 ** (-v / 10.0)
    return float(-10.0 * np.log10(inv))


# ---------------------------------------------------------------------------
# Episode simulation


class _Episode:
    """Mutable state threaded through one event loop."""

    def __init__(self, scene, scenario, bundle, rng, detector_bank,
                 correlated):
        self.scene = scene
        self.scenario = scenario
        self.bundle = bundle
        self.rng = rng
        self.bank = detector_bank
        self.correlated = correlated
        self.trace = LinkTrace()
        self.queue = EventQueue()
        self.attempt = 0
        self.pair: Optional[int] = None
        self.payload: Optional[np.ndarray] = None
        self.profile = scenario.profile or ChannelProfile()
        self.d_up = (scenario.uplink_delay_ms
                     if scenario.uplink_delay_ms is not None
                     else float(rng.uniform(*scenario.delay_range_ms)))
        self.d_down = (scenario.downlink_delay_ms
                       if scenario.downlink_delay_ms is not None
                       else float(rng.uniform(*scenario.delay_range_ms)))
        self.attempt_log: List[Dict] = []
        if scenario.pipeline == "classic":
            self.code = make_ldpc_code()
            compressed = dct_encode(scene.image,
                                    scenario.baseline_quality)
            framed = frame_compressed_bits(
                compressed_to_bits(compressed), self.code.k)
            self.coded = ldpc_encode(framed.reshape(-1, self.code.k),
                                     self.code).ravel()
        elif scenario.detector_mode == "trained":
            self.p_rough = parity_encode(scene.image,
                                         self.bank.parity_rough)
            self.p_fine = parity_encode(scene.image,
                                        self.bank.parity_fine)

    # -- event helpers

    def log(self, t, node, kind, detail=""):
        self.trace.events.append(Event(t, node, kind, detail))

    def draw_state(self, snr_db, fraction) -> ChannelState:
        mask = sample_cci_mask(fraction, _seed(self.rng))
        return ChannelState(snr_db, mask)

    def draw_channel(self) -> ChannelRealization:
        return sample_channel(self.profile, _seed(self.rng))

    # -- payload preparation

    def uplink_payload(self, up_state: ChannelState):
        """Bits handed to the PHY this attempt, plus mapping info."""
        sc = self.scenario
        if sc.pipeline == "classic":
            return self.coded.copy(), None
        fresh = self.payload is None or not sc.resend_cached
        if fresh:
            planes = oracle_planes(self.scene.segmap,
                                   self.bundle.num_categories)
            codeword = encode(self.scene.image, planes, self.bundle)
            if sc.pipeline == "adaptive-semantic":
                vec = make_condition_vector(up_state)
                self.pair = select_pair(vec, self.bundle.selector)
                codeword = additional_encode(codeword, self.pair,
                                             self.bundle)
            bits01 = bits_to_payload(codeword)
            if sc.detector_mode == "crc-baseline":
                bits01 = append_crc(bits01)
            self.payload = bits01
            self.latent_shape = codeword.latent_shape
        subcarriers = None
        if (self.pair == 3 and up_state.cci_mask.any()
                and not up_state.cci_mask.all()):
            subcarriers = ~up_state.cci_mask
        return self.payload.copy(), subcarriers

    def bits_to_values(self, bits01, erasures):
        """Latent values seen by a receiver: +-1 bits, zero when the
        equalizer flagged the subcarrier as erased."""
        data = bits01
        if self.scenario.detector_mode == "crc-baseline":
            data = bits01[:-CRC_BITS]
            erasures = erasures[:-CRC_BITS]
        values = (2.0 * data.astype(float) - 1.0) * ~erasures
        return values.reshape(self.latent_shape)

    # -- detector stages

    def rough_verdict(self, bits01, erasures):
        sc = self.scenario
        if sc.detector_mode == "crc-baseline":
            ok = check_crc(bits01)
            return ok, float(ok)
        values = self.bits_to_values(bits01, erasures)
        if sc.detector_mode == "oracle":
            if not self.scene.importance_mask.any():
                raise ValueError(f"scene {self.scene.scene_id} has no "
                                 f"required region to judge")
            recovered = self.decode_values(values)
            err = required_mse(recovered, self.scene.image,
                               self.scene.importance_mask)
            ok = err <= det.MSE_THRESHOLD
            return bool(ok), (1.0 if ok else 0.0)
        score = rough_score(values, self.p_rough, self.bank)
        return score > sc.decision_threshold, score

    def fine_verdict(self, reconstructed):
        sc = self.scenario
        if sc.detector_mode == "oracle":
            label = det.make_fine_label(self.scene, reconstructed)
            return bool(label), float(label)
        score = fine_score(reconstructed, self.p_rough, self.p_fine,
                           self.bank)
        return score > sc.decision_threshold, score

    def decode_values(self, values):
        if self.pair is None:
            return decode(values, self.bundle)
        return paired_decode(values, self.pair, self.bundle)

    # -- attempt bookkeeping

    def retransmit_or_give_up(self, t):
        if self.attempt >= self.scenario.retransmission_limit + 1:
            self.log(t, "UT", "GIVE_UP")
            self.finish("GIVE_UP", t)
        else:
            self.log(t, "UT", "RETX")
            self.queue.push(t, ("uplink", None))

    def finish(self, verdict, t):
        self.trace.final_verdict = verdict
        self.trace.total_delay_ms = t
        self.trace.retransmission_count = self.attempt - 1


def run_episode(scene: Scene, scenario: Scenario, bundle: CodecBundle,
                rng: np.random.Generator,
                detector_bank: Optional[DetectorBank] = None,
                correlated: Optional[np.ndarray] = None) -> LinkTrace:
    """Simulate one HARQ episode and return its trace.

    The rng drives every random draw in pop order, so the same seed
    replays the trace bit-exactly."""
    if scenario.detector_mode == "trained" and detector_bank is None:
        raise ValueError("trained detector mode needs a detector bank")
    ep = _Episode(scene, scenario, bundle, rng, detector_bank,
                  correlated)
    ep.queue.push(0.0, ("uplink", None))
    while len(ep.queue):
        t, (stage, payload) = ep.queue.pop()
        if stage == "uplink":
            _handle_uplink(ep, t)
        elif stage == "satellite":
            _handle_satellite(ep, t, payload)
        elif stage == "gateway":
            _handle_gateway(ep, t, payload)
    _finalize_diagnostics(ep)
    return ep.trace


def _handle_uplink(ep: _Episode, t: float) -> None:
    sc = ep.scenario
    ep.attempt += 1
    if ep.attempt == 1:
        ep.log(t, "UT", "TX")
    up_state = ep.draw_state(sc.uplink_snr_db, sc.uplink_cci_fraction)
    bits, subcarriers = ep.uplink_payload(up_state)
    order = 4 if sc.pipeline == "classic" else 16
    h_up = ep.draw_channel()
    entry = {"attempt": ep.attempt, "pair": ep.pair}
    if sc.mode == "regenerative":
        link = transmit_bits(bits, order, h_up, up_state,
                             _seed(ep.rng),
                             data_subcarriers=subcarriers)
        entry["uplink_ber"] = float(np.mean(link.bits != bits))
        entry["uplink_erasures"] = int(link.erasures.sum())
        ep.attempt_log.append(entry)
        ep.queue.push(t + ep.d_up, ("satellite",
                                    (link.bits, link.erasures)))
    else:
        down_state = ep.draw_state(sc.downlink_snr_db,
                                   sc.downlink_cci_fraction)
        h = _compose_realizations(h_up, ep.draw_channel())
        state = ChannelState(
            _harmonic_snr_db(sc.uplink_snr_db, sc.downlink_snr_db),
            up_state.cci_mask | down_state.cci_mask)
        link = transmit_bits(bits, order, h, state, _seed(ep.rng),
                             data_subcarriers=subcarriers)
        entry["end_to_end_ber"] = float(np.mean(link.bits != bits))
        ep.attempt_log.append(entry)
        ep.queue.push(t + ep.d_up, ("satellite", None))
        ep.queue.push(t + ep.d_up + ep.d_down,
                      ("gateway", (link.bits, link.erasures, link.llrs,
                                   True)))


def _handle_satellite(ep: _Episode, t: float, payload) -> None:
    sc = ep.scenario
    if sc.mode == "transparent":
        ep.log(t, "SAT", "RX", "relay")
        return
    bits, erasures = payload
    ep.log(t, "SAT", "RX")
    t_proc = t + sc.processing_delay_ms
    entry = ep.attempt_log[-1]
    if sc.pipeline == "classic":
        # Bit-level regeneration only; the CRC lives inside the LDPC
        # payload, so detection waits for the gateway.
        down_state = ep.draw_state(sc.downlink_snr_db,
                                   sc.downlink_cci_fraction)
        link = transmit_bits(bits, 4, ep.draw_channel(), down_state,
                             _seed(ep.rng))
        ep.queue.push(t_proc + ep.d_down,
                      ("gateway", (link.bits, link.erasures, link.llrs,
                                   False)))
        return
    ok, score = ep.rough_verdict(bits, erasures)
    entry["rough_score"] = score
    entry["rough_ack"] = bool(ok)
    if not ok:
        ep.log(t_proc, "SAT", "ROUGH_NACK", f"score={score:.3f}")
        ep.retransmit_or_give_up(t_proc + ep.d_up)
        return
    ep.log(t_proc, "SAT", "ROUGH_ACK", f"score={score:.3f}")
    down_state = ep.draw_state(sc.downlink_snr_db,
                               sc.downlink_cci_fraction)
    subcarriers = None
    if (ep.pair == 3 and down_state.cci_mask.any()
            and not down_state.cci_mask.all()):
        subcarriers = ~down_state.cci_mask
    link = transmit_bits(bits, 16, ep.draw_channel(), down_state,
                         _seed(ep.rng), data_subcarriers=subcarriers)
    entry["downlink_ber"] = float(np.mean(link.bits != bits))
    ep.queue.push(t_proc + ep.d_down,
                  ("gateway", (link.bits, link.erasures, link.llrs,
                               False)))


def _handle_gateway(ep: _Episode, t: float, payload) -> None:
    sc = ep.scenario
    bits, erasures, llrs, needs_rough = payload
    ep.log(t, "GW", "RX")
    t_now = t + sc.processing_delay_ms
    feedback = ep.d_down + ep.d_up
    entry = ep.attempt_log[-1]
    if sc.pipeline == "classic":
        decoded, converged = ldpc_decode(
            llrs.reshape(-1, ep.code.n), ep.code)
        stream = parse_framed_bits(decoded.ravel())
        entry["ldpc_converged"] = float(converged.mean())
        ok = stream is not None
        if ok:
            try:
                recovered, _ = dct_decode(compressed_from_bits(stream))
                ep.final_image = recovered
            except (ValueError, StreamError):
                ok = False
        entry["fine_ack"] = ok
        if ok:
            ep.log(t_now, "GW", "FINE_ACK", "crc=ok")
            ep.finish("FINE_ACK", t_now + feedback)
        else:
            ep.log(t_now, "GW", "FINE_NACK", "crc=fail")
            ep.retransmit_or_give_up(t_now + feedback)
        return
    if needs_rough:
        ok, score = ep.rough_verdict(bits, erasures)
        entry["rough_score"] = score
        entry["rough_ack"] = bool(ok)
        if not ok:
            ep.log(t_now, "GW", "ROUGH_NACK", f"score={score:.3f}")
            ep.retransmit_or_give_up(t_now + feedback)
            return
        ep.log(t_now, "GW", "ROUGH_ACK", f"score={score:.3f}")
        t_now += sc.processing_delay_ms
    if sc.detector_mode == "crc-baseline":
        ok = check_crc(bits)
        entry["fine_ack"] = bool(ok)
        values = ep.bits_to_values(bits, erasures)
        ep.final_image = reconstruct(ep.decode_values(values),
                                     ep.correlated, ep.bundle.refiner,
                                     ep.bundle.refiner_steps)
        if ok:
            ep.log(t_now, "GW", "FINE_ACK", "crc=ok")
            ep.finish("FINE_ACK", t_now + feedback)
        else:
            ep.log(t_now, "GW", "FINE_NACK", "crc=fail")
            ep.retransmit_or_give_up(t_now + feedback)
        return
    values = ep.bits_to_values(bits, erasures)
    recon = reconstruct(ep.decode_values(values), ep.correlated,
                        ep.bundle.refiner, ep.bundle.refiner_steps)
    ep.final_image = recon
    ok, score = ep.fine_verdict(recon)
    entry["fine_score"] = score
    entry["fine_ack"] = bool(ok)
    if ok:
        ep.log(t_now, "GW", "FINE_ACK", f"score={score:.3f}")
        ep.finish("FINE_ACK", t_now + feedback)
    else:
        ep.log(t_now, "GW", "FINE_NACK", f"score={score:.3f}")
        ep.retransmit_or_give_up(t_now + feedback)


def _finalize_diagnostics(ep: _Episode) -> None:
    diag = {"attempts": ep.attempt_log,
            "uplink_delay_ms": ep.d_up,
            "downlink_delay_ms": ep.d_down,
            "payload_bits": (int(ep.payload.size)
                             if ep.payload is not None
                             else int(ep.coded.size)),
            "pair": ep.pair}
    image = getattr(ep, "final_image", None)
    if image is not None and image.shape == ep.scene.image.shape:
        if ep.scene.importance_mask.any():
            diag["required_mse"] = required_mse(
                image, ep.scene.image, ep.scene.importance_mask)
        diag["quality"] = det.quality_proxy(image)
    ep.trace.diagnostics = diag


# ---------------------------------------------------------------------------
# Sweeps


def run_sweep(scenarios: Sequence[Scenario], scenes: Sequence[Scene],
              bundle: CodecBundle, rng_seed: int = 0,
              detector_bank: Optional[DetectorBank] = None,
              keep_traces: bool = False):
    """Run every scene through every scenario and aggregate.

    Episodes use independent seed streams so aggregation is
    order-independent. Returns (rows, traces); traces is empty unless
    keep_traces is set."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    rows = []
    all_traces = []
    episode_id = 0
    for s_idx, scenario in enumerate(scenarios):
        traces = []
        for e_idx, scene in enumerate(scenes):
            rng = np.random.default_rng([17, rng_seed, s_idx, e_idx])
            trace = run_episode(scene, scenario, bundle, rng,
                                detector_bank)
            traces.append(trace)
            if keep_traces:
                all_traces.append((episode_id, trace))
            episode_id += 1
        rows.append(aggregate_traces(scenario, traces))
    return rows, all_traces


def aggregate_traces(scenario: Scenario,
                     traces: Sequence[LinkTrace]) -> Dict:
    """Per-scenario aggregate row."""
    delays = np.array([t.total_delay_ms for t in traces])
    retx = np.array([t.retransmission_count for t in traces])
    sat_rejects = sum(sum(e.kind == "ROUGH_NACK" and e.node == "SAT"
                          for e in t.events) for t in traces)
    gw_rejects = sum(sum(e.kind.endswith("NACK") and e.node == "GW"
                         for e in t.events) for t in traces)
    successes = [t for t in traces if t.success]
    accepted_mse = [t.diagnostics["required_mse"] for t in successes
                    if "required_mse" in t.diagnostics]
    hist = {}
    for r in retx:
        hist[int(r)] = hist.get(int(r), 0) + 1
    return {
        "pipeline": scenario.pipeline,
        "mode": scenario.mode,
        "detector_mode": scenario.detector_mode,
        "uplink_snr_db": scenario.uplink_snr_db,
        "downlink_snr_db": scenario.downlink_snr_db,
        "uplink_cci_fraction": scenario.uplink_cci_fraction,
        "downlink_cci_fraction": scenario.downlink_cci_fraction,
        "episodes": len(traces),
        "success_rate": len(successes) / len(traces),
        "mean_delay_ms": float(delays.mean()),
        "p50_delay_ms": float(np.percentile(delays, 50)),
        "p90_delay_ms": float(np.percentile(delays, 90)),
        "mean_retransmissions": float(retx.mean()),
        "retransmission_histogram": hist,
        "satellite_rejections": int(sat_rejects),
        "gateway_rejections": int(gw_rejects),
        "accepted_required_mse_max": (max(accepted_mse)
                                      if accepted_mse else None),
        "accepted_required_mse_mean": (float(np.mean(accepted_mse))
                                       if accepted_mse else None),
    }

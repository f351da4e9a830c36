"""Deterministic discrete-event simulation of a shared CAN bus.

Every cyclic frame is released at k*period + offset (+ covert delay) on
its sender's local clock, mapped to bus time through that node's skewed
and quantized oscillator. Whenever the bus is idle the pending frame
with the lowest identifier transmits for its full wire time, including
sampled or payload-derived stuff bits; arbitration is non-destructive so
losers simply wait. Identical configuration and seed reproduce the trace
byte for byte.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, replace

import numpy as np

from canto.clock_model import ClockModel
from canto.frame_model import (CanId, FrameSpec, frame_bit_length, frame_max_stuff_bits,
                               frame_stuff_bits, transmission_time_us)
from canto.incanta import CovertConfig, covert_delay, embed_counter
from canto.scheduler import Schedule, check_complete, hyperperiod_us


class OversubscribedBusError(RuntimeError):
    """The transmission queue grows without bound for this configuration."""


@dataclass(frozen=True)
class NodeConfig:
    """One ECU: its oscillator, the frames it sends, optional covert channel."""

    name: str
    clock: ClockModel = ClockModel()
    frames: tuple[FrameSpec, ...] = ()
    covert: CovertConfig | None = None


@dataclass(frozen=True)
class BusConfig:
    nodes: tuple[NodeConfig, ...]
    duration_us: float
    bitrate_bps: int = 500_000
    seed: int = 0
    stuffing: str = "payload"  # none | sampled | payload
    payload_mode: str = "counter"  # counter | random | zero

    def __post_init__(self):
        ids = [f.id for n in self.nodes for f in n.frames]
        if len(ids) != len(set(ids)):
            raise ValueError("frame identifiers must be unique across the bus")
        if not ids:
            raise ValueError("no frames configured")
        slowest = max(f.period_us for n in self.nodes for f in n.frames)
        if self.duration_us < 2 * slowest:
            raise ValueError("duration must cover at least two periods of the slowest frame")
        if self.stuffing not in ("none", "sampled", "payload"):
            raise ValueError(f"unknown stuffing mode {self.stuffing!r}")
        if self.payload_mode not in ("counter", "random", "zero"):
            raise ValueError(f"unknown payload mode {self.payload_mode!r}")
        for n in self.nodes:
            if n.covert is not None and n.covert.counter_in_payload:
                small = [str(f.id) for f in n.frames if f.payload_bits < 32]
                if small:
                    raise ValueError(f"node {n.name}: frames {small} cannot carry "
                                     "the 4-byte counter in their payload")

    def all_frames(self) -> list[FrameSpec]:
        return [f for n in self.nodes for f in n.frames]


@dataclass(frozen=True)
class TimedFrame:
    """One frame occurrence: intended local send time and the start of its
    actual transmission on the bus."""

    id: CanId
    counter: int
    sched_time_us: float
    bus_time_us: float
    tx_time_us: float
    payload: bytes
    genuine: bool = True

    @property
    def end_time_us(self) -> float:
        return self.bus_time_us + self.tx_time_us


@dataclass
class Trace:
    frames: list[TimedFrame]
    bitrate_bps: int = 500_000
    duration_us: float = 0.0
    seed: int = 0

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)

    def by_id(self, can_id: CanId) -> list[TimedFrame]:
        return [f for f in self.frames if f.id == can_id]


def _payload_template(spec: FrameSpec) -> bytes:
    n = spec.payload_bits // 8
    return bytes(((spec.id.value >> 3) + i) & 0xFF for i in range(n))


def _theoretical_busload(config: BusConfig) -> float:
    load = 0.0
    for f in config.all_frames():
        bits = frame_bit_length(f.payload_bits, f.id.kind)
        load += transmission_time_us(bits, config.bitrate_bps) / f.period_us
    return 100.0 * load


def simulate(config: BusConfig) -> Trace:
    """Run the bus and return the time-ordered trace of transmissions."""
    specs = config.all_frames()
    sched = Schedule(tuple(specs), hyperperiod_us([f.period_us for f in specs]))
    if not check_complete(sched):
        warnings.warn("schedule is not collision-free; covert verification will degrade",
                      stacklevel=2)

    # (ready_us, arbitration key, seq, frame) released per spec, then arbitrated.
    releases: list[tuple[float, tuple, int, TimedFrame]] = []
    seq = 0
    for node_idx, node in enumerate(config.nodes):
        for frame_idx, spec in enumerate(node.frames):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((config.seed, node_idx, frame_idx))))
            template = _payload_template(spec)
            nbytes = spec.payload_bits // 8
            frame_bits = frame_bit_length(spec.payload_bits, spec.id.kind)
            nominal_tx = transmission_time_us(frame_bits, config.bitrate_bps)
            counter = 0
            k = 0
            while True:
                base = k * spec.period_us + spec.offset_us
                if base >= config.duration_us:
                    break
                counter += 1
                if config.payload_mode == "random":
                    payload = rng.bytes(nbytes)
                elif config.payload_mode == "zero":
                    payload = bytes(nbytes)
                else:
                    payload = template
                xi = 0
                if node.covert is not None:
                    if node.covert.counter_in_payload:
                        payload = embed_counter(payload, counter)
                    xi = covert_delay(node.covert.key, counter, spec.id, payload,
                                      node.covert.level_bits)
                sched_time = base + xi
                ready = node.clock.local_to_bus_time(sched_time, rng)
                if config.stuffing == "payload":
                    stuff = frame_stuff_bits(spec.id, payload)
                elif config.stuffing == "sampled":
                    stuff = int(rng.integers(0, frame_max_stuff_bits(spec.payload_bits) + 1))
                else:
                    stuff = 0
                tx = nominal_tx if stuff == 0 else transmission_time_us(
                    frame_bits + stuff, config.bitrate_bps)
                releases.append((ready, spec.id.arbitration_key(), seq,
                                 TimedFrame(spec.id, counter, sched_time, ready, tx, payload)))
                seq += 1
                k += 1

    heapq.heapify(releases)
    waiting: list[tuple[tuple, int, float, TimedFrame]] = []
    out: list[TimedFrame] = []
    queue_limit = 4 * len(specs) + 16
    t = 0.0
    while releases or waiting:
        while releases and releases[0][0] <= t:
            ready, key, s, fr = heapq.heappop(releases)
            heapq.heappush(waiting, (key, s, ready, fr))
        if not waiting:
            t = releases[0][0]
            continue
        if len(waiting) > queue_limit:
            raise OversubscribedBusError(
                f"transmission queue exceeded {queue_limit} pending frames "
                f"(theoretical busload {_theoretical_busload(config):.0f}%)")
        _, _, ready, fr = heapq.heappop(waiting)
        start = max(t, ready)
        out.append(replace(fr, bus_time_us=start))
        t = start + fr.tx_time_us
    return Trace(out, config.bitrate_bps, config.duration_us, config.seed)


def busload(trace: Trace, bitrate_bps: int | None = None) -> float:
    """Occupied fraction of the bus over the trace duration, in percent.

    Traces parsed without wire times fall back to recomputing them from
    each frame's bit pattern at the given bitrate.
    """
    if not trace.frames:
        raise ValueError("empty trace")
    duration = trace.duration_us or trace.frames[-1].end_time_us
    total = sum(f.tx_time_us for f in trace.frames)
    if total == 0.0 and bitrate_bps:
        total = sum(
            transmission_time_us(frame_bit_length(len(f.payload) * 8, f.id.kind)
                                 + frame_stuff_bits(f.id, f.payload), bitrate_bps)
            for f in trace.frames)
    return 100.0 * total / duration


def inject_adversary(trace: Trace, can_id: CanId, period_us: float,
                     strategy: str = "random_in_window", seed: int = 0,
                     level_bits: int = 8, offset_us: float | None = None) -> Trace:
    """Replace an ID's genuine frames with adversary-timed ones.

    "random_in_window" places each injected frame at the previous frame's
    time plus the period plus a uniform draw over the covert-delay window,
    which is the best a blind adversary can do. "fixed_offset" uses a
    constant offset_us instead of the draw. Injected frames carry the
    genuine payloads, so only timing decides verification. Frames are
    tagged via `genuine` for later scoring.
    """
    if strategy not in ("random_in_window", "fixed_offset"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "fixed_offset" and offset_us is None:
        raise ValueError("fixed_offset strategy needs offset_us")
    if not any(f.id == can_id for f in trace.frames):
        raise ValueError(f"id {can_id} does not appear in the trace")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xADD))))
    out: list[TimedFrame] = []
    last_time: float | None = None
    last_counter: int | None = None
    for fr in trace.frames:
        if fr.id != can_id:
            out.append(fr)
            continue
        if last_time is None:
            out.append(fr)
        else:
            delta = fr.counter - last_counter
            draw = float(rng.uniform(0, 1 << level_bits)) if strategy == "random_in_window" \
                else float(offset_us)
            t = last_time + period_us * delta + draw
            out.append(replace(fr, bus_time_us=t, sched_time_us=t, genuine=False))
        last_time = out[-1].bus_time_us
        last_counter = fr.counter
    out.sort(key=lambda f: (f.bus_time_us, f.id.arbitration_key()))
    return Trace(out, trace.bitrate_bps, trace.duration_us, trace.seed)

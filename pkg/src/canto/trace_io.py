"""Trace and configuration file formats.

Native traces are CSV with timestamps stored as integer tenths of a
microsecond so files are bit-exact across platforms; candump-style logs
`(ts) iface id#payload` are accepted as an import path. Experiment
configurations are INI documents with [bus], optional [covert] and
[allocator] sections and one [node.NAME] section per ECU. Schedules are
line-oriented text: `id_hex period_us offset_us payload_bits`.
"""

from __future__ import annotations

import configparser
import io
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from canto.bus_sim import BusConfig, NodeConfig, TimedFrame, Trace
from canto.clock_model import ClockModel, Jitter
from canto.frame_model import (CanId, FrameSpec, frame_bit_length, frame_stuff_bits,
                               transmission_time_us)
from canto.incanta import CovertConfig, counter_from_payload
from canto.scheduler import Schedule, hyperperiod_us

TRACE_HEADER = "bus_time_us,id_hex,counter,payload_hex,genuine"


class TraceFormatError(ValueError):
    """Malformed trace or configuration input."""


def export_trace(trace: Trace, path) -> None:
    with open(path, "w", newline="\n") as fh:
        write_trace(trace, fh)


def write_trace(trace: Trace, fh) -> None:
    fh.write(TRACE_HEADER + "\n")
    for fr in trace.frames:
        fh.write(f"{round(fr.bus_time_us * 10)},{fr.id},{fr.counter},"
                 f"{fr.payload.hex().upper()},{int(fr.genuine)}\n")


def parse_trace(source, fmt: str = "native_csv", bitrate_bps: int | None = None) -> Trace:
    """Read a trace from a path or text stream.

    With a bitrate, wire times are reconstructed from each frame's bit
    pattern; otherwise they are left at zero and timestamps are used
    as recorded.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r") as fh:
            return parse_trace(fh, fmt, bitrate_bps)
    if fmt == "native_csv":
        frames = _parse_native(source, bitrate_bps)
    elif fmt == "candump_log":
        frames = _parse_candump(source, bitrate_bps)
    else:
        raise TraceFormatError(f"unknown trace format {fmt!r}")
    if any(frames[i].bus_time_us > frames[i + 1].bus_time_us for i in range(len(frames) - 1)):
        warnings.warn("non-monotone timestamps in trace; applying stable sort", stacklevel=2)
        frames.sort(key=lambda f: f.bus_time_us)
    duration = frames[-1].end_time_us if frames else 0.0
    return Trace(frames, bitrate_bps or 0, duration, 0)


def _tx_time(can_id: CanId, payload: bytes, bitrate_bps: int | None) -> float:
    if not bitrate_bps:
        return 0.0
    bits = frame_bit_length(len(payload) * 8, can_id.kind) + frame_stuff_bits(can_id, payload)
    return transmission_time_us(bits, bitrate_bps)


def _parse_native(fh, bitrate_bps) -> list[TimedFrame]:
    frames = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line or (lineno == 1 and line == TRACE_HEADER):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise TraceFormatError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            tenths = int(parts[0])
            can_id = CanId.parse(parts[1])
            counter = int(parts[2])
            payload = bytes.fromhex(parts[3])
            genuine = bool(int(parts[4]))
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from exc
        t = tenths / 10.0
        frames.append(TimedFrame(can_id, counter, t, t, _tx_time(can_id, payload, bitrate_bps),
                                 payload, genuine))
    return frames


_CANDUMP_RE = re.compile(r"^\((\d+)\.(\d{1,6})\)\s+(\S+)\s+([0-9A-Fa-f]+)#([0-9A-Fa-f]*)$")


def _parse_candump(fh, bitrate_bps) -> list[TimedFrame]:
    frames = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        m = _CANDUMP_RE.match(line)
        if not m:
            raise TraceFormatError(f"line {lineno}: not a candump record: {line!r}")
        secs, frac, _iface, id_hex, data_hex = m.groups()
        t = int(secs) * 1_000_000 + int(frac.ljust(6, "0"))
        try:
            can_id = CanId.parse(id_hex)
            payload = bytes.fromhex(data_hex)
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from exc
        counter = counter_from_payload(payload) if len(payload) >= 4 else 0
        frames.append(TimedFrame(can_id, counter, float(t), float(t),
                                 _tx_time(can_id, payload, bitrate_bps), payload, True))
    return frames


def write_schedule(schedule: Schedule, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for f in schedule.frames:
            # repr keeps sub-microsecond offsets exact through a round trip
            fh.write(f"{f.id} {f.period_us!r} {f.offset_us!r} {f.payload_bits}\n")


def read_schedule(path) -> Schedule:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise TraceFormatError(f"{path}: line {lineno}: expected 4 fields")
            try:
                frames.append(FrameSpec(CanId.parse(parts[0]), float(parts[1]),
                                        float(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not frames:
        raise TraceFormatError(f"{path}: empty schedule")
    return Schedule(tuple(frames), hyperperiod_us([f.period_us for f in frames]))


@dataclass
class NodeSpec:
    name: str
    clock: ClockModel
    frames: list[FrameSpec]
    offsets_given: bool
    covert: bool


@dataclass
class ExperimentConfig:
    """Everything a run needs: bus parameters, nodes, covert channel, allocator."""

    bitrate_bps: int
    duration_us: float
    seed: int
    stuffing: str
    payload_mode: str
    nodes: list[NodeSpec]
    covert: CovertConfig | None = None
    allocator: dict = field(default_factory=dict)

    def frame_specs(self) -> list[FrameSpec]:
        return [f for n in self.nodes for f in n.frames]

    def periods_by_id(self) -> dict[CanId, float]:
        return {f.id: f.period_us for n in self.nodes for f in n.frames}

    def to_bus_config(self, schedule: Schedule | None = None,
                      seed: int | None = None) -> BusConfig:
        offsets = {f.id: f.offset_us for f in schedule.frames} if schedule else None
        nodes = []
        for n in self.nodes:
            frames = tuple(
                FrameSpec(f.id, f.period_us,
                          offsets[f.id] if offsets is not None else f.offset_us,
                          f.payload_bits)
                for f in n.frames)
            nodes.append(NodeConfig(n.name, n.clock, frames,
                                    self.covert if n.covert else None))
        return BusConfig(tuple(nodes), self.duration_us, self.bitrate_bps,
                         self.seed if seed is None else seed,
                         self.stuffing, self.payload_mode)


_BUS_KEYS = {"bitrate", "duration_us", "seed", "stuffing", "payload_mode"}
_COVERT_KEYS = {"key_hex", "level_bits", "tolerance_us", "frames_required",
                "counter_in_payload"}
_ALLOC_KEYS = {"algorithm", "ifs_us", "grid_step_us", "iterations", "seed"}
_NODE_KEYS = {"skew_ppm", "tick_ns", "jitter", "covert", "frames"}

_FRAME_RE = re.compile(r"^(0x[0-9A-Fa-f]+|[0-9A-Fa-f]+):(\d+(?:\.\d+)?):(\d+)"
                       r"(?::(\d+(?:\.\d+)?))?$")


def _reject_unknown(section: str, keys, allowed) -> None:
    unknown = set(keys) - allowed
    if unknown:
        raise TraceFormatError(f"[{section}]: unknown keys {sorted(unknown)}")


def parse_experiment_config(source) -> ExperimentConfig:
    """Parse and validate an experiment INI document (path, stream or text)."""
    cp = configparser.ConfigParser()
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source) as fh:
            cp.read_file(fh)
    else:
        cp.read_file(io.StringIO(source if isinstance(source, str) else source.read()))

    if "bus" not in cp:
        raise TraceFormatError("missing [bus] section")
    bus = cp["bus"]
    _reject_unknown("bus", bus.keys(), _BUS_KEYS)
    if "duration_us" not in bus:
        raise TraceFormatError("[bus]: missing required key duration_us")

    covert = None
    if "covert" in cp:
        sec = cp["covert"]
        _reject_unknown("covert", sec.keys(), _COVERT_KEYS)
        if "key_hex" not in sec:
            raise TraceFormatError("[covert]: missing required key key_hex")
        covert = CovertConfig(
            key=bytes.fromhex(sec["key_hex"]),
            level_bits=sec.getint("level_bits", 8),
            tolerance_us=sec.getfloat("tolerance_us", 5.0),
            frames_required=sec.getint("frames_required", 6),
            counter_in_payload=sec.getboolean("counter_in_payload", True))

    allocator: dict = {}
    if "allocator" in cp:
        sec = cp["allocator"]
        _reject_unknown("allocator", sec.keys(), _ALLOC_KEYS)
        if "algorithm" not in sec:
            raise TraceFormatError("[allocator]: missing required key algorithm")
        allocator = {"algorithm": sec["algorithm"]}
        for key, conv in (("ifs_us", float), ("grid_step_us", float),
                          ("iterations", int), ("seed", int)):
            if key in sec:
                allocator[key] = conv(sec[key])

    nodes: list[NodeSpec] = []
    seen_ids: set[CanId] = set()
    for section in cp.sections():
        if not section.startswith("node."):
            if section in ("bus", "covert", "allocator"):
                continue
            raise TraceFormatError(f"unknown section [{section}]")
        sec = cp[section]
        _reject_unknown(section, sec.keys(), _NODE_KEYS)
        if "frames" not in sec:
            raise TraceFormatError(f"[{section}]: missing required key frames")
        clock = ClockModel(skew_ppm=sec.getfloat("skew_ppm", 0.0),
                           tick_ns=sec.getint("tick_ns", 10),
                           jitter=Jitter.parse(sec.get("jitter", "none")))
        frames = []
        offsets_given = False
        for token in sec["frames"].split():
            m = _FRAME_RE.match(token)
            if not m:
                raise TraceFormatError(f"[{section}]: bad frame spec {token!r} "
                                       "(want id:period_us:payload_bytes[:offset_us])")
            can_id = CanId.parse(m.group(1))
            if can_id in seen_ids:
                raise TraceFormatError(f"duplicate CAN id {can_id} across nodes")
            seen_ids.add(can_id)
            offset = float(m.group(4)) if m.group(4) is not None else 0.0
            if m.group(4) is not None:
                offsets_given = True
            frames.append(FrameSpec(can_id, float(m.group(2)), offset,
                                    int(m.group(3)) * 8))
        nodes.append(NodeSpec(section[len("node."):], clock, frames, offsets_given,
                              sec.getboolean("covert", covert is not None)))
    if not nodes:
        raise TraceFormatError("no [node.*] sections")
    if allocator and any(n.offsets_given for n in nodes):
        raise TraceFormatError("offsets given both manually and via [allocator]")
    if any(n.covert for n in nodes) and covert is None:
        raise TraceFormatError("a node enables the covert channel but [covert] is missing")

    return ExperimentConfig(
        bitrate_bps=bus.getint("bitrate", 500_000),
        duration_us=bus.getfloat("duration_us"),
        seed=bus.getint("seed", 0),
        stuffing=bus.get("stuffing", "payload"),
        payload_mode=bus.get("payload_mode", "counter"),
        nodes=nodes, covert=covert, allocator=allocator)

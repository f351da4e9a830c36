"""Bit-accurate CAN frame arithmetic.

Frame lengths are counted field by field for classic CAN data frames
(standard and extended identifiers). Stuffing is handled two ways: a
worst-case bound for planning, and the real insert-after-five-identical
rule applied to a concrete bit pattern when payload bytes are known.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import total_ordering
from typing import Iterable

CRC_BITS = 15
IFS_BITS = 3

# SOF + ID + RTR + (IDE, r0, DLC) for standard; extended adds SRR, IDE,
# 18 ID bits and an extra reserved bit.
_HEADER_BITS = {"standard": 1 + 11 + 1 + 6, "extended": 1 + 11 + 1 + 1 + 18 + 1 + 2 + 4}
_TRAILER_BITS = CRC_BITS + 1 + 1 + 1 + 7  # CRC, CRC delim, ACK slot, ACK delim, EOF


class FrameModelError(ValueError):
    """Invalid frame parameter (payload size, bitrate, identifier range)."""


@total_ordering
@dataclass(frozen=True)
class CanId:
    """CAN identifier with arbitration ordering (lower value wins the bus).

    Extended identifiers compare by their 11 leading bits first; on a tie
    the standard frame wins, then the remaining 18 bits decide.
    """

    value: int
    extended: bool = False

    def __post_init__(self):
        limit = 1 << (29 if self.extended else 11)
        if not 0 <= self.value < limit:
            raise FrameModelError(f"CAN id 0x{self.value:X} out of range for "
                                  f"{'extended' if self.extended else 'standard'} identifier")

    @property
    def kind(self) -> str:
        return "extended" if self.extended else "standard"

    def arbitration_key(self) -> tuple[int, int, int]:
        if self.extended:
            return (self.value >> 18, 1, self.value & 0x3FFFF)
        return (self.value, 0, 0)

    def __lt__(self, other: "CanId") -> bool:
        return self.arbitration_key() < other.arbitration_key()

    def __str__(self) -> str:
        return f"{self.value:08X}" if self.extended else f"{self.value:03X}"

    @classmethod
    def parse(cls, text: str) -> "CanId":
        """Parse a hex identifier; > 3 hex digits or > 0x7FF means extended."""
        t = text.strip().lower().removeprefix("0x")
        value = int(t, 16)
        return cls(value, extended=len(t) > 3 or value > 0x7FF)


@dataclass(frozen=True)
class FrameSpec:
    """One cyclic frame: identifier, period, schedule offset, payload size."""

    id: CanId
    period_us: float
    offset_us: float = 0.0
    payload_bits: int = 64

    def __post_init__(self):
        if self.period_us <= 0:
            raise FrameModelError(f"period must be positive, got {self.period_us}")
        if not 0 <= self.offset_us < self.period_us:
            raise FrameModelError(f"offset {self.offset_us} outside [0, {self.period_us})")
        _check_payload(self.payload_bits)


def _check_payload(payload_bits: int) -> None:
    if payload_bits < 0 or payload_bits > 64 or payload_bits % 8:
        raise FrameModelError(f"payload must be 0..64 bits in whole bytes, got {payload_bits}")


def frame_bit_length(payload_bits: int, kind: str = "standard", with_ifs: bool = True) -> int:
    """Field-sum length of a data frame, stuff bits excluded.

    A standard frame with 64 payload bits totals 111 bits including the
    3-bit inter-frame space.
    """
    _check_payload(payload_bits)
    if kind not in _HEADER_BITS:
        raise FrameModelError(f"unknown identifier kind {kind!r}")
    bits = _HEADER_BITS[kind] + payload_bits + _TRAILER_BITS
    return bits + IFS_BITS if with_ifs else bits


def max_stuff_bits(stuffable_bits: int) -> int:
    """Worst-case stuff bits for a stuffable region: one per four bits
    after the first run of five."""
    if stuffable_bits <= 0:
        raise FrameModelError("stuffable region must be positive")
    return (stuffable_bits - 1) // 4


def frame_max_stuff_bits(payload_bits: int) -> int:
    """Worst-case stuff bits of a data frame.

    Counted over payload plus CRC (19 for a 64-bit payload); the
    fixed-form header fields are excluded from the bound.
    """
    _check_payload(payload_bits)
    if payload_bits == 0:
        return max_stuff_bits(CRC_BITS)
    return max_stuff_bits(payload_bits + CRC_BITS)


def transmission_time_us(bits: int, bitrate_bps: int) -> float:
    """Wire time of `bits` at `bitrate_bps`, rounded to the nearest 0.1 us."""
    if bitrate_bps <= 0:
        raise FrameModelError("bitrate must be positive")
    if bits < 0:
        raise FrameModelError("bit count must be nonnegative")
    tenths = Fraction(bits * 10_000_000, bitrate_bps)
    return float(round(tenths)) / 10.0


def count_stuff_bits(bits: Iterable[int]) -> int:
    """Apply the real stuffing rule to a bit pattern.

    After five consecutive identical bits one opposite bit is inserted;
    inserted bits take part in subsequent runs.
    """
    count = 0
    run_bit = None
    run_len = 0
    for b in bits:
        if b == run_bit:
            run_len += 1
        else:
            run_bit, run_len = b, 1
        if run_len == 5:
            count += 1
            run_bit, run_len = 1 - b, 1  # the inserted opposite bit
    return count


def frame_stuff_bits(can_id: CanId, payload: bytes) -> int:
    """Stuff bits of a concrete frame, from its header and payload pattern.

    The CRC field is excluded (its value is out of scope here), so this
    undercounts a real frame by the CRC region's stuffing.
    """
    bits: list[int] = [0]  # SOF dominant
    if can_id.extended:
        base = [(can_id.value >> (28 - i)) & 1 for i in range(11)]
        bits += base + [1, 1]  # SRR, IDE recessive
        bits += [(can_id.value >> (17 - i)) & 1 for i in range(18)]
        bits += [0, 0, 0]  # RTR, r1, r0
    else:
        bits += [(can_id.value >> (10 - i)) & 1 for i in range(11)]
        bits += [0, 0, 0]  # RTR, IDE, r0
    dlc = len(payload)
    bits += [(dlc >> (3 - i)) & 1 for i in range(4)]
    for byte in payload:
        bits += [(byte >> (7 - i)) & 1 for i in range(8)]
    return count_stuff_bits(bits)

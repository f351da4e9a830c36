"""Time-covert authentication over frame delays.

The sender of a cyclic frame delays each transmission by the low bits of
an HMAC tag over (counter, id, payload), interpreted as whole
microseconds. The receiver recomputes the tag and accepts a frame when
the observed same-ID inter-arrival matches the expected period plus the
covert-delay difference within a tolerance. Differencing consecutive
timestamps cancels sender clock skew. Security accumulates over windows
of consecutive frames.
"""

from __future__ import annotations

import hashlib
import hmac
from collections import deque
from dataclasses import dataclass, field

from canto.frame_model import CanId


@dataclass(frozen=True)
class CovertConfig:
    """Channel parameters: shared key, bits per frame, tolerance, window size."""

    key: bytes
    level_bits: int = 8
    tolerance_us: float = 5.0
    frames_required: int = 6
    counter_in_payload: bool = True

    def __post_init__(self):
        if not 16 <= len(self.key) <= 32:
            raise ValueError("key must be 16..32 bytes")
        if not 1 <= self.level_bits <= 32:
            raise ValueError("level_bits must be 1..32")
        if self.tolerance_us < 0:
            raise ValueError("tolerance must be nonnegative")
        if self.frames_required < 1:
            raise ValueError("frames_required must be >= 1")

    @property
    def window_us(self) -> int:
        return 1 << self.level_bits


def mac_input(counter: int, can_id: CanId, payload: bytes) -> bytes:
    """Canonical MAC input: counter and id as 4-byte big-endian, then payload."""
    return counter.to_bytes(4, "big") + can_id.value.to_bytes(4, "big") + payload


def covert_delay(key: bytes, counter: int, can_id: CanId, payload: bytes,
                 level_bits: int = 8) -> int:
    """Covert delay in microseconds: low `level_bits` bits of the HMAC-SHA256 tag."""
    tag = hmac.new(key, mac_input(counter, can_id, payload), hashlib.sha256).digest()
    return int.from_bytes(tag, "big") & ((1 << level_bits) - 1)


def embed_counter(payload: bytes, counter: int) -> bytes:
    """Write the counter into the low 4 payload bytes (big-endian)."""
    if len(payload) < 4:
        raise ValueError("payload too short to carry a 4-byte counter")
    return payload[:-4] + (counter & 0xFFFFFFFF).to_bytes(4, "big")


def counter_from_payload(payload: bytes) -> int:
    if len(payload) < 4:
        raise ValueError("payload too short to carry a 4-byte counter")
    return int.from_bytes(payload[-4:], "big")


def adversary_advantage(tolerance_us: float, level_bits: int, frames: int = 1) -> float:
    """Chance that blindly timed frames pass verification.

    The acceptance window is two-sided, so a single frame lands inside it
    with probability 2*rho/2^l; over a window of k frames the advantage
    is that probability to the k-th power.
    """
    if 2 * tolerance_us >= (1 << level_bits):
        raise ValueError("tolerance window covers the whole delay alphabet")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    return ((2.0 * tolerance_us) / (1 << level_bits)) ** frames


def ecu_success(per_frame_acceptance: float, frames: int) -> float:
    """Probability that all frames of a window from a genuine sender pass."""
    if not 0.0 <= per_frame_acceptance <= 1.0:
        raise ValueError("acceptance probability must be in [0, 1]")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    return per_frame_acceptance ** frames


@dataclass
class Verdict:
    """Outcome for one received frame.

    `accepted` covers the timing check; `reason` is "" on accept,
    "first" for the unscored bootstrap frame, "timing" or "replay"
    otherwise. `window_authenticated` is set once frames_required
    verdicts exist for the ID.
    """

    can_id: CanId
    counter: int
    time_us: float
    accepted: bool
    error_us: float | None = None
    reason: str = ""
    window_authenticated: bool | None = None


@dataclass
class _IdState:
    counter: int
    last_time_us: float
    last_xi: int
    recent: deque = field(default_factory=deque)


class Verifier:
    """Per-ID receiver state machine for the covert channel.

    The first frame of an ID only initializes state (there is no previous
    covert delay to difference against) and is reported as an unscored
    accept. Timestamps of every frame, accepted or not, advance the state
    so that differencing stays between consecutive frames.
    """

    def __init__(self, config: CovertConfig, periods_us: dict[CanId, float]):
        self.config = config
        self.periods_us = dict(periods_us)
        self._states: dict[CanId, _IdState] = {}

    def verify(self, can_id: CanId, counter: int, payload: bytes, time_us: float,
               tolerance_us: float | None = None) -> Verdict:
        if can_id not in self.periods_us:
            raise KeyError(f"unknown id {can_id} (not in the schedule)")
        rho = self.config.tolerance_us if tolerance_us is None else tolerance_us
        xi = covert_delay(self.config.key, counter, can_id, payload, self.config.level_bits)
        state = self._states.get(can_id)
        if state is None:
            state = self._states[can_id] = _IdState(counter, time_us, xi)
            verdict = Verdict(can_id, counter, time_us, True, None, "first")
        elif counter <= state.counter:
            # stale counter: drop without touching the timing reference,
            # otherwise a replay would poison the next genuine check
            verdict = Verdict(can_id, counter, time_us, False, None, "replay")
        else:
            expected = self.periods_us[can_id] * (counter - state.counter) \
                + xi - state.last_xi
            error = (time_us - state.last_time_us) - expected
            ok = abs(error) <= rho
            verdict = Verdict(can_id, counter, time_us, ok, error,
                              "" if ok else "timing")
            state.counter = counter
            state.last_time_us = time_us
            state.last_xi = xi
        state.recent.append(verdict.accepted)
        if len(state.recent) > self.config.frames_required:
            state.recent.popleft()
        if len(state.recent) == self.config.frames_required:
            verdict.window_authenticated = all(state.recent)
        return verdict

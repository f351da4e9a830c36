"""Offset allocation for cyclic CAN traffic.

Given a vector of frame periods, each allocator chooses per-frame offsets
so that the theoretical transmission instants never coincide and the
spacing between consecutive instants on the shared bus is as even as
possible. Schedule quality is the mean reciprocal gap q (units 1/ms,
lower is better) together with the extreme inter-frame spaces.

Five strategies are provided:

* binary symmetric -- recursive bin splitting of the fastest period,
* randomized      -- best-of-N random permutations of an even grid,
* greedy          -- incremental q-minimizing assignment on the same grid,
* multi-layer greedy -- greedy with per-frame grids spanning each period,
* gcd             -- occupancy-matrix filling at a fixed minimum spacing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from canto.frame_model import CanId, FrameSpec


class IncompleteScheduleError(ValueError):
    """Two frames share a theoretical timestamp (reciprocal gap is infinite)."""


class OversubscribedError(ValueError):
    """The requested spacing cannot accommodate all frames."""


@dataclass(frozen=True)
class Schedule:
    """A complete allocation: frame specs with offsets plus the evaluation window."""

    frames: tuple[FrameSpec, ...]
    horizon_us: float

    def entries(self) -> list[tuple[CanId, float, float]]:
        return [(f.id, f.period_us, f.offset_us) for f in self.frames]


@dataclass(frozen=True)
class ScheduleQuality:
    q_per_ms: float
    min_ifs_us: float
    max_ifs_us: float
    complete: bool


def hyperperiod_us(periods_us: Sequence[float]) -> float:
    """Least common multiple of the periods, on a 0.1 us grid."""
    acc = 1
    for p in periods_us:
        tenths = round(p * 10)
        if tenths <= 0:
            raise ValueError(f"period must be positive, got {p}")
        acc = math.lcm(acc, tenths)
    return acc / 10.0


def _instants(pairs: Sequence[tuple[float, float]], horizon_us: float) -> np.ndarray:
    """All k*period + offset below the horizon, ascending."""
    chunks = []
    for period, offset in pairs:
        n = int(math.ceil((horizon_us - offset) / period - 1e-12))
        if n > 0:
            chunks.append(offset + period * np.arange(n, dtype=np.float64))
    if not chunks:
        return np.empty(0, dtype=np.float64)
    out = np.concatenate(chunks)
    out.sort()
    return out


def timestamps(schedule: Schedule, horizon_us: float | None = None) -> np.ndarray:
    """Sorted multiset of theoretical transmission instants within the horizon."""
    horizon = schedule.horizon_us if horizon_us is None else horizon_us
    return _instants([(f.period_us, f.offset_us) for f in schedule.frames], horizon)


def q_factor(ts: np.ndarray) -> float:
    """Mean reciprocal gap of a timestamp multiset, in 1/ms.

    The input is sorted if needed, so the result does not depend on
    presentation order. Coincident timestamps make a gap's reciprocal
    infinite and the schedule incomplete, which is rejected.
    """
    ts = np.sort(np.asarray(ts, dtype=np.float64))
    if len(ts) < 2:
        raise ValueError("need at least two timestamps")
    gaps = np.diff(ts)
    if np.any(gaps <= 0):
        raise IncompleteScheduleError("coincident timestamps: incomplete schedule")
    return float(np.sum(1000.0 / gaps) / len(ts))


def _q_cyclic(ts: np.ndarray, horizon_us: float) -> float:
    """Allocator-internal objective: q with the wrap-around gap included.

    Periodic schedules have no distinguished origin, so candidate offsets
    are ranked on the cyclic gap set; a collision yields infinity.
    """
    n = len(ts)
    if n == 0:
        return 0.0
    gaps = np.empty(n)
    gaps[:-1] = np.diff(ts)
    gaps[-1] = horizon_us - ts[-1] + ts[0]
    if np.any(gaps <= 0):
        return math.inf
    return float(np.sum(1000.0 / gaps) / n)


def check_complete(schedule: Schedule, horizon_us: float | None = None) -> bool:
    """True iff no two theoretical timestamps coincide within the horizon.

    A horizon shorter than the hyperperiod only gives a partial check and
    is flagged with a warning.
    """
    horizon = schedule.horizon_us if horizon_us is None else horizon_us
    full = hyperperiod_us([f.period_us for f in schedule.frames])
    if horizon < full:
        warnings.warn(f"horizon {horizon} us below hyperperiod {full} us: "
                      "completeness check is partial", stacklevel=2)
    ts = timestamps(schedule, horizon)
    return bool(np.all(np.diff(ts) > 0))


def schedule_quality(schedule: Schedule, horizon_us: float | None = None) -> ScheduleQuality:
    ts = timestamps(schedule, horizon_us)
    gaps = np.diff(ts)
    complete = len(gaps) > 0 and bool(np.all(gaps > 0))
    if not complete:
        return ScheduleQuality(math.inf, 0.0, float(gaps.max(initial=0.0)), False)
    return ScheduleQuality(q_factor(ts), float(gaps.min()), float(gaps.max()), True)


def _sorted_order(periods_us: Sequence[float]) -> list[int]:
    return sorted(range(len(periods_us)), key=lambda i: (periods_us[i], i))


def allocate_binary_symmetric(periods_us: Sequence[float]) -> list[float]:
    """Recursive bin splitting over [0, w], w = fastest period.

    The first frame sits at 0; every splitting pass adds the midpoints of
    the existing bins (w/2, then w/4 and 3w/4, ...) until each period has
    an offset. Returns offsets aligned with the input order.
    """
    if not periods_us:
        raise ValueError("empty period vector")
    order = _sorted_order(periods_us)
    w = periods_us[order[0]]
    offsets = [0.0] * len(periods_us)
    remaining = list(order[1:])
    positions = [0.0, w]  # bin boundaries; w is a sentinel, not an offset
    while remaining:
        merged = [positions[0]]
        for i in range(1, len(positions)):
            if remaining:
                mid = (positions[i - 1] + positions[i]) / 2.0
                offsets[remaining.pop(0)] = mid
                merged.append(mid)
            merged.append(positions[i])
        positions = merged
    return offsets


def allocate_randomized(periods_us: Sequence[float], max_iterations: int = 100,
                        seed: int = 0, horizon_us: float | None = None) -> list[float]:
    """Best-of-N random assignment of the evenly spaced offset grid.

    The grid is {0, e, 2e, ...} with e = min(period)/n, permuted each
    iteration; the permutation with the lowest complete-schedule q wins.
    Deterministic for a fixed seed.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    n = len(periods_us)
    if n == 0:
        raise ValueError("empty period vector")
    e = min(periods_us) / n
    slots = np.arange(n, dtype=np.float64) * e
    horizon = hyperperiod_us(periods_us) if horizon_us is None else horizon_us
    rng = np.random.Generator(np.random.PCG64(seed))
    best_q = math.inf
    best: np.ndarray | None = None
    for _ in range(max_iterations):
        perm = rng.permutation(slots)
        q = _q_cyclic(_instants(list(zip(periods_us, perm)), horizon), horizon)
        if q < best_q:
            best_q, best = q, perm
    if best is None:
        raise IncompleteScheduleError("no sampled permutation was collision-free")
    return [float(x) for x in best]


def allocate_greedy(periods_us: Sequence[float], horizon_us: float | None = None) -> list[float]:
    """Assign periods in ascending order, each taking the unused grid
    offset that minimizes the incremental q; ties go to the smallest offset."""
    n = len(periods_us)
    if n == 0:
        raise ValueError("empty period vector")
    e = min(periods_us) / n
    slots = [i * e for i in range(n)]
    horizon = hyperperiod_us(periods_us) if horizon_us is None else horizon_us
    offsets = [0.0] * n
    placed: list[tuple[float, float]] = []
    for idx in _sorted_order(periods_us):
        period = periods_us[idx]
        best_q, best_slot = math.inf, None
        for s in slots:
            if s >= period:
                continue
            q = _q_cyclic(_instants(placed + [(period, s)], horizon), horizon)
            if q < best_q - 1e-12:
                best_q, best_slot = q, s
        if best_slot is None:
            raise OversubscribedError(f"no usable offset for period {period}")
        offsets[idx] = best_slot
        placed.append((period, best_slot))
        slots.remove(best_slot)
    return offsets


def _collides(p1_tenths: int, o1_tenths: int, p2_tenths: int, o2_tenths: int) -> bool:
    # k*p1 + o1 == m*p2 + o2 has a solution iff the offsets agree mod gcd.
    return (o1_tenths - o2_tenths) % math.gcd(p1_tenths, p2_tenths) == 0


def allocate_greedy_multilayer(periods_us: Sequence[float], grid_step_us: float | None = None,
                               horizon_us: float | None = None) -> list[float]:
    """Greedy allocation where a frame of period D may sit at any multiple
    of the grid step below D, so slow frames spread over their whole period.

    Grid points may be reused across frames whose periods keep them from
    ever colliding; candidate offsets that would collide are skipped.
    """
    n = len(periods_us)
    if n == 0:
        raise ValueError("empty period vector")
    if grid_step_us is None:
        # derived default, snapped down to the representable 0.1 us grid
        e_tenths = max(1, int(min(periods_us) * 10) // n)
    else:
        if grid_step_us <= 0:
            raise ValueError("grid step must be positive")
        e_tenths = round(grid_step_us * 10)
        if e_tenths <= 0 or abs(e_tenths - grid_step_us * 10) > 1e-9:
            raise ValueError("grid step must sit on the 0.1 us grid")
    e = e_tenths / 10.0
    horizon = hyperperiod_us(periods_us) if horizon_us is None else horizon_us
    offsets = [0.0] * n
    placed: list[tuple[float, float]] = []
    placed_tenths: list[tuple[int, int]] = []
    for idx in _sorted_order(periods_us):
        period = periods_us[idx]
        p_tenths = round(period * 10)
        best_q, best_slot = math.inf, None
        for k in range(int(p_tenths // e_tenths)):
            o_tenths = k * e_tenths
            if any(_collides(p_tenths, o_tenths, p2, o2) for p2, o2 in placed_tenths):
                continue
            s = o_tenths / 10.0
            q = _q_cyclic(_instants(placed + [(period, s)], horizon), horizon)
            if q < best_q - 1e-12:
                best_q, best_slot = q, s
        if best_slot is None:
            raise OversubscribedError(
                f"no collision-free grid offset for period {period} at step {e}")
        offsets[idx] = best_slot
        placed.append((period, best_slot))
        placed_tenths.append((p_tenths, round(best_slot * 10)))
    return offsets


def allocate_gcd(periods_us: Sequence[float], ifs_us: float = 500.0) -> list[float]:
    """Occupancy-matrix allocation at a fixed minimum inter-frame space.

    Offset rows are spaced ifs_us apart within the fastest period; columns
    are the hyperperiod's windows of G = gcd(periods). A frame of period D
    claims every (D/G)-th window of one row, starting at a free window;
    its offset is row*ifs_us + start_window*G.
    """
    if ifs_us <= 0:
        raise ValueError("minimum spacing must be positive")
    if not periods_us:
        raise ValueError("empty period vector")
    ints = [round(p * 10) for p in periods_us]
    if any(v <= 0 for v in ints):
        raise ValueError("periods must be positive")
    g = 0
    lcm_v = 1
    for v in ints:
        g = math.gcd(g, v)
        lcm_v = math.lcm(lcm_v, v)
    ncols = lcm_v // g
    nrows = int(min(ints) // round(ifs_us * 10))
    if nrows < 1:
        raise OversubscribedError(f"spacing {ifs_us} us exceeds the fastest period")
    free = [[True] * ncols for _ in range(nrows)]
    offsets = [0.0] * len(periods_us)
    for idx, p_tenths in enumerate(ints):
        step = p_tenths // g
        count = lcm_v // p_tenths
        placed = False
        for j in range(nrows):
            row = free[j]
            for start in range(min(step, ncols)):
                cells = range(start, start + count * step, step)
                offset_tenths = round(j * ifs_us * 10) + start * g
                if offset_tenths >= p_tenths:
                    break  # larger starts only grow the offset
                if all(row[c] for c in cells):
                    for c in cells:
                        row[c] = False
                    offsets[idx] = offset_tenths / 10.0
                    placed = True
                    break
            if placed:
                break
        if not placed:
            usage = sum(1 for r in free for c in r if not c) / (nrows * ncols)
            raise OversubscribedError(
                f"occupancy matrix exhausted at period {periods_us[idx]} us "
                f"(matrix {usage:.0%} full; reduce --ifs or the frame count)")
    return offsets


ALLOCATORS = {
    "binary": allocate_binary_symmetric,
    "random": allocate_randomized,
    "greedy": allocate_greedy,
    "greedy-ml": allocate_greedy_multilayer,
    "gcd": allocate_gcd,
}


def build_schedule(specs: Sequence[FrameSpec], algorithm: str, *, ifs_us: float = 500.0,
                   grid_step_us: float | None = None, max_iterations: int = 100,
                   seed: int = 0, horizon_us: float | None = None) -> Schedule:
    """Run one allocator over the specs' periods and attach the offsets."""
    periods = [f.period_us for f in specs]
    if algorithm == "binary":
        offsets = allocate_binary_symmetric(periods)
    elif algorithm == "random":
        offsets = allocate_randomized(periods, max_iterations=max_iterations, seed=seed,
                                      horizon_us=horizon_us)
    elif algorithm == "greedy":
        offsets = allocate_greedy(periods, horizon_us=horizon_us)
    elif algorithm == "greedy-ml":
        offsets = allocate_greedy_multilayer(periods, grid_step_us=grid_step_us,
                                             horizon_us=horizon_us)
    elif algorithm == "gcd":
        offsets = allocate_gcd(periods, ifs_us=ifs_us)
    else:
        raise ValueError(f"unknown allocation algorithm {algorithm!r}")
    frames = tuple(FrameSpec(f.id, f.period_us, off, f.payload_bits)
                   for f, off in zip(specs, offsets))
    schedule = Schedule(frames, hyperperiod_us(periods) if horizon_us is None else horizon_us)
    # binary/randomized place offsets inside the fastest period only, which
    # cannot always de-collide vectors whose pairwise gcds are smaller
    if not check_complete(schedule):
        warnings.warn(f"{algorithm} allocation left coincident timestamps for this "
                      "period vector", stacklevel=2)
    return schedule

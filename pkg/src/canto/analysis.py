"""Post-hoc trace analytics for the covert timing channel.

Turns traces into per-ID deviation series, empirical channel matrices
(sent covert delay vs. decoded delay), success-rate tables for genuine
senders and blind adversaries, and channel capacity via the
Blahut-Arimoto iteration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from canto.bus_sim import Trace
from canto.frame_model import CanId
from canto.incanta import CovertConfig, covert_delay


class CapacityError(RuntimeError):
    """Blahut-Arimoto could not run or converge on the given matrix."""


def _arrivals(trace: Trace, compensate_frame_length: bool) -> dict[CanId, list]:
    """Per-ID (timestamp, counter, payload) triples in trace order.

    Compensation subtracts each frame's actual wire time, i.e. timestamps
    become start-of-frame instead of end-of-frame; that removes the
    stuff-bit length variation a receiver would otherwise see.
    """
    per_id: dict[CanId, list] = {}
    for fr in trace.frames:
        t = fr.bus_time_us if compensate_frame_length else fr.end_time_us
        per_id.setdefault(fr.id, []).append((t, fr.counter, fr.payload, fr.genuine))
    return per_id


def deviation_series(trace: Trace, periods_us: dict[CanId, float],
                     covert: CovertConfig | None = None,
                     compensate_frame_length: bool = True,
                     genuine_only: bool = True) -> dict[CanId, np.ndarray]:
    """Observed minus expected inter-arrival per same-ID consecutive pair.

    The expected spacing is the frame period (scaled by any counter gap)
    plus, when a covert configuration is given, the difference of the two
    covert delays.
    """
    out: dict[CanId, np.ndarray] = {}
    for can_id, rows in _arrivals(trace, compensate_frame_length).items():
        if can_id not in periods_us:
            raise KeyError(f"trace contains unknown id {can_id}")
        period = periods_us[can_id]
        devs = []
        prev = None
        for t, counter, payload, genuine in rows:
            if genuine_only and not genuine:
                prev = None
                continue
            xi = covert_delay(covert.key, counter, can_id, payload,
                              covert.level_bits) if covert is not None else 0
            if prev is not None:
                t0, c0, xi0 = prev
                devs.append((t - t0) - (period * (counter - c0) + xi - xi0))
            prev = (t, counter, xi)
        out[can_id] = np.asarray(devs, dtype=np.float64)
    return out


def extract_channel_matrix(trace: Trace, covert: CovertConfig,
                           periods_us: dict[CanId, float],
                           compensate_frame_length: bool = True,
                           min_samples_per_symbol: int = 100,
                           smoothing: float = 1e-9) -> np.ndarray:
    """Empirical row-stochastic matrix P[decoded | sent] over the delay alphabet.

    The decoder quantizes (observed inter-arrival - period + previous
    delay) to the nearest microsecond, clamped to [0, 2^l). Sparse rows
    are flagged and the whole matrix gets a tiny additive smoothing so
    later logarithms stay finite.
    """
    size = covert.window_us
    counts = np.zeros((size, size), dtype=np.float64)
    for can_id, rows in _arrivals(trace, compensate_frame_length).items():
        period = periods_us.get(can_id)
        if period is None:
            raise KeyError(f"trace contains unknown id {can_id}")
        prev = None
        for t, counter, payload, genuine in rows:
            if not genuine:
                prev = None
                continue
            xi = covert_delay(covert.key, counter, can_id, payload, covert.level_bits)
            if prev is not None:
                t0, c0, xi0 = prev
                decoded = round((t - t0) - period * (counter - c0) + xi0)
                counts[xi, min(max(decoded, 0), size - 1)] += 1.0
            prev = (t, counter, xi)
    row_totals = counts.sum(axis=1)
    if np.any(row_totals == 0):
        raise ValueError("no samples for some delay symbols; trace too short")
    if row_totals.min() < min_samples_per_symbol:
        warnings.warn(f"sparse channel matrix: thinnest row has {int(row_totals.min())} "
                      f"samples (< {min_samples_per_symbol}); rows are smoothed", stacklevel=2)
    counts += smoothing
    return counts / counts.sum(axis=1, keepdims=True)


def blahut_arimoto(matrix: np.ndarray, tolerance: float = 1e-9,
                   max_iterations: int = 10_000) -> tuple[float, int]:
    """Capacity of a discrete memoryless channel, in bits per use.

    Alternates the classic input-distribution update and stops when the
    capacity upper/lower bound gap drops below `tolerance` bits. Returns
    (capacity, iterations used).
    """
    p = np.asarray(matrix, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise CapacityError("channel matrix must be 2-D")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise CapacityError("channel matrix rows must be probability distributions")
    m = p.shape[0]
    r = np.full(m, 1.0 / m)
    log_p = np.where(p > 0, np.log(np.maximum(p, 1e-300)), 0.0)
    ln2 = math.log(2.0)
    for iteration in range(1, max_iterations + 1):
        q_y = r @ p
        # D(p(y|x) || q(y)) per input symbol
        div = np.sum(np.where(p > 0, p * (log_p - np.log(np.maximum(q_y, 1e-300))), 0.0), axis=1)
        lower = math.log(float(np.sum(r * np.exp(div))))
        upper = float(np.max(div))
        if upper - lower < tolerance * ln2:
            return lower / ln2, iteration
        r = r * np.exp(div)
        r /= r.sum()
    raise CapacityError(f"no convergence to {tolerance} bits within {max_iterations} iterations "
                        f"(bound gap {(upper - lower) / ln2:.3g} bits)")


def mc_adversary_rate(tolerance_us: float, level_bits: int = 8, frames: int = 1,
                      trials: int = 1_000_000, seed: int = 0) -> float:
    """Monte Carlo acceptance rate of blindly timed frames.

    Each trial draws the genuine covert delay uniformly from the alphabet
    and the adversary's timing uniformly over the delay window; a window
    of `frames` trials must pass entirely.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA77))))
    window = 1 << level_bits
    hits = 0
    chunk = max(1, min(trials, 4_000_000 // max(frames, 1)))
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        xi = rng.integers(0, window, size=(n, frames))
        adv = rng.uniform(0.0, window, size=(n, frames))
        ok = np.abs(adv - xi) <= tolerance_us
        hits += int(np.count_nonzero(ok.all(axis=1)))
        done += n
    return hits / trials


@dataclass
class SuccessTable:
    """Acceptance rates by tolerance (rows) and window length (columns)."""

    rho_us: tuple[float, ...]
    frames: tuple[int, ...]
    ecu: np.ndarray  # genuine acceptance, powered per window length
    adv: np.ndarray  # adversary acceptance per window, Monte Carlo

    def row(self, rho: float) -> tuple[np.ndarray, np.ndarray]:
        i = self.rho_us.index(rho)
        return self.ecu[i], self.adv[i]


def success_table(genuine_errors_us: np.ndarray, rho_set=(2.0, 3.0, 4.0, 5.0),
                  frame_counts=(1, 2, 3, 4, 6), level_bits: int = 8,
                  adv_trials: int = 1_000_000, seed: int = 0) -> SuccessTable:
    """Build the genuine/adversary success-rate table.

    Genuine rates come from the measured verification errors (fraction
    within each tolerance, raised to the window length); adversary rates
    come from per-window Monte Carlo.
    """
    errors = np.abs(np.asarray(genuine_errors_us, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("no genuine verification errors supplied")
    rho_set = tuple(float(r) for r in rho_set)
    frame_counts = tuple(int(k) for k in frame_counts)
    ecu = np.empty((len(rho_set), len(frame_counts)))
    adv = np.empty_like(ecu)
    for i, rho in enumerate(rho_set):
        p = float(np.mean(errors <= rho))
        for j, k in enumerate(frame_counts):
            ecu[i, j] = p ** k
            adv[i, j] = mc_adversary_rate(rho, level_bits, k, adv_trials, seed + j)
    return SuccessTable(rho_set, frame_counts, ecu, adv)


def histogram(series, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Counts over half-open bins of the given width, aligned to multiples
    of the width. Returns (bin start values, counts)."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    lo = math.floor(x.min() / bin_width)
    idx = np.floor(x / bin_width).astype(np.int64) - lo
    counts = np.bincount(idx)
    starts = (lo + np.arange(len(counts))) * bin_width
    return starts, counts

"""Per-node oscillator models and reference-clock offset metrics.

A node's clock is an ideal clock scaled by a ppm skew, quantized to the
timer tick (10 ns by default, counters count whole ticks so values are
floored), plus a per-event jitter draw. The reference-clock helpers turn
a recording of same-ID inter-arrivals into slope estimates against the
ideal, minimum, median or mean clock, and classify deliberately forced
tick-level period adjustments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Jitter:
    """Per-event timing noise, drawn in microseconds.

    Kinds: "none"; "uniform" (half_width); "gaussian" (sigma);
    "steps" -- rare +-step_us excursions (probability `prob` each side,
    interrupt-latency style) smeared by a +-spread_us/2 uniform component.
    The steps model is what the calibrated covert-channel scenarios use.
    """

    kind: str = "none"
    half_width_us: float = 0.0
    sigma_us: float = 0.0
    step_us: float = 2.0
    prob: float = 0.028
    spread_us: float = 0.7

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "gaussian", "steps"):
            raise ValueError(f"unknown jitter kind {self.kind!r}")
        if self.kind == "steps" and not 0 <= 2 * self.prob <= 1:
            raise ValueError("step probability out of range")

    @classmethod
    def none(cls) -> "Jitter":
        return cls("none")

    @classmethod
    def uniform(cls, half_width_us: float) -> "Jitter":
        return cls("uniform", half_width_us=half_width_us)

    @classmethod
    def gaussian(cls, sigma_us: float) -> "Jitter":
        return cls("gaussian", sigma_us=sigma_us)

    @classmethod
    def steps(cls, prob: float = 0.028, step_us: float = 2.0, spread_us: float = 0.7) -> "Jitter":
        return cls("steps", prob=prob, step_us=step_us, spread_us=spread_us)

    @classmethod
    def parse(cls, text: str) -> "Jitter":
        """Parse "none", "uniform:A", "gaussian:S" or "steps[:p,step,spread]"."""
        head, _, args = text.strip().partition(":")
        if head == "none":
            return cls.none()
        if head == "uniform":
            return cls.uniform(float(args))
        if head == "gaussian":
            return cls.gaussian(float(args))
        if head == "steps":
            if not args:
                return cls.steps()
            p, step, spread = (float(x) for x in args.split(","))
            return cls.steps(p, step, spread)
        raise ValueError(f"unknown jitter spec {text!r}")

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return float(rng.uniform(-self.half_width_us, self.half_width_us))
        if self.kind == "gaussian":
            return float(rng.normal(0.0, self.sigma_us))
        u = rng.random()
        level = -self.step_us if u < self.prob else self.step_us if u < 2 * self.prob else 0.0
        return level + float(rng.uniform(-self.spread_us / 2, self.spread_us / 2))

    @property
    def bound_us(self) -> float:
        """Hard support bound on |draw| (inf for gaussian)."""
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return self.half_width_us
        if self.kind == "steps":
            return self.step_us + self.spread_us / 2
        return math.inf


@dataclass(frozen=True)
class ClockModel:
    """Skewed, quantized oscillator: bus time = local * (1 + skew) floored
    to the tick grid, plus one jitter draw."""

    skew_ppm: float = 0.0
    tick_ns: int = 10
    jitter: Jitter = Jitter.none()

    def __post_init__(self):
        if self.tick_ns <= 0:
            raise ValueError("tick must be positive")
        if abs(self.skew_ppm) >= 1e4:
            raise ValueError("skew beyond +-10000 ppm is not an oscillator model")

    def local_to_bus_time(self, t_local_us: float, rng: np.random.Generator | None = None) -> float:
        if t_local_us < 0:
            raise ValueError("local time must be nonnegative")
        tick_us = self.tick_ns / 1000.0
        skewed = t_local_us * (1.0 + self.skew_ppm * 1e-6)
        quantized = math.floor(skewed / tick_us) * tick_us
        if rng is None or self.jitter.kind == "none":
            return quantized
        return quantized + self.jitter.draw(rng)


def reference_slope(inter_arrivals_us, kind: str, ideal_delta_us: float | None = None,
                    warmup: int | None = 100) -> float:
    """Per-step slope of a reference clock for a recording of inter-arrivals.

    kind "ideal" uses the configured constant delay; "min", "median" and
    "mean" derive the slope from the first `warmup` recorded values
    (100 by default, matching how such references are seeded in practice;
    None uses the whole recording).
    """
    rec = np.asarray(inter_arrivals_us, dtype=np.float64)
    if rec.size == 0:
        raise ValueError("empty recording")
    if kind == "ideal":
        if ideal_delta_us is None:
            raise ValueError("ideal reference needs the intended delay")
        return float(ideal_delta_us)
    head = rec if warmup is None else rec[:max(1, warmup)]
    if kind == "min":
        return float(head.min())
    if kind == "median":
        return float(np.median(head))
    if kind == "mean":
        return float(head.mean())
    raise ValueError(f"unknown reference clock kind {kind!r}")


def cumulative_offset(inter_arrivals_us, slope_us: float) -> np.ndarray:
    """Cumulative clock offset series: sum of inter-arrivals minus t*slope."""
    rec = np.asarray(inter_arrivals_us, dtype=np.float64)
    if rec.size == 0:
        raise ValueError("empty recording")
    t = np.arange(1, rec.size + 1, dtype=np.float64)
    return np.cumsum(rec) - t * slope_us


def forced_delay_ticks(base_period_us: float, ticks: int, tick_ns: int = 10) -> float:
    """Period adjusted by a signed number of timer ticks."""
    adjusted = base_period_us + ticks * tick_ns / 1000.0
    if adjusted <= 0:
        raise ValueError(f"adjustment {ticks} ticks leaves no positive period")
    return adjusted


DEFAULT_TICK_CLASSES = (-500, -250, -100, 0, 100, 250, 500)


def classify_forced_delay(inter_arrivals_us, base_period_us: float,
                          classes: tuple[int, ...] = DEFAULT_TICK_CLASSES,
                          tick_ns: int = 10) -> int:
    """Recover which forced tick adjustment a recording was sent with.

    The measured per-frame slope (mean inter-arrival minus the base
    period) is matched to the nearest class slope.
    """
    rec = np.asarray(inter_arrivals_us, dtype=np.float64)
    if rec.size == 0:
        raise ValueError("empty recording")
    slope = float(rec.mean()) - base_period_us
    tick_us = tick_ns / 1000.0
    return min(classes, key=lambda c: abs(slope - c * tick_us))

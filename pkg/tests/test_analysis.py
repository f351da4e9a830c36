"""Deviation series, channel matrices, capacity, success tables, histograms."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from canto.analysis import (CapacityError, blahut_arimoto, deviation_series,
                            extract_channel_matrix, histogram, mc_adversary_rate,
                            success_table)
from canto.bus_sim import BusConfig, NodeConfig, simulate
from canto.clock_model import ClockModel, Jitter
from canto.frame_model import CanId, FrameSpec
from canto.incanta import CovertConfig

MS = 1000.0
KEY = bytes(range(16))


def banded_matrix(n, width):
    """Uniform noise band of the given odd width, clamped at the edges."""
    m = np.zeros((n, n))
    half = width // 2
    for x in range(n):
        for d in range(-half, half + 1):
            m[x, min(max(x + d, 0), n - 1)] += 1.0 / width
    return m


class TestBlahutArimoto:
    def test_identity_256_is_8_bits(self):
        capacity, iters = blahut_arimoto(np.eye(256), tolerance=1e-9)
        assert abs(capacity - 8.0) < 1e-6
        assert iters >= 1

    def test_useless_symmetric_channel(self):
        capacity, _ = blahut_arimoto(np.full((2, 2), 0.5))
        assert abs(capacity) < 1e-9

    def test_25_symbol_noiseless(self):
        capacity, _ = blahut_arimoto(np.eye(25), tolerance=1e-9)
        assert capacity == pytest.approx(math.log2(25), abs=1e-9)

    def test_capacity_bounded_by_alphabet(self):
        rng = np.random.default_rng(0)
        for n in (2, 5, 17):
            m = rng.dirichlet(np.ones(n), size=n)
            capacity, _ = blahut_arimoto(m, tolerance=1e-7)
            assert -1e-9 <= capacity <= math.log2(n) + 1e-9

    def test_rank_one_channel_has_zero_capacity(self):
        row = np.random.default_rng(1).dirichlet(np.ones(8))
        capacity, _ = blahut_arimoto(np.tile(row, (8, 1)))
        assert abs(capacity) < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        m = banded_matrix(32, 5)
        base, _ = blahut_arimoto(m, tolerance=1e-6, max_iterations=100_000)
        rows, cols = rng.permutation(32), rng.permutation(32)
        permuted, _ = blahut_arimoto(m[rows][:, cols], tolerance=1e-6,
                                     max_iterations=100_000)
        assert permuted == pytest.approx(base, abs=1e-5)

    def test_noise_widening_lowers_capacity(self):
        caps = [blahut_arimoto(banded_matrix(64, w), tolerance=1e-4,
                               max_iterations=100_000)[0]
                for w in (1, 3, 5, 11)]
        assert all(a > b for a, b in zip(caps, caps[1:]))

    def test_rejects_non_stochastic(self):
        with pytest.raises(CapacityError):
            blahut_arimoto(np.ones((3, 3)))

    def test_non_convergence_raises(self):
        with pytest.raises(CapacityError, match="convergence"):
            blahut_arimoto(banded_matrix(64, 5), tolerance=1e-15, max_iterations=3)


class TestHistogram:
    def test_all_equal(self):
        starts, counts = histogram([0.0, 0.0, 0.0], 1.0)
        assert list(starts) == [0.0] and list(counts) == [3]

    def test_two_bins(self):
        starts, counts = histogram([0.4, 1.6], 1.0)
        assert list(starts) == [0.0, 1.0] and list(counts) == [1, 1]

    def test_negative_values_align_to_grid(self):
        starts, counts = histogram([-0.5, 0.5], 1.0)
        assert list(starts) == [-1.0, 0.0] and list(counts) == [1, 1]

    def test_uniform_within_binomial_bound(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 10, 100_000)
        _, counts = histogram(x, 1.0)
        sigma = math.sqrt(100_000 * 0.1 * 0.9)
        assert len(counts) == 10
        assert np.all(np.abs(counts - 10_000) <= 3 * sigma)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            histogram([1.0], 0.0)


def run_covert(jitter, duration_us, seed=3, stuffing="none", payload_mode="counter",
               skew_ppm=0.0):
    cov = CovertConfig(key=KEY, level_bits=8, tolerance_us=5.0)
    spec = FrameSpec(CanId(0x100), 10 * MS, 0.0, 64)
    clock = ClockModel(skew_ppm=skew_ppm, jitter=jitter)
    cfg = BusConfig((NodeConfig("ecu", clock, (spec,), cov),), duration_us,
                    seed=seed, stuffing=stuffing, payload_mode=payload_mode)
    return simulate(cfg), cov, {spec.id: spec.period_us}


class TestDeviationSeries:
    def test_zero_jitter_is_exactly_zero(self):
        trace, cov, periods = run_covert(Jitter.none(), 300 * MS)
        devs = deviation_series(trace, periods, cov)
        assert np.all(devs[CanId(0x100)] == 0.0)

    def test_unknown_id_raises(self):
        trace, cov, _ = run_covert(Jitter.none(), 300 * MS)
        with pytest.raises(KeyError):
            deviation_series(trace, {CanId(0x7): 10 * MS}, cov)

    def test_without_covert_config_sees_delay_spread(self):
        trace, _, periods = run_covert(Jitter.none(), 300 * MS)
        devs = deviation_series(trace, periods, covert=None)[CanId(0x100)]
        assert np.max(np.abs(devs)) > 50.0  # raw covert delays look like jitter

    def test_stuffing_variation_stays_within_ten_us(self):
        trace, cov, periods = run_covert(Jitter.none(), 2000 * MS, stuffing="payload")
        devs = deviation_series(trace, periods, cov, compensate_frame_length=False)
        assert 0.0 < np.max(np.abs(devs[CanId(0x100)])) <= 10.0

    def test_compensation_removes_stuffing_noise(self):
        trace, cov, periods = run_covert(Jitter.none(), 2000 * MS, stuffing="payload")
        devs = deviation_series(trace, periods, cov, compensate_frame_length=True)
        assert np.all(devs[CanId(0x100)] == 0.0)

    def test_calibrated_steps_jitter_matches_envelope(self):
        trace, cov, periods = run_covert(Jitter.steps(), 60_000 * MS)
        devs = deviation_series(trace, periods, cov)[CanId(0x100)]
        lo, hi = devs.min(), devs.max()
        assert -4.62 - 1.0 <= lo <= -4.62 + 1.0
        assert 4.87 - 1.0 <= hi <= 4.87 + 1.0


class TestChannelMatrix:
    def test_zero_jitter_gives_identity(self):
        trace, cov, periods = run_covert(Jitter.none(), 30_000 * MS)
        with pytest.warns(UserWarning, match="sparse"):
            m = extract_channel_matrix(trace, cov, periods)
        assert np.all(np.abs(m.sum(axis=1) - 1.0) < 1e-9)
        assert np.trace(m) == pytest.approx(256.0, abs=1e-3)

    def test_uniform_jitter_bands_rows(self):
        trace, cov, periods = run_covert(Jitter.uniform(1.0), 60_000 * MS)
        with pytest.warns(UserWarning, match="sparse"):
            m = extract_channel_matrix(trace, cov, periods)
        for x in range(1, 255):
            support = np.flatnonzero(m[x] > 1e-6)
            assert support.size <= 5
            assert np.all(np.abs(support - x) <= 2)

    def test_row_sums(self):
        trace, cov, periods = run_covert(Jitter.uniform(2.0), 30_000 * MS)
        with pytest.warns(UserWarning, match="sparse"):
            m = extract_channel_matrix(trace, cov, periods)
        assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


class TestSuccessTable:
    def test_ecu_rates_power_per_window(self):
        errors = np.array([0.0] * 90 + [3.5] * 10)
        table = success_table(errors, rho_set=(3.0, 5.0), frame_counts=(1, 2, 3),
                              adv_trials=10_000)
        ecu3, _ = table.row(3.0)
        assert ecu3 == pytest.approx([0.9, 0.81, 0.729])
        ecu5, _ = table.row(5.0)
        assert np.all(ecu5 == 1.0)

    def test_adv_rates_near_analytic(self):
        table = success_table(np.zeros(10), rho_set=(5.0,), frame_counts=(1,),
                              adv_trials=200_000, seed=1)
        _, adv = table.row(5.0)
        assert adv[0] == pytest.approx(2 * 5 / 256, abs=0.002)

    def test_empty_errors_rejected(self):
        with pytest.raises(ValueError):
            success_table(np.array([]))

    def test_mc_deterministic(self):
        a = mc_adversary_rate(5.0, 8, 2, 50_000, seed=9)
        b = mc_adversary_rate(5.0, 8, 2, 50_000, seed=9)
        assert a == b

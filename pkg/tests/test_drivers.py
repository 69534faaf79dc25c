import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from jumphjb.drivers import (
    DriverPath,
    MarkMeasure,
    TimeGrid,
    brownian_nodes,
    child_seed,
    compensated_integral,
    jump_counts_per_step,
    sample_brownian,
    sample_driver_path,
    sample_jumps,
)
from jumphjb.errors import NumericError


def measure_1atom(weight=2.0):
    return MarkMeasure.from_atoms([((1.0,), weight)])


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform(2.0, 4)
        assert g.n_steps == 4
        assert g.horizon == 2.0
        np.testing.assert_allclose(g.dt, 0.5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0]))
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.1, 0.5]))
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.5, 0.5]))

    def test_refine(self):
        g = TimeGrid.uniform(1.0, 3).refine(2)
        assert g.n_steps == 6
        np.testing.assert_allclose(g.dt, 1.0 / 6.0)


class TestMarkMeasure:
    def test_total_mass(self):
        m = MarkMeasure.from_atoms([((1.0,), 1.0), ((2.0,), 0.5)])
        assert m.total_mass == pytest.approx(1.5)
        assert m.n_atoms == 2

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            MarkMeasure.from_atoms([((1.0,), 0.0)])
        with pytest.raises(ValueError):
            MarkMeasure.from_atoms([((1.0,), -1.0)])

    def test_json_roundtrip(self):
        m = MarkMeasure.from_atoms([((1.0, -2.0), 0.7), ((0.5, 0.5), 1.3)])
        m2 = MarkMeasure.from_json(m.to_json())
        np.testing.assert_array_equal(m.marks, m2.marks)
        np.testing.assert_array_equal(m.weights, m2.weights)


class TestBrownian:
    def test_determinism(self):
        g = TimeGrid.uniform(1.0, 1)
        a = sample_brownian(g, 3, 123)
        b = sample_brownian(g, 3, 123)
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_d(self):
        with pytest.raises(ValueError):
            sample_brownian(TimeGrid.uniform(1.0, 2), 0, 1)

    def test_variance_concentration(self):
        # chi-square bound: with 1e4 pooled increments the sample
        # variance of N(0, dt) lies in [0.8 dt, 1.2 dt] w.p. >> 1-1e-6.
        dt = 0.001
        g = TimeGrid.uniform(1.0, 1000)
        incs = np.concatenate(
            [sample_brownian(g, 2, child_seed(7, r)) for r in range(10)], axis=0)
        v = incs.var(axis=0)
        assert np.all(v > 0.8 * dt) and np.all(v < 1.2 * dt)

    def test_mean_clt_bound(self):
        dt = 0.01
        g = TimeGrid.uniform(1.0, 100)
        incs = np.concatenate(
            [sample_brownian(g, 1, child_seed(11, r)) for r in range(1000)], axis=0)
        assert incs.size == 100000
        assert abs(incs.mean()) < 4.0 * np.sqrt(dt / incs.size)


class TestJumps:
    def test_empty_measure(self):
        times, atoms = sample_jumps(TimeGrid.uniform(1.0, 4), MarkMeasure.empty(), 5)
        assert times.size == 0 and atoms.size == 0

    def test_poisson_mean(self):
        g = TimeGrid.uniform(1.0, 4)
        m = measure_1atom(2.0)
        counts = np.array([
            sample_jumps(g, m, child_seed(3, r))[0].size for r in range(10000)])
        assert abs(counts.mean() - 2.0) < 3.0 * np.sqrt(2.0 / 10000)

    def test_mark_frequencies(self):
        g = TimeGrid.uniform(1.0, 4)
        m = MarkMeasure.from_atoms([((0.0,), 1.0), ((1.0,), 3.0)])
        picks = np.concatenate([
            sample_jumps(g, m, child_seed(9, r))[1] for r in range(3000)])
        freq = np.mean(picks == 0)
        se = np.sqrt(0.25 * 0.75 / picks.size)
        assert abs(freq - 0.25) < 4.0 * se

    def test_count_law_ks(self):
        # KS distance of the empirical count law to Poisson(T nu(E))
        # below the 1% critical value 1.63 / sqrt(M) at M = 1e4.
        g = TimeGrid.uniform(1.0, 4)
        m = measure_1atom(2.0)
        M = 10000
        counts = np.array([
            sample_jumps(g, m, child_seed(21, r))[0].size for r in range(M)])
        ks = np.max(np.abs(
            np.array([np.mean(counts <= k) for k in range(counts.max() + 1)])
            - stats.poisson.cdf(np.arange(counts.max() + 1), 2.0)))
        assert ks < 1.63 / np.sqrt(M)

    def test_times_in_range_sorted(self):
        g = TimeGrid.uniform(3.0, 5)
        times, _ = sample_jumps(g, measure_1atom(5.0), 1)
        assert np.all(times > 0) and np.all(times <= 3.0)
        assert np.all(np.diff(times) >= 0)


class TestDriverPath:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**63 - 1),
           n_steps=st.integers(min_value=1, max_value=40))
    def test_seed_determinism(self, seed, n_steps):
        g = TimeGrid.uniform(1.0, n_steps)
        m = measure_1atom(1.0)
        p1 = sample_driver_path(g, 2, m, seed)
        p2 = sample_driver_path(g, 2, m, seed)
        np.testing.assert_array_equal(p1.brownian_increments, p2.brownian_increments)
        np.testing.assert_array_equal(p1.jump_times, p2.jump_times)
        np.testing.assert_array_equal(p1.jump_atoms, p2.jump_atoms)

    def test_immutability(self):
        p = sample_driver_path(TimeGrid.uniform(1.0, 3), 1, measure_1atom(), 0)
        with pytest.raises(ValueError):
            p.brownian_increments[0, 0] = 1.0

    def test_jump_counts_per_step(self):
        g = TimeGrid.uniform(1.0, 4)
        m = measure_1atom(1.0)
        p = DriverPath(g, m, np.zeros((4, 1)),
                       np.array([0.1, 0.2, 0.3, 0.75, 1.0]),
                       np.array([0, 0, 0, 0, 0]))
        counts = jump_counts_per_step(p)
        # Events belong to (t_i, t_{i+1}]: two in step 0, one each after
        # (0.75 lands on the node, hence in step 2).
        np.testing.assert_array_equal(counts[:, 0], [2, 1, 1, 1])

    def test_brownian_nodes(self):
        p = sample_driver_path(TimeGrid.uniform(1.0, 6), 2, MarkMeasure.empty(), 4)
        w = brownian_nodes(p)
        np.testing.assert_allclose(w[-1], p.brownian_increments.sum(axis=0))
        np.testing.assert_array_equal(w[0], 0.0)


class TestCompensatedIntegral:
    def test_zero_integrand(self):
        p = sample_driver_path(TimeGrid.uniform(1.0, 8), 1, measure_1atom(2.0), 3)
        assert compensated_integral(p, None, lambda t, e: 0.0) == 0.0

    def test_unit_integrand(self):
        m = measure_1atom(2.0)
        p = sample_driver_path(TimeGrid.uniform(1.0, 8), 1, m, 3)
        v = compensated_integral(p, m, lambda t, e: 1.0)
        assert v == pytest.approx(p.n_jumps - 2.0)

    def test_linearity_in_constant(self):
        m = measure_1atom(2.0)
        p = sample_driver_path(TimeGrid.uniform(1.0, 8), 1, m, 3)
        base = compensated_integral(p, m, lambda t, e: 1.0)
        assert compensated_integral(p, m, lambda t, e: 2.5) == pytest.approx(2.5 * base)

    def test_martingale_zero_mean(self):
        m = measure_1atom(2.0)
        g = TimeGrid.uniform(1.0, 8)
        vals = np.array([
            compensated_integral(sample_driver_path(g, 1, m, child_seed(2, r)), m,
                                 lambda t, e: 1.0)
            for r in range(10000)])
        assert abs(vals.mean()) < 4.0 * vals.std() / np.sqrt(vals.size)

    def test_nonfinite_rejected(self):
        m = measure_1atom(2.0)
        p = sample_driver_path(TimeGrid.uniform(1.0, 8), 1, m, 3)
        with pytest.raises(NumericError):
            compensated_integral(p, m, lambda t, e: np.inf)

import itertools

import numpy as np
import pytest

from jumphjb.coefficients import ControlSet
from jumphjb.dpp import (
    FeedbackPolicy,
    Lattice,
    compute_value_table,
    dpp_residual,
    epsilon_optimal_control,
    evaluate_cost,
    gauss_hermite,
)
from jumphjb.drivers import MarkMeasure, TimeGrid
from jumphjb.errors import ConfigError
from jumphjb.forward import ConstantControl

from conftest import make_coeffs

MEAS = MarkMeasure.from_atoms([((1.0,), 0.4)])


def controlled_coeffs(**kw):
    kw.setdefault("b", lambda t, x, u, nz: u[:, 0:1] * np.ones_like(x))
    kw.setdefault("sigma", lambda t, x, u, nz: 0.3 * np.ones(x.shape + (1,)))
    kw.setdefault("g", lambda t, e, x, u, nz: 0.1 * np.ones_like(x))
    kw.setdefault("f", lambda t, x, u, y, z, k, nz: x[..., 0] ** 2 + 0.5 * u[:, 0] ** 2)
    kw.setdefault("h", lambda x, nz: x[..., 0] ** 2)
    kw.setdefault("rho", np.array([0.0]))
    return make_coeffs(**kw)


class TestGaussHermite:
    def test_moments(self):
        z, w = gauss_hermite(5, 1)
        assert w.sum() == pytest.approx(1.0)
        assert (w * z[:, 0] ** 2).sum() == pytest.approx(1.0)
        assert (w * z[:, 0] ** 4).sum() == pytest.approx(3.0)

    def test_tensor(self):
        z, w = gauss_hermite(3, 2)
        assert z.shape == (9, 2)
        assert (w * z[:, 0] * z[:, 1]).sum() == pytest.approx(0.0, abs=1e-12)


class TestLattice:
    def test_centers(self):
        lat = Lattice([0.0], [1.0], (4,))
        np.testing.assert_allclose(lat.axis_centers(0), [0.125, 0.375, 0.625, 0.875])

    def test_interpolation_affine_exact(self):
        lat = Lattice([-1.0, 0.0], [1.0, 2.0], (8, 6))
        centers = lat.centers()
        vals = (2.0 + 1.5 * centers[:, 0] - 0.5 * centers[:, 1]).reshape(lat.shape)
        pts = np.array([[0.11, 0.93], [-0.4, 1.2], [0.0, 1.0]])
        out, clamped = lat.interpolate(vals, pts)
        np.testing.assert_allclose(out, 2.0 + 1.5 * pts[:, 0] - 0.5 * pts[:, 1],
                                   atol=1e-12)
        assert clamped == 0

    def test_clamping_flagged(self):
        lat = Lattice([0.0], [1.0], (4,))
        vals = np.arange(4.0)
        out, clamped = lat.interpolate(vals, np.array([[5.0]]))
        assert clamped == 1 and out[0] == 3.0


class TestValueTable:
    def test_zero_dynamics_running_cost(self):
        co = make_coeffs(f=lambda t, x, u, y, z, k, nz: np.ones(np.shape(y)),
                         h=lambda x, nz: 2.0 * np.ones(x.shape[0]),
                         rho=np.array([0.0]))
        lat = Lattice([-2.0], [2.0], (15,))
        grid = TimeGrid.uniform(1.0, 10)
        tab = compute_value_table(co, ControlSet.from_1d(-1, 1, 2), lat, grid, MEAS)
        expect = 2.0 + (1.0 - grid.nodes)[:, None]
        assert np.max(np.abs(tab.values - expect)) < 1e-10

    def test_control_independent_matches_singleton(self):
        co = make_coeffs(f=lambda t, x, u, y, z, k, nz: np.ones(np.shape(y)),
                         h=lambda x, nz: x[..., 0] ** 2, rho=np.array([0.0]))
        lat = Lattice([-2.0], [2.0], (15,))
        grid = TimeGrid.uniform(1.0, 8)
        full = compute_value_table(co, ControlSet.from_1d(-1, 1, 4), lat, grid, MEAS)
        single = compute_value_table(co, ControlSet.singleton([0.7]), lat, grid, MEAS)
        np.testing.assert_array_equal(full.values, single.values)

    def test_superset_never_increases(self):
        co = controlled_coeffs()
        lat = Lattice([-2.0], [2.0], (15,))
        grid = TimeGrid.uniform(1.0, 8)
        u2 = ControlSet.from_1d(-1, 1, 2)
        u5 = ControlSet(np.concatenate([u2.atoms, [[0.0], [-0.5], [0.5]]]),
                        u2.lower, u2.upper)
        t2 = compute_value_table(co, u2, lat, grid, MEAS)
        t5 = compute_value_table(co, u5, lat, grid, MEAS)
        assert np.all(t5.values <= t2.values + 1e-12)

    def test_terminal_anchoring(self):
        co = controlled_coeffs()
        lat = Lattice([-2.0], [2.0], (15,))
        tab = compute_value_table(co, ControlSet.from_1d(-1, 1, 2), lat,
                                  TimeGrid.uniform(1.0, 4), MEAS)
        np.testing.assert_array_equal(
            tab.values[-1].ravel(), lat.centers()[:, 0] ** 2)

    def test_rejects_random_coefficients(self):
        co = controlled_coeffs(randomness_channels=("W1",))
        with pytest.raises(ConfigError):
            compute_value_table(co, ControlSet.from_1d(-1, 1, 2),
                                Lattice([-1.0], [1.0], (5,)),
                                TimeGrid.uniform(1.0, 2), MEAS)

    def test_argmin_tie_breaks_low_index(self):
        # Two identical control atoms: argmin must pick index 0.
        co = controlled_coeffs()
        u = ControlSet(np.array([[0.5], [0.5]]), [-1.0], [1.0])
        tab = compute_value_table(co, u, Lattice([-1.0], [1.0], (5,)),
                                  TimeGrid.uniform(1.0, 3), MEAS)
        assert np.all(tab.argmin == 0)

    def test_bit_reproducible(self):
        co = controlled_coeffs()
        args = (co, ControlSet.from_1d(-1, 1, 3), Lattice([-1.5], [1.5], (11,)),
                TimeGrid.uniform(1.0, 6), MEAS)
        t1 = compute_value_table(*args)
        t2 = compute_value_table(*args)
        np.testing.assert_array_equal(t1.values, t2.values)
        np.testing.assert_array_equal(t1.argmin, t2.argmin)


def enumerate_policy_optimum(co, control_set, lat, grid, measure):
    """Brute force over all feedback policies (step, cell) -> atom.

    Evaluates each policy with the same one-step quadrature as the
    table and minimizes; equals the DP recursion by the optimality
    principle.
    """
    n_cells = lat.shape[0]
    N = grid.n_steps
    centers = lat.centers()
    zeta, gw = gauss_hermite(5, 1)
    lam = measure.total_mass

    def one_step_values(i, u, v_next):
        t = float(grid.nodes[i])
        dt = float(grid.dt[i])
        ub = np.broadcast_to(np.atleast_1d(u), (n_cells, 1))
        b = co.b(t, centers, ub, None).reshape(n_cells)
        g = co.g(t, measure.marks[0], centers, ub, None).reshape(n_cells)
        sig = co.sigma(t, centers, ub, None).reshape(n_cells)
        base = centers[:, 0] + (b - measure.weights[0] * g) * dt
        e_val = np.zeros(n_cells)
        for q in range(zeta.shape[0]):
            xq = base + np.sqrt(dt) * sig * zeta[q, 0]
            vq, _ = lat.interpolate(v_next, xq[:, None])
            vj, _ = lat.interpolate(v_next, (xq + g)[:, None])
            e_val += gw[q] * ((1 - lam * dt) * vq + measure.weights[0] * dt * vj)
        v_here = v_next.ravel()
        v_shift, _ = lat.interpolate(v_next, centers + g[:, None])
        k = measure.weights[0] * 1.0 * (v_shift - v_here)
        f = co.f(t, centers, ub, e_val, None, k, None).reshape(n_cells)
        return e_val + dt * f

    best = None
    atoms = control_set.atoms
    for assignment in itertools.product(range(atoms.shape[0]),
                                        repeat=N * n_cells):
        table = np.array(assignment).reshape(N, n_cells)
        v = co.h(centers, None).reshape(n_cells).astype(float)
        for i in range(N - 1, -1, -1):
            v_new = np.empty(n_cells)
            for c in range(n_cells):
                v_new[c] = one_step_values(i, atoms[table[i, c]], v)[c]
            v = v_new
        best = v if best is None else np.minimum(best, v)
    return best


class TestPolicyEnumerationOracle:
    def test_table_equals_brute_force(self):
        # 1-d, 2 controls, 2 steps, 4 cells: 2^8 = 256 policies.
        co = controlled_coeffs(
            f=lambda t, x, u, y, z, k, nz: x[..., 0] ** 2 + u[:, 0] * x[..., 0])
        lat = Lattice([-1.0], [1.0], (4,))
        grid = TimeGrid.uniform(0.2, 2)
        u2 = ControlSet.from_1d(-1, 1, 2)
        tab = compute_value_table(co, u2, lat, grid, MEAS)
        brute = enumerate_policy_optimum(co, u2, lat, grid, MEAS)
        np.testing.assert_allclose(tab.values[0].ravel(), brute, atol=1e-12)


class TestFeedbackPolicy:
    def test_total_and_in_range(self):
        co = controlled_coeffs()
        lat = Lattice([-1.0], [1.0], (7,))
        tab = compute_value_table(co, ControlSet.from_1d(-1, 1, 3), lat,
                                  TimeGrid.uniform(1.0, 4), MEAS)
        pol = tab.policy()
        for x in np.linspace(-3, 3, 13):
            u = pol.value(2, 0.5, np.array([x]), None)
            assert -1.0 <= u[0] <= 1.0

    def test_rejects_bad_table(self):
        lat = Lattice([-1.0], [1.0], (3,))
        with pytest.raises(ValueError):
            FeedbackPolicy(lat, TimeGrid.uniform(1.0, 2),
                           ControlSet.from_1d(-1, 1, 2),
                           np.array([[5, 0, 0], [0, 0, 0]]))


class TestDppResidual:
    def test_zero_dynamics_zero_driver(self):
        co = make_coeffs(h=lambda x, nz: np.sin(x[..., 0]), rho=np.array([0.0]))
        lat = Lattice([-2.0], [2.0], (21,))
        grid = TimeGrid.uniform(1.0, 5)
        u2 = ControlSet.from_1d(-1, 1, 2)
        tab = compute_value_table(co, u2, lat, grid, MEAS)
        r = dpp_residual(co, u2, tab, MEAS, 1, [0.3], 2, 500, 3)
        assert r < 1e-6

    def test_control_independent_small(self):
        co = make_coeffs(
            sigma=lambda t, x, u, nz: 0.25 * np.ones(x.shape + (1,)),
            f=lambda t, x, u, y, z, k, nz: x[..., 0] ** 2,
            h=lambda x, nz: x[..., 0] ** 2,
            rho=np.array([0.0]))
        lat = Lattice([-3.0], [3.0], (120,))
        grid = TimeGrid.uniform(0.5, 25)
        u2 = ControlSet.from_1d(-1, 1, 2)
        tab = compute_value_table(co, u2, lat, grid, MEAS)
        r = dpp_residual(co, u2, tab, MEAS, 0, [0.0], 1, 40000, 3)
        assert r < 5e-3

    def test_full_horizon_consistency(self):
        # delta spanning the whole horizon on a control-independent
        # problem: min_u G_{0,T}[h] equals the table value within the
        # combined MC + lattice tolerance.
        co = make_coeffs(
            sigma=lambda t, x, u, nz: 0.3 * np.ones(x.shape + (1,)),
            g=lambda t, e, x, u, nz: 0.1 * np.ones_like(x),
            f=lambda t, x, u, y, z, k, nz: 0.2 * y,
            h=lambda x, nz: np.exp(-x[..., 0] ** 2),
            rho=np.array([0.0]))
        u2 = ControlSet.from_1d(-1, 1, 2)
        lat = Lattice([-3.0], [3.0], (160,))
        grid = TimeGrid.uniform(0.5, 25)
        tab = compute_value_table(co, u2, lat, grid, MEAS)
        r = dpp_residual(co, u2, tab, MEAS, 0, [0.0], grid.n_steps, 40000, 3)
        assert r < 5e-3

    def test_refinement_shrinks_residual(self):
        co = controlled_coeffs(
            b=lambda t, x, u, nz: 0.5 * np.tanh(x) + u[:, 0:1])
        u2 = ControlSet.from_1d(-0.5, 0.5, 2)
        residuals = []
        for level in range(2):
            k = 2 ** level
            lat = Lattice([-3.0], [3.0], (60 * k,))
            grid = TimeGrid.uniform(0.5, 10 * k)
            tab = compute_value_table(co, u2, lat, grid, MEAS)
            residuals.append(dpp_residual(co, u2, tab, MEAS, 0, [0.0], 1,
                                          40000, 3))
        assert residuals[1] <= 0.75 * residuals[0]


class TestEpsilonOptimal:
    def test_singleton_returns_it(self):
        co = controlled_coeffs()
        u1 = ControlSet.singleton([0.25])
        res = epsilon_optimal_control(co, u1, TimeGrid.uniform(0.5, 10), MEAS,
                                      Lattice([-2.0], [2.0], (81,)), 0, [0.0],
                                      0.05, 2000, 7)
        assert isinstance(res.control, ConstantControl)
        assert res.control.u[0] == 0.25
        assert abs(res.achieved_j - res.v_estimate) < 0.05 + res.ci_half_width

    def test_eps_inf_first_candidate(self):
        co = controlled_coeffs()
        res = epsilon_optimal_control(co, ControlSet.from_1d(-1, 1, 3),
                                      TimeGrid.uniform(0.5, 5), MEAS,
                                      Lattice([-2.0], [2.0], (15,)), 0, [0.0],
                                      np.inf, 200, 7)
        assert res.converged and len(res.evaluations) == 1

    def test_bang_bang_benchmark(self):
        co = controlled_coeffs(
            f=lambda t, x, u, y, z, k, nz: x[..., 0] ** 2 + u[:, 0] * x[..., 0])
        u2 = ControlSet.from_1d(-1, 1, 2)
        grid = TimeGrid.uniform(0.4, 8)
        lat = Lattice([-2.0], [2.0], (41,))
        tab = compute_value_table(co, u2, lat, grid, MEAS)
        res = epsilon_optimal_control(co, u2, grid, MEAS, lat, 0, [0.4],
                                      1e-2, 60000, 11, max_rounds=2)
        # Achieved cost within eps + CI of the lattice optimum.
        assert res.achieved_j <= tab.value_at(0, [0.4]) + 1e-2 + res.ci_half_width

    def test_budget_exhaustion_flag(self):
        co = controlled_coeffs()
        res = epsilon_optimal_control(co, ControlSet.from_1d(-1, 1, 2),
                                      TimeGrid.uniform(0.5, 5), MEAS,
                                      Lattice([-2.0], [2.0], (11,)), 0, [0.0],
                                      -1.0, 500, 7, max_rounds=1)
        assert not res.converged
        assert res.achieved_j < np.inf


class TestCostEvaluation:
    def test_reproducible(self):
        co = controlled_coeffs()
        grid = TimeGrid.uniform(0.5, 6)
        j1 = evaluate_cost(co, ConstantControl([0.3]), grid, MEAS, 0, [0.1], 500, 9)
        j2 = evaluate_cost(co, ConstantControl([0.3]), grid, MEAS, 0, [0.1], 500, 9)
        assert j1 == j2

    def test_zero_driver_constant_terminal(self):
        co = make_coeffs(h=lambda x, nz: 3.0 * np.ones(x.shape[0]),
                         rho=np.array([0.0]))
        j = evaluate_cost(co, ConstantControl([0.0]), TimeGrid.uniform(1.0, 5),
                          MEAS, 0, [0.0], 400, 2)
        assert j == pytest.approx(3.0, abs=1e-6)

    def test_deterministic_running_cost(self):
        co = make_coeffs(f=lambda t, x, u, y, z, k, nz: np.ones(np.shape(y)),
                         h=lambda x, nz: 3.0 * np.ones(x.shape[0]),
                         rho=np.array([0.0]))
        grid = TimeGrid.uniform(1.0, 5)
        j = evaluate_cost(co, ConstantControl([0.0]), grid, MEAS, 2, [0.0], 300, 2)
        assert j == pytest.approx(3.0 + (1.0 - grid.nodes[2]), abs=1e-6)

    def test_one_step_two_controls_matches_exhaustive(self):
        # One step, deterministic dynamics: J is computable by hand.
        co = make_coeffs(
            b=lambda t, x, u, nz: u[:, 0:1] * np.ones_like(x),
            f=lambda t, x, u, y, z, k, nz: 0.5 * u[:, 0] ** 2 * np.ones(np.shape(y)),
            h=lambda x, nz: x[..., 0] ** 2)
        grid = TimeGrid.uniform(0.5, 1)
        best = np.inf
        for u in (-1.0, 1.0):
            j = evaluate_cost(co, ConstantControl([u]), grid,
                              MarkMeasure.empty(), 0, [0.4], 50, 3)
            expect = (0.4 + 0.5 * u) ** 2 + 0.5 * 0.5 * u ** 2
            assert j == pytest.approx(expect, abs=1e-7)
            best = min(best, j)
        assert best == pytest.approx((0.4 - 0.5) ** 2 + 0.25, abs=1e-7)

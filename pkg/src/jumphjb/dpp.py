"""Desk-scale dynamic programming on a state lattice.

The conditional one-step expectation is a deterministic quadrature:
Gauss-Hermite nodes (5 per Brownian dimension) for the diffusion part,
an exact atomic sum with at most one jump per step for the Poisson part
(probability w_j dt for atom j, so the truncation error is O(dt^2)).
The jump compensator is folded into the drift exactly as in the forward
scheme, and the cost driver is applied explicitly:

    V_i(x) = min_u { E_u[V_{i+1}] + dt f(t_i, x, u, E_u[V_{i+1}], Z, k) }

with Z the quadrature estimate of the martingale slope and k the
l-weighted nonlocal increment of V_{i+1}.  Values live on cell centers;
off-lattice evaluations clamp to the boundary and are counted in the
report.  Argmin ties break to the lowest control index, so tables are
bit-reproducible.

These routines require deterministic coefficients (no randomness
channels); the stochastic case is handled by the Galerkin solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import PolynomialBasis, backward_semigroup, solve_bsde
from .coefficients import CoefficientSet, ControlSet
from .drivers import MarkMeasure, TimeGrid
from .errors import ConfigError, NumericError
from .forward import ConstantControl, Control, broadcast_control, simulate_batch

__all__ = [
    "Lattice",
    "ValueTable",
    "FeedbackPolicy",
    "compute_value_table",
    "evaluate_cost",
    "evaluate_cost_ci",
    "dpp_residual",
    "epsilon_optimal_control",
    "gauss_hermite",
]


def gauss_hermite(n_nodes: int, d: int):
    """Tensor Gauss-Hermite rule for a standard normal in R^d.

    Returns (nodes (K, d), probability weights (K,)).
    """
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / np.sqrt(2.0 * np.pi)
    nodes, weights = z[:, None], w
    for _ in range(d - 1):
        nodes = np.concatenate(
            [np.repeat(nodes, z.size, axis=0),
             np.tile(z, nodes.shape[0])[:, None]], axis=1)
        weights = np.outer(weights, w).ravel()
    return nodes, weights


@dataclass(frozen=True)
class Lattice:
    """Uniform cell-center lattice over a box in R^n."""

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        shape = tuple(int(s) for s in np.atleast_1d(self.shape))
        if lower.size != upper.size or lower.size != len(shape):
            raise ValueError("lattice box and shape dimensions disagree")
        if np.any(lower >= upper) or any(s < 1 for s in shape):
            raise ValueError("lattice box must be nonempty with >= 1 cell per dim")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "shape", shape)

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.shape)

    def axis_centers(self, k: int) -> np.ndarray:
        w = self.widths[k]
        return self.lower[k] + w * (np.arange(self.shape[k]) + 0.5)

    def centers(self) -> np.ndarray:
        """All cell centers, shape (n_cells, n), C-order over the grid."""
        axes = [self.axis_centers(k) for k in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def refine(self, factor: int = 2) -> "Lattice":
        return Lattice(self.lower, self.upper, tuple(s * factor for s in self.shape))

    def interpolate(self, values: np.ndarray, points: np.ndarray):
        """Multilinear interpolation at ``points`` (M, n) with clamping.

        Returns (interpolated (M,), number of clamped coordinates).
        Clamping keeps the scheme monotone: off-lattice points read the
        nearest boundary value.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(values, dtype=float).reshape(self.shape)
        M = points.shape[0]
        idx0 = np.empty((M, self.n), dtype=int)
        frac = np.empty((M, self.n))
        clamped = 0
        for k in range(self.n):
            c = self.axis_centers(k)
            x = points[:, k]
            out = (x < c[0]) | (x > c[-1])
            clamped += int(out.sum())
            if c.size == 1:
                idx0[:, k] = 0
                frac[:, k] = 0.0
                continue
            pos = (np.clip(x, c[0], c[-1]) - c[0]) / self.widths[k]
            i0 = np.clip(np.floor(pos).astype(int), 0, c.size - 2)
            idx0[:, k] = i0
            frac[:, k] = np.clip(pos - i0, 0.0, 1.0)
        out = np.zeros(M)
        for corner in range(1 << self.n):
            weight = np.ones(M)
            idx = []
            for k in range(self.n):
                hi = (corner >> k) & 1
                weight = weight * (frac[:, k] if hi else 1.0 - frac[:, k])
                upper_idx = np.minimum(idx0[:, k] + 1, self.shape[k] - 1)
                idx.append(upper_idx if hi else idx0[:, k])
            out += weight * vals[tuple(idx)]
        return out, clamped


@dataclass
class ValueTable:
    """Backward-recursion values and argmin controls on the lattice."""

    lattice: Lattice
    grid: TimeGrid
    control_set: ControlSet
    values: np.ndarray
    argmin: np.ndarray
    clamped_points: int = 0

    def value_at(self, t_node: int, x) -> float:
        v, _ = self.lattice.interpolate(self.values[t_node], np.atleast_2d(x))
        return float(v[0])

    def policy(self) -> "FeedbackPolicy":
        return FeedbackPolicy(self.lattice, self.grid, self.control_set, self.argmin)

    def to_csv(self, path) -> None:
        import csv
        centers = self.lattice.centers()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{k+1}" for k in range(self.lattice.n)]
                       + ["value", "argmin"])
            for i, t in enumerate(self.grid.nodes):
                flat = self.values[i].ravel()
                am = self.argmin[i].ravel() if i < self.argmin.shape[0] else None
                for c in range(centers.shape[0]):
                    w.writerow([repr(float(t))]
                               + [repr(float(v)) for v in centers[c]]
                               + [repr(float(flat[c])),
                                  int(am[c]) if am is not None else -1])


class FeedbackPolicy(Control):
    """Markov feedback policy: (time node, state cell) -> control atom.

    Off-lattice states use the nearest cell.  Total by construction:
    every cell of every time slice carries an atom index.
    """

    sample_independent = False

    def __init__(self, lattice: Lattice, grid: TimeGrid, control_set: ControlSet,
                 table: np.ndarray):
        self.lattice = lattice
        self.grid = grid
        self.control_set = control_set
        self.table = np.asarray(table, dtype=int)
        if self.table.shape[1:] != lattice.shape:
            raise ValueError("policy table shape does not match the lattice")
        if self.table.min() < 0 or self.table.max() >= control_set.n_atoms:
            raise ValueError("policy table entries must index control atoms")

    def cell_of(self, points: np.ndarray) -> tuple:
        points = np.atleast_2d(points)
        idx = []
        for k in range(self.lattice.n):
            c = self.lattice.axis_centers(k)
            i = np.round((points[:, k] - c[0]) / self.lattice.widths[k]).astype(int)
            idx.append(np.clip(i, 0, self.lattice.shape[k] - 1))
        return tuple(idx)

    def _slice(self, i: int) -> int:
        return min(i, self.table.shape[0] - 1)

    def value(self, i, t, x, noise):
        cell = self.cell_of(np.atleast_2d(x))
        return self.control_set.atoms[int(self.table[self._slice(i)][cell][0])]

    def value_batch(self, i, t, x, noise):
        cell = self.cell_of(x)
        return self.control_set.atoms[self.table[self._slice(i)][cell]]


def _require_deterministic(coeffs: CoefficientSet, who: str):
    if coeffs.is_random:
        raise ConfigError(
            f"{who} requires deterministic coefficients "
            f"(randomness channels {coeffs.randomness_channels!r} declared)")


def compute_value_table(coeffs: CoefficientSet, control_set: ControlSet,
                        lattice: Lattice, grid: TimeGrid, measure: MarkMeasure,
                        gh_nodes: int = 5) -> ValueTable:
    """Backward dynamic programming over the control grid U_h.

    The terminal slice is h on the cell centers exactly; each interior
    entry is the minimum over U_h of the one-step quadrature functional,
    with the argmin recorded (lowest index on ties).
    """
    _require_deterministic(coeffs, "compute_value_table")
    n, d = coeffs.n, coeffs.d
    if lattice.n != n:
        raise ConfigError("lattice dimension does not match the state dimension")
    lam = measure.total_mass
    max_dt = float(np.max(grid.dt))
    if lam * max_dt > 1.0:
        raise ConfigError(
            f"jump intensity {lam} times dt {max_dt} exceeds 1; refine the grid")

    X = lattice.centers()
    C = X.shape[0]
    zeta, gh_w = gauss_hermite(gh_nodes, d)
    N = grid.n_steps
    values = np.empty((N + 1,) + lattice.shape)
    argmin = np.empty((N,) + lattice.shape, dtype=int)

    hv = coeffs.h(X, None) if coeffs.vectorized else np.array(
        [float(coeffs.h(X[c], None)) for c in range(C)])
    values[N] = np.asarray(hv, dtype=float).reshape(lattice.shape)

    clamped = 0
    l_cache = {}
    for i in range(N - 1, -1, -1):
        t = float(grid.nodes[i])
        dt = float(grid.dt[i])
        v_next = values[i + 1]
        if i not in l_cache:
            l_cache[i] = np.array(
                [float(coeffs.l(t, mark)) for mark in measure.marks])
        l_vals = l_cache[i]
        best = None
        best_idx = None
        for iu, u in enumerate(control_set.atoms):
            b = _eval_cells(coeffs.b, coeffs, t, X, u, (n,))
            sig = _eval_cells(coeffs.sigma, coeffs, t, X, u, (n, d))
            gs = [
                _eval_cells(
                    lambda tt, xx, uu, nz, _m=measure.marks[j]: coeffs.g(tt, _m, xx, uu, nz),
                    coeffs, t, X, u, (n,))
                for j in range(measure.n_atoms)
            ]
            b_tilde = b.copy()
            for j, gj in enumerate(gs):
                b_tilde -= measure.weights[j] * gj
            base = X + b_tilde * dt

            e_val = np.zeros(C)
            z_val = np.zeros((C, d))
            sqdt = np.sqrt(dt)
            for q in range(zeta.shape[0]):
                x_cont = base + sqdt * (sig @ zeta[q])
                v_cont, cl = lattice.interpolate(v_next, x_cont)
                clamped += cl
                branch = (1.0 - lam * dt) * v_cont
                zq = v_cont * (1.0 - lam * dt)
                for j, gj in enumerate(gs):
                    v_jump, cl = lattice.interpolate(v_next, x_cont + gj)
                    clamped += cl
                    branch = branch + measure.weights[j] * dt * v_jump
                    zq = zq + measure.weights[j] * dt * v_jump
                e_val += gh_w[q] * branch
                z_val += (gh_w[q] / sqdt) * zq[:, None] * zeta[q][None, :]

            k_val = np.zeros(C)
            v_here = v_next.ravel()
            for j, gj in enumerate(gs):
                v_shift, cl = lattice.interpolate(v_next, X + gj)
                clamped += cl
                k_val += measure.weights[j] * l_vals[j] * (v_shift - v_here)

            if coeffs.vectorized:
                f_val = np.asarray(
                    coeffs.f(t, X, broadcast_control(u, C), e_val, z_val, k_val, None),
                    dtype=float,
                ).reshape(C)
            else:
                f_val = np.array([
                    float(coeffs.f(t, X[c], u, float(e_val[c]), z_val[c],
                                   float(k_val[c]), None))
                    for c in range(C)
                ])
            total = e_val + dt * f_val
            if best is None:
                best = total
                best_idx = np.zeros(C, dtype=int)
            else:
                better = total < best
                best = np.where(better, total, best)
                best_idx = np.where(better, iu, best_idx)
        values[i] = best.reshape(lattice.shape)
        argmin[i] = best_idx.reshape(lattice.shape)
        if not np.all(np.isfinite(values[i])):
            raise NumericError(f"value table became non-finite at node {i}")

    return ValueTable(lattice, grid, control_set, values, argmin, clamped)


def _eval_cells(fun, coeffs, t, X, u, out_shape):
    if coeffs.vectorized:
        ub = broadcast_control(u, X.shape[0])
        return np.asarray(fun(t, X, ub, None), dtype=float).reshape((X.shape[0],) + out_shape)
    return np.array([
        np.asarray(fun(t, X[c], u, None), dtype=float).reshape(out_shape)
        for c in range(X.shape[0])
    ])


def evaluate_cost(coeffs: CoefficientSet, control: Control, grid: TimeGrid,
                  measure: MarkMeasure, t_node: int, x, n_samples: int, seed,
                  basis: PolynomialBasis | None = None) -> float:
    """Cost J(t, x; u) = Y(t) of the BSDE along a fresh forward batch."""
    batch = simulate_batch(coeffs, control, np.atleast_1d(x), grid, measure,
                           n_samples, seed, start_node=t_node)
    sol = solve_bsde(coeffs, control, batch, basis, keep_paths=False)
    return sol.y0


def evaluate_cost_ci(coeffs: CoefficientSet, control: Control, grid: TimeGrid,
                     measure: MarkMeasure, t_node: int, x, n_samples: int, seed,
                     basis: PolynomialBasis | None = None, n_rep: int = 4):
    """Cost estimate with a half-width from independent replications."""
    vals = np.array([
        evaluate_cost(coeffs, control, grid, measure, t_node, x,
                      max(n_samples // n_rep, 2), (int(seed) + 1) * 1000 + r, basis)
        for r in range(n_rep)
    ])
    half = 2.0 * float(vals.std(ddof=1)) / np.sqrt(n_rep)
    return float(vals.mean()), half


def dpp_residual(coeffs: CoefficientSet, control_set: ControlSet,
                 table: ValueTable, measure: MarkMeasure, t_node: int, x,
                 delta_nodes: int, n_samples: int, seed,
                 basis: PolynomialBasis | None = None) -> float:
    """| V(t,x) - min_u G^{t,x;u}_{t,t+delta}[ V(t+delta, .) ] |.

    The inner semigroup runs the BSDE over [t, t+delta] with constant
    controls from U_h and the interpolated table slice as terminal
    data.  All controls share the seed (common random numbers).
    """
    grid = table.grid
    if t_node + delta_nodes > grid.n_steps:
        raise ConfigError("delta_nodes exceeds the table horizon")
    v_slice = table.values[t_node + delta_nodes]

    def eta(xv):
        v, _ = table.lattice.interpolate(v_slice, np.atleast_2d(xv))
        return float(v[0])

    best = np.inf
    for u in control_set.atoms:
        g_val = backward_semigroup(
            coeffs, ConstantControl(u), grid, measure, t_node, x, delta_nodes,
            eta, n_samples, seed, basis)
        best = min(best, g_val)
    return abs(table.value_at(t_node, x) - best)


@dataclass
class EpsilonOptimalResult:
    control: Control
    achieved_j: float
    ci_half_width: float
    v_estimate: float
    converged: bool
    rounds: int
    evaluations: list = field(default_factory=list)


def epsilon_optimal_control(coeffs: CoefficientSet, control_set: ControlSet,
                            grid: TimeGrid, measure: MarkMeasure,
                            lattice: Lattice, t_node: int, x, eps: float,
                            n_samples: int, seed,
                            max_rounds: int = 3,
                            basis: PolynomialBasis | None = None) -> EpsilonOptimalResult:
    """Search for a control with cost within eps of the estimated value.

    Rounds alternate candidate evaluation (constant controls from the
    current U_h, then the greedy feedback policy of a value table) with
    joint refinement of U_h and the lattice.  Stops as soon as the best
    Monte Carlo cost is below V_est + eps + CI; if the budget runs out
    the best candidate is returned flagged as not converged.
    """
    _require_deterministic(coeffs, "epsilon_optimal_control")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    evaluations = []
    best_j = np.inf
    best_ci = 0.0
    best_control: Control | None = None
    u_set = control_set
    lat = lattice
    v_est = np.inf
    rounds = 0

    for round_idx in range(max_rounds):
        rounds = round_idx + 1
        table = compute_value_table(coeffs, u_set, lat, grid, measure)
        v_est = table.value_at(t_node, x)
        candidates: list[tuple[str, Control]] = [
            (f"constant[{iu}]", ConstantControl(u))
            for iu, u in enumerate(u_set.atoms)
        ]
        candidates.append(("feedback", table.policy()))
        for name, cand in candidates:
            j, half = evaluate_cost_ci(
                coeffs, cand, grid, measure, t_node, x, n_samples, seed, basis)
            evaluations.append({"round": rounds, "candidate": name, "j": j, "ci": half})
            if j < best_j:
                best_j, best_ci, best_control = j, half, cand
            if best_j <= v_est + eps + best_ci:
                return EpsilonOptimalResult(
                    best_control, best_j, best_ci, v_est, True, rounds, evaluations)
        if u_set.n_atoms > 1:
            lo, hi = u_set.lower, u_set.upper
            k = min(2 * u_set.n_atoms - 1, 65)
            atoms = np.stack([
                np.linspace(lo[j], hi[j], k) for j in range(u_set.m)
            ], axis=1)
            u_set = ControlSet(atoms, lo, hi)
        lat = lat.refine(2)

    return EpsilonOptimalResult(
        best_control, best_j, best_ci, v_est, False, rounds, evaluations)

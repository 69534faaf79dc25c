"""Euler-Maruyama simulation of the controlled jump-diffusion.

Scheme.  Between events the state advances with drift and diffusion
frozen at the start of each sub-interval; the compensator of the jump
integral is folded into the drift,

    b_tilde = b - sum_j g(t, e_j, x, u) w_j,

so the discrete compensated jump term stays a martingale to O(dt).  Jump
events keep their exact times: a step containing events is split at the
event times, the Brownian increment of the step is allocated to the
pieces proportionally to their lengths, and at an event the state moves
by g evaluated at the pre-jump state.  Controls are step-constant,
evaluated at the left grid node.

The first-variation process propagates the exact Jacobian of this
discrete map (coefficient gradients by central differences), so a
bump-and-reprice under common random numbers reproduces it to finite
difference accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coefficients import (
    CoefficientSet,
    NoiseState,
    eval_b,
    eval_g,
    eval_sigma,
    jacobian_x,
)
from .drivers import DriverPath, MarkMeasure, TimeGrid, child_seed, sample_driver_path
from .errors import DivergenceError

__all__ = [
    "Control",
    "ConstantControl",
    "OpenLoopControl",
    "FeedbackControl",
    "StateTrajectory",
    "ForwardBatch",
    "simulate",
    "simulate_flow_gradient",
    "flow_property_residual",
    "moment_check",
    "simulate_batch",
    "trajectory_to_csv",
]

DIVERGENCE_GUARD = 1e8


class Control:
    """Step-constant admissible control.

    ``value(i, t, x, noise)`` returns the control applied on step i,
    chosen from the information available at the left endpoint.
    """

    sample_independent = True

    def value(self, i: int, t: float, x, noise):
        raise NotImplementedError

    def value_batch(self, i: int, t: float, x, noise):
        """Batched lookup; default loops over the sample axis."""
        if self.sample_independent:
            return self.value(i, t, x[0] if x.ndim > 1 else x, noise)
        return np.stack([
            self.value(i, t, x[s], _noise_row(noise, s)) for s in range(x.shape[0])
        ])


class ConstantControl(Control):
    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))

    def value(self, i, t, x, noise):
        return self.u


class OpenLoopControl(Control):
    """One control vector per grid step, shape (N, m)."""

    def __init__(self, values):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))

    def value(self, i, t, x, noise):
        return self.values[i]


class FeedbackControl(Control):
    """Markov feedback u = fn(t, x); set vectorized=True when fn broadcasts."""

    sample_independent = False

    def __init__(self, fn, m: int = 1, vectorized: bool = False):
        self.fn = fn
        self.m = m
        self.vectorized = vectorized

    def value(self, i, t, x, noise):
        return np.atleast_1d(np.asarray(self.fn(t, x), dtype=float))

    def value_batch(self, i, t, x, noise):
        if self.vectorized:
            out = np.asarray(self.fn(t, x), dtype=float)
            if out.ndim == 1:
                out = out[:, None]
            return out
        return super().value_batch(i, t, x, noise)


def _noise_row(noise, s):
    if noise is None:
        return None
    return NoiseState(noise.t, noise.channels, noise.values[s])


@dataclass(frozen=True)
class StateTrajectory:
    """Grid-aligned states plus post-jump states at event times.

    ``event_atom`` is -1 on grid rows and the atom index on event rows.
    ``controls[k]`` is the control in force from row k onward (the last
    row repeats the final step's control).  ``grid_rows`` maps grid node
    indices to row indices.
    """

    times: np.ndarray
    states: np.ndarray
    event_atom: np.ndarray
    controls: np.ndarray
    grid_rows: np.ndarray
    start_node: int

    def state_at_node(self, node: int) -> np.ndarray:
        return self.states[self.grid_rows[node - self.start_node]]

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]


class _NoiseTracker:
    """Running values of the declared randomness channels along one path."""

    def __init__(self, coeffs: CoefficientSet, path: DriverPath, start_node: int):
        self.channels = coeffs.randomness_channels
        self.mass = path.measure.total_mass
        self.w = np.zeros(path.d)
        if start_node > 0:
            self.w += path.brownian_increments[:start_node].sum(axis=0)
        t0 = path.grid.nodes[start_node]
        self.count = int(np.searchsorted(path.jump_times, t0, side="right"))
        self.w_idx = [int(c[1:]) - 1 for c in self.channels if c != "J"]
        self.has_j = "J" in self.channels

    def state(self, t: float) -> NoiseState | None:
        if not self.channels:
            return None
        vals = []
        wi = 0
        for c in self.channels:
            if c == "J":
                vals.append(self.count - t * self.mass)
            else:
                vals.append(self.w[self.w_idx[wi]])
                wi += 1
        return NoiseState(t, self.channels, np.array(vals))


def _events_in_step(path: DriverPath, i: int):
    lo = np.searchsorted(path.jump_times, path.grid.nodes[i], side="right")
    hi = np.searchsorted(path.jump_times, path.grid.nodes[i + 1], side="right")
    return path.jump_times[lo:hi], path.jump_atoms[lo:hi]


def _drift_tilde(coeffs: CoefficientSet, measure: MarkMeasure, t, x, u, noise):
    b = eval_b(coeffs, t, x, u, noise)
    for mark, w in zip(measure.marks, measure.weights):
        b = b - w * eval_g(coeffs, t, mark, x, u, noise)
    return b


def simulate(coeffs: CoefficientSet, control: Control, x0, path: DriverPath,
             start_node: int = 0, end_node: int | None = None) -> StateTrajectory:
    """Simulate the state along one noise realization.

    Deterministic given (coeffs, control, x0, path); aborts with
    :class:`DivergenceError` when |X| exceeds 1e8.
    """
    grid = path.grid
    measure = path.measure
    if end_node is None:
        end_node = grid.n_steps
    if not (0 <= start_node < end_node <= grid.n_steps):
        raise ValueError("need 0 <= start_node < end_node <= n_steps")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.size != coeffs.n or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite vector of length n")

    tracker = _NoiseTracker(coeffs, path, start_node)
    times = [grid.nodes[start_node]]
    states = [x.copy()]
    atoms = [-1]
    controls = []
    grid_rows = [0]

    for i in range(start_node, end_node):
        t_lo, t_hi = grid.nodes[i], grid.nodes[i + 1]
        dt = t_hi - t_lo
        u = np.atleast_1d(np.asarray(
            control.value(i, t_lo, x, tracker.state(t_lo)), dtype=float))
        ev_times, ev_atoms = _events_in_step(path, i)
        dw = path.brownian_increments[i]
        t_cur = t_lo
        for tau, a in zip(ev_times, ev_atoms):
            if tau > t_cur:
                frac = (tau - t_cur) / dt
                noise = tracker.state(t_cur)
                x = (x
                     + _drift_tilde(coeffs, measure, t_cur, x, u, noise) * (tau - t_cur)
                     + eval_sigma(coeffs, t_cur, x, u, noise) @ (dw * frac))
                tracker.w += dw * frac
                t_cur = tau
            noise = tracker.state(tau)
            x = x + eval_g(coeffs, tau, measure.marks[a], x, u, noise)
            tracker.count += 1
            times.append(tau)
            states.append(x.copy())
            atoms.append(int(a))
            controls.append(u)
        if t_hi > t_cur:
            frac = (t_hi - t_cur) / dt
            noise = tracker.state(t_cur)
            x = (x
                 + _drift_tilde(coeffs, measure, t_cur, x, u, noise) * (t_hi - t_cur)
                 + eval_sigma(coeffs, t_cur, x, u, noise) @ (dw * frac))
            tracker.w += dw * frac
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_GUARD:
            raise DivergenceError("state left the admissible range", i)
        times.append(t_hi)
        states.append(x.copy())
        atoms.append(-1)
        controls.append(u)
        grid_rows.append(len(times) - 1)

    controls.append(controls[-1] if controls else np.zeros(coeffs.m))
    return StateTrajectory(
        np.array(times), np.array(states), np.array(atoms, dtype=int),
        np.array(controls), np.array(grid_rows, dtype=int), start_node,
    )


def simulate_flow_gradient(coeffs: CoefficientSet, control: Control, x0,
                           path: DriverPath, start_node: int = 0,
                           end_node: int | None = None):
    """State trajectory together with the flow gradient dX/dx0.

    The gradient solves the linearized dynamics driven by D_x b, D_x
    sigma and D_x g along the same event schedule; it starts at the
    identity.  Returns (trajectory, gradients) with gradients aligned to
    the trajectory rows.  The control is treated as independent of the
    state (open-loop semantics).
    """
    grid = path.grid
    measure = path.measure
    if end_node is None:
        end_node = grid.n_steps
    if not (0 <= start_node < end_node <= grid.n_steps):
        raise ValueError("need 0 <= start_node < end_node <= n_steps")
    n = coeffs.n
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    jac = np.eye(n)

    tracker = _NoiseTracker(coeffs, path, start_node)
    times = [grid.nodes[start_node]]
    states = [x.copy()]
    atoms = [-1]
    controls = []
    grads = [jac.copy()]
    grid_rows = [0]

    def advance(t_cur, span, frac, dw, u):
        nonlocal x, jac
        noise = tracker.state(t_cur)
        sig = eval_sigma(coeffs, t_cur, x, u, noise)
        drift = _drift_tilde(coeffs, measure, t_cur, x, u, noise)
        d_drift = jacobian_x(
            lambda xx: _drift_tilde(coeffs, measure, t_cur, xx, u, noise), x, n)
        d_sig = jacobian_x(
            lambda xx: eval_sigma(coeffs, t_cur, xx, u, noise).ravel(),
            x, n * coeffs.d).reshape(n, coeffs.d, n)
        dw_part = dw * frac
        x_new = x + drift * span + sig @ dw_part
        jac = jac + span * (d_drift @ jac) + np.einsum(
            "c,acm,mk->ak", dw_part, d_sig, jac)
        x = x_new
        tracker.w += dw_part

    for i in range(start_node, end_node):
        t_lo, t_hi = grid.nodes[i], grid.nodes[i + 1]
        dt = t_hi - t_lo
        u = np.atleast_1d(np.asarray(
            control.value(i, t_lo, x, tracker.state(t_lo)), dtype=float))
        ev_times, ev_atoms = _events_in_step(path, i)
        dw = path.brownian_increments[i]
        t_cur = t_lo
        for tau, a in zip(ev_times, ev_atoms):
            if tau > t_cur:
                advance(t_cur, tau - t_cur, (tau - t_cur) / dt, dw, u)
                t_cur = tau
            noise = tracker.state(tau)
            mark = measure.marks[a]
            d_g = jacobian_x(
                lambda xx: eval_g(coeffs, tau, mark, xx, u, noise), x, n)
            x = x + eval_g(coeffs, tau, mark, x, u, noise)
            jac = (np.eye(n) + d_g) @ jac
            tracker.count += 1
            times.append(tau)
            states.append(x.copy())
            atoms.append(int(a))
            controls.append(u)
            grads.append(jac.copy())
        if t_hi > t_cur:
            advance(t_cur, t_hi - t_cur, (t_hi - t_cur) / dt, dw, u)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_GUARD:
            raise DivergenceError("state left the admissible range", i)
        times.append(t_hi)
        states.append(x.copy())
        atoms.append(-1)
        controls.append(u)
        grads.append(jac.copy())
        grid_rows.append(len(times) - 1)

    controls.append(controls[-1] if controls else np.zeros(coeffs.m))
    traj = StateTrajectory(
        np.array(times), np.array(states), np.array(atoms, dtype=int),
        np.array(controls), np.array(grid_rows, dtype=int), start_node,
    )
    return traj, np.array(grads)


def flow_property_residual(coeffs: CoefficientSet, control: Control, x,
                           t_node: int, tau_node: int, gamma_node: int,
                           path: DriverPath) -> float:
    """Max-abs gap between X^{t,x}(gamma) and the restart at tau.

    Both runs share the path, so the residual is exactly zero whenever
    tau and gamma are grid nodes: the scheme re-freezes coefficients at
    sub-interval starts, hence a restart reproduces every increment.
    """
    if not (0 <= t_node <= tau_node <= gamma_node <= path.grid.n_steps):
        raise ValueError("need t_node <= tau_node <= gamma_node as grid indices")
    full = simulate(coeffs, control, x, path, start_node=t_node, end_node=gamma_node)
    if tau_node == gamma_node:
        return 0.0
    x_tau = full.state_at_node(tau_node)
    restart = simulate(coeffs, control, x_tau, path,
                       start_node=tau_node, end_node=gamma_node)
    return float(np.max(np.abs(full.terminal_state - restart.terminal_state)))


@dataclass(frozen=True)
class ForwardBatch:
    """Grid-node data of a batch of simulated paths.

    ``states`` is (N+1, M, n); ``dw`` (N, M, d); ``jump_counts``
    (N, M, n_atoms); ``noise`` (N+1, M, r) or None when the coefficient
    set is deterministic.  ``controls[i]`` is the control on step i,
    shape (m,) when sample-independent else (M, m).
    """

    grid: TimeGrid
    measure: MarkMeasure
    states: np.ndarray
    dw: np.ndarray
    jump_counts: np.ndarray
    noise: np.ndarray | None
    controls: list
    start_node: int = 0
    sup_abs: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]

    def noise_state(self, node: int, channels) -> NoiseState | None:
        if self.noise is None:
            return None
        t = self.grid.nodes[self.start_node + node]
        return NoiseState(float(t), channels, self.noise[node])


def broadcast_control(u, batch_size: int) -> np.ndarray:
    """Normalize a control value to shape (batch_size, m).

    Vectorized coefficient callables always see batched controls, so
    family implementations need to handle a single layout.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim <= 1:
        return np.broadcast_to(np.atleast_1d(u), (batch_size, max(u.size, 1)))
    return u


def _eval_batch(fun, vectorized: bool, t, X, u, noise, out_shape):
    """Evaluate a coefficient on a batch of states."""
    M = X.shape[0]
    if vectorized:
        ub = broadcast_control(u, M)
        return np.asarray(fun(t, X, ub, noise), dtype=float).reshape((M,) + out_shape)
    out = np.empty((M,) + out_shape)
    for s in range(M):
        us = u[s] if (np.ndim(u) == 2) else u
        out[s] = np.asarray(fun(t, X[s], us, _noise_row(noise, s)), dtype=float).reshape(out_shape)
    return out


def simulate_batch(coeffs: CoefficientSet, control: Control, x0, grid: TimeGrid,
                   measure: MarkMeasure, n_samples: int, seed,
                   start_node: int = 0, end_node: int | None = None,
                   track_sup: bool = False) -> ForwardBatch:
    """Simulate ``n_samples`` i.i.d. paths with per-sample child seeds.

    Steps without jump events advance all samples in one vectorized
    update; steps containing events fall back to the exact per-path
    sub-stepping of :func:`simulate` for those samples only, so the
    result agrees with single-path simulation up to floating-point
    summation order.  ``start_node``/``end_node`` restrict the
    simulation to a sub-horizon of the grid.
    """
    M = int(n_samples)
    n, d = coeffs.n, coeffs.d
    if end_node is None:
        end_node = grid.n_steps
    if not (0 <= start_node < end_node <= grid.n_steps):
        raise ValueError("need 0 <= start_node < end_node <= n_steps")
    N = end_node - start_node
    n_atoms = measure.n_atoms
    r = len(coeffs.randomness_channels)

    est_bytes = 8.0 * M * (N + 1) * (n + 0) + 8.0 * M * N * (d + n_atoms + 0) + 8.0 * M * (N + 1) * r
    if est_bytes > 3.5e9:
        raise MemoryError(
            f"batch would need ~{est_bytes / 1e9:.1f} GB; reduce n_samples or steps"
        )

    dw = np.empty((N, M, d))
    jump_times = [None] * M
    jump_atoms = [None] * M
    w_start = np.zeros((M, d))
    for s in range(M):
        p = sample_driver_path(grid, d, measure, child_seed(seed, s))
        dw[:, s, :] = p.brownian_increments[start_node:end_node]
        if start_node > 0:
            w_start[s] = p.brownian_increments[:start_node].sum(axis=0)
        jump_times[s] = p.jump_times
        jump_atoms[s] = p.jump_atoms

    counts = np.zeros((N, M, n_atoms), dtype=np.int64) if n_atoms else np.zeros((N, M, 0), dtype=np.int64)
    for s in range(M):
        if jump_times[s].size:
            step_of = np.searchsorted(grid.nodes[1:-1], jump_times[s], side="left") - start_node
            keep = (step_of >= 0) & (step_of < N)
            np.add.at(counts, (step_of[keep], s, jump_atoms[s][keep]), 1)

    x0 = np.asarray(x0, dtype=float)
    states = np.empty((N + 1, M, n))
    states[0] = x0 if x0.ndim == 2 else np.broadcast_to(np.atleast_1d(x0), (M, n))

    noise = np.zeros((N + 1, M, r)) if r else None
    if noise is not None:
        w_run = w_start
        cnt_run = np.zeros(M)
        t0 = grid.nodes[start_node]
        for s in range(M):
            cnt_run[s] = np.searchsorted(jump_times[s], t0, side="right")
        noise[0] = _noise_values(coeffs, t0, w_run, cnt_run, measure.total_mass)

    sup_abs = np.linalg.norm(states[0], axis=1) if track_sup else None
    controls = []
    channels = coeffs.randomness_channels

    for i in range(N):
        gi = start_node + i
        t_lo = grid.nodes[gi]
        dt = grid.dt[gi]
        nstate = NoiseState(float(t_lo), channels, noise[i]) if noise is not None else None
        u = control.value_batch(i, t_lo, states[i], nstate)
        u = np.asarray(u, dtype=float)
        controls.append(u)

        X = states[i]
        b = _eval_batch(coeffs.b, coeffs.vectorized, t_lo, X, u, nstate, (n,))
        for j in range(n_atoms):
            gj = _eval_batch(
                lambda t, x, uu, nz, _mark=measure.marks[j]: coeffs.g(t, _mark, x, uu, nz),
                coeffs.vectorized, t_lo, X, u, nstate, (n,))
            b = b - measure.weights[j] * gj
        sig = _eval_batch(coeffs.sigma, coeffs.vectorized, t_lo, X, u, nstate, (n, d))
        states[i + 1] = X + b * dt + np.einsum("snd,sd->sn", sig, dw[i])

        if n_atoms:
            has_event = counts[i].sum(axis=1) > 0
            for s in np.nonzero(has_event)[0]:
                states[i + 1, s] = _single_step_with_events(
                    coeffs, measure, gi, grid, states[i, s],
                    u[s] if u.ndim == 2 else u,
                    dw[i, s], jump_times[s], jump_atoms[s],
                    _noise_row(nstate, s) if nstate is not None else None,
                    w_run[s] if noise is not None else None,
                    cnt_run[s : s + 1] if noise is not None else None,
                    sup_tracker=sup_abs[s : s + 1] if track_sup else None,
                )

        if not np.all(np.isfinite(states[i + 1])) or np.max(np.abs(states[i + 1])) > DIVERGENCE_GUARD:
            raise DivergenceError("batch state left the admissible range", gi)
        if track_sup:
            np.maximum(sup_abs, np.linalg.norm(states[i + 1], axis=1), out=sup_abs)
        if noise is not None:
            w_run += dw[i]
            if n_atoms:
                cnt_run += counts[i].sum(axis=1)
            noise[i + 1] = _noise_values(
                coeffs, grid.nodes[gi + 1], w_run, cnt_run, measure.total_mass)

    return ForwardBatch(grid, measure, states, dw, counts, noise, controls,
                        start_node, sup_abs)


def _noise_values(coeffs, t, w_run, cnt_run, mass):
    cols = []
    for c in coeffs.randomness_channels:
        if c == "J":
            cols.append(cnt_run - t * mass)
        else:
            cols.append(w_run[:, int(c[1:]) - 1])
    return np.stack(cols, axis=-1)


def _single_step_with_events(coeffs, measure, gi, grid, x, u, dw, jtimes, jatoms,
                             noise0, w_run, cnt_cell, sup_tracker=None):
    """Exact sub-stepping of one grid step for one sample with events."""
    t_lo, t_hi = grid.nodes[gi], grid.nodes[gi + 1]
    dt = t_hi - t_lo
    lo = np.searchsorted(jtimes, t_lo, side="right")
    hi = np.searchsorted(jtimes, t_hi, side="right")
    x = np.array(x, dtype=float)
    t_cur = t_lo
    w_local = np.zeros_like(dw)
    cnt_local = 0

    def noise_at(t):
        if noise0 is None:
            return None
        vals = []
        for c in coeffs.randomness_channels:
            if c == "J":
                vals.append((cnt_cell[0] + cnt_local) - t * measure.total_mass)
            else:
                k = int(c[1:]) - 1
                vals.append(w_run[k] + w_local[k])
        return NoiseState(float(t), coeffs.randomness_channels, np.array(vals))

    for k in range(lo, hi):
        tau, a = jtimes[k], jatoms[k]
        if tau > t_cur:
            frac = (tau - t_cur) / dt
            nz = noise_at(t_cur)
            x = (x + _drift_tilde(coeffs, measure, t_cur, x, u, nz) * (tau - t_cur)
                 + eval_sigma(coeffs, t_cur, x, u, nz) @ (dw * frac))
            w_local += dw * frac
            t_cur = tau
            if sup_tracker is not None:
                sup_tracker[0] = max(sup_tracker[0], float(np.linalg.norm(x)))
        nz = noise_at(tau)
        x = x + eval_g(coeffs, tau, measure.marks[a], x, u, nz)
        cnt_local += 1
        if sup_tracker is not None:
            sup_tracker[0] = max(sup_tracker[0], float(np.linalg.norm(x)))
    if t_hi > t_cur:
        frac = (t_hi - t_cur) / dt
        nz = noise_at(t_cur)
        x = (x + _drift_tilde(coeffs, measure, t_cur, x, u, nz) * (t_hi - t_cur)
             + eval_sigma(coeffs, t_cur, x, u, nz) @ (dw * frac))
    return x


@dataclass
class MomentReport:
    p: int
    x0_norms: np.ndarray
    moments: np.ndarray
    fitted_constant: float
    monotone: bool


def moment_check(coeffs: CoefficientSet, control: Control, x0, p: int,
                 n_samples: int, grid: TimeGrid, measure: MarkMeasure,
                 seed, x0_scales=(0.0, 0.5, 1.0, 2.0)) -> MomentReport:
    """Estimate E[sup_t |X|^p] over grid and event nodes and fit C_p.

    The constant is the largest ratio moment / (1 + |x0|^p) over a grid
    of scaled initial states; the report also notes whether the moment
    grows monotonically with |x0| (a sanity diagnostic, not a theorem).
    """
    if p < 2 or p % 2:
        raise ValueError("p must be an even integer >= 2")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    base = x0 if np.linalg.norm(x0) > 0 else np.ones_like(x0)
    norms, moments = [], []
    for scale in x0_scales:
        start = x0 + scale * base
        batch = simulate_batch(coeffs, control, start, grid, measure,
                               n_samples, seed, track_sup=True)
        norms.append(np.linalg.norm(start))
        moments.append(float(np.mean(batch.sup_abs ** p)))
    norms = np.array(norms)
    moments = np.array(moments)
    fitted = float(np.max(moments / (1.0 + norms ** p)))
    order = np.argsort(norms)
    monotone = bool(np.all(np.diff(moments[order]) >= -1e-9 * np.abs(moments[order][:-1])))
    return MomentReport(p, norms, moments, fitted, monotone)


def trajectory_to_csv(traj: StateTrajectory, path) -> None:
    """Columns: t, X_1..X_n, u_1..u_m, event (atom index or -1)."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"X_{k+1}" for k in range(n)]
                   + [f"u_{k+1}" for k in range(m)] + ["event"])
        for k in range(traj.times.size):
            w.writerow([repr(float(traj.times[k]))]
                       + [repr(float(v)) for v in traj.states[k]]
                       + [repr(float(v)) for v in traj.controls[k]]
                       + [int(traj.event_atom[k])])

"""Galerkin solvers for backward stochastic evolution equations with jumps.

The equation lives in the Gelfand triple H^1_0 subset L^2 subset H^{-1}
on a truncated interval [-L, L]:

    dY(t) = [ A(t) Y(t) + B(t) Z(t) + F(t, Y, Z, R) ] dt
            + Z(t) dW(t) + int_E R(t, e) mu~(de, dt),       Y(T) = xi,

with A the symmetric second-order part, <A w, phi> = 1/2 int <sigma^T
Dw, sigma^T Dphi> dx, and B the first-order coupling <B z, phi> = int
sigma_d z Dphi dx.  Well-posedness and the stability of the implicit
step rest on the super-parabolic inequality

    2 <A phi, phi> + lambda ||phi||_H^2 >= alpha ||phi||_V^2
                                           + ||B* phi||_H^2,

which in one dimension reduces to the pointwise bound
sigma_hat sigma_hat^T >= alpha on the first d-1 diffusion columns
(identity 2<A phi, phi> - ||B* phi||^2 = int sigma_hat sigma_hat^T
|Dphi|^2 dx; checked numerically by the coercivity validator).

Projection onto the first n_b sine modes turns the equation into a
finite BSDE system in the coordinates.  Time stepping is implicit in A
and explicit in B and F, so the stiff part never restricts the step.
Randomness is carried by a recombining scenario lattice: a binomial
walk for the carried Brownian channel times at-most-one-jump-per-step
atom branches, under which Z and R are conditional-covariance
projections exactly as in the regression solver.  Nonlinear equations
are solved by Picard iteration, freezing (Y, Z, R) inside F and
solving the linear equation until the successive difference in the
mixed norm sup_t E||.||_H^2 + int E||.||_V^2 dt falls below tolerance.

The stochastic HJB equation in divergence form is recovered by the
specific nonlinearity assembled in :func:`solve_hjb_weak`: transport
and reaction terms, the compensated nonlocal jump terms, the driver,
and a pointwise infimum over the control grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, ControlSet, NoiseState
from .drivers import MarkMeasure, TimeGrid
from .errors import ConfigError, NotConvergedError, NumericError
from .forward import broadcast_control
from .pide import RandomFieldTriplet, SpatialGrid

__all__ = [
    "GelfandTriple",
    "OperatorPair",
    "BseejSolution",
    "BinomialJumpTree",
    "assemble_triple",
    "assemble_operators",
    "check_coercivity",
    "CoercivityReport",
    "solve_linear_bseej",
    "solve_nonlinear_bseej",
    "continuous_dependence_check",
    "energy_identity_residual",
    "weak_residual",
    "solve_hjb_weak",
    "WeakHjbResult",
]

ORTHONORMALITY_TOL = 1e-10


@dataclass(frozen=True)
class GelfandTriple:
    """Sine basis and quadrature on [-L, L] (one spatial dimension).

    Modes phi_k(x) = sqrt(1/L) sin(k pi (x + L) / (2L)) vanish on the
    boundary and are orthonormal in L^2; the V-norm of mode k is
    1 + (k pi / 2L)^2.  Reconstructions extend by zero outside the
    interval, the natural H^1_0 extension.
    """

    length: float
    n_modes: int
    quad_x: np.ndarray
    quad_w: np.ndarray
    basis_q: np.ndarray
    dbasis_q: np.ndarray
    mass: np.ndarray
    stiffness: np.ndarray

    @property
    def n_quad(self) -> int:
        return self.quad_x.size

    def eval_basis(self, x) -> np.ndarray:
        """Basis values at arbitrary points, zero outside [-L, L]."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.arange(1, self.n_modes + 1)
        inside = (x >= -self.length) & (x <= self.length)
        arg = k[None, :] * np.pi * (x[:, None] + self.length) / (2.0 * self.length)
        out = np.sqrt(1.0 / self.length) * np.sin(arg)
        out[~inside] = 0.0
        return out

    def eval_dbasis(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.arange(1, self.n_modes + 1)
        inside = (x >= -self.length) & (x <= self.length)
        freq = k * np.pi / (2.0 * self.length)
        arg = freq[None, :] * (x[:, None] + self.length)
        out = np.sqrt(1.0 / self.length) * freq[None, :] * np.cos(arg)
        out[~inside] = 0.0
        return out

    def project(self, values_at_quad: np.ndarray) -> np.ndarray:
        """L^2 projection coordinates of a function given at quad points."""
        rhs = self.basis_q.T @ (self.quad_w * values_at_quad)
        return np.linalg.solve(self.mass, rhs)

    def reconstruct(self, coords: np.ndarray, x) -> np.ndarray:
        return self.eval_basis(x) @ np.asarray(coords, dtype=float)

    def h_norm2(self, coords: np.ndarray) -> float:
        c = np.asarray(coords, dtype=float)
        return float(c @ self.mass @ c)

    def v_norm2(self, coords: np.ndarray) -> float:
        c = np.asarray(coords, dtype=float)
        return float(c @ (self.mass + self.stiffness) @ c)


def assemble_triple(length: float, n_dim: int, n_modes: int,
                    n_quad: int | None = None) -> GelfandTriple:
    """Build the sine-mode Gelfand triple on [-L, L].

    The quadrature is composite Gauss-Legendre with enough points that
    all assembled matrices are exact to well below 1e-10 for the
    trigonometric integrands (doubling the count moves nothing).
    """
    if n_dim != 1:
        raise ConfigError(
            "the Galerkin stack is one-dimensional at desk scale (n_dim=1)")
    if length <= 0 or n_modes < 1:
        raise ConfigError("need length > 0 and n_modes >= 1")
    if n_quad is None:
        n_quad = max(4 * n_modes + 32, 64)
    pts, wts = np.polynomial.legendre.leggauss(n_quad)
    quad_x = pts * length
    quad_w = wts * length
    k = np.arange(1, n_modes + 1)
    freq = k * np.pi / (2.0 * length)
    arg = freq[None, :] * (quad_x[:, None] + length)
    basis_q = np.sqrt(1.0 / length) * np.sin(arg)
    dbasis_q = np.sqrt(1.0 / length) * freq[None, :] * np.cos(arg)
    mass = basis_q.T @ (quad_w[:, None] * basis_q)
    stiffness = dbasis_q.T @ (quad_w[:, None] * dbasis_q)
    if np.max(np.abs(mass - np.eye(n_modes))) > ORTHONORMALITY_TOL:
        raise NumericError(
            "basis failed the orthonormality check; increase n_quad")
    return GelfandTriple(float(length), int(n_modes), quad_x, quad_w,
                         basis_q, dbasis_q, mass, stiffness)


@dataclass(frozen=True)
class OperatorPair:
    """Time-indexed Galerkin matrices of the evolution operators.

    ``A[i]``, ``B[i]`` act at step i (left time node); ``bstar_gram[i]``
    is the exact H Gram of B* phi = sigma_d D phi, and ``hat_gram[i]``
    the Gram weighted by sigma_hat sigma_hat^T, so the one-dimensional
    super-parabolicity identity reads 2A = bstar_gram + hat_gram.
    """

    A: np.ndarray
    B: np.ndarray
    bstar_gram: np.ndarray
    hat_gram: np.ndarray
    alpha: float
    lam: float

    @property
    def n_steps(self) -> int:
        return self.A.shape[0]

    def dump_csv(self, path) -> None:
        """Long-format dump of the assembled matrices for inspection."""
        import csv as _csv
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["step", "row", "col", "A", "B", "bstar_gram"])
            for i in range(self.n_steps):
                nb = self.A.shape[1]
                for r in range(nb):
                    for c in range(nb):
                        w.writerow([i, r, c,
                                    repr(float(self.A[i, r, c])),
                                    repr(float(self.B[i, r, c])),
                                    repr(float(self.bstar_gram[i, r, c]))])


def _sigma_at_quad(coeffs: CoefficientSet, t: float, triple: GelfandTriple,
                   u_ref: np.ndarray) -> np.ndarray:
    """Diffusion rows at the quadrature points, shape (Q, d)."""
    X = triple.quad_x[:, None]
    if coeffs.vectorized:
        sig = np.asarray(coeffs.sigma(
            t, X, broadcast_control(u_ref, X.shape[0]), None), dtype=float)
        return sig.reshape(X.shape[0], coeffs.d)
    return np.array([
        np.asarray(coeffs.sigma(t, X[q], u_ref, None), dtype=float).reshape(coeffs.d)
        for q in range(X.shape[0])
    ])


def assemble_operators(coeffs: CoefficientSet, triple: GelfandTriple,
                       time_grid: TimeGrid,
                       control_set: ControlSet | None = None) -> OperatorPair:
    """Quadrature assembly of A(t) and B(t) in the sine basis.

    Requires the diffusion to be control-free (checked against two
    control atoms when a control set is supplied) and deterministic;
    the last Brownian column sigma_d is the randomness carrier.
    """
    if coeffs.control_in_sigma:
        raise ConfigError("the weak pipeline needs control_in_sigma = False")
    if coeffs.n != 1:
        raise ConfigError("the Galerkin stack supports state dimension 1")
    u_ref = (control_set.atoms[0] if control_set is not None
             else np.zeros(coeffs.m))
    if control_set is not None and control_set.n_atoms > 1:
        t_probe = float(time_grid.nodes[0])
        s0 = _sigma_at_quad(coeffs, t_probe, triple, control_set.atoms[0])
        s1 = _sigma_at_quad(coeffs, t_probe, triple, control_set.atoms[-1])
        if np.max(np.abs(s0 - s1)) > 1e-12:
            raise ConfigError("sigma depends on the control; the weak "
                              "pipeline requires control_in_sigma = False")

    N = time_grid.n_steps
    nb = triple.n_modes
    A = np.empty((N, nb, nb))
    B = np.empty((N, nb, nb))
    bstar = np.empty((N, nb, nb))
    hat = np.empty((N, nb, nb))
    alpha = np.inf
    w = triple.quad_w
    for i in range(N):
        t = float(time_grid.nodes[i])
        sig = _sigma_at_quad(coeffs, t, triple, u_ref)
        a_full = np.sum(sig * sig, axis=1)
        sig_d = sig[:, -1]
        a_hat = a_full - sig_d ** 2
        A[i] = 0.5 * triple.dbasis_q.T @ ((w * a_full)[:, None] * triple.dbasis_q)
        B[i] = triple.dbasis_q.T @ ((w * sig_d)[:, None] * triple.basis_q)
        bstar[i] = triple.dbasis_q.T @ ((w * sig_d ** 2)[:, None] * triple.dbasis_q)
        hat[i] = triple.dbasis_q.T @ ((w * a_hat)[:, None] * triple.dbasis_q)
        alpha = min(alpha, float(a_hat.min()))
    alpha = max(alpha, 0.0)
    return OperatorPair(A, B, bstar, hat, alpha, alpha)


@dataclass
class CoercivityReport:
    passed: bool
    min_slack: float
    alpha: float
    lam: float
    identity_gap: float
    n_trials: int

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"[{verdict}] coercivity: min slack {self.min_slack:.3e} "
                f"(alpha={self.alpha}, lambda={self.lam}); "
                f"identity gap {self.identity_gap:.3e}")


def check_coercivity(pair: OperatorPair, triple: GelfandTriple, alpha: float,
                     lam: float, n_trials: int = 64, seed=0) -> CoercivityReport:
    """Verify the super-parabolic inequality on sampled directions.

    Tests every basis vector plus random unit combinations at every
    assembled time slice; passes when the minimum slack of

        2 <A phi, phi> + lambda ||phi||_H^2
            - alpha ||phi||_V^2 - ||B* phi||_H^2

    stays above -1e-10.  Also reports the defect of the exact identity
    2A - ||B*.||^2-Gram = sigma_hat-Gram, a quadrature cross-check.
    """
    rng = np.random.default_rng(seed)
    nb = triple.n_modes
    directions = [np.eye(nb)[k] for k in range(nb)]
    for _ in range(n_trials):
        c = rng.standard_normal(nb)
        directions.append(c / np.linalg.norm(c))
    mv = triple.mass + triple.stiffness
    min_slack = np.inf
    for i in range(pair.n_steps):
        for c in directions:
            slack = (2.0 * c @ pair.A[i] @ c + lam * (c @ triple.mass @ c)
                     - alpha * (c @ mv @ c) - c @ pair.bstar_gram[i] @ c)
            min_slack = min(min_slack, float(slack))
    identity_gap = float(np.max(np.abs(
        2.0 * pair.A - pair.bstar_gram - pair.hat_gram)))
    return CoercivityReport(min_slack >= -1e-10, min_slack, alpha, lam,
                            identity_gap, len(directions))


class BinomialJumpTree:
    """Recombining scenario lattice for the carried randomness channels.

    The Brownian channel W_d walks up or down by sqrt(dt) each step
    (probability 1/2 each); the jump channel places at most one event
    per step, atom j with probability w_j dt.  Because the coefficients
    read only the current values (W_d(t), compensated count), states
    recombine: a node at step i is (k, j) with k up-moves and j jumps,
    so the lattice stays polynomial in the horizon.  Counts are capped
    at ``j_cap`` (excess mass is parked on the cap, an O((lam T)^cap)
    truncation).
    """

    def __init__(self, grid: TimeGrid, measure: MarkMeasure, channels,
                 j_cap: int | None = None):
        dt = grid.dt
        if np.max(np.abs(dt - dt[0])) > 1e-12 * dt[0]:
            raise ConfigError("scenario lattices need a uniform time grid")
        self.grid = grid
        self.measure = measure
        self.channels = tuple(channels)
        bad = [c for c in self.channels if c not in ("J",) and not c.startswith("W")]
        if bad:
            raise ConfigError(f"unsupported scenario channels {bad}")
        self.dt = float(dt[0])
        lam = measure.total_mass
        if lam * self.dt > 1.0:
            raise ConfigError("jump intensity times dt exceeds 1; refine the grid")
        self.has_jumps = "J" in self.channels and measure.n_atoms > 0
        self.has_w = any(c.startswith("W") for c in self.channels)
        if j_cap is None:
            horizon_mean = lam * grid.horizon
            j_cap = int(np.ceil(horizon_mean + 4.0 * np.sqrt(horizon_mean + 1.0) + 2))
        self.j_cap = int(j_cap) if self.has_jumps else 0
        self._prob_cache = {0: np.ones(1)}

    def n_w(self, i: int) -> int:
        return (i + 1) if self.has_w else 1

    def n_j(self, i: int) -> int:
        return (min(i, self.j_cap) + 1) if self.has_jumps else 1

    def n_nodes(self, i: int) -> int:
        return self.n_w(i) * self.n_j(i)

    def node_states(self, i: int):
        """(k, j) pairs in node order (k-major)."""
        ks = np.repeat(np.arange(self.n_w(i)), self.n_j(i))
        js = np.tile(np.arange(self.n_j(i)), self.n_w(i))
        return ks, js

    def node_index(self, i: int, k, j):
        return k * self.n_j(i) + j

    def noise_values(self, i: int) -> np.ndarray:
        """Channel values per node at time node i, shape (n_nodes, r)."""
        t = float(self.grid.nodes[i])
        ks, js = self.node_states(i)
        cols = []
        for c in self.channels:
            if c == "J":
                cols.append(js - t * self.measure.total_mass)
            else:
                cols.append((2.0 * ks - i) * np.sqrt(self.dt)
                            if self.has_w else np.zeros(ks.size))
        return np.stack(cols, axis=-1) if cols else np.zeros((ks.size, 0))

    def probabilities(self, i: int) -> np.ndarray:
        """Forward node probabilities at time node i (cached)."""
        if i in self._prob_cache:
            return self._prob_cache[i]
        start = max(k for k in self._prob_cache if k <= i)
        full = self._prob_cache[start]
        for step in range(start, i):
            nxt = np.zeros(self.n_nodes(step + 1))
            for node, (children, probs, _, _) in enumerate(self.branches(step)):
                # children can repeat (capped jump count), so accumulate
                # unbuffered.
                np.add.at(nxt, children, full[node] * probs)
            full = nxt
            self._prob_cache[step + 1] = full
        return full

    def branches(self, i: int):
        """Per node: (child indices, probabilities, dW, jump atom or -1)."""
        lam = self.measure.total_mass
        dt = self.dt
        w = self.measure.weights
        out = []
        ks, js = self.node_states(i)
        sq = np.sqrt(dt)
        for k, j in zip(ks, js):
            children, probs, dws, atoms = [], [], [], []
            w_moves = [(k + 1, 0.5, sq), (k, 0.5, -sq)] if self.has_w \
                else [(0, 1.0, 0.0)]
            for k2, pw, dw in w_moves:
                if self.has_jumps:
                    children.append(self.node_index(i + 1, k2, j))
                    probs.append(pw * (1.0 - lam * dt))
                    dws.append(dw)
                    atoms.append(-1)
                    j2 = min(j + 1, self.j_cap)
                    for a in range(self.measure.n_atoms):
                        children.append(self.node_index(i + 1, k2, j2))
                        probs.append(pw * w[a] * dt)
                        dws.append(dw)
                        atoms.append(a)
                else:
                    children.append(self.node_index(i + 1, k2, 0))
                    probs.append(pw)
                    dws.append(dw)
                    atoms.append(-1)
            out.append((np.array(children), np.array(probs), np.array(dws),
                        np.array(atoms, dtype=int)))
        return out


@dataclass
class BseejSolution:
    """Coordinate solution of the (possibly scenario-indexed) system.

    ``y[i]`` has shape (n_nodes_i, n_b); ``z[i]`` and ``r[i]`` (shape
    (n_nodes_i, n_atoms, n_b)) are the martingale coordinates on step
    i.  Deterministic runs carry a single node per step.
    """

    grid: TimeGrid
    triple: GelfandTriple
    y: list
    z: list
    r: list
    scenario: BinomialJumpTree | None = None
    history: list = field(default_factory=list)
    converged: bool = True
    forcing_values: list | None = None

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def y0(self) -> np.ndarray:
        return self.y[0][0]

    def probabilities(self, i: int) -> np.ndarray:
        if self.scenario is None:
            return np.ones(1)
        return self.scenario.probabilities(i)

    def expected_h_norm2(self, i: int) -> float:
        p = self.probabilities(i)
        return float(np.sum(p * np.einsum(
            "nk,kl,nl->n", self.y[i], self.triple.mass, self.y[i])))

    def max_z_norm(self) -> float:
        return max((float(np.max(np.abs(z))) for z in self.z if z.size), default=0.0)

    def max_r_norm(self) -> float:
        return max((float(np.max(np.abs(r))) for r in self.r if r.size), default=0.0)


def _as_terminal(xi, triple, scenario, grid):
    n_nodes = 1 if scenario is None else scenario.n_nodes(grid.n_steps)
    if callable(xi):
        noise = (np.zeros((1, 0)) if scenario is None
                 else scenario.noise_values(grid.n_steps))
        out = np.asarray(xi(noise), dtype=float)
        return out.reshape(n_nodes, triple.n_modes)
    xi = np.asarray(xi, dtype=float).reshape(triple.n_modes)
    return np.broadcast_to(xi, (n_nodes, triple.n_modes)).copy()


def _as_forcing(f0, i, t, noise, n_nodes, nb):
    if f0 is None:
        return np.zeros((n_nodes, nb))
    if callable(f0):
        return np.asarray(f0(i, t, noise), dtype=float).reshape(n_nodes, nb)
    arr = np.asarray(f0, dtype=float)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (n_nodes, nb)).copy()
    return np.broadcast_to(arr[i], (n_nodes, nb)).copy()


def solve_linear_bseej(pair: OperatorPair, f0, xi, scenario: BinomialJumpTree | None,
                       time_grid: TimeGrid, triple: GelfandTriple) -> BseejSolution:
    """Backward stepping of the linear equation (forcing independent of Y).

    Implicit in A, explicit in B and the forcing; Z and R are the
    conditional covariances of the next-step coordinates against the
    Brownian increment and the compensated jump indicators.  With
    deterministic data the martingale coordinates vanish identically
    and the scheme is a deterministic implicit parabolic step.
    """
    N = time_grid.n_steps
    nb = triple.n_modes
    if pair.n_steps != N:
        raise ConfigError("operator pair and time grid disagree on step count")
    n_atoms = scenario.measure.n_atoms if (scenario is not None and scenario.has_jumps) else 0

    y = [None] * (N + 1)
    z = [None] * N
    r = [None] * N
    forcings = [None] * N
    y[N] = _as_terminal(xi, triple, scenario, time_grid)

    for i in range(N - 1, -1, -1):
        dt = float(time_grid.dt[i])
        t = float(time_grid.nodes[i])
        n_nodes = 1 if scenario is None else scenario.n_nodes(i)
        noise = None if scenario is None else scenario.noise_values(i)
        y_next = y[i + 1]

        if scenario is None:
            e_y = y_next
            z_i = np.zeros((1, nb))
            r_i = np.zeros((1, 0, nb))
        else:
            z_i = np.zeros((n_nodes, nb))
            r_i = np.zeros((n_nodes, n_atoms, nb))
            e_y = np.zeros((n_nodes, nb))
            branches = scenario.branches(i)
            mw = scenario.measure.weights
            for node, (children, probs, dws, atoms) in enumerate(branches):
                yc = y_next[children]
                e_y[node] = probs @ yc
                if scenario.has_w:
                    z_i[node] = (probs * dws) @ yc / dt
                for a in range(n_atoms):
                    ind = (atoms == a).astype(float) - mw[a] * dt
                    r_i[node, a] = (probs * ind) @ yc / (mw[a] * dt)

        forcing = _as_forcing(f0, i, t, noise, n_nodes, nb)
        forcings[i] = forcing
        rhs = e_y - dt * (z_i @ pair.B[i].T + forcing)
        step_matrix = np.eye(nb) + dt * pair.A[i]
        try:
            y[i] = np.linalg.solve(step_matrix, rhs.T).T
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(step_matrix)
            raise NumericError(
                f"singular implicit step at node {i} (cond ~ {cond:.2e})"
            ) from exc
        if not np.all(np.isfinite(y[i])):
            raise NumericError(f"coordinates became non-finite at node {i}")
        z[i] = z_i
        r[i] = r_i
    return BseejSolution(time_grid, triple, y, z, r, scenario,
                         forcing_values=forcings)


def _mixed_norm_sq(sol_a: BseejSolution, sol_b: BseejSolution | None,
                   triple: GelfandTriple, time_grid: TimeGrid):
    """sup_t E||dY||_H^2 and int E||dY||_V^2 dt of a (difference of) solution."""
    sup_h = 0.0
    int_v = 0.0
    mv = triple.mass + triple.stiffness
    for i in range(time_grid.n_steps + 1):
        d = sol_a.y[i] - (sol_b.y[i] if sol_b is not None else 0.0)
        p = sol_a.probabilities(i)
        h2 = float(np.sum(p * np.einsum("nk,kl,nl->n", d, triple.mass, d)))
        v2 = float(np.sum(p * np.einsum("nk,kl,nl->n", d, mv, d)))
        sup_h = max(sup_h, h2)
        if i < time_grid.n_steps:
            int_v += float(time_grid.dt[i]) * v2
    return sup_h, int_v


def solve_nonlinear_bseej(pair: OperatorPair, F, xi,
                          scenario: BinomialJumpTree | None,
                          time_grid: TimeGrid, triple: GelfandTriple,
                          tol: float = 1e-8, max_iter: int = 50) -> BseejSolution:
    """Picard iteration for the nonlinear equation.

    ``F(i, t, noise_values, y, z, r) -> (n_nodes, n_b)`` is evaluated on
    the frozen previous iterate and the resulting linear equation is
    solved; iteration stops when the relative successive difference in
    the mixed norm drops below ``tol``.  Raises
    :class:`NotConvergedError` (carrying the history and the last
    iterate) when ``max_iter`` is exhausted.
    """
    # Iterate 0 is the forcing-free linear solution; each pass freezes
    # the latest iterate inside F and re-solves the linear equation.
    current = solve_linear_bseej(pair, None, xi, scenario, time_grid, triple)
    history = []
    for _ in range(max_iter):
        frozen = current

        def forcing(i, t, noise, _frozen=frozen):
            return F(i, t, noise, _frozen.y[i], _frozen.z[i], _frozen.r[i])

        new = solve_linear_bseej(pair, forcing, xi, scenario, time_grid, triple)
        sup_h, int_v = _mixed_norm_sq(new, current, triple, time_grid)
        diff = np.sqrt(sup_h + int_v)
        ref_h, ref_v = _mixed_norm_sq(new, None, triple, time_grid)
        scale = max(np.sqrt(ref_h + ref_v), 1e-30)
        history.append(diff / scale)
        current = new
        if history[-1] < tol:
            current.history = history
            current.converged = True
            return current
    current.history = history
    current.converged = False
    raise NotConvergedError(
        f"Picard iteration did not reach tol={tol} in {max_iter} iterations",
        history=history, partial=current)


@dataclass
class DependenceReport:
    lhs_sup_h: float
    lhs_int_v: float
    lhs_int_z: float
    lhs_int_r: float
    rhs_xi: float
    rhs_forcing: float

    @property
    def lhs(self) -> float:
        return self.lhs_sup_h + self.lhs_int_v + self.lhs_int_z + self.lhs_int_r

    @property
    def rhs(self) -> float:
        return self.rhs_xi + self.rhs_forcing

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else np.inf


def continuous_dependence_check(sol: BseejSolution, sol_bar: BseejSolution,
                                F, F_bar, xi, xi_bar, triple: GelfandTriple,
                                time_grid: TimeGrid) -> DependenceReport:
    """Both sides of the stability estimate for two generator pairs.

    LHS: sup_t E||dY||_H^2 + int E||dY||_V^2 + int E||dZ||_H^2
    + int int E||dR||^2 nu(de) dt.  RHS: E||xi - xi_bar||_H^2
    + int E||F - F_bar||_H^2 dt with the forcing difference evaluated
    along the second solution.
    """
    scenario = sol.scenario
    sup_h, int_v = _mixed_norm_sq(sol, sol_bar, triple, time_grid)
    int_z = 0.0
    int_r = 0.0
    rhs_f = 0.0
    weights = (scenario.measure.weights if scenario is not None
               and scenario.has_jumps else np.zeros(0))
    for i in range(time_grid.n_steps):
        dt = float(time_grid.dt[i])
        t = float(time_grid.nodes[i])
        p = sol.probabilities(i)
        dz = sol.z[i] - sol_bar.z[i]
        int_z += dt * float(np.sum(p * np.einsum(
            "nk,kl,nl->n", dz, triple.mass, dz)))
        dr = sol.r[i] - sol_bar.r[i]
        for a in range(dr.shape[1]):
            int_r += dt * weights[a] * float(np.sum(p * np.einsum(
                "nk,kl,nl->n", dr[:, a], triple.mass, dr[:, a])))
        noise = None if scenario is None else scenario.noise_values(i)
        fa = _as_forcing_like(F, i, t, noise, sol_bar)
        fb = _as_forcing_like(F_bar, i, t, noise, sol_bar)
        df = fa - fb
        rhs_f += dt * float(np.sum(p * np.einsum(
            "nk,kl,nl->n", df, triple.mass, df)))
    xi_a = _as_terminal(xi, triple, scenario, time_grid)
    xi_b = _as_terminal(xi_bar, triple, scenario, time_grid)
    dxi = xi_a - xi_b
    p_T = sol.probabilities(time_grid.n_steps)
    rhs_xi = float(np.sum(p_T * np.einsum(
        "nk,kl,nl->n", dxi, triple.mass, dxi)))
    return DependenceReport(sup_h, int_v, int_z, int_r, rhs_xi, rhs_f)


def _as_forcing_like(F, i, t, noise, sol):
    if F is None:
        n_nodes = sol.y[i].shape[0]
        return np.zeros((n_nodes, sol.y[i].shape[1]))
    if callable(F):
        return np.asarray(F(i, t, noise, sol.y[i], sol.z[i], sol.r[i]),
                          dtype=float).reshape(sol.y[i].shape)
    if isinstance(F, list):
        return np.asarray(F[i], dtype=float).reshape(sol.y[i].shape)
    arr = np.asarray(F, dtype=float)
    target = sol.y[i].shape
    if arr.ndim == 1:
        return np.broadcast_to(arr, target).copy()
    return np.broadcast_to(arr[i], target).copy()


@dataclass
class EnergyReport:
    residual: float
    terminal_h2: float
    initial_h2: float
    drift_term: float
    z_term: float
    r_term: float


def energy_identity_residual(sol: BseejSolution, pair: OperatorPair, F,
                             triple: GelfandTriple,
                             time_grid: TimeGrid) -> EnergyReport:
    """Discrete defect of the squared-H-norm balance.

    The continuous identity gives

        E||xi||^2 - E||Y(0)||^2 = int [ 2 E<A Y + B Z + F, Y>
                                        + E||Z||^2
                                        + int E||R||^2 nu(de) ] dt;

    the report's residual is the difference of the two sides under the
    scheme's own left-point quadrature, which vanishes at first order
    in dt on smooth data.
    """
    scenario = sol.scenario
    N = time_grid.n_steps
    drift = z_term = r_term = 0.0
    weights = (scenario.measure.weights if scenario is not None
               and scenario.has_jumps else np.zeros(0))
    for i in range(N):
        dt = float(time_grid.dt[i])
        t = float(time_grid.nodes[i])
        p = sol.probabilities(i)
        y_i, z_i, r_i = sol.y[i], sol.z[i], sol.r[i]
        noise = None if scenario is None else scenario.noise_values(i)
        f_i = _as_forcing_like(F, i, t, noise, sol)
        gen = y_i @ pair.A[i].T + z_i @ pair.B[i].T + f_i
        drift += 2.0 * dt * float(np.sum(p * np.einsum(
            "nk,kl,nl->n", gen, triple.mass, y_i)))
        z_term += dt * float(np.sum(p * np.einsum(
            "nk,kl,nl->n", z_i, triple.mass, z_i)))
        for a in range(r_i.shape[1]):
            r_term += dt * weights[a] * float(np.sum(p * np.einsum(
                "nk,kl,nl->n", r_i[:, a], triple.mass, r_i[:, a])))
    terminal = sol.expected_h_norm2(N)
    initial = sol.expected_h_norm2(0)
    residual = (terminal - initial) - (drift + z_term + r_term)
    return EnergyReport(float(residual), terminal, initial, drift, z_term, r_term)


def weak_residual(sol: BseejSolution, pair: OperatorPair, F,
                  triple: GelfandTriple, time_grid: TimeGrid) -> float:
    """Max defect of the discrete weak form over basis functions.

    Checks, node by node, that the solved coordinates satisfy
    E_i[y_{i+1}] = y_i + dt (A y_i + B z_i + F_i); for the scheme's own
    output this is solver algebra and sits at rounding level.
    """
    scenario = sol.scenario
    worst = 0.0
    for i in range(time_grid.n_steps):
        dt = float(time_grid.dt[i])
        t = float(time_grid.nodes[i])
        noise = None if scenario is None else scenario.noise_values(i)
        f_i = _as_forcing_like(F, i, t, noise, sol)
        if scenario is None:
            e_y = sol.y[i + 1]
        else:
            e_y = np.zeros_like(sol.y[i])
            for node, (children, probs, _, _) in enumerate(scenario.branches(i)):
                e_y[node] = probs @ sol.y[i + 1][children]
        defect = e_y - sol.y[i] - dt * (
            sol.y[i] @ pair.A[i].T + sol.z[i] @ pair.B[i].T + f_i)
        worst = max(worst, float(np.max(np.abs(defect))))
    return worst


@dataclass
class WeakHjbResult:
    solution: BseejSolution
    pair: OperatorPair
    triple: GelfandTriple
    measure: MarkMeasure
    coercivity: CoercivityReport
    clamped: int

    def reconstruct_triplet(self, space: SpatialGrid) -> RandomFieldTriplet:
        """Point fields on a grid; scenario runs return expected fields.

        Psi always carries one field per measure atom (zeros when the
        run had no jump channel), matching the PIDE export schema.
        """
        xs = space.nodes()[:, 0]
        basis = self.triple.eval_basis(xs)
        N = self.solution.n_steps
        n_atoms = self.measure.n_atoms
        r_atoms = self.solution.r[0].shape[1] if N else 0
        V = np.zeros((N + 1,) + space.shape)
        Phi = np.zeros((N + 1, 1) + space.shape)
        Psi = np.zeros((N + 1, n_atoms) + space.shape)
        for i in range(N + 1):
            p = self.solution.probabilities(i)
            V[i] = (basis @ (p @ self.solution.y[i])).reshape(space.shape)
            if i < N:
                Phi[i, 0] = (basis @ (p @ self.solution.z[i])).reshape(space.shape)
                for a in range(r_atoms):
                    Psi[i, a] = (basis @ (p @ self.solution.r[i][:, a])).reshape(
                        space.shape)
        return RandomFieldTriplet(space, self.solution.grid.nodes, V, Phi, Psi)


def _coeff_batch(fun, coeffs, t, X, u, noise_vals, channels, out_shape):
    """Evaluate a coefficient on flattened (node, quad) points."""
    B = X.shape[0]
    nz = None
    if noise_vals is not None and len(channels):
        nz = NoiseState(float(t), channels, noise_vals)
    if coeffs.vectorized:
        ub = broadcast_control(u, B)
        return np.asarray(fun(t, X, ub, nz), dtype=float).reshape((B,) + out_shape)
    out = np.empty((B,) + out_shape)
    for s in range(B):
        nzs = None if nz is None else NoiseState(nz.t, nz.channels, nz.values[s])
        out[s] = np.asarray(fun(t, X[s], u, nzs), dtype=float).reshape(out_shape)
    return out


def solve_hjb_weak(coeffs: CoefficientSet, triple: GelfandTriple,
                   control_set: ControlSet, measure: MarkMeasure,
                   time_grid: TimeGrid, scenario: BinomialJumpTree | None = None,
                   tol: float = 1e-8, max_iter: int = 50,
                   require_coercivity: bool = True) -> WeakHjbResult:
    """Weak (Sobolev) solution of the stochastic HJB in divergence form.

    Assembles the transport/reaction/nonlocal/driver nonlinearity with
    the pointwise infimum over the control grid, verifies coercivity,
    and runs the Picard-Galerkin solver.  With deterministic
    coefficients the martingale fields vanish and the first component
    is comparable with the finite-difference PIDE solver on the shared
    interior.

    ``require_coercivity=False`` skips the super-parabolicity refusal;
    the implicit stepping itself tolerates a degenerate A (for example
    fully zero dynamics, where the solution is constant in time), but
    well-posedness for rough data is then no longer guaranteed.
    """
    if coeffs.is_random and scenario is None:
        raise ConfigError("random coefficients need a scenario model")
    if scenario is not None:
        extra = set(coeffs.randomness_channels) - set(scenario.channels)
        if extra:
            raise ConfigError(f"scenario model does not carry channels {extra}")
        allowed = {"J", f"W{coeffs.d}"}
        bad = set(coeffs.randomness_channels) - allowed
        if bad:
            raise ConfigError(
                f"the weak pipeline carries only W_d and jumps; got {bad}")

    pair = assemble_operators(coeffs, triple, time_grid, control_set)
    coercivity = check_coercivity(pair, triple, pair.alpha, pair.lam)
    if require_coercivity:
        if pair.alpha <= 0:
            raise ConfigError(
                "sigma_hat is degenerate (alpha = 0); the super-parabolic "
                "condition fails")
        if not coercivity.passed:
            raise ConfigError(f"coercivity check failed: {coercivity}")

    xq = triple.quad_x
    Q = xq.size
    X = xq[:, None]
    channels = coeffs.randomness_channels
    n_atoms = measure.n_atoms
    l_cache = {}
    clamp_count = [0]

    # Spatial derivative of sigma sigma^T and sigma_d by central
    # differences (sigma is deterministic and control-free here).
    def sigma_derivatives(t):
        u_ref = control_set.atoms[0]
        step = 1e-5 * (1.0 + np.abs(xq))
        sp = _sigma_at_quad_points(coeffs, t, (xq + step)[:, None], u_ref)
        sm = _sigma_at_quad_points(coeffs, t, (xq - step)[:, None], u_ref)
        s0 = _sigma_at_quad_points(coeffs, t, X, u_ref)
        a_p = np.sum(sp * sp, axis=1)
        a_m = np.sum(sm * sm, axis=1)
        da = (a_p - a_m) / (2.0 * step)
        dsd = (sp[:, -1] - sm[:, -1]) / (2.0 * step)
        return s0, da, dsd

    def _sigma_at_quad_points(co, t, pts, u_ref):
        if co.vectorized:
            return np.asarray(co.sigma(
                t, pts, broadcast_control(u_ref, pts.shape[0]), None),
                dtype=float).reshape(pts.shape[0], co.d)
        return np.array([
            np.asarray(co.sigma(t, pts[q], u_ref, None), dtype=float).reshape(co.d)
            for q in range(pts.shape[0])
        ])

    sig_cache = {}

    def hjb_forcing(i, t, noise_vals, y, z, r):
        n_nodes = y.shape[0]
        if i not in sig_cache:
            sig_cache[i] = sigma_derivatives(t)
        sig0, da_dx, dsd_dx = sig_cache[i]
        if i not in l_cache:
            l_cache[i] = np.array(
                [float(coeffs.l(t, mark)) for mark in measure.marks])
        l_vals = l_cache[i]

        w_q = y @ triple.basis_q.T          # (n_nodes, Q)
        dw_q = y @ triple.dbasis_q.T
        phi_q = z @ triple.basis_q.T
        # Psi components exist only when the scenario carries the jump
        # channel; deterministic runs have Psi identically zero.
        have_psi = r.shape[1] == n_atoms and n_atoms > 0
        psi_q = (np.einsum("nak,qk->naq", r, triple.basis_q)
                 if have_psi else None)

        flatX = np.broadcast_to(X, (n_nodes, Q, 1)).reshape(-1, 1)
        nz_vals = None
        if noise_vals is not None and len(channels):
            nz_vals = np.repeat(noise_vals, Q, axis=0)

        best = None
        for u in control_set.atoms:
            b = _coeff_batch(coeffs.b, coeffs, t, flatX, u, nz_vals,
                             channels, (1,)).reshape(n_nodes, Q)
            total = b * dw_q
            k_agg = np.zeros((n_nodes, Q))
            for a in range(n_atoms):
                mark = measure.marks[a]
                g = _coeff_batch(
                    lambda tt, xx, uu, nzz, _m=mark: coeffs.g(tt, _m, xx, uu, nzz),
                    coeffs, t, flatX, u, nz_vals, channels, (1,)
                ).reshape(n_nodes, Q)
                shifted = (np.broadcast_to(xq, (n_nodes, Q)) + g).ravel()
                outside = np.abs(shifted) > triple.length
                clamp_count[0] += int(outside.sum())
                basis_shift = triple.eval_basis(shifted).reshape(n_nodes, Q, -1)
                w_shift = np.einsum("nqk,nk->nq", basis_shift, y)
                inc = w_shift - w_q
                wgt = measure.weights[a]
                # transport compensation, nonlocal increments, driver slot
                total = total - wgt * g * dw_q
                total = total + wgt * inc
                if have_psi:
                    psi_shift = np.einsum("nqk,nk->nq", basis_shift, r[:, a])
                    total = total + wgt * (psi_shift - psi_q[:, a])
                    k_agg = k_agg + wgt * l_vals[a] * (inc + psi_shift)
                else:
                    k_agg = k_agg + wgt * l_vals[a] * inc
            z_slot = np.zeros((n_nodes, Q, coeffs.d))
            z_slot += sig0[None, :, :] * dw_q[..., None]
            z_slot[:, :, -1] += phi_q
            if coeffs.vectorized:
                f_val = np.asarray(coeffs.f(
                    t, flatX, broadcast_control(u, flatX.shape[0]),
                    w_q.ravel(), z_slot.reshape(-1, coeffs.d), k_agg.ravel(),
                    None if nz_vals is None else NoiseState(float(t), channels, nz_vals)),
                    dtype=float).reshape(n_nodes, Q)
            else:
                f_val = np.empty((n_nodes, Q))
                flat_w = w_q.ravel()
                flat_k = k_agg.ravel()
                flat_z = z_slot.reshape(-1, coeffs.d)
                for s in range(n_nodes * Q):
                    nzs = None
                    if nz_vals is not None:
                        nzs = NoiseState(float(t), channels, nz_vals[s])
                    f_val.ravel()[s] = float(coeffs.f(
                        t, flatX[s], u, float(flat_w[s]), flat_z[s],
                        float(flat_k[s]), nzs))
            total = total + f_val
            best = total if best is None else np.minimum(best, total)

        j1 = -da_dx[None, :] * dw_q - phi_q * dsd_dx[None, :]
        integrand = -(j1 + best)
        rhs = np.einsum("nq,qk->nk", integrand * triple.quad_w[None, :],
                        triple.basis_q)
        return np.linalg.solve(triple.mass, rhs.T).T

    def xi_fn(noise_vals):
        n_nodes = noise_vals.shape[0] if noise_vals is not None else 1
        out = np.empty((max(n_nodes, 1), triple.n_modes))
        for node in range(max(n_nodes, 1)):
            nz = None
            if noise_vals is not None and len(channels):
                nz = NoiseState(float(time_grid.horizon), channels,
                                np.broadcast_to(noise_vals[node], (Q, noise_vals.shape[1])))
            if coeffs.vectorized:
                hv = np.asarray(coeffs.h(X, nz), dtype=float).reshape(Q)
            else:
                hv = np.array([float(coeffs.h(X[q], None if nz is None else
                                              NoiseState(nz.t, nz.channels, nz.values[q])))
                               for q in range(Q)])
            out[node] = triple.project(hv)
        return out

    solution = solve_nonlinear_bseej(pair, hjb_forcing, xi_fn, scenario,
                                     time_grid, triple, tol, max_iter)
    return WeakHjbResult(solution, pair, triple, measure, coercivity,
                         clamp_count[0])

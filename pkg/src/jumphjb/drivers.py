"""Seeded Brownian and marked-Poisson noise generation.

The jump-mark measure is a finite list of weighted atoms, so every
integral against it reduces to an exact finite sum and all simulation
output is reproducible bit-for-bit from a 64-bit seed.  Per-sample
streams are derived with ``child_seed(seed, sample_index)`` which makes
batch generation independent of evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

__all__ = [
    "MarkMeasure",
    "TimeGrid",
    "DriverPath",
    "child_seed",
    "sample_brownian",
    "sample_jumps",
    "sample_driver_path",
    "compensated_integral",
    "jump_counts_per_step",
    "brownian_nodes",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def child_seed(seed, index: int) -> np.random.SeedSequence:
    """Derive the stream for one sample of a batch.

    Uses a spawn key rather than arithmetic on the seed, so streams for
    distinct indices never collide and the assignment does not depend on
    how many samples are drawn or in which order.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + (index,)
        )
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(index,))


@dataclass(frozen=True)
class MarkMeasure:
    """Finite jump-mark measure: weighted atoms in R^q.

    ``marks`` has shape (n_atoms, q), ``weights`` shape (n_atoms,) with
    strictly positive entries.  The total mass plays the role of the
    jump intensity of the driving Poisson point process.
    """

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        marks = np.atleast_2d(np.asarray(self.marks, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if marks.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{marks.shape[0]} marks but {weights.shape[0]} weights"
            )
        if weights.size and (not np.all(np.isfinite(weights)) or np.any(weights <= 0)):
            raise ValueError("atom weights must be finite and strictly positive")
        if marks.size and not np.all(np.isfinite(marks)):
            raise ValueError("atom marks must be finite")
        object.__setattr__(self, "marks", _readonly(marks))
        object.__setattr__(self, "weights", _readonly(weights))

    @property
    def n_atoms(self) -> int:
        return self.weights.shape[0]

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def empty(cls, mark_dim: int = 1) -> "MarkMeasure":
        return cls(np.zeros((0, mark_dim)), np.zeros(0))

    @classmethod
    def from_atoms(cls, atoms) -> "MarkMeasure":
        """Build from an iterable of (mark, weight) pairs."""
        atoms = list(atoms)
        if not atoms:
            return cls.empty()
        marks = np.array([np.atleast_1d(m) for m, _ in atoms], dtype=float)
        weights = np.array([w for _, w in atoms], dtype=float)
        return cls(marks, weights)

    def to_json(self) -> str:
        return json.dumps(
            {
                "atoms": [
                    {"mark": list(map(float, m)), "weight": float(w)}
                    for m, w in zip(self.marks, self.weights)
                ]
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MarkMeasure":
        data = json.loads(text)
        return cls.from_atoms((a["mark"], a["weight"]) for a in data["atoms"])


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes 0 = t_0 < ... < t_N."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        if nodes.size < 2:
            raise ValueError("a time grid needs at least one step")
        if nodes[0] != 0.0:
            raise ValueError("time grids start at 0")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("time nodes must be strictly increasing")
        object.__setattr__(self, "nodes", _readonly(nodes))

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0 or n_steps < 1:
            raise ValueError("need horizon > 0 and n_steps >= 1")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def refine(self, factor: int) -> "TimeGrid":
        """Split every step into ``factor`` equal pieces."""
        pieces = [
            np.linspace(a, b, factor + 1)[:-1]
            for a, b in zip(self.nodes[:-1], self.nodes[1:])
        ]
        return TimeGrid(np.append(np.concatenate(pieces), self.nodes[-1]))


@dataclass(frozen=True)
class DriverPath:
    """One realization of the driving noise on a time grid.

    ``brownian_increments`` has shape (N, d).  Jump events are kept at
    their exact times in (0, T] with an index into the measure's atoms;
    they are not snapped to grid nodes.
    """

    grid: TimeGrid
    measure: MarkMeasure
    brownian_increments: np.ndarray
    jump_times: np.ndarray
    jump_atoms: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.brownian_increments, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n_steps:
            raise ValueError(
                f"brownian_increments must be (n_steps, d), got {inc.shape}"
            )
        times = np.asarray(self.jump_times, dtype=float).ravel()
        atoms = np.asarray(self.jump_atoms, dtype=int).ravel()
        if times.shape != atoms.shape:
            raise ValueError("jump_times and jump_atoms must align")
        if times.size:
            if np.any(times <= 0) or np.any(times > self.grid.horizon):
                raise ValueError("jump times must lie in (0, T]")
            if np.any(np.diff(times) < 0):
                raise ValueError("jump times must be nondecreasing")
            if np.any(atoms < 0) or np.any(atoms >= self.measure.n_atoms):
                raise ValueError("jump atom index out of range")
        object.__setattr__(self, "brownian_increments", _readonly(inc))
        object.__setattr__(self, "jump_times", _readonly(times))
        atoms = np.ascontiguousarray(atoms)
        atoms.flags.writeable = False
        object.__setattr__(self, "jump_atoms", atoms)

    @property
    def d(self) -> int:
        return self.brownian_increments.shape[1]

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    @property
    def jump_events(self):
        """Sorted (time, atom_index) pairs."""
        return list(zip(self.jump_times.tolist(), self.jump_atoms.tolist()))


def sample_brownian(grid: TimeGrid, d: int, seed) -> np.ndarray:
    """Per-step increments of a d-dimensional Brownian motion.

    Step i is N(0, (t_{i+1} - t_i) I_d); the same seed reproduces the
    same array bit-for-bit.
    """
    if d < 1:
        raise ValueError("need d >= 1 Brownian components")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((grid.n_steps, d)) * np.sqrt(grid.dt)[:, None]


def sample_jumps(grid: TimeGrid, measure: MarkMeasure, seed):
    """Marked Poisson events on (0, T].

    The event count is Poisson(T * nu(E)); times are i.i.d. uniform and
    marks are drawn with probabilities proportional to the atom weights.
    Returns (times, atom_indices) sorted by time.
    """
    rng = np.random.default_rng(seed)
    if measure.n_atoms == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    horizon = grid.horizon
    count = int(rng.poisson(horizon * measure.total_mass))
    # 1 - U lies in (0, 1], keeping times strictly positive.
    times = horizon * (1.0 - rng.random(count))
    atoms = rng.choice(
        measure.n_atoms, size=count, p=measure.weights / measure.total_mass
    )
    order = np.argsort(times, kind="stable")
    return times[order], atoms[order]


def sample_driver_path(grid: TimeGrid, d: int, measure: MarkMeasure, seed) -> DriverPath:
    """Draw a full noise realization from one seed.

    The Brownian and jump parts use independent child streams so either
    half can be regenerated without the other.
    """
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    w_seed, j_seed = root.spawn(2)
    inc = sample_brownian(grid, d, w_seed)
    times, atoms = sample_jumps(grid, measure, j_seed)
    return DriverPath(grid, measure, inc, times, atoms)


def compensated_integral(path: DriverPath, measure: MarkMeasure | None, integrand) -> float:
    """Integral of ``integrand(t, mark)`` against the compensated jump measure.

    Events contribute their exact values; the compensator integral
    int_0^T sum_j phi(t, e_j) w_j dt is evaluated with left-point
    quadrature on the path's grid.
    """
    if measure is None:
        measure = path.measure
    total = 0.0
    for t, a in zip(path.jump_times, path.jump_atoms):
        v = float(integrand(float(t), measure.marks[a]))
        if not np.isfinite(v):
            raise NumericError(
                f"integrand returned {v!r} at event (t={t}, atom={a})"
            )
        total += v
    comp = 0.0
    for t, dt in zip(path.grid.nodes[:-1], path.grid.dt):
        for mark, w in zip(measure.marks, measure.weights):
            v = float(integrand(float(t), mark))
            if not np.isfinite(v):
                raise NumericError(
                    f"integrand returned {v!r} at (t={t}, mark={mark})"
                )
            comp += v * w * dt
    return total - comp


def jump_counts_per_step(path: DriverPath) -> np.ndarray:
    """Event counts per (step, atom), shape (N, n_atoms).

    A jump at time tau belongs to step i when t_i < tau <= t_{i+1}.
    """
    grid = path.grid
    counts = np.zeros((grid.n_steps, path.measure.n_atoms), dtype=int)
    if path.n_jumps:
        step_of = np.searchsorted(grid.nodes[1:-1], path.jump_times, side="left")
        np.add.at(counts, (step_of, path.jump_atoms), 1)
    return counts


def brownian_nodes(path: DriverPath) -> np.ndarray:
    """Brownian values W(t_i) at the grid nodes, shape (N+1, d)."""
    out = np.zeros((path.grid.n_steps + 1, path.d))
    np.cumsum(path.brownian_increments, axis=0, out=out[1:])
    return out

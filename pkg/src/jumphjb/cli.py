"""Experiment orchestration: config-driven subcommands with manifests.

Every run consumes a JSON config (seed required, no silent
nondeterminism), writes CSV/JSON artifacts plus a ``manifest.json``
carrying the config hash, the full config echo and library versions,
and exits 0 on success, 2 on config errors, 3 on numeric failures and
4 when an iterative solver did not converge.  Identical configs
reproduce byte-identical CSV output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bsde import PolynomialBasis, solve_bsde
from .coefficients import (
    SamplingPlan,
    validate_driver_monotonicity,
    validate_jump_nondegeneracy,
    validate_lipschitz,
)
from .dpp import Lattice, compute_value_table, dpp_residual
from .drivers import DriverPath, TimeGrid, child_seed, sample_driver_path
from .errors import (
    CflViolationError,
    ConfigError,
    DivergenceError,
    NotConvergedError,
    NumericError,
)
from .forward import ConstantControl, OpenLoopControl, simulate, simulate_batch, trajectory_to_csv
from .galerkin import (
    BinomialJumpTree,
    assemble_operators,
    assemble_triple,
    energy_identity_residual,
    solve_hjb_weak,
    solve_linear_bseej,
    weak_residual,
)
from .pide import SpatialGrid, solve_pide_deterministic, verification_run
from .problems import build_problem

SUBCOMMANDS = (
    "simulate", "bsde", "value", "dpp-check", "pide", "verify",
    "bseej", "hjb-weak", "convergence", "validate-assumptions",
)


def _fail(msg: str, field: str | None = None):
    raise ConfigError(msg, field)


def _need(cfg: dict, key: str, kind, path: str):
    if key not in cfg:
        _fail("missing required key", f"{path}.{key}")
    val = cfg[key]
    if kind is int and isinstance(val, bool):
        _fail("expected an integer", f"{path}.{key}")
    if not isinstance(val, kind):
        _fail(f"expected {getattr(kind, '__name__', kind)}", f"{path}.{key}")
    return val


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        _fail("expected an object", name)
    return sec


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        _fail(f"config file {path} not found", "config")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        _fail(f"invalid JSON: {exc}", "config")
    if not isinstance(cfg, dict):
        _fail("top level must be an object", "config")
    _need(cfg, "seed", int, "config")
    if not (0 <= cfg["seed"] < 2 ** 64):
        _fail("seed must be an unsigned 64-bit integer", "config.seed")
    return cfg


def _problem(cfg: dict):
    sec = _section(cfg, "problem")
    name = _need(sec, "name", str, "problem")
    params = sec.get("params", {})
    if not isinstance(params, dict):
        _fail("expected an object", "problem.params")
    return build_problem(name, params)


def _control_from(cfg_sec: dict, m: int):
    ctl = cfg_sec.get("control", {"type": "constant", "value": [0.0] * m})
    kind = ctl.get("type", "constant")
    if kind == "constant":
        return ConstantControl(ctl.get("value", [0.0] * m))
    if kind == "openloop":
        return OpenLoopControl(np.asarray(ctl["values"], dtype=float))
    _fail(f"unknown control type {kind!r}", "control.type")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                        else v for v in row])


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def run_simulate(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "simulate")
    n_steps = sec.get("n_steps", prob.n_steps)
    n_paths = sec.get("n_paths", 1)
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    control = _control_from(sec, prob.coeffs.m)
    outputs = []
    for k in range(n_paths):
        path = sample_driver_path(grid, prob.coeffs.d, prob.measure,
                                  child_seed(cfg["seed"], k))
        traj = simulate(prob.coeffs, control, prob.x0, path)
        name = f"trajectory_{k:03d}.csv"
        trajectory_to_csv(traj, out / name)
        outputs.append(name)
    return outputs


def run_bsde(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "bsde")
    n_steps = sec.get("n_steps", prob.n_steps)
    n_samples = sec.get("n_samples", 2000)
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    control = _control_from(sec, prob.coeffs.m)
    basis = PolynomialBasis(degree=sec.get("basis_degree", 3),
                            ridge=sec.get("ridge", 1e-8))
    batch = simulate_batch(prob.coeffs, control, prob.x0, grid, prob.measure,
                           n_samples, cfg["seed"])
    sol = solve_bsde(prob.coeffs, control, batch, basis)
    _write_json(out / "bsde_summary.json", sol.summary())
    rows = []
    for i in range(grid.n_steps + 1):
        row = [float(grid.nodes[i]), float(sol.Y[i].mean()), float(sol.Y[i].std())]
        if i < grid.n_steps:
            row += [float(v) for v in sol.Z[i].mean(axis=0)]
            row += [float(v) for v in sol.K[i].mean(axis=0)]
        else:
            row += [0.0] * (prob.coeffs.d + prob.measure.n_atoms)
        rows.append(row)
    header = (["t", "Y_mean", "Y_std"]
              + [f"Z{c+1}_mean" for c in range(prob.coeffs.d)]
              + [f"K{j+1}_mean" for j in range(prob.measure.n_atoms)])
    _write_csv(out / "bsde_solution.csv", header, rows)
    return ["bsde_summary.json", "bsde_solution.csv"]


def run_value(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "value")
    cells = sec.get("cells", prob.lattice_cells)
    box = sec.get("box", [prob.space_low, prob.space_high])
    n_steps = sec.get("n_steps", prob.n_steps)
    lat = Lattice([box[0]], [box[1]], (cells,))
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    table = compute_value_table(prob.coeffs, prob.control_set, lat, grid,
                                prob.measure)
    table.to_csv(out / "value_table.csv")
    _write_json(out / "value_report.json", {
        "V0": table.value_at(0, prob.x0),
        "clamped_points": table.clamped_points,
        "cells": cells,
        "n_steps": n_steps,
    })
    return ["value_table.csv", "value_report.json"]


def run_dpp_check(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "dpp_check")
    cells = sec.get("cells", prob.lattice_cells)
    box = sec.get("box", [prob.space_low, prob.space_high])
    n_steps = sec.get("n_steps", prob.n_steps)
    delta_nodes = sec.get("delta_nodes", 1)
    n_samples = sec.get("n_samples", 20000)
    t_node = sec.get("t_node", 0)
    x = np.asarray(sec.get("x", prob.x0.tolist()), dtype=float)
    lat = Lattice([box[0]], [box[1]], (cells,))
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    table = compute_value_table(prob.coeffs, prob.control_set, lat, grid,
                                prob.measure)
    res = dpp_residual(prob.coeffs, prob.control_set, table, prob.measure,
                       t_node, x, delta_nodes, n_samples, cfg["seed"])
    _write_json(out / "dpp_report.json", {
        "residual": res,
        "t_node": t_node,
        "x": [float(v) for v in x],
        "delta_nodes": delta_nodes,
        "V": table.value_at(t_node, x),
    })
    return ["dpp_report.json"]


def _pide_solution(cfg: dict, prob):
    sec = _section(cfg, "pide")
    nodes = sec.get("nodes", prob.space_nodes)
    box = sec.get("box", [prob.space_low, prob.space_high])
    n_steps = sec.get("n_steps", prob.n_steps)
    space = SpatialGrid([box[0]], [box[1]], (nodes,))
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    return solve_pide_deterministic(prob.coeffs, space, grid,
                                    prob.control_set, prob.measure)


def run_pide(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sol = _pide_solution(cfg, prob)
    sol.triplet.to_csv(out / "pide_field.csv")
    _write_json(out / "pide_report.json", {
        "V0": sol.value_at(0, prob.x0),
        "clamped_points": sol.clamped,
    })
    return ["pide_field.csv", "pide_report.json"]


def run_verify(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "verify")
    sol = _pide_solution(cfg, prob)
    rep = verification_run(
        sol.triplet, prob.coeffs, prob.control_set, prob.measure, prob.x0,
        sec.get("n_samples", 4000), cfg["seed"],
        n_alternatives=sec.get("n_alternatives", 4))
    (out / "verify_report.json").write_text(rep.to_json() + "\n")
    return ["verify_report.json"]


def run_bseej(cfg: dict, out: Path) -> list:
    sec = _section(cfg, "bseej")
    kind = sec.get("kind", "heat")
    length = sec.get("length", 2.0)
    n_modes = sec.get("modes", 8)
    n_steps = sec.get("n_steps", 200)
    horizon = sec.get("horizon", 1.0)
    sigma0 = sec.get("sigma", 1.0)
    triple = assemble_triple(length, 1, n_modes)
    grid = TimeGrid.uniform(horizon, n_steps)
    from .coefficients import CoefficientSet

    coeffs = CoefficientSet(
        n=1, d=1, m=1,
        b=lambda t, x, u, nz: np.zeros_like(x),
        sigma=lambda t, x, u, nz: sigma0 * np.ones(x.shape + (1,)),
        g=lambda t, e, x, u, nz: np.zeros_like(x),
        f=lambda t, x, u, y, z, k, nz: np.zeros(np.shape(y)),
        h=lambda x, nz: np.zeros(x.shape[0]),
        l=lambda t, e: 1.0, vectorized=True)
    pair = assemble_operators(coeffs, triple, grid)
    xi = np.zeros(n_modes)
    xi[0] = 1.0
    if kind == "heat":
        f0 = None
    elif kind == "integration":
        f0 = np.broadcast_to(sec.get("forcing", 0.3) * np.ones(n_modes),
                             (n_steps, n_modes)).copy()
    else:
        _fail(f"unknown bseej kind {kind!r}", "bseej.kind")
    sol = solve_linear_bseej(pair, f0, xi, None, grid, triple)
    energy = energy_identity_residual(sol, pair, f0, triple, grid)
    kappa = 0.5 * sigma0 ** 2 * (np.pi / (2 * length)) ** 2
    _write_json(out / "bseej_report.json", {
        "kind": kind,
        "y0": [float(v) for v in sol.y[0][0]],
        "first_mode_decay_target": float(np.exp(-kappa * horizon)),
        "energy_residual": energy.residual,
        "weak_residual": weak_residual(sol, pair, f0, triple, grid),
    })
    rows = [[float(grid.nodes[i])] + [float(v) for v in sol.y[i][0]]
            for i in range(n_steps + 1)]
    _write_csv(out / "bseej_coords.csv",
               ["t"] + [f"y_{k+1}" for k in range(n_modes)], rows)
    return ["bseej_report.json", "bseej_coords.csv"]


def run_hjb_weak(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "hjb_weak")
    n_modes = sec.get("modes", prob.galerkin_modes)
    length = sec.get("length", prob.galerkin_length)
    n_steps = sec.get("n_steps", max(prob.n_steps // 2, 10))
    triple = assemble_triple(length, 1, n_modes)
    grid = TimeGrid.uniform(prob.horizon, n_steps)
    scenario = None
    if prob.coeffs.is_random:
        channels = tuple(sorted(set(prob.coeffs.randomness_channels) | {"J"}))
        scenario = BinomialJumpTree(grid, prob.measure, channels)
    res = solve_hjb_weak(prob.coeffs, triple, prob.control_set, prob.measure,
                         grid, scenario=scenario,
                         tol=sec.get("tol", 1e-8),
                         max_iter=sec.get("max_iter", 50))
    extra = []
    if sec.get("dump_operators", False):
        res.pair.dump_csv(out / "operators.csv")
        extra.append("operators.csv")
    out_nodes = sec.get("out_nodes", 81)
    out_box = sec.get("out_box", [prob.space_low, prob.space_high])
    space = SpatialGrid([out_box[0]], [out_box[1]], (out_nodes,))
    trip = res.reconstruct_triplet(space)
    trip.to_csv(out / "hjb_weak_field.csv")
    _write_json(out / "hjb_weak_report.json", {
        "V0": trip.value_at(0, prob.x0),
        "picard_iterations": len(res.solution.history),
        "picard_history": [float(v) for v in res.solution.history],
        "coercivity_min_slack": res.coercivity.min_slack,
        "coercivity_alpha": res.coercivity.alpha,
        "clamped_points": res.clamped,
        "max_z_coord": res.solution.max_z_norm(),
        "max_r_coord": res.solution.max_r_norm(),
    })
    return ["hjb_weak_field.csv", "hjb_weak_report.json"] + extra


def _coarsen_path(path: DriverPath, factor: int) -> DriverPath:
    nodes = path.grid.nodes[::factor]
    inc = path.brownian_increments.reshape(-1, factor, path.d).sum(axis=1)
    return DriverPath(TimeGrid(nodes), path.measure, inc,
                      path.jump_times, path.jump_atoms)


def run_convergence(cfg: dict, out: Path) -> list:
    sec = _section(cfg, "convergence")
    study = sec.get("study", "forward_strong")
    halvings = sec.get("halvings", 3)
    if halvings < 1:
        _fail("need at least one halving", "convergence.halvings")
    rows = []
    if study == "forward_strong":
        prob = _problem(cfg)
        base = sec.get("base_steps", 16)
        n_paths = sec.get("n_paths", 40)
        fine_factor = 4 * 2 ** halvings
        fine_steps = base * fine_factor
        control = ConstantControl(np.zeros(prob.coeffs.m))
        errs = {lvl: [] for lvl in range(halvings + 1)}
        fine_grid = TimeGrid.uniform(prob.horizon, fine_steps)
        for s in range(n_paths):
            pf = sample_driver_path(fine_grid, prob.coeffs.d, prob.measure,
                                    child_seed(cfg["seed"], s))
            ref = simulate(prob.coeffs, control, prob.x0, pf).terminal_state
            for lvl in range(halvings + 1):
                factor = fine_steps // (base * 2 ** lvl)
                pc = _coarsen_path(pf, factor)
                xt = simulate(prob.coeffs, control, prob.x0, pc).terminal_state
                errs[lvl].append(float(np.max(np.abs(xt - ref))))
        for lvl in range(halvings + 1):
            n = base * 2 ** lvl
            rows.append([lvl, prob.horizon / n, float(np.mean(errs[lvl]))])
    elif study == "energy_identity":
        length = sec.get("length", 2.0)
        n_modes = sec.get("modes", 6)
        base = sec.get("base_steps", 40)
        triple = assemble_triple(length, 1, n_modes)
        from .coefficients import CoefficientSet

        coeffs = CoefficientSet(
            n=1, d=1, m=1,
            b=lambda t, x, u, nz: np.zeros_like(x),
            sigma=lambda t, x, u, nz: np.ones(x.shape + (1,)),
            g=lambda t, e, x, u, nz: np.zeros_like(x),
            f=lambda t, x, u, y, z, k, nz: np.zeros(np.shape(y)),
            h=lambda x, nz: np.zeros(x.shape[0]),
            l=lambda t, e: 1.0, vectorized=True)
        xi = np.zeros(n_modes)
        xi[0] = 1.0
        for lvl in range(halvings + 1):
            n = base * 2 ** lvl
            grid = TimeGrid.uniform(1.0, n)
            pair = assemble_operators(coeffs, triple, grid)
            sol = solve_linear_bseej(pair, None, xi, None, grid, triple)
            rep = energy_identity_residual(sol, pair, None, triple, grid)
            rows.append([lvl, 1.0 / n, abs(rep.residual)])
    elif study == "dpp_residual":
        prob = _problem(cfg)
        base_steps = sec.get("base_steps", 8)
        base_cells = sec.get("base_cells", 40)
        n_samples = sec.get("n_samples", 40000)
        box = sec.get("box", [prob.space_low, prob.space_high])
        for lvl in range(halvings + 1):
            k = 2 ** lvl
            lat = Lattice([box[0]], [box[1]], (base_cells * k,))
            grid = TimeGrid.uniform(prob.horizon, base_steps * k)
            table = compute_value_table(prob.coeffs, prob.control_set, lat,
                                        grid, prob.measure)
            res = dpp_residual(prob.coeffs, prob.control_set, table,
                               prob.measure, 0, prob.x0, 1, n_samples,
                               cfg["seed"])
            rows.append([lvl, prob.horizon / (base_steps * k), res])
    else:
        _fail(f"unknown study {study!r}", "convergence.study")

    _write_csv(out / "convergence.csv", ["level", "dt", "error"], rows)
    errors = np.array([r[2] for r in rows], dtype=float)
    dts = np.array([r[1] for r in rows], dtype=float)
    mask = errors > 0
    slope = float(np.polyfit(np.log(dts[mask]), np.log(errors[mask]), 1)[0]) \
        if mask.sum() >= 2 else float("nan")
    _write_json(out / "convergence_report.json",
                {"study": study, "halvings": halvings, "fitted_slope": slope})
    return ["convergence.csv", "convergence_report.json"]


def run_validate_assumptions(cfg: dict, out: Path) -> list:
    prob = _problem(cfg)
    sec = _section(cfg, "validate_assumptions")
    plan = SamplingPlan.cube(
        prob.coeffs.n, prob.coeffs.m,
        half_width=sec.get("box_half_width", 2.0),
        n_samples=sec.get("n_samples", 200),
        seed=cfg["seed"])
    reports = {
        "lipschitz": validate_lipschitz(prob.coeffs, prob.measure, plan),
        "jump_nondegeneracy": validate_jump_nondegeneracy(
            prob.coeffs, prob.measure, plan),
        "driver_monotonicity": validate_driver_monotonicity(
            prob.coeffs, prob.measure, plan),
    }
    payload = {
        name: {
            "passed": rep.passed,
            "observed": rep.observed,
            "bound": rep.bound,
            "n_samples": rep.n_samples,
            "notes": rep.notes,
        } for name, rep in reports.items()
    }
    payload["all_passed"] = all(rep.passed for rep in reports.values())
    _write_json(out / "validation_report.json", payload)
    return ["validation_report.json"]


RUNNERS = {
    "simulate": run_simulate,
    "bsde": run_bsde,
    "value": run_value,
    "dpp-check": run_dpp_check,
    "pide": run_pide,
    "verify": run_verify,
    "bseej": run_bseej,
    "hjb-weak": run_hjb_weak,
    "convergence": run_convergence,
    "validate-assumptions": run_validate_assumptions,
}


def _manifest(subcommand: str, cfg: dict, cfg_text: str, outputs: list,
              threads: int) -> dict:
    return {
        "subcommand": subcommand,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "config": cfg,
        "seed": cfg["seed"],
        "threads": threads,
        "versions": {
            "jumphjb": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": sorted(outputs),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jumphjb",
        description="Stochastic optimal control of jump-diffusions: "
                    "simulation, BSDEs, dynamic programming, HJB solvers.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default=None,
                        help="output directory (default: config out_dir or .)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; computation is vectorized, so this "
                             "only bounds auxiliary parallelism")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.config)
        out_dir = Path(args.out or cfg.get("out_dir", "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg_text = Path(args.config).read_text()
        outputs = RUNNERS[args.subcommand](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DivergenceError, CflViolationError) as exc:
        diag = Path(args.out or ".") / "failure_diagnostic.json"
        try:
            diag.parent.mkdir(parents=True, exist_ok=True)
            _write_json(diag, {"error": type(exc).__name__, "message": str(exc)})
        except OSError:
            pass
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except NotConvergedError as exc:
        diag = Path(args.out or ".") / "failure_diagnostic.json"
        try:
            diag.parent.mkdir(parents=True, exist_ok=True)
            _write_json(diag, {
                "error": "NotConverged",
                "message": str(exc),
                "history": [float(v) for v in exc.history],
            })
        except OSError:
            pass
        print(f"not converged: {exc}", file=sys.stderr)
        return 4

    _write_json(out_dir / "manifest.json",
                _manifest(args.subcommand, cfg, cfg_text, outputs, args.threads))
    return 0


if __name__ == "__main__":
    sys.exit(main())

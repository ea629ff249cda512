"""Command-line interface: scenario ingestion, analyses, flat-file results.

Subcommands: solve-mfc, solve-mfg, poa-grid, stackelberg-mfc,
stackelberg-mfg, verify, decompose. All tabular outputs are RFC-4180 CSV
(UTF-8, LF, '.' decimal, shortest round-trip float spelling, ``inf`` and
``nan`` sentinels); each run also writes a JSON summary and a manifest.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 I/O error, 5 every policy cell rejected, 6 failed verification
certificate.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, equilibria, lqsolver as lq, regulator, simulate
from .model import P, Q, RegulatorPolicy, build_state_space, demand, \
    production_decomposition
from .scenario import ConfigError, ScenarioConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_IO = 4
EXIT_ALL_REJECTED = 5
EXIT_CERTIFICATE = 6

# deterministic sub-sampling of the configured path budget for the heavier
# certificates (full budget is reserved for the cost/mean agreement checks)
_DEVIATION_PATH_CAP = 2000
_COSTATE_PATH_CAP = 10000


def _fmt(value) -> str:
    """Shortest round-trip float spelling; inf/nan sentinels; plain text."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(value)


def _jsonable(obj):
    """JSON-safe copy: non-finite floats become their CSV sentinels."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isinf(v) or math.isnan(v):
            return _fmt(v)
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir, cfg: ScenarioConfig, command: str, statuses,
                    started: str):
    _write_json(out_dir / "manifest.json", {
        "command": command,
        "config_hash": cfg.config_hash,
        "tool_version": __version__,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "seed": cfg.seed,
        "statuses": statuses,
    })


def _trajectory_rows(cfg: ScenarioConfig, sol: lq.MeanFieldSolution):
    grid = cfg.grid
    ss = build_state_space(cfg.producer, sol.policy, sol.r_e, grid)
    nbar_rate = lq.mean_control(ss, sol.riccati, sol.r, sol.xbar)
    renewable, nonrenewable, _ = production_decomposition(
        sol.xbar, cfg.producer, sol.r_e, grid)
    d = demand(cfg.producer, grid.times)
    for k, t in enumerate(grid.times):
        yield (t, sol.xbar[k, 0], sol.xbar[k, 1], sol.xbar[k, 2],
               sol.xbar[k, 3], sol.xbar[k, 4], nbar_rate[k], d[k],
               renewable[k], nonrenewable[k])


_TRAJECTORY_HEADER = ["t", "Qbar", "Sbar", "Ebar", "Pbar", "Nbar_cum",
                      "Nbar_rate", "D", "renewable_mean", "nonrenewable_mean"]


def _solve_one(cfg: ScenarioConfig, kind: str) -> equilibria.EquilibriumResult:
    if kind == lq.MFC:
        return equilibria.social_opt(cfg.producer, cfg.policy, cfg.grid,
                                     cfg.search)
    return equilibria.nash_eq(cfg.producer, cfg.policy, cfg.grid,
                              cfg.fixed_point, cfg.search)


def cmd_solve(cfg: ScenarioConfig, out_dir, kind: str) -> int:
    started = datetime.now(timezone.utc).isoformat()
    eq = _solve_one(cfg, kind)
    _write_csv(out_dir / "trajectory.csv", _TRAJECTORY_HEADER,
               _trajectory_rows(cfg, eq.solution))
    _write_json(out_dir / "summary.json", {
        "kind": eq.kind,
        "re_hat": eq.r_e_hat,
        "cost": eq.cost_hat,
        "status": eq.status,
        "iterations": eq.iterations,
        "final_residual": eq.final_residual,
        "tau": cfg.policy.tau,
        "c2": cfg.policy.c2,
        "config_hash": cfg.config_hash,
    })
    _write_manifest(out_dir, cfg, f"solve-{kind}", {f"{kind}": eq.status},
                    started)
    if eq.status != equilibria.CONVERGED:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_decompose(cfg: ScenarioConfig, out_dir) -> int:
    started = datetime.now(timezone.utc).isoformat()
    eq = _solve_one(cfg, lq.MFC)
    sol = eq.solution
    renewable, nonrenewable, total = production_decomposition(
        sol.xbar, cfg.producer, sol.r_e, cfg.grid)
    d = demand(cfg.producer, cfg.grid.times)
    rows = ((t, d[k], sol.xbar[k, Q], renewable[k], nonrenewable[k], total[k])
            for k, t in enumerate(cfg.grid.times))
    _write_csv(out_dir / "decomposition.csv",
               ["t", "D", "Qbar", "renewable_mean", "nonrenewable_mean",
                "total"], rows)
    _write_json(out_dir / "summary.json", {
        "kind": eq.kind, "re_hat": eq.r_e_hat, "cost": eq.cost_hat,
        "status": eq.status, "config_hash": cfg.config_hash,
    })
    _write_manifest(out_dir, cfg, "decompose", {"mfc": eq.status}, started)
    return EXIT_OK if eq.status == equilibria.CONVERGED \
        else EXIT_NO_CONVERGENCE


def _poa_cell(args):
    cfg, tau, c2 = args
    policy = RegulatorPolicy(tau=tau, c2=c2)
    mfc = equilibria.social_opt(cfg.producer, policy, cfg.grid, cfg.search)
    mfg = equilibria.nash_eq(cfg.producer, policy, cfg.grid, cfg.fixed_point,
                             cfg.search)
    try:
        poa = equilibria.poa_from_results(mfc, mfg)
    except equilibria.UndefinedPoA:
        poa = float("nan")
    return (tau, c2, mfc.cost_hat, mfg.cost_hat, poa, mfg.status)


def _map_cells(worker, jobs, workers: int):
    """Order-preserving map, optionally over a process pool."""
    if workers <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, jobs))


def cmd_poa_grid(cfg: ScenarioConfig, out_dir, workers: int) -> int:
    started = datetime.now(timezone.utc).isoformat()
    jobs = [(cfg, tau, c2) for tau in cfg.regulator.tau_grid
            for c2 in cfg.regulator.c2_grid]
    rows = _map_cells(_poa_cell, jobs, workers)
    _write_csv(out_dir / "poa_grid.csv",
               ["tau", "c2", "cost_mfc", "cost_mfg", "poa", "status_mfg"],
               rows)
    statuses = {f"tau={r[0]},c2={r[1]}": r[5] for r in rows}
    _write_manifest(out_dir, cfg, "poa-grid", statuses, started)
    return EXIT_OK


def _stackelberg_cell(args):
    cfg, kind, tau, c2 = args
    return regulator.evaluate_cell(
        cfg.producer, cfg.regulator, cfg.grid, kind,
        RegulatorPolicy(tau=tau, c2=c2), cfg.fixed_point, cfg.search)


def cmd_stackelberg(cfg: ScenarioConfig, out_dir, kind: str,
                    workers: int) -> int:
    started = datetime.now(timezone.utc).isoformat()
    stack_kind = regulator.STACKELBERG_MFC if kind == lq.MFC \
        else regulator.STACKELBERG_MFG
    jobs = [(cfg, stack_kind, tau, c2) for tau in cfg.regulator.tau_grid
            for c2 in cfg.regulator.c2_grid]
    cells = tuple(_map_cells(_stackelberg_cell, jobs, workers))

    rows = [(c.policy.tau, c.policy.c2, c.accepted, c.status,
             c.producer.cost_hat, c.producer.r_e_hat,
             float(c.producer.solution.xbar[-1, P]), c.cost) for c in cells]
    _write_csv(out_dir / "stackelberg.csv",
               ["tau", "c2", "accepted", "status", "producer_cost", "re_hat",
                "pollution_T", "J"], rows)
    _write_csv(out_dir / "acceptance_region.csv", ["tau", "c2", "accepted"],
               ((c.policy.tau, c.policy.c2, c.accepted) for c in cells))
    statuses = {f"tau={c.policy.tau},c2={c.policy.c2}": c.status
                for c in cells}

    try:
        result = regulator.stackelberg_eq(cfg.producer, cfg.regulator,
                                          cfg.grid, stack_kind, cells=cells)
    except regulator.AllRejected:
        _write_json(out_dir / "summary.json", {
            "kind": stack_kind, "status": "all_rejected",
            "config_hash": cfg.config_hash,
        })
        _write_manifest(out_dir, cfg, f"stackelberg-{kind}", statuses, started)
        return EXIT_ALL_REJECTED

    _write_json(out_dir / "summary.json", {
        "kind": stack_kind,
        "status": "ok",
        "tau_hat": result.policy_hat.tau,
        "c2_hat": result.policy_hat.c2,
        "j_hat": result.j_hat,
        "producer_cost": result.producer_at_optimum.cost_hat,
        "re_hat": result.producer_at_optimum.r_e_hat,
        "config_hash": cfg.config_hash,
    })
    _write_manifest(out_dir, cfg, f"stackelberg-{kind}", statuses, started)
    return EXIT_OK


def _capped_sim(cfg: ScenarioConfig, cap: int) -> simulate.SimConfig:
    sim = cfg.sim_config()
    return replace(sim, n_paths=min(sim.n_paths, cap))


def verify_certificates(cfg: ScenarioConfig, kind: str,
                        eq: equilibria.EquilibriumResult) -> list[dict]:
    """The four Monte Carlo certificates for one converged equilibrium."""
    sol = eq.solution
    ss = build_state_space(cfg.producer, cfg.policy, eq.r_e_hat, cfg.grid)
    sim = cfg.sim_config()

    summary = simulate.streamed_summary(
        ss, sol.riccati, sol.r, cfg.producer, cfg.policy, sol.xbar, sim)
    analytic = simulate.expected_cost(
        ss, sol.riccati, sol.r, cfg.producer, cfg.policy, sol.xbar)
    cost_gap = abs(summary.cost_mean - analytic)
    cost_ok = cost_gap <= 3.0 * summary.cost_se
    certificates = [{
        "name": "cost_agreement",
        "passed": bool(cost_ok),
        "empirical": summary.cost_mean,
        "analytic": analytic,
        "value_function_cost": eq.cost_hat,
        "std_error": summary.cost_se,
        "n_paths": sim.n_paths,
    }]

    stride = max(1, cfg.grid.n_nodes // 73)
    idx = np.arange(0, cfg.grid.n_nodes, stride)
    gap = np.abs(summary.mean_traj[idx] - sol.xbar[idx])
    floor = 1e-9 * (1.0 + np.abs(sol.xbar[idx]))
    mean_ok = np.all(gap <= 3.0 * summary.se_traj[idx] + floor)
    certificates.append({
        "name": "mean_field_agreement",
        "passed": bool(mean_ok),
        "max_gap": float(gap.max()),
        "max_std_error": float(summary.se_traj[idx].max()),
    })

    dev = simulate.deviation_test(eq, cfg.producer, cfg.policy,
                                  _capped_sim(cfg, _DEVIATION_PATH_CAP),
                                  cfg.n_deviations)
    certificates.append({
        "name": "deviation_optimality",
        "passed": bool(dev.passed),
        "min_difference": dev.min_difference,
        "min_std_error": dev.min_std_error,
        "n_deviations": cfg.n_deviations,
    })

    costate = simulate.costate_residual(eq, cfg.producer, cfg.policy,
                                        _capped_sim(cfg, _COSTATE_PATH_CAP))
    certificates.append({
        "name": "costate_consistency",
        "passed": bool(costate.passed),
        "control_identity_max": costate.control_identity_max,
        "terminal_max_error": costate.terminal_max_error,
        "drift_means": list(costate.drift_means),
        "drift_tolerances": list(costate.drift_tolerances),
    })
    return certificates


def cmd_verify(cfg: ScenarioConfig, out_dir) -> int:
    started = datetime.now(timezone.utc).isoformat()
    report = {"config_hash": cfg.config_hash, "runs": []}
    statuses = {}
    any_failed = False
    any_unconverged = False
    for kind in (lq.MFC, lq.MFG):
        eq = _solve_one(cfg, kind)
        statuses[kind] = eq.status
        run = {"kind": kind, "status": eq.status, "re_hat": eq.r_e_hat,
               "cost": eq.cost_hat, "certificates": []}
        if eq.status != equilibria.CONVERGED:
            any_unconverged = True
            print(f"SKIP {kind}: equilibrium status {eq.status}")
        else:
            run["certificates"] = verify_certificates(cfg, kind, eq)
            for cert in run["certificates"]:
                verdict = "PASS" if cert["passed"] else "FAIL"
                any_failed = any_failed or not cert["passed"]
                print(f"{verdict} {kind} {cert['name']}")
        report["runs"].append(run)
    _write_json(out_dir / "verify.json", report)
    _write_manifest(out_dir, cfg, "verify", statuses, started)
    if any_failed:
        return EXIT_CERTIFICATE
    if any_unconverged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbonfield",
        description="Mean-field producer equilibria under a carbon tax",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve-mfc", "solve-mfg", "poa-grid", "stackelberg-mfc",
                 "stackelberg-mfg", "verify", "decompose"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="scenario TOML file")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--workers", type=int, default=1,
                         help="worker processes for grid commands")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the configured simulation seed")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed,
                          out_override=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg.output_directory)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "solve-mfc":
            return cmd_solve(cfg, out_dir, lq.MFC)
        if args.command == "solve-mfg":
            return cmd_solve(cfg, out_dir, lq.MFG)
        if args.command == "poa-grid":
            return cmd_poa_grid(cfg, out_dir, args.workers)
        if args.command == "stackelberg-mfc":
            return cmd_stackelberg(cfg, out_dir, lq.MFC, args.workers)
        if args.command == "stackelberg-mfg":
            return cmd_stackelberg(cfg, out_dir, lq.MFG, args.workers)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        if args.command == "decompose":
            return cmd_decompose(cfg, out_dir)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())

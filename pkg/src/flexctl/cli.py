"""Command line entry point: flexctl <simulate|optimize|verify>.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 verification failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import outputs, report
from .config import (ConfigError, build_problem, control_preset,
                     default_config, initial_control, load_config)
from .control_opt import bang_bang_violations, optimize, vi_residual
from .forward import SolverError, energy_report, evaluate_cost, run
from .sensitivity import run_adjoint, switching_fields
from .verification import run_verification

log = logging.getLogger("flexctl")


def _parser():
    parser = argparse.ArgumentParser(
        prog="flexctl",
        description="Boundary pressure/heat-flux control of Boussinesq flow")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("simulate", "optimize", "verify"):
        p = sub.add_parser(mode)
        p.add_argument("--config", help="TOML configuration file "
                                        "(defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--log-level", default="info",
                       choices=["debug", "info", "warning", "error"])
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else default_config()
    out_dir = args.out or cfg.output["directory"]
    return cfg, out_dir


def _write_trajectory(out_dir, spaces, traj, stride, figures):
    for n in range(0, len(traj), stride):
        outputs.write_state_vtk(os.path.join(out_dir, f"state_{n}.vtk"),
                                spaces, traj[n])
    if (len(traj) - 1) % stride != 0:
        n = len(traj) - 1
        outputs.write_state_vtk(os.path.join(out_dir, f"state_{n}.vtk"),
                                spaces, traj[n])
    if figures:
        report.plot_state(os.path.join(out_dir, "state_final.png"),
                          spaces, traj[len(traj) - 1])


def _cmd_simulate(cfg, out_dir, seed):
    spec = build_problem(cfg)
    controls = control_preset(cfg, spec)
    traj = run(spec, controls)
    figures = bool(cfg.output["figures"])
    outputs.ensure_dir(out_dir)
    _write_trajectory(out_dir, spec.spaces, traj, int(cfg.output["vtk_stride"]),
                      figures)
    if spec.num_steps > 0:
        outputs.write_controls_csv(os.path.join(out_dir, "controls.csv"),
                                   spec.spaces, spec, controls)
        rep = energy_report(traj, controls, spec)
        outputs.write_energy_csv(os.path.join(out_dir, "energy_report.csv"), rep)
        cost = evaluate_cost(traj, controls, spec)
        outputs.write_summary_csv(os.path.join(out_dir, "run_summary.csv"),
                                  [("mode", "simulate"), ("cost", cost),
                                   ("steps", spec.num_steps)])
        if figures:
            report.plot_energy(os.path.join(out_dir, "energy_report.png"), rep)
            report.plot_boundary_tables(
                os.path.join(out_dir, "controls.png"), controls.v1, controls.v2,
                ("total pressure control", "heat flux control"))
        log.info("simulate: %d steps, cost %.12e", spec.num_steps, cost)
    else:
        log.info("simulate: no steps requested; wrote initial fields only")
    return 0


def _cmd_optimize(cfg, out_dir, seed):
    spec = build_problem(cfg)
    start = initial_control(cfg, spec)
    result = optimize(spec, start, method=cfg.optimizer["method"],
                      gap_tol=float(cfg.optimizer["gap_tol"]),
                      max_iter=int(cfg.optimizer["max_iter"]))
    figures = bool(cfg.output["figures"])
    outputs.ensure_dir(out_dir)
    outputs.write_controls_csv(os.path.join(out_dir, "controls.csv"),
                               spec.spaces, spec, result.control)
    outputs.write_history_csv(os.path.join(out_dir, "cost_history.csv"),
                              result.cost_history, "cost")
    outputs.write_history_csv(os.path.join(out_dir, "gap_history.csv"),
                              result.gap_history, "gap")
    _write_trajectory(out_dir, spec.spaces, result.trajectory,
                      int(cfg.output["vtk_stride"]), figures)
    rep = energy_report(result.trajectory, result.control, spec)
    outputs.write_energy_csv(os.path.join(out_dir, "energy_report.csv"), rep)

    # paper-style conjugate adjoint retained for reporting
    adj = run_adjoint(result.trajectory, spec, include_trace_source=True)
    sig = switching_fields(adj, spec)
    outputs.write_switching_csv(os.path.join(out_dir, "switching.csv"),
                                spec.spaces, spec, sig)
    for n in range(0, spec.num_steps + 1, int(cfg.output["vtk_stride"])):
        outputs.write_adjoint_vtk(os.path.join(out_dir, f"adjoint_{n}.vtk"),
                                  spec.spaces, adj.p[n], adj.q[n])

    entries = [("mode", "optimize"),
               ("method", cfg.optimizer["method"]),
               ("iterations", float(result.iterations)),
               ("termination", result.reason),
               ("final_cost", result.cost_history[-1]),
               ("final_gap", result.gap_history[-1] if result.gap_history else 0.0)]
    if result.switching is not None:
        vi_grad = vi_residual(result.control, result.switching, spec,
                              samples=100, seed=seed)
        viol = bang_bang_violations(result.control, result.switching, spec)
        vi_conj = vi_residual(result.control, sig, spec, samples=100, seed=seed)
        entries += [("vi_residual_gradient_field", vi_grad),
                    ("vi_residual_conjugate_field", vi_conj),
                    ("bang_bang_violations", float(viol))]
    outputs.write_summary_csv(os.path.join(out_dir, "optimization_summary.csv"),
                              entries)
    if figures:
        report.plot_history(os.path.join(out_dir, "cost_history.png"),
                            result.cost_history, "cost")
        report.plot_history(os.path.join(out_dir, "gap_history.png"),
                            result.gap_history, "duality gap")
        report.plot_energy(os.path.join(out_dir, "energy_report.png"), rep)
        report.plot_boundary_tables(
            os.path.join(out_dir, "controls.png"),
            result.control.v1, result.control.v2,
            ("optimal total pressure", "optimal heat flux"))
        report.plot_boundary_tables(
            os.path.join(out_dir, "switching.png"), sig.sigma1, sig.sigma2,
            ("switching field (pressure side)", "switching field (flux side)"))
    log.info("optimize: %s after %d iterations, J=%.12e",
             result.reason, result.iterations, result.cost_history[-1])
    return 0


def _cmd_verify(cfg, out_dir, seed):
    spec = build_problem(cfg)
    results = run_verification(spec, seed=seed)
    outputs.ensure_dir(out_dir)
    outputs.write_verify_csv(os.path.join(out_dir, "verify_report.csv"), results)
    failed = [r for r in results if r.gate and not r.passed]
    for r in results:
        status = "pass" if r.passed else ("FAIL" if r.gate else "warn")
        log.info("%-34s %s  value=%.6e  threshold=%.6e",
                 r.name, status, r.value, r.threshold)
    if failed:
        log.error("verification failed: %s", ", ".join(r.name for r in failed))
        return 4
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="raise", invalid="raise", divide="raise")
    try:
        cfg, out_dir = _load(args)
        if args.mode == "simulate":
            return _cmd_simulate(cfg, out_dir, args.seed)
        if args.mode == "optimize":
            return _cmd_optimize(cfg, out_dir, args.seed)
        return _cmd_verify(cfg, out_dir, args.seed)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""
Command line: ``python -m mfrbsde {solve,check-assumptions,study,decoupling} --config PATH``.

Exit codes: 0 ok, 1 study or check failed, 2 invalid input, 3 numerical failure.
Failures print one JSON line ``{"error": {...}}`` on stderr.
"""

import argparse
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError as PydanticValidationError

from .backward_solver import SolverConfig
from .config import DecouplingStudy, ExperimentConfig, format_validation_error, load_config
from .decoupling_field import DecouplingField, FieldQuery, complementarity_probe, continuity_probe
from .diagnostics import (
    StudyTable,
    chaos_study,
    constraint_metrics,
    penalty_rate_study,
    reflection_path,
    stability_experiment,
    step_series,
)
from .errors import MfrbsdeError, ValidationError
from .measure import EmpiricalMeasure
from .obstacle import check_assumptions
from .registry import build_obstacle, build_problem, sample_domain
from .writer import RunWriter, resolve_output_dir

logger = logging.getLogger(__name__)

STUDY_KINDS = ("penalty", "chaos", "stability")

SERIES_UNITS = {"t": "time", "mean_K": "reflection", "skorokhod_partial": "reflection"}


def _study_csv(writer: RunWriter, table: StudyTable):
    writer.csv("study.csv", table.columns, table.to_rows())
    writer.json("study.json", table.to_dict())


def cmd_solve(cfg: ExperimentConfig, writer: RunWriter, workers: int) -> int:
    problem = build_problem(cfg.problem, cfg.name)
    sol = problem.solve(cfg.solver, workers=workers)
    report = constraint_metrics(sol)
    reflection_path(sol)
    flow = sol.terminal_flow
    summary = {
        "name": cfg.name,
        "n_particles": sol.n_particles,
        "steps": sol.grid.M,
        "penalty": sol.penalty,
        "seed": cfg.solver.seed,
        "mean_Y0": sol.Y[0].mean(axis=0),
        "mean_Y_T": sol.Y[-1].mean(axis=0),
        "max_mean_abs_Z": float(np.abs(sol.Z).mean(axis=(1, 2, 3)).max()),
        "mean_K_T": report.K_T_mean,
        "mean_R_T": sol.R[-1].mean(axis=0),
        "total_penalty_mass": report.K_T_mean,
        "diagnostics": report.to_dict(),
        "terminal_projection": None
        if flow is None
        else {
            "moved": int(np.count_nonzero(flow.stop_times)),
            "rounds": flow.rounds,
            "max_stop_time": float(flow.stop_times.max()),
            "min_certificate": float(flow.certificates.min()),
        },
    }
    writer.json("summary.json", summary, required=True)
    series = step_series(sol)
    writer.series("series.csv", series, SERIES_UNITS)
    writer.series("plot_mean_Y0.csv", {"t": series["t"], "mean_Y0": series["mean_Y0"]}, SERIES_UNITS)
    writer.series("plot_mean_K.csv", {"t": series["t"], "mean_K": series["mean_K"]}, SERIES_UNITS)
    writer.series("plot_sup_H_minus.csv", {"t": series["t"], "sup_H_minus": series["sup_H_minus"]}, SERIES_UNITS)
    logger.info("solve finished: mean Y0=%s mean K_T=%.6g", summary["mean_Y0"].tolist(), report.K_T_mean)
    return 0


def cmd_check_assumptions(cfg: ExperimentConfig, writer: RunWriter, workers: int) -> int:
    H = build_obstacle(cfg.problem.obstacle)
    a = cfg.assumptions
    report = check_assumptions(H, sample_domain(cfg), n_samples=a.n_samples, tol=a.tol, rng_seed=a.seed)
    writer.json("assumptions.json", dict(report.to_dict(), obstacle=H.name), required=True)
    if report.passed:
        logger.info("obstacle '%s' passed every sampled condition", H.name)
        return 0
    logger.warning("obstacle '%s' failed: %s", H.name, ", ".join(report.failed()))
    return 1


def cmd_study(cfg: ExperimentConfig, writer: RunWriter, workers: int, kind: str) -> int:
    study = cfg.study
    if study is None or study.kind != kind:
        found = None if study is None else study.kind
        raise ValidationError(f"study --kind {kind} needs a '{kind}' study block in the config, found {found}")
    problem = build_problem(cfg.problem, cfg.name)
    if kind == "penalty":
        table = penalty_rate_study(problem, study.m_grid, cfg.solver, workers=workers)
    elif kind == "chaos":
        table = chaos_study(problem, study.n_grid, study.n_ref, cfg.solver, workers=workers)
    else:
        table = stability_experiment(problem, study.eps_grid, cfg.solver, perturb=study.perturb, workers=workers)
    _study_csv(writer, table)
    logger.info("%s study %s", kind, "passed" if table.passed else "failed")
    return 0 if table.passed else 1


def cmd_decoupling(cfg: ExperimentConfig, writer: RunWriter, workers: int) -> int:
    study = cfg.study
    if not isinstance(study, DecouplingStudy):
        raise ValidationError("decoupling needs a 'decoupling' study block in the config")
    problem = build_problem(cfg.problem, cfg.name)
    solver: SolverConfig = cfg.solver
    lam = EmpiricalMeasure(problem.initial(solver.n_particles, solver.seed))
    field = DecouplingField(problem, solver, workers=workers)

    rows = [field.eval_u(FieldQuery(q.t, q.x, lam)).to_row() for q in study.queries]
    outcome: Dict[str, Optional[bool]] = {"continuity": None, "complementarity": None}
    if rows:
        writer.csv("field.csv", list(rows[0]), [list(r.values()) for r in rows], {"t": "time"})

    if study.continuity is not None:
        c = study.continuity
        table = continuity_probe(
            FieldQuery(c.t, c.x, lam), c.radii.model_dump(), problem, solver, c.scales, c.noise_tol, field=field
        )
        writer.csv("continuity.csv", table.columns, table.to_rows())
        outcome["continuity"] = table.passed

    if study.complementarity is not None:
        c = study.complementarity
        queries = [FieldQuery(t, x, lam) for t, x in itertools.product(c.times, c.points)]
        results, passed = complementarity_probe(queries, problem, solver, c.eps, c.eps_prime, c.kappa, workers)
        comp_rows = [r.to_row() for r in results]
        writer.csv("complementarity.csv", list(comp_rows[0]), [list(r.values()) for r in comp_rows], {"t": "time"})
        outcome["complementarity"] = passed

    writer.json("decoupling.json", {"queries": rows, "passed": outcome}, required=True)
    return 1 if any(v is False for v in outcome.values()) else 0


COMMANDS: Dict[str, Callable[..., int]] = {
    "solve": cmd_solve,
    "check-assumptions": cmd_check_assumptions,
    "study": cmd_study,
    "decoupling": cmd_decoupling,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfrbsde", description="Penalized particle solver for mean-field reflected BSDEs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores; never changes results")
        p.add_argument("--seed", type=int, default=None, help="overrides solver.seed")
        if name == "study":
            p.add_argument("--kind", required=True, choices=STUDY_KINDS)
    return parser


def _emit_error(err: Dict[str, object]):
    sys.stderr.write(json.dumps({"error": err}, sort_keys=True) + "\n")


def _resolve(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    if seed is None:
        return cfg
    data = cfg.model_dump(mode="json")
    data["solver"]["seed"] = seed
    return ExperimentConfig.model_validate(data)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    load_dotenv()
    started = time.perf_counter()
    try:
        cfg = _resolve(load_config(args.config), args.seed)
        workers = (os.cpu_count() or 1) if args.threads == 0 else args.threads
        if workers < 1:
            raise ValidationError(f"--threads must be >= 0, got {args.threads}")
        out_dir = Path(args.out) if args.out else resolve_output_dir(cfg.output.directory)
        logger.info("%s: config=%s out=%s threads=%d seed=%d", args.command, args.config, out_dir, workers, cfg.solver.seed)

        writer = RunWriter(out_dir, cfg.output.formats)
        resolved = cfg.model_dump(mode="json")
        writer.json("resolved_config.json", resolved, required=True)
        if args.command == "study":
            code = cmd_study(cfg, writer, workers, args.kind)
        else:
            code = COMMANDS[args.command](cfg, writer, workers)
        writer.manifest(resolved, cfg.solver.seed, time.perf_counter() - started, cfg.schema_version)
        return code
    except MfrbsdeError as e:
        _emit_error(e.to_dict())
        return e.exit_code
    except PydanticValidationError as e:
        _emit_error({"type": "ValidationError", "message": format_validation_error(e), "exit_code": 2})
        return 2
    except (ValueError, ArithmeticError) as e:
        code = 2 if isinstance(e, ValueError) and not isinstance(e, np.linalg.LinAlgError) else 3
        _emit_error({"type": type(e).__name__, "message": str(e), "exit_code": code})
        return code
    except Exception as e:
        logger.exception("%s failed unexpectedly", args.command)
        _emit_error({"type": type(e).__name__, "message": str(e), "exit_code": 3})
        return 3


__all__ = ["main", "build_parser", "cmd_solve", "cmd_check_assumptions", "cmd_study", "cmd_decoupling"]

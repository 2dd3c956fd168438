import os
import sys
import csv
import logging
import argparse
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import TypeAdapter, ValidationError

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from voinet.config import get_settings
from voinet.core.errors import UnsupportedConfigurationError, VoinetError
from voinet.core.harness import EpisodeLog, monte_carlo, prepare_experiment, run_episodes
from voinet.core.scheduler import ValueFunctionGrid, solve_dp
from voinet.models.scenario import check_scheduler, compile_scenario, spacecraft_scenario, validate
from voinet.models.schemas import EpisodeSummary, ScenarioConfig, SchedulerKind, SchedulerSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

PRESETS = {"spacecraft": spacecraft_scenario}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


# --- scenario files ------------------------------------------------------------


def load_scenario(source: str) -> ScenarioConfig:
    """Load a JSON scenario file, or a preset when `source` names one and is not a file."""
    path = Path(source)
    if not path.exists() and source in PRESETS:
        return PRESETS[source]()
    return ScenarioConfig.model_validate_json(path.read_text())


def write_scenario(config: ScenarioConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2))


# --- writers -------------------------------------------------------------------


def trajectory_header(log: EpisodeLog) -> List[str]:
    n = log.x.shape[1]
    header = ["k", "sigma", "gamma", "delivered", "lambda", "voi", "mse"]
    for name in ("x", "xcheck", "xhat"):
        header += [f"{name}{i}" for i in range(n)]
    if log.u is not None:
        header += [f"u{i}" for i in range(log.u.shape[1])]
    return header


def write_trajectory(log: EpisodeLog, path: Path) -> None:
    """One row per slot; floats with 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(trajectory_header(log))
        for k in range(log.horizon + 1):
            row = [
                k,
                int(log.sigma[k]),
                "" if log.gamma[k] < 0 else int(log.gamma[k]),
                int(log.delivered[k]),
                _fmt(log.lam[k]),
                "" if np.isnan(log.voi[k]) else _fmt(log.voi[k]),
                _fmt(log.mse[k]),
            ]
            row += [_fmt(v) for v in log.x[k]]
            row += [_fmt(v) for v in log.xcheck[k]]
            row += [_fmt(v) for v in log.xhat[k]]
            if log.u is not None:
                row += [_fmt(v) for v in log.u[k]]
            writer.writerow(row)


def write_value_function(grid: ValueFunctionGrid, path: Path, slot_stride: int = 1, node_stride: int = 1) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "lambda_prev_state", "lambda_state", "sigma_prev", "etilde", "xi", "value", "transmit"])
        for k, ip, ic, sp, e, xi, v, s in grid.iter_rows(slot_stride, node_stride):
            writer.writerow([
                k,
                "" if ip is None else ip,
                ic,
                "" if sp is None else sp,
                _fmt(e),
                "" if xi is None else _fmt(xi),
                _fmt(v),
                s,
            ])
            rows += 1
    return rows


# --- sub-commands ----------------------------------------------------------------


def _print_violations(violations) -> None:
    for violation in violations:
        print(str(violation))


def cmd_validate(args) -> int:
    config = load_scenario(args.scenario)
    violations = validate(config)
    if violations:
        _print_violations(violations)
        return EXIT_INVALID
    print(f"{config.name}: valid ({config.mode.value}, T={config.source.horizon}, d={config.channel.delay})")
    return EXIT_OK


def _selector(text: str, config: ScenarioConfig) -> SchedulerSpec:
    try:
        spec = SchedulerSpec.parse(text)
    except ValueError as e:
        raise UsageError(f"bad policy selector '{text}': {e}")
    # voi-dp on an unsupported scenario is routed to rollout later
    if spec.kind == SchedulerKind.VOI_DP:
        return spec
    problems = check_scheduler(spec, None, config.channel.delay)
    if problems:
        raise UsageError("; ".join(str(v) for v in problems))
    return spec


def _output_dir(args) -> Path:
    return Path(args.output_dir or get_settings().output_dir)


def cmd_run(args) -> int:
    config = load_scenario(args.scenario)
    violations = validate(config)
    if violations:
        _print_violations(violations)
        return EXIT_INVALID
    spec = _selector(args.policy, config) if args.policy else config.scheduler
    seed = config.seed if args.seed is None else args.seed
    episodes = args.episodes or 1
    exp = prepare_experiment(compile_scenario(config), spec, allow_fallback=True)
    out = _output_dir(args)
    logs = run_episodes(exp, [seed + i for i in range(episodes)], workers=args.workers)
    summaries = []
    for log in logs:
        path = out / f"trajectory_{exp.label.replace(':', '-')}_seed{log.seed}.csv"
        write_trajectory(log, path)
        summaries.append(log.summary())
        line = f"seed {log.seed}: phi={_fmt(log.phi)} sends={log.sends} losses={log.losses}"
        if log.phi_prime is not None:
            line += f" phi_prime={_fmt(log.phi_prime)} psi={_fmt(log.psi)}"
        print(line)
        logger.info(f"Wrote {path}")
    summary_path = out / "summary.json"
    summary_path.write_bytes(TypeAdapter(List[EpisodeSummary]).dump_json(summaries, indent=2))
    logger.info(f"Wrote {summary_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = load_scenario(args.scenario)
    violations = validate(config)
    if violations:
        _print_violations(violations)
        return EXIT_INVALID
    selectors = [s for s in args.policies.split(",") if s.strip()]
    if not selectors:
        raise UsageError("--policies needs at least one selector")
    specs = [_selector(s, config) for s in selectors]
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    episodes = args.episodes or config.episodes
    if episodes < 2:
        raise UsageError("compare needs at least 2 episodes")
    report = monte_carlo(config, specs, episodes, workers=args.workers)
    out = _output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.model_dump_json(indent=2))
    for policy in report.policies:
        print(
            f"{policy.policy:>16}  mean {report.loss}={_fmt(policy.mean_loss)} "
            f"(se {policy.stderr_loss:.3g})  sends={policy.mean_sends:.2f}  losses={policy.mean_losses:.2f}"
        )
    for cmp in report.comparisons:
        verdict = "better" if cmp.first_better else "not better"
        print(f"{cmp.first} - {cmp.second}: {_fmt(cmp.mean_difference)} [{cmp.ci_low:.4g}, {cmp.ci_high:.4g}] {verdict}")
    logger.info(f"Wrote {path}")
    return EXIT_OK


def cmd_solve_dp(args) -> int:
    config = load_scenario(args.scenario)
    violations = validate(config)
    if violations:
        _print_violations(violations)
        return EXIT_INVALID
    exp_model = compile_scenario(config)
    try:
        exp = prepare_experiment(exp_model, SchedulerSpec(kind=SchedulerKind.VOI_DP))
    except UnsupportedConfigurationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    grid = exp.policy.grid
    path = _output_dir(args) / "value_function.csv"
    rows = write_value_function(grid, path, args.slot_stride, args.node_stride)
    logger.info(f"Wrote {rows} rows to {path}")
    return EXIT_OK


def cmd_preset(args) -> int:
    if args.name not in PRESETS:
        raise UsageError(f"unknown preset '{args.name}' (available: {', '.join(PRESETS)})")
    path = Path(args.output) if args.output else _output_dir(args) / f"{args.name}.json"
    write_scenario(PRESETS[args.name](), path)
    print(str(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voinet", description="VoI-triggered estimation and control over a delayed erasure channel")
    parser.add_argument("--log-level", default=None, help="Override VOI_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="Check a scenario file against every invariant")
    p.add_argument("scenario")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("run", help="Run episodes and write per-slot trajectories")
    p.add_argument("scenario")
    p.add_argument("--policy", help="Scheduler selector, e.g. voi, periodic:21, never")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("compare", help="Monte-Carlo comparison of policies on common seeds")
    p.add_argument("scenario")
    p.add_argument("--policies", required=True, help="Comma-separated selectors")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("solve-dp", help="Solve the exact DP and export the value function")
    p.add_argument("scenario")
    p.add_argument("--slot-stride", type=int, default=1)
    p.add_argument("--node-stride", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(handler=cmd_solve_dp)

    p = sub.add_parser("preset", help="Write a preset scenario file")
    p.add_argument("name")
    p.add_argument("--output")
    p.add_argument("--output-dir")
    p.set_defaults(handler=cmd_preset)
    return parser


def _configure_logging(level: str) -> None:
    level = level.upper()
    if not isinstance(logging.getLevelName(level), int):
        raise UsageError(f"unknown log level '{level}'")
    logging.basicConfig(level=level)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID

    try:
        _configure_logging(args.log_level or get_settings().log_level)
        return args.handler(args)
    except UsageError as e:
        print(f"voinet: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as e:
        logger.error(f"Scenario file does not match the schema: {e}")
        return EXIT_INVALID
    except (VoinetError, OSError, ValueError) as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

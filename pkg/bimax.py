"""
Usage: bimax.py gen --family=FAMILY [--n=N --m=M --l=L] [--groups=G --minority=F] [--seed=SEED] --out=PATH
       bimax.py solve --instance=PATH --eps=EPS [--mode=(det | stoch)] [--seed=SEED | --seeds=A,B,C] [OPTIONS]
       bimax.py report TRACE [TRACE ...]

Generate bilevel-minimax instances, solve them and summarize the solver traces.

Commands:
  gen     write a JSON instance file and print its SHA-256 digest
  solve   run the solver on an instance; writes a JSONL trace and a JSON result per seed
  report  print a CSV summary of trace files, one section per family

Families (gen --family):
  linear              constrained bilevel linear program, dims --n --m --l
  toy-unconstrained   analytic toy with a saddle lower level
  toy-constrained     analytic scalar toy with an inequality-constrained lower level
  dro                 group-DRO hyperparameter tuning, --groups --minority

Options of solve:
  --mode=MODE          det (OptFOM, exact gradients) or stoch (SAPD, noisy gradients)
  --seeds=A,B,C        independent runs, in parallel (at most BIMAX_THREADS at once)
  --max-oracles=N      gradient-call budget, exit code 2 when it is exhausted
  --L-override=L       replace the smoothness constant of the penalty
  --rho=RHO            penalty parameter (default 1/eps)
  --K=K                outer iterations of the stochastic branch
  --sapd-T=T           SAPD iterations per outer iteration (default: theoretical)
  --eps-hat=E          inner tolerance eps_hat (default eps^1.5; linear: 0.25)
  --optfom-iters=N     OptFOM iteration cap per outer iteration (default: none;
                       linear: 200)
  --delta-f=D          std of the gradient noise on f (stoch mode)
  --delta-ftilde=D     std of the gradient noise on the lower-level objective
  --no-composite       ignore the composite stopping rule of constrained families
  --trace-out=PATH     trace file ({seed} is replaced by the seed)
  --result-out=PATH    result file ({seed} is replaced by the seed)
  --wall-clock         write wall times into the trace (not byte-reproducible)

Level of detail displayed:
  -v -vv                        INFO, DEBUG log messages
  -x                            DEBUG messages from the solver package only

Exit codes:
  0  every run stopped by a criterion
  1  usage, parse or I/O error
  2  a run exhausted its budget

Examples:
  bimax.py gen --family=linear --n=100 --m=100 --l=5 --seed=1 --out=lin.json
    Generate a linear instance.

  bimax.py solve --instance=lin.json --eps=0.01 --seeds=1,2,3,4,5
    Solve it for five seeds.

  bimax.py report lin.s*.trace.jsonl
    Summarize the runs.

"""  # noqa

import argparse
import asyncio
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from bilevelminimax.const import (
    CRITERION_TERMINATIONS,
    ENV_THREADS,
    EXIT_CODE,
    FAMILY,
    LINEAR_EXPERIMENT_EPS_HAT,
    MAX_ORACLE_CALLS,
    MODE,
    OPTFOM_EXPERIMENT_ITERS,
    TOY_VARIANT,
)
from bilevelminimax.driver import SolverConfig, solve
from bilevelminimax.dro import DroConfig, gen_dro
from bilevelminimax.instances import (
    ToyInstance,
    gen_linear,
    load_instance,
    save_instance,
)
from bilevelminimax.problem import make_noisy
from bilevelminimax.trace import (
    TraceFormatError,
    read_trace,
    write_report,
    write_result,
    write_trace,
)

logging.basicConfig(datefmt="%H:%M:%S", format="%(asctime)s %(levelname)s: %(message)s")
_LOGGER = logging.getLogger(__name__)

FAMILIES = [FAMILY.Linear, FAMILY.ToyUnconstrained, FAMILY.ToyConstrained, FAMILY.Dro]


def _parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="bimax.py", description="bilevel solver")

    group = parser.add_argument_group("various options")
    group.add_argument(
        "-v", "--verbosity", action="count", default=0, help="-v INFO, -vv DEBUG"
    )
    group.add_argument(
        "-x", "--debug_mode", action="count", default=0, help="DEBUG for the package"
    )

    commands = parser.add_subparsers(dest="command")

    gen = commands.add_parser("gen", help="generate an instance file")
    gen.add_argument("--family", required=True, choices=FAMILIES)
    gen.add_argument("--n", type=int, default=100)
    gen.add_argument("--m", type=int, default=100)
    gen.add_argument("--l", type=int, default=5)
    gen.add_argument("--groups", type=int, default=4)
    gen.add_argument("--minority", type=float, default=0.03)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    sol = commands.add_parser("solve", help="solve an instance")
    sol.add_argument("--instance", required=True)
    sol.add_argument("--eps", type=float, required=True)
    sol.add_argument(
        "--mode",
        choices=[MODE.Deterministic, MODE.Stochastic],
        default=MODE.Deterministic,
    )
    seeds = sol.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=str)
    sol.add_argument("--max-oracles", type=int, default=MAX_ORACLE_CALLS)
    sol.add_argument("--L-override", type=float)
    sol.add_argument("--rho", type=float)
    sol.add_argument("--K", type=int)
    sol.add_argument("--sapd-T", type=int)
    sol.add_argument("--eps-hat", type=float)
    sol.add_argument("--optfom-iters", type=int)
    sol.add_argument("--delta-f", type=float, default=0.0)
    sol.add_argument("--delta-ftilde", type=float, default=0.0)
    sol.add_argument("--no-composite", action="store_true")
    sol.add_argument("--trace-out")
    sol.add_argument("--result-out")
    sol.add_argument("--wall-clock", action="store_true")

    rep = commands.add_parser("report", help="summarize trace files")
    rep.add_argument("traces", nargs="+")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if not exc.code:
            raise
        return None

    if args.command is None:
        parser.print_usage()
        return None

    if args.command == "solve":
        try:
            args.seed_list = (
                [int(s) for s in args.seeds.split(",")]
                if args.seeds
                else [args.seed if args.seed is not None else 0]
            )
        except ValueError:
            print(f"Invalid seeds, namespace is: {args}")
            return None

    return args


def _seed_path(template, default, seed: int, many: bool) -> str:
    path = template or default
    if "{seed}" in path:
        return path.format(seed=seed)
    if many:
        p = Path(path)
        return str(p.with_name(f"{p.stem}.s{seed}{p.suffix}"))
    return path


def cmd_gen(args) -> int:
    """Write the instance file and print its digest."""
    if args.family == FAMILY.Linear:
        instance = gen_linear(args.n, args.m, args.l, args.seed)
    elif args.family == FAMILY.ToyUnconstrained:
        instance = ToyInstance(TOY_VARIANT.UnconstrainedSaddle, args.seed)
    elif args.family == FAMILY.ToyConstrained:
        instance = ToyInstance(TOY_VARIANT.ConstrainedScalar, args.seed)
    else:
        instance = gen_dro(
            DroConfig(n_groups=args.groups, minority=args.minority, seed=args.seed)
        )

    digest = save_instance(instance, args.out)
    print(f"{digest}  {args.out}")
    return EXIT_CODE.Success


def _solve_one(job: dict) -> dict:
    """Solve one seeded run; module-level so worker processes can unpickle it."""
    instance = load_instance(job["instance"])
    problem = instance.bilevel_problem()
    seed = job["seed"]

    eps_hat, optfom_iters = job["eps_hat"], job["optfom_iters"]
    if instance.family == FAMILY.Linear:
        if eps_hat is None:
            eps_hat = LINEAR_EXPERIMENT_EPS_HAT
        if optfom_iters is None:
            optfom_iters = OPTFOM_EXPERIMENT_ITERS

    config = SolverConfig(
        eps=job["eps"],
        rho=job["rho"],
        eps_hat=eps_hat,
        K=job["K"],
        mode=job["mode"],
        max_oracle_calls=job["max_oracles"],
        seed=seed,
        L_override=job["L_override"],
        optfom_max_iters=optfom_iters,
        sapd_T_override=job["sapd_T"],
        composite_rule=job["composite"] and problem.constrained is not None,
    )

    oracle = None
    if config.mode == MODE.Stochastic:
        if instance.family == FAMILY.Dro:
            oracle = instance.minibatch_oracle(seed)
        else:
            oracle = make_noisy(problem, job["delta_f"], job["delta_ftilde"], seed)

    result = solve(
        problem,
        config,
        oracle,
        x1_0=instance.initial_x1(),
        start=instance.initial_point(),
    )

    header = {
        "family": instance.family,
        "instance": Path(job["instance"]).stem,
        "seed": seed,
        "mode": config.mode,
        "eps": config.eps,
    }
    final = {
        "terminated_by": result.terminated_by,
        "outer_iters": result.outer_iters,
        "oracle_calls": result.oracle_calls,
        "sampled_k": result.sampled_k,
        "max_residual": result.kkt.max_residual,
    }
    write_trace(job["trace_out"], header, result.trace, final, job["wall_clock"])
    summary = dict(header, **result.as_dict(verbosity=1))
    if instance.family == FAMILY.Dro:
        x1, y1, _ = problem.layout.split_primal(result.primal)
        summary["validation"] = instance.evaluate(x1, y1)
        summary["baseline"] = instance.baseline(config.eps)
    write_result(job["result_out"], summary)

    return {"seed": seed, "terminated_by": result.terminated_by}


async def cmd_solve(args, loop) -> int:
    """Run every seed, in parallel worker processes when there are several."""
    stem = Path(args.instance).stem
    many = len(args.seed_list) > 1
    jobs = [
        {
            "instance": args.instance,
            "eps": args.eps,
            "mode": args.mode,
            "seed": seed,
            "rho": args.rho,
            "K": args.K,
            "max_oracles": args.max_oracles,
            "L_override": args.L_override,
            "eps_hat": args.eps_hat,
            "optfom_iters": args.optfom_iters,
            "sapd_T": args.sapd_T,
            "delta_f": args.delta_f,
            "delta_ftilde": args.delta_ftilde,
            "composite": not args.no_composite,
            "wall_clock": args.wall_clock,
            "trace_out": _seed_path(args.trace_out, f"{stem}.trace.jsonl", seed, many),
            "result_out": _seed_path(
                args.result_out, f"{stem}.result.json", seed, many
            ),
        }
        for seed in args.seed_list
    ]

    if many:
        workers = min(len(jobs), int(os.getenv(ENV_THREADS, os.cpu_count() or 1)))
        with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
            outcomes = await asyncio.gather(
                *(loop.run_in_executor(pool, _solve_one, job) for job in jobs)
            )
    else:
        outcomes = [await loop.run_in_executor(None, _solve_one, jobs[0])]

    code = EXIT_CODE.Success
    for outcome in outcomes:
        print(f"seed {outcome['seed']}: {outcome['terminated_by']}")
        if outcome["terminated_by"] not in CRITERION_TERMINATIONS:
            code = EXIT_CODE.Budget
    return code


def cmd_report(args) -> int:
    """Print the CSV summary; malformed traces are reported and skipped."""
    runs = []
    for path in args.traces:
        try:
            runs.append(read_trace(path))
        except TraceFormatError as exc:
            _LOGGER.error("skipping %s (line %s): %s", path, exc.line_no, exc)
        except OSError as exc:
            _LOGGER.error("skipping %s: %s", path, exc)

    if not runs:
        _LOGGER.error("no readable traces")
        return EXIT_CODE.Error

    write_report(runs, sys.stdout)
    return EXIT_CODE.Success


async def main(loop, argv=None) -> int:
    """Return the exit code of the requested command."""

    args = _parse_args(argv)
    if args is None:
        return EXIT_CODE.Error

    if args.verbosity > 1:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.verbosity > 0:
        logging.getLogger().setLevel(logging.INFO)
    if args.debug_mode > 0:
        logging.getLogger("bilevelminimax").setLevel(logging.DEBUG)

    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "solve":
            return await cmd_solve(args, loop)
        return cmd_report(args)

    except (KeyError, OSError, ValueError) as exc:
        _LOGGER.error("%s: %s", args.command, exc)
        return EXIT_CODE.Error


def run(argv=None) -> int:
    """Run the command line in a fresh event loop and return its exit code."""
    loop = asyncio.new_event_loop()
    try:
        return loop.run_until_complete(main(loop, argv))
    finally:
        loop.close()


if __name__ == "__main__":  # called from CLI?
    sys.exit(run())

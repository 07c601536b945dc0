"""Command line interface: ``amdvrp {gen,train,eval,solve,improve,validate,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import finite_diff_check, logprob_grad
from .baselines import MAX_BRUTE_FORCE_N, brute_force_optimal, nearest_neighbor, two_opt
from .instance import (
    Solution,
    default_capacity,
    generate_instance,
    read_instance,
    read_solution,
    validate_solution,
    write_instance,
    write_solution,
)
from .params import Architecture, ModelParams
from .rollout import GREEDY, MODES, REENCODE_MODES, SAMPLE, construct
from .trainer import ConfigError, TrainConfig, eval_instances, evaluate_params, train

log = logging.getLogger("amdvrp")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _default_seed():
    value = os.environ.get("AMD_SEED")
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"AMD_SEED must be an integer, got {value!r}") from None


def _workers(args):
    return args.workers if args.workers else (os.cpu_count() or 1)


def _ordered_map(fn, items, workers):
    # results keep input order whatever the worker count
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _optimal_length(inst):
    return brute_force_optimal(inst).length


# -- subcommands -----------------------------------------------------------


def cmd_gen(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    capacity = args.capacity or default_capacity(args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(args.count - 1)))
    for i in range(args.count):
        inst = generate_instance(args.n, capacity, args.seed + i)
        write_instance(out / f"instance-{i:0{width}d}.vrp", inst)
    print(f"wrote {args.count} instances to {out}")
    return EXIT_OK


def _apply_overrides(text, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    # later keys win: drop earlier occurrences of overridden keys
    keys = {item.split("=", 1)[0].strip() for item in overrides or []}
    kept = []
    for line in text.splitlines():
        key = line.split("#", 1)[0].split("=", 1)[0].strip()
        kept.append("" if key in keys else line)
    return "\n".join(kept + list(overrides or [])) + "\n"


def cmd_train(args):
    text = Path(args.config).read_text(encoding="utf-8")
    cfg = TrainConfig.from_text(_apply_overrides(text, args.set))
    result = train(cfg, progress=_progress_logger(cfg))
    summary = {
        "checkpoint": str(result.checkpoints[-1]),
        "steps": len(result.metrics),
        "heldout_greedy_len": [[s, round(v, 6)] for s, v in result.heldout],
    }
    print(json.dumps(summary))
    return EXIT_OK


def _progress_logger(cfg):
    every = max(1, (cfg.epochs * cfg.steps_per_epoch) // 100)

    def report(rec):
        if rec["step"] % every == 0:
            log.info(
                "step %d sample %.4f greedy %.4f adv %.4f",
                rec["step"], rec["mean_sample_len"], rec["mean_greedy_len"], rec["mean_advantage"],
            )

    return report


def cmd_eval(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    params = ckpt.load(args.checkpoint)
    capacity = args.capacity or default_capacity(args.n)
    instances = eval_instances(args.n, args.count, args.seed, capacity)
    res = evaluate_params(params, instances, args.mode, args.reencode, args.seed)
    summary = {
        "n": args.n,
        "capacity": capacity,
        "count": args.count,
        "mode": args.mode,
        "reencode": args.reencode,
        "mean": round(res.mean, 6),
        "std": round(res.std, 6),
    }
    if args.n <= min(7, MAX_BRUTE_FORCE_N):
        opt = np.array(_ordered_map(_optimal_length, instances, _workers(args)))
        summary["optimal_mean"] = round(float(opt.mean()), 6)
        summary["mean_gap"] = round(float(np.mean(res.lengths / opt - 1.0)), 6)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_solve(args):
    inst = read_instance(args.instance)
    if args.method == "model":
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required with --method model")
        params = ckpt.load(args.checkpoint)
        sol = construct(inst, params, args.mode, args.reencode, args.seed).solution
    elif args.method == "nearest":
        sol = nearest_neighbor(inst)
    else:
        if inst.n > MAX_BRUTE_FORCE_N:
            raise UsageError(f"--method brute needs n <= {MAX_BRUTE_FORCE_N}")
        sol = brute_force_optimal(inst)
    if args.two_opt:
        sol = two_opt(inst, sol)
    if args.out:
        write_solution(args.out, sol)
    print(f"{sol.length:.4f}")
    return EXIT_OK


def cmd_improve(args):
    inst = read_instance(args.instance)
    sol = two_opt(inst, read_solution(args.solution))
    write_solution(args.out or args.solution, sol)
    print(f"{sol.length:.4f}")
    return EXIT_OK


def cmd_validate(args):
    inst = read_instance(args.instance)
    sol = read_solution(args.solution)
    violation = validate_solution(inst, sol)
    if violation is not None:
        print(f"INVALID {violation}")
        return EXIT_FAIL
    print(f"OK {Solution.from_visits(inst, sol.visits).length:.4f}")
    return EXIT_OK


def gradcheck(d_h=16, n_layers=2, n_heads=2, n=6, capacity=10, coords=100, seed=0,
              corrupt=False, reencode="on_depot_return"):
    """Finite-difference check of rollout log-probability gradients on a sampled trajectory."""
    arch = Architecture(d_h, n_layers, n_heads)
    params = ModelParams.initialize(arch, seed)
    inst = generate_instance(n, capacity, seed)
    sol = construct(inst, params, SAMPLE, reencode, seed).solution
    _, grads = logprob_grad(inst, params, sol, reencode)
    flat = grads.flatten()
    include = ()
    if corrupt:
        # double the largest entry; a deliberately wrong gradient must be caught
        k = int(np.argmax(np.abs(flat)))
        flat = flat.copy()
        flat[k] *= 2.0
        include = (k,)
    rep = finite_diff_check(inst, params, sol, coords, reencode, seed=seed, grads=flat,
                            include=include)
    return rep, sol


def cmd_gradcheck(args):
    rep, sol = gradcheck(args.d_h, args.layers, args.heads, args.n, args.capacity, args.coords,
                         args.seed, args.corrupt, args.reencode)
    status = "PASS" if rep.passed else "FAIL"
    reencodes = sum(1 for v in sol.visits[:-1] if v == 0)
    print(f"{status} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_path}"
          f"{list(rep.worst_index)} coords={rep.coords.size} reencodes={reencodes}")
    return EXIT_OK if rep.passed else EXIT_FAIL


# -- parser ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="amdvrp", description="Generate, train, evaluate and solve capacitated VRP instances."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--workers", type=int, default=0,
                        help="worker processes (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate random instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--capacity", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean length of a checkpoint on generated instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--capacity", type=int)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES, default=GREEDY)
    p.add_argument("--reencode", choices=REENCODE_MODES, default="on_depot_return")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="solve one instance file")
    p.add_argument("--instance", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("model", "nearest", "brute"), default="model")
    p.add_argument("--mode", choices=MODES, default=GREEDY)
    p.add_argument("--reencode", choices=REENCODE_MODES, default="on_depot_return")
    p.add_argument("--two-opt", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("improve", help="apply 2-OPT to a solution file")
    p.add_argument("--instance", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_improve)

    p = sub.add_parser("validate", help="check a solution file against an instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--solution", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--d-h", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--capacity", type=int, default=10)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--reencode", choices=REENCODE_MODES, default="on_depot_return")
    p.add_argument("--corrupt", action="store_true", help="negative control: corrupt one entry")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"amdvrp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"amdvrp {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

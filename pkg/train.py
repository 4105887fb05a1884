import logging
import os
import sys
from argparse import ArgumentParser
from datetime import datetime, timezone

import src
from src.config import (
    build_dataset_spec,
    build_experiment_spec,
    build_loop_config,
    build_split_spec,
    derive_n_per_class,
    load_config,
    validate_config,
)
from src.data import GENERATORS, dataset_hash, load_dataset_dir, save_dataset
from src.dataset import make_split
from src.errors import EXIT_OK, ConfigError, PseudoRepError, exit_code_for
from src.experiments import EXPERIMENTS, PARTIAL_MARKER, run_experiment
from src.pseudo_loop import HISTORY_FILE, MANIFEST_FILE, RunHistory, run_loop
from src.utils import (
    bool_flag, init_wandb, read_json, resolve_seed, str2dic_all, str2floats, str2ints, str2list, to_jsonable, write_json,
)

logger = logging.getLogger("train")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_parser():
    """
    Generate a parameters parser.
    """
    parser = ArgumentParser(description="Pseudo-representation labeling")
    parser.add_argument("--log_level", type=str, default="INFO", help="DEBUG, INFO, WARNING, ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    # gen
    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    gen.add_argument("--name", type=str, required=True, choices=sorted(GENERATORS))
    gen.add_argument("--n-per-class", dest="n_per_class", type=int, default=100)
    gen.add_argument("--size", type=int, default=32, help="image side (crack, wafer)")
    gen.add_argument("--signal-len", dest="signal_len", type=int, default=128, help="signal length (signal)")
    gen.add_argument("--num-classes", dest="num_classes", type=int, default=None, help="wafer: <= 7, signal: <= 5")
    gen.add_argument("--difficulty", type=float, default=0.3)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--force", type=bool_flag, nargs="?", const=True, default=False)

    # run
    run = sub.add_parser("run", help="run the pseudo-labeling loop once")
    run.add_argument("--config", type=str, default=None, help="JSON config file")
    run.add_argument("--out", type=str, required=True)
    run.add_argument("--data", type=str, default=None, help="dataset directory written by `gen`")
    run.add_argument("--dataset_params", type=str2dic_all, default=None,
                     help="generator parameters, e.g. num_classes=int(3),n_per_class=int(40)")
    run.add_argument("--alpha", type=float, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    run.add_argument("--use_wandb", type=bool_flag, default=None)
    run.add_argument("--progress", type=bool_flag, nargs="?", const=True, default=False)
    run.add_argument("--force", type=bool_flag, nargs="?", const=True, default=False)

    # experiment
    exp = sub.add_parser("experiment", help="run one experiment of the suite")
    exp.add_argument("name", type=str, choices=sorted(EXPERIMENTS))
    exp.add_argument("--config", type=str, default=None)
    exp.add_argument("--out", type=str, required=True)
    exp.add_argument("--data", type=str, default=None)
    exp.add_argument("--dataset_params", type=str2dic_all, default=None)
    exp.add_argument("--alphas", type=str2floats, default=None, help="grid for alpha_sweep / ssl_ablation / benchmark, e.g. 0.1,0.25")
    exp.add_argument("--grid", type=str2list, default=None, help="grid values for the other experiments, comma separated")
    exp.add_argument("--seeds", type=str2ints, default=None, help="e.g. 0,1,2,3,4")
    exp.add_argument("--jobs", type=int, default=1)
    exp.add_argument("--resume", type=bool_flag, nargs="?", const=True, default=False)
    exp.add_argument("--force", type=bool_flag, nargs="?", const=True, default=False)

    # inspect
    insp = sub.add_parser("inspect", help="print the manifest and history of a run directory")
    insp.add_argument("run_dir", type=str)

    return parser


def setup_logging(level: str) -> None:
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level {level!r}", "log_level")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)


def prepare_out_dir(out_dir: str, force: bool, resume: bool = False) -> str:
    out_dir = os.path.abspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not (force or resume):
        raise ConfigError(f"{out_dir} exists and is not empty (use --force)", "out")
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dataset_overrides(args) -> dict:
    dataset = {}
    if args.data:
        dataset["path"] = args.data
    if args.dataset_params:
        dataset["params"] = dict(args.dataset_params)
    return {"dataset": dataset} if dataset else {}


def _grid_value(v: str):
    try:
        return float(v)
    except ValueError:
        return v


################################
# commands

def cmd_gen(args) -> str:
    seed = resolve_seed(args.seed)
    if args.name == "crack":
        params = {"n_per_class": args.n_per_class, "size": args.size}
    elif args.name == "wafer":
        params = {"num_classes": args.num_classes or 7, "n_per_class": args.n_per_class, "size": args.size,
                  "difficulty": args.difficulty}
    else:
        params = {"num_classes": args.num_classes or 5, "n_per_class": args.n_per_class,
                  "signal_len": args.signal_len, "difficulty": args.difficulty}
    out_dir = prepare_out_dir(args.out, args.force)
    dataset = GENERATORS[args.name](seed=seed, **params)
    manifest = save_dataset(dataset, out_dir, generator=args.name, seed=seed, params=params)
    logger.info("wrote %d samples (%s) to %s, hash %s", len(dataset), args.name, out_dir, manifest["hash"])
    return out_dir


def cmd_run(args) -> str:
    overrides = {"alpha": args.alpha, "seed": args.seed, "max_iterations": args.max_iterations,
                 "use_wandb": args.use_wandb, **_dataset_overrides(args)}
    params = validate_config(load_config(args.config, overrides))
    out_dir = prepare_out_dir(args.out, args.force)
    started = now()

    print()
    for k, v in params.items(): print(k, " --> ", v)
    print()

    dataset = build_dataset_spec(params).build()
    n_per_class, how = derive_n_per_class(params, dataset.num_classes)
    config = build_loop_config(params, n_per_class)
    split = make_split(dataset, build_split_spec(params))
    init_wandb(params)
    history = run_loop(split, config, out_dir=out_dir, use_wandb=params.use_wandb, progress=args.progress)

    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    manifest = read_json(manifest_path)
    manifest.update({
        "tool_version": src.__version__,
        "command": "run",
        "resolved_params": to_jsonable(params),
        "dataset_hash": dataset_hash(dataset),
        "started": started,
        "finished": now(),
    })
    manifest["interpretation"]["n_per_class"] = f"{n_per_class} ({how})"
    write_json(manifest_path, manifest)
    best = history.best
    logger.info("best iteration %d: test accuracy %.4f (baseline %.4f)", best.iteration, best.test_accuracy,
                history.baseline.test_accuracy)
    return out_dir


def cmd_experiment(args) -> str:
    overrides = _dataset_overrides(args)
    grid = args.alphas if args.alphas is not None else (
        [_grid_value(v) for v in args.grid] if args.grid is not None else None)
    experiment = {"name": args.name}
    if grid is not None:
        experiment["grid"] = grid
    if args.seeds is not None:
        experiment["seeds"] = args.seeds
    overrides["experiment"] = experiment
    params = validate_config(load_config(args.config, overrides), require_alpha=False)
    out_dir = prepare_out_dir(args.out, args.force, args.resume)
    if os.path.isfile(os.path.join(out_dir, PARTIAL_MARKER)) and not args.resume:
        logger.warning("%s holds an unfinished experiment; rerun with --resume to keep its finished points", out_dir)
    started = now()

    num_classes = load_dataset_dir(params.dataset.path).num_classes if params.dataset.path else None
    spec = build_experiment_spec(params, args.name, num_classes=num_classes)
    result = run_experiment(spec, out_dir=out_dir, jobs=args.jobs, resume=args.resume)
    write_json(os.path.join(out_dir, "manifest.json"), {
        "tool_version": src.__version__,
        "command": "experiment",
        "experiment": spec.to_dict(),
        "resolved_params": to_jsonable(params),
        "dataset_hash": dataset_hash(spec.dataset.build()),
        "rows": len(result.rows),
        "started": started,
        "finished": now(),
    })
    logger.info("%s: %d rows written to %s", args.name, len(result.rows), out_dir)
    return out_dir


def cmd_inspect(args) -> str:
    manifest_path = os.path.join(args.run_dir, MANIFEST_FILE)
    if not os.path.isfile(manifest_path):
        raise ConfigError(f"{args.run_dir} has no {MANIFEST_FILE}", "run_dir")
    manifest = read_json(manifest_path)
    print(f"run dir  : {os.path.abspath(args.run_dir)}")
    for key in ("tool_version", "seed", "started", "finished"):
        print(f"{key:<9}: {manifest.get(key)}")
    for name, value in manifest.get("interpretation", {}).items():
        print(f"  {name:<18} {value}")
    history_path = os.path.join(args.run_dir, HISTORY_FILE)
    if os.path.isfile(history_path):
        history = RunHistory.from_jsonl(history_path, manifest.get("summary", {}).get("best_iteration"))
        print()
        print(f"{'iter':>4} {'arm':<12} {'test_acc':>8} {'val_acc':>8} {'labeled':>8} {'unlabeled':>9} {'added':>6} {'precision':>9}")
        fmt = lambda v: "-" if v is None else f"{v:.4f}"
        for e in history.entries:
            mark = "*" if e.iteration == history.best_iteration else " "
            print(f"{e.iteration:>4}{mark}{e.arm:<12} {fmt(e.test_accuracy):>8} {fmt(e.val_accuracy):>8} "
                  f"{e.labeled_size:>8} {e.unlabeled_size:>9} {e.cumulative_added:>6} {fmt(e.precision):>9}")
    return args.run_dir


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "experiment": cmd_experiment, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = get_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
        COMMANDS[args.command](args)
    except PseudoRepError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception("%s failed", args.command)
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

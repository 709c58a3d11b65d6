"""Command-line entry point for CG-EGNN.

 - gen      synthetic datasets (n-body, 3D convex hulls)
 - train    fit CG-EGNN or a baseline, keep the best-on-validation checkpoint
 - eval     MSE of a checkpoint on a dataset split
 - check    property suites (equivariance, gradients, algebra, universality)
 - report   mean/std test MSE over runs

Every successful command prints one ``<command> key=value ...`` line on stdout.
Exit codes: 0 success, 1 property failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import config
from services import checks
from services.datasets import HullConfig, NBodyConfig, generate_dataset, resolve_splits
from services.errors import CgegnnError, ConfigError
from services.reporting import evaluate_checkpoint, write_report
from services.runconfig import build_train_config, read_config_file
from services.training import load_checkpoint, load_task, restore_model, task_defaults, train

logger = logging.getLogger("cgegnn")


def _summary(command: str, **fields) -> None:
    print(command + "".join(f" {k}={v}" for k, v in fields.items()), flush=True)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args: argparse.Namespace) -> int:
    if args.task == "hull3d":
        if args.particles is not None or args.steps is not None or args.dt is not None:
            raise ConfigError("--particles/--steps/--dt only apply to nbody")
        cfg = HullConfig(
            nodes=args.nodes if args.nodes is not None else HullConfig.nodes,
            min_separation=args.min_separation if args.min_separation is not None else 0.0,
        )
    else:
        if args.nodes is not None or args.min_separation is not None:
            raise ConfigError("--nodes/--min-separation only apply to hull3d")
        defaults = NBodyConfig()
        cfg = NBodyConfig(
            particles=args.particles if args.particles is not None else defaults.particles,
            steps=args.steps if args.steps is not None else defaults.steps,
            dt=args.dt if args.dt is not None else defaults.dt,
        )
    splits = resolve_splits(args.task, args.samples, args.splits)
    manifest = generate_dataset(args.task, cfg, args.out, seed=args.seed, splits=splits, threads=args.threads)
    _summary("gen", task=args.task, out=args.out, count=manifest["count"],
             train=splits[0], val=splits[1], test=splits[2], config_hash=manifest["config_hash"][:12])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data = load_task(args.data)
    file_values = read_config_file(args.config) if args.config else {}
    flags = {
        "model": args.model,
        "orders": args.orders,
        "seed": args.seed,
        "max_iters": args.iters,
        "lr": args.lr,
        "nf": args.nf,
        "layers": args.layers,
        "k": args.k,
        "batch_size": args.batch_size,
        "eval_every": args.eval_every,
        "patience": args.patience,
        "cosine": args.cosine,
    }
    cfg = build_train_config({"seed": config.SEED}, task_defaults(data), file_values, flags)
    if cfg.task != data.task:
        raise ConfigError(f"config task {cfg.task!r} does not match dataset task {data.task!r}")
    result = train(cfg, data, out_path=args.out)
    _summary("train", model=cfg.network.label, seed=cfg.seed, best_iter=result.best_iter,
             best_val_mse=f"{result.best_val_mse:.6g}", test_mse=f"{result.test_mse:.6g}",
             sec_per_iter=f"{result.sec_per_iter:.4g}", out=args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    res = evaluate_checkpoint(args.ckpt, args.data, args.split)
    _summary("eval", model=res["model"], task=res["task"], split=res["split"], samples=res["samples"],
             mse=f"{res['mse']:.6g}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    if args.kind == "equivariance":
        restored = restore_model(load_checkpoint(args.ckpt)) if args.ckpt else None
        report = checks.check_equivariance(
            args.trials or config.CHECK_TRIALS,
            args.tol if args.tol is not None else config.CHECK_EQUIVARIANCE_TOL,
            seed=args.seed, threads=args.threads, restored=restored,
        )
    elif args.kind == "grad":
        report = checks.check_grad(
            args.trials or 50,
            args.tol if args.tol is not None else config.CHECK_GRAD_TOL,
            seed=args.seed, threads=args.threads,
        )
    elif args.kind == "algebra":
        report = checks.check_algebra(
            args.trials or 1000,
            args.tol if args.tol is not None else 1e-12,
            seed=args.seed, threads=args.threads,
        )
    else:
        report = checks.check_universality(
            args.trials or config.CHECK_TRIALS,
            resolutions=(args.K,) if args.K else (2, 3, 4),
            sizes=(args.M,) if args.M else (2, 3),
            dims=(args.d,) if args.d else (1, 2),
            seed=args.seed, threads=args.threads,
        )
    print(report.summary_line(), flush=True)
    report.raise_on_failure()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    text = write_report(args.runs, args.out)
    if not args.out:
        sys.stdout.write(text)
    _summary("report", runs=args.runs, rows=text.count("\n") - 1, out=args.out or "-")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Clifford group equivariant graph networks")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("task", choices=("nbody", "hull3d"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=config.SEED)
    gen.add_argument("--samples", type=int)
    gen.add_argument("--splits", type=_int_list)
    gen.add_argument("--nodes", type=int)
    gen.add_argument("--particles", type=int)
    gen.add_argument("--steps", type=int)
    gen.add_argument("--dt", type=float)
    gen.add_argument("--min-separation", type=float)
    gen.add_argument("--threads", type=int, default=config.THREADS)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config")
    tr.add_argument("--model", choices=("cgegnn", "gnn", "egnn"))
    tr.add_argument("--orders", type=_int_list)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iters", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--nf", type=int)
    tr.add_argument("--layers", type=int)
    tr.add_argument("--k", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--cosine", action="store_true", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("test", "val", "train"), default="test")
    ev.set_defaults(func=cmd_eval)

    ck = sub.add_parser("check", help="run a property suite")
    ck.add_argument("kind", choices=("equivariance", "grad", "algebra", "universality"))
    ck.add_argument("--trials", type=int)
    ck.add_argument("--tol", type=float)
    ck.add_argument("--K", type=int)
    ck.add_argument("--M", type=int)
    ck.add_argument("--d", type=int)
    ck.add_argument("--ckpt")
    ck.add_argument("--threads", type=int, default=config.THREADS)
    ck.add_argument("--seed", type=int, default=config.SEED)
    ck.set_defaults(func=cmd_check)

    rp = sub.add_parser("report", help="aggregate run summaries")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else config.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CgegnnError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: gen-world, rollout, train, eval, ablate, stats.

Every command writes its artifacts atomically and drops a manifest next to them
that echoes the fully resolved arguments, so a run can be repeated from the
manifest alone.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .policy import (
    RandomPolicy,
    RecursiveOracle,
    SingleOracle,
    SoftmaxPolicy,
    params_from_text,
    params_to_text,
)
from .rao import RaoConfig, RewardMode, Weighting
from .runtime import RolloutLimits, run_rollout, trees_from_jsonl, trees_to_jsonl
from .trainer import (
    CURVE_COLUMNS,
    EVAL_CURVE_COLUMNS,
    TrainConfig,
    _seed,
    curves_to_tsv,
    evaluate,
    moving_average,
    run_ablation_grid,
    task_pool,
    train,
)
from .world import (
    Difficulty,
    WorldConfig,
    generate_world,
    world_from_json,
    world_to_json,
)

log = logging.getLogger("raocraft")

POLICIES = ("oracle-recursive", "oracle-single", "random", "learned")
SMOOTH_WINDOW = 10


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- io helpers -------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path: str | None, what: str) -> str:
    if not path:
        raise CliError("missing-input", f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"{what} file not found: {path}")
    return p.read_text(encoding="utf-8")


def load_world(path: str | None):
    try:
        return world_from_json(_read(path, "world"))
    except (ValueError, KeyError) as exc:
        raise CliError("bad-world", f"{path}: {exc}") from exc


def load_params(path: str | None) -> np.ndarray:
    try:
        return params_from_text(_read(path, "params"))
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError("bad-params", f"{path}: {exc}") from exc


def write_manifest(path: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"tool": "raocraft", "version": __version__, "command": args.command,
                "args": resolved}
    if extra:
        manifest.update(extra)
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# -- config assembly --------------------------------------------------------------------


def _limits(args, default: RolloutLimits) -> RolloutLimits:
    try:
        return RolloutLimits(args.max_depth if args.max_depth is not None else default.max_depth,
                             args.steps_per_node if args.steps_per_node is not None
                             else default.steps_per_node)
    except ValueError as exc:
        raise CliError("bad-config", str(exc)) from exc


def _rao(args) -> RaoConfig:
    try:
        return RaoConfig(lam=args.lam, reward_mode=RewardMode(args.reward_mode),
                         weighting=Weighting(args.weighting))
    except ValueError as exc:
        raise CliError("bad-config", str(exc)) from exc


def _train_config(args) -> TrainConfig:
    base = TrainConfig()
    try:
        return TrainConfig(
            batch_tasks=args.batch, group_size=args.group, learning_rate=args.lr,
            total_updates=args.updates, limits=_limits(args, base.limits), rao=_rao(args),
            seed=args.seed, eval_every=args.eval_every,
        )
    except ValueError as exc:
        raise CliError("bad-config", str(exc)) from exc


def _policy(args):
    if args.policy == "oracle-recursive":
        return RecursiveOracle()
    if args.policy == "oracle-single":
        return SingleOracle()
    if args.policy == "random":
        return RandomPolicy()
    return SoftmaxPolicy(load_params(args.params), greedy=args.greedy)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_world(args) -> int:
    try:
        cfg = WorldConfig(levels=args.levels, items_per_level=args.items_per_level,
                          base_items=args.base_items)
        world = generate_world(args.seed, cfg)
    except ValueError as exc:
        raise CliError("bad-config", str(exc)) from exc
    out = Path(args.out)
    atomic_write(out, world_to_json(world))
    write_manifest(_file_manifest(out), args, {"world_ref": world.world_ref})
    print(f"wrote {out} ({len(world.items)} items, ref {world.world_ref})")
    return 0


def cmd_rollout(args) -> int:
    world = load_world(args.world)
    limits = _limits(args, RolloutLimits(12, 25))
    policy = _policy(args)
    pool = task_pool(world, args.difficulty, args.n, _seed(args.seed, 11))
    trees = [run_rollout(policy, world, task, inv.copy(), limits, seed=_seed(args.seed, 12, i),
                         await_mode=args.await_mode, threads=args.threads)
             for i, (task, inv) in enumerate(pool)]
    out = Path(args.out)
    atomic_write(out, trees_to_jsonl(trees))
    write_manifest(_file_manifest(out), args, {"world_ref": world.world_ref})
    wins = sum(t.success for t in trees)
    print(f"wrote {len(trees)} trees to {out}; solved {wins}/{len(trees)}")
    return 0


def cmd_train(args) -> int:
    world = load_world(args.world)
    cfg = _train_config(args)
    res = train(cfg, world)
    out = Path(args.out)
    atomic_write(out / "params.txt", params_to_text(res.theta))
    atomic_write(out / "curves.tsv", curves_to_tsv(res.curves, CURVE_COLUMNS, cfg.to_dict()))
    if res.eval_curve:
        atomic_write(out / "eval_curve.tsv",
                     curves_to_tsv(res.eval_curve, EVAL_CURVE_COLUMNS, cfg.to_dict()))
    write_manifest(out / "manifest.json", args,
                   {"world_ref": world.world_ref, "train_config": cfg.to_dict()})
    last = res.curves[-1] if res.curves else {}
    print(f"trained {cfg.total_updates} updates; final success {last.get('success_rate', 0):.3f}")
    return 0


def cmd_eval(args) -> int:
    world = load_world(args.world)
    limits = _limits(args, RolloutLimits(12, 25))
    policy = _policy(args)
    if isinstance(policy, SoftmaxPolicy):
        policy = policy.theta
    diffs = args.difficulty or [d.value for d in Difficulty]
    report = evaluate(policy, world, diffs, limits, n_tasks=args.n, G=args.group, seed=args.seed)
    out = Path(args.out)
    atomic_write(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out / "manifest.json", args, {"world_ref": world.world_ref})
    for name, rep in report.per_difficulty.items():
        print(f"{name:7s} success {rep.success_rate:.3f}  pass@{args.group} {rep.pass_at_G:.3f}")
    return 0


def cmd_ablate(args) -> int:
    world = load_world(args.world)
    base = _train_config(args)
    results = run_ablation_grid(base, world)
    out = Path(args.out)
    for label, res in results.items():
        header = res.config.to_dict()
        atomic_write(out / f"curves_{label}.tsv", curves_to_tsv(res.curves, CURVE_COLUMNS, header))
        smooth = [dict(r) for r in res.curves]
        for col in CURVE_COLUMNS[1:]:
            for row, v in zip(smooth, moving_average([r[col] for r in res.curves], SMOOTH_WINDOW)):
                row[col] = v
        atomic_write(out / f"curves_{label}.smoothed.tsv",
                     curves_to_tsv(smooth, CURVE_COLUMNS, {**header, "smoothing_window": SMOOTH_WINDOW}))
        atomic_write(out / f"params_{label}.txt", params_to_text(res.theta))
    write_manifest(out / "manifest.json", args,
                   {"world_ref": world.world_ref, "runs": sorted(results)})
    for label, res in results.items():
        print(f"{label:26s} final success {res.curves[-1]['success_rate']:.3f}"
              if res.curves else label)
    return 0


def _load_trees(path: str):
    try:
        return trees_from_jsonl(_read(path, "trees"))
    except (ValueError, KeyError) as exc:
        raise CliError("bad-trees", f"{path}: {exc}") from exc


def tree_stats(trees, compare=None) -> dict:
    hist: dict[int, int] = {}
    for t in trees:
        if t.success:
            hist[t.max_depth] = hist.get(t.max_depth, 0) + 1
    out = {
        "trees": len(trees),
        "successful": sum(t.success for t in trees),
        "max_depth_histogram": {str(d): n for d, n in sorted(hist.items())},
        "mean_steps": float(np.mean([t.total_steps for t in trees])) if trees else None,
        "mean_makespan": float(np.mean([t.makespan for t in trees])) if trees else None,
    }
    if compare is not None:
        key = lambda t: (t.root.task.task_id, json.dumps(t.root.task.targets, sort_keys=True))
        a = {key(t): t for t in trees if t.success}
        b = {key(t): t for t in compare if t.success}
        common = sorted(a.keys() & b.keys())
        inter = {"n": len(common)}
        if common:
            inter.update({
                "a_steps": float(np.mean([a[k].total_steps for k in common])),
                "b_steps": float(np.mean([b[k].total_steps for k in common])),
                "a_makespan": float(np.mean([a[k].makespan for k in common])),
                "b_makespan": float(np.mean([b[k].makespan for k in common])),
            })
        out["intersection"] = inter
    return out


def cmd_stats(args) -> int:
    trees = [t for path in args.trees for t in _load_trees(path)]
    compare = [t for path in args.compare for t in _load_trees(path)] if args.compare else None
    stats = tree_stats(trees, compare)
    text = json.dumps(stats, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        atomic_write(out, text)
        write_manifest(_file_manifest(out), args)
    sys.stdout.write(text)
    return 0


# -- parser -----------------------------------------------------------------------------


def _add_limits(p):
    p.add_argument("--max-depth", type=int, default=None, help="recursion depth cap")
    p.add_argument("--steps-per-node", type=int, default=None, help="step budget cap per node")


def _add_training(p):
    d = TrainConfig()
    p.add_argument("--world", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=d.rao.lam,
                   help="delegation bonus strength")
    p.add_argument("--reward-mode", choices=[m.value for m in RewardMode], default="dense")
    p.add_argument("--weighting", choices=[w.value for w in Weighting],
                   default="inverse-frequency")
    p.add_argument("--batch", type=int, default=d.batch_tasks, help="tasks per update")
    p.add_argument("--group", type=int, default=d.group_size, help="rollouts per task (G)")
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--updates", type=int, default=d.total_updates)
    p.add_argument("--eval-every", type=int, default=d.eval_every,
                   help="held-out greedy eval period (0 disables)")
    _add_limits(p)
    p.add_argument("--out", required=True, help="output directory")


def _add_policy(p):
    p.add_argument("--policy", choices=POLICIES, default="oracle-recursive")
    p.add_argument("--params", help="parameter file for --policy learned")
    p.add_argument("--greedy", action="store_true", help="argmax instead of sampling (learned)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raocraft", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a crafting world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=int, default=WorldConfig.levels)
    p.add_argument("--items-per-level", type=int, default=WorldConfig.items_per_level)
    p.add_argument("--base-items", type=int, default=WorldConfig.base_items)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("rollout", help="run a policy on generated tasks and save the trees")
    p.add_argument("--world", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=[d.value for d in Difficulty], default="medium")
    p.add_argument("--n", type=int, default=1, help="number of tasks")
    p.add_argument("--await-mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--threads", type=int, default=1)
    _add_policy(p)
    _add_limits(p)
    p.add_argument("--out", required=True, help="tree file (.jsonl)")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("train", help="train the softmax policy on medium tasks")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy per difficulty")
    p.add_argument("--world", required=True)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--difficulty", choices=[d.value for d in Difficulty], action="append",
                   help="repeatable; default all")
    p.add_argument("--n", type=int, default=32, help="tasks per difficulty")
    p.add_argument("--group", type=int, default=8, help="G for pass@G")
    _add_policy(p)
    _add_limits(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="dense/sparse x weighted/uniform training grid")
    _add_training(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="summaries of saved tree files")
    p.add_argument("trees", nargs="+")
    p.add_argument("--compare", nargs="*", default=None,
                   help="second corpus for intersection metrics")
    p.add_argument("--out", help="write the summary here as well as stdout")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "policy", None) == "learned" and not args.params:
            raise CliError("missing-input", "--policy learned needs --params")
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # anything unexpected still gets a structured line
        log.debug("unhandled", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

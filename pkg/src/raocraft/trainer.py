"""Training loop, evaluation, and the reward/weighting ablation grid."""
from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .policy import FEATURE_DIM, FEATURES, Policy, SoftmaxPolicy
from .rao import RaoConfig, RewardMode, Weighting, assemble_update, build_records
from .runtime import ExecutionTree, RolloutLimits, run_rollout
from .world import CraftingWorld, Difficulty, Inventory, Task, generate_task

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("update", "success_rate", "pass_at_G", "mean_reward", "mean_makespan")
EVAL_CURVE_COLUMNS = ("update", "heldout_greedy_success")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_tasks: int = 16
    group_size: int = 8
    learning_rate: float = 0.02
    total_updates: int = 100
    limits: RolloutLimits = RolloutLimits(max_depth=6, steps_per_node=25)
    eval_limits: RolloutLimits = RolloutLimits(max_depth=12, steps_per_node=25)
    rao: RaoConfig = RaoConfig()
    seed: int = 0
    task_pool: int = 128
    eval_every: int = 5
    eval_tasks: int = 32
    max_abs_param: float = 1e3

    def __post_init__(self):
        if self.batch_tasks < 1:
            raise ValueError("batch_tasks must be >= 1")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.learning_rate < 0 or self.total_updates < 0:
            raise ValueError("learning_rate and total_updates must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rao"] = {"lam": self.rao.lam, "reward_mode": self.rao.reward_mode.value,
                    "weighting": self.rao.weighting.value}
        return d


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


TaskSampler = Callable[[int], Sequence[tuple[Task, Inventory]]]


def task_pool(world: CraftingWorld, difficulty: Difficulty | str, n: int, seed: int,
              verify: bool = True) -> list[tuple[Task, Inventory]]:
    return [generate_task(world, _seed(seed, i), difficulty, verify=verify) for i in range(n)]


def pool_sampler(pool: Sequence[tuple[Task, Inventory]], batch: int, seed: int) -> TaskSampler:
    def sample(update: int):
        rng = np.random.default_rng([seed, update, 7])
        idx = rng.choice(len(pool), size=batch, replace=len(pool) < batch)
        return [pool[i] for i in idx]
    return sample


@dataclass
class TrainResult:
    theta: np.ndarray
    curves: list[dict] = field(default_factory=list)
    eval_curve: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None


def rollout_group(policy: Policy, world: CraftingWorld, task: Task, inv: Inventory,
                  limits: RolloutLimits, g: int, seed: int) -> list[ExecutionTree]:
    return [run_rollout(policy, world, task, inv.copy(), limits, seed=_seed(seed, k))
            for k in range(g)]


def greedy_success(theta: np.ndarray, world: CraftingWorld,
                   tasks: Sequence[tuple[Task, Inventory]], limits: RolloutLimits,
                   seed: int = 0) -> float:
    pol = SoftmaxPolicy(theta, greedy=True)
    wins = [run_rollout(pol, world, t, inv.copy(), limits, seed=_seed(seed, i)).success
            for i, (t, inv) in enumerate(tasks)]
    return sum(wins) / len(wins) if wins else 0.0


def train(config: TrainConfig, world: CraftingWorld, sampler: TaskSampler | None = None,
          theta0: np.ndarray | None = None,
          eval_set: Sequence[tuple[Task, Inventory]] | None = None) -> TrainResult:
    if sampler is None:
        pool = task_pool(world, Difficulty.MEDIUM, config.task_pool, _seed(config.seed, 1))
        sampler = pool_sampler(pool, config.batch_tasks, config.seed)
    if eval_set is None and config.eval_every:
        eval_set = task_pool(world, Difficulty.MEDIUM, config.eval_tasks, _seed(config.seed, 2))
    theta = np.zeros(FEATURE_DIM) if theta0 is None else np.array(theta0, dtype=float)
    result = TrainResult(theta, config=config)

    for u in range(config.total_updates):
        if eval_set and u % config.eval_every == 0:
            result.eval_curve.append({
                "update": u,
                "heldout_greedy_success": greedy_success(theta, world, eval_set, config.limits),
            })
        policy = SoftmaxPolicy(theta)
        groups = [
            rollout_group(policy, world, task, inv, config.limits, config.group_size,
                          _seed(config.seed, 3, u, i))
            for i, (task, inv) in enumerate(sampler(u))
        ]
        records = build_records(groups, config.rao)
        grads = {
            (gi, ti, nid): node.score_grad
            for gi, trees in enumerate(groups)
            for ti, tree in enumerate(trees)
            for nid, node in tree.nodes.items()
        }
        step = assemble_update(records, grads, config.rao, dim=FEATURE_DIM)
        theta = theta + config.learning_rate * step
        if not np.all(np.abs(theta) <= config.max_abs_param):
            raise TrainingDiverged(
                f"update {u}: parameter bound {config.max_abs_param} exceeded; "
                f"theta={dict(zip(FEATURES, np.round(theta, 3)))}, |step|={np.linalg.norm(step):.3g}"
            )
        trees = [t for trees in groups for t in trees]
        roots = [r.reward for r in records if r.node_id == "0"]
        result.curves.append({
            "update": u,
            "success_rate": sum(t.success for t in trees) / len(trees),
            "pass_at_G": sum(any(t.success for t in trees) for trees in groups) / len(groups),
            "mean_reward": float(np.mean(roots)),
            "mean_makespan": float(np.mean([t.makespan for t in trees])),
        })
        log.debug("update %d %s", u, result.curves[-1])
    if eval_set and config.eval_every:
        result.eval_curve.append({
            "update": config.total_updates,
            "heldout_greedy_success": greedy_success(theta, world, eval_set, config.limits),
        })
    result.theta = theta
    return result


# -- evaluation -----------------------------------------------------------------------


@dataclass
class TaskOutcome:
    task_id: str
    solved: bool
    steps: int
    makespan: int
    max_depth: int
    pass_any: bool


@dataclass
class DifficultyReport:
    success_rate: float
    pass_at_G: float
    outcomes: list[TaskOutcome]
    depth_histogram: dict[int, int]

    @property
    def mean_max_depth(self) -> float:
        n = sum(self.depth_histogram.values())
        return sum(d * c for d, c in self.depth_histogram.items()) / n if n else float("nan")


@dataclass
class EvalReport:
    per_difficulty: dict[str, DifficultyReport]
    G: int

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "difficulties": {
                k: {
                    "success_rate": v.success_rate,
                    "pass_at_G": v.pass_at_G,
                    "depth_histogram": {str(d): c for d, c in sorted(v.depth_histogram.items())},
                    "outcomes": [asdict(o) for o in v.outcomes],
                }
                for k, v in self.per_difficulty.items()
            },
        }


def evaluate(policy: Policy | np.ndarray, world: CraftingWorld,
             difficulties: Iterable[Difficulty | str], limits: RolloutLimits, n_tasks: int,
             G: int, seed: int = 1000,
             tasks: Mapping[str, Sequence[tuple[Task, Inventory]]] | None = None) -> EvalReport:
    """Greedy rollouts give the success rate; pass@G pools the greedy rollout with G - 1 sampled ones.

    Scripted policies are deterministic, so for them both regimes coincide.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    if isinstance(policy, np.ndarray):
        greedy, sampled = SoftmaxPolicy(policy, greedy=True), SoftmaxPolicy(policy)
    elif isinstance(policy, SoftmaxPolicy):
        greedy, sampled = SoftmaxPolicy(policy.theta, greedy=True), SoftmaxPolicy(policy.theta)
    else:
        greedy = sampled = policy
    out = {}
    for diff in difficulties:
        diff = Difficulty.parse(diff)
        if tasks is not None and diff.value in tasks:
            items = tasks[diff.value]
        else:
            items = task_pool(world, diff, n_tasks, _seed(seed, list(Difficulty).index(diff)))
        outcomes = []
        hist: dict[int, int] = {}
        for i, (task, inv) in enumerate(items):
            tree = run_rollout(greedy, world, task, inv.copy(), limits, seed=_seed(seed, 9, i))
            # the greedy rollout is one of the G attempts, so pass@G >= success rate
            any_ok = tree.success
            if greedy is not sampled and not any_ok:
                any_ok = any(t.success for t in rollout_group(sampled, world, task, inv, limits,
                                                             G - 1, _seed(seed, 10, i)))
            if tree.success:
                hist[tree.max_depth] = hist.get(tree.max_depth, 0) + 1
            outcomes.append(TaskOutcome(task.task_id, tree.success, tree.total_steps,
                                        tree.makespan, tree.max_depth, any_ok))
        n = len(outcomes)
        out[diff.value] = DifficultyReport(
            success_rate=sum(o.solved for o in outcomes) / n,
            pass_at_G=sum(o.pass_any for o in outcomes) / n,
            outcomes=outcomes,
            depth_histogram=hist,
        )
    return EvalReport(out, G)


def intersection_metrics(a: Sequence[TaskOutcome], b: Sequence[TaskOutcome]) -> dict:
    """Mean steps and makespan of two runs, restricted to tasks both solved."""
    sa = {o.task_id: o for o in a if o.solved}
    sb = {o.task_id: o for o in b if o.solved}
    common = sorted(sa.keys() & sb.keys())
    if not common:
        return {"n": 0}
    mean = lambda xs: sum(xs) / len(xs)
    return {
        "n": len(common),
        "a_steps": mean([sa[k].steps for k in common]),
        "b_steps": mean([sb[k].steps for k in common]),
        "a_makespan": mean([sa[k].makespan for k in common]),
        "b_makespan": mean([sb[k].makespan for k in common]),
    }


# -- ablations --------------------------------------------------------------------------


ABLATION_GRID = (
    (RewardMode.DENSE, Weighting.INVERSE_FREQUENCY),
    (RewardMode.DENSE, Weighting.UNIFORM),
    (RewardMode.SPARSE, Weighting.INVERSE_FREQUENCY),
    (RewardMode.SPARSE, Weighting.UNIFORM),
)


def run_ablation_grid(base: TrainConfig, world: CraftingWorld,
                      sampler: TaskSampler | None = None,
                      eval_set: Sequence[tuple[Task, Inventory]] | None = None) -> dict[str, TrainResult]:
    if sampler is None:
        pool = task_pool(world, Difficulty.MEDIUM, base.task_pool, _seed(base.seed, 1))
        sampler = pool_sampler(pool, base.batch_tasks, base.seed)
    if eval_set is None and base.eval_every:
        eval_set = task_pool(world, Difficulty.MEDIUM, base.eval_tasks, _seed(base.seed, 2))
    results = {}
    for mode, weighting in ABLATION_GRID:
        cfg = replace(base, rao=replace(base.rao, reward_mode=mode, weighting=weighting))
        results[cfg.rao.label] = train(cfg, world, sampler, eval_set=eval_set)
    return results


def moving_average(values: Sequence[float], window: int = 10) -> list[float]:
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def curves_to_tsv(rows: Sequence[Mapping], columns: Sequence[str], header: Mapping | None = None) -> str:
    import json

    lines = []
    if header is not None:
        lines.append("# config: " + json.dumps(header, sort_keys=True, default=str))
    lines.append("\t".join(columns))
    for r in rows:
        lines.append("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def curves_from_tsv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    cols = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        rows.append({c: (int(v) if c == "update" else float(v)) for c, v in zip(cols, vals)})
    return rows

"""Recursive rollouts over a virtual clock.

Every step costs one time unit.  A delegating step spends its unit launching
children, then blocks until they return; parallel children all start right
after the launch, sequential ones start as the previous one returns.

Execution proceeds in rounds, one per virtual instant.  All nodes due at an
instant first decide against the same inventory snapshot (this is the part
that may run on worker threads), then their effects are applied in node
creation order.  Outcomes therefore never depend on thread scheduling.
"""
from __future__ import annotations

import json
import random
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .policy import (
    CRAFTED,
    DELEGATED,
    FEATURE_DIM,
    ActionCandidate,
    Decision,
    JobBook,
    NodeState,
    Policy,
    enumerate_actions,
)
from .world import CraftError, CraftingWorld, Inventory, Task, check_success, craft

TREE_SCHEMA_VERSION = 1
DEPTH_LIMIT_MESSAGE = "depth limit exceeded"


class TreeStructureError(ValueError):
    pass


@dataclass(frozen=True)
class RolloutLimits:
    max_depth: int = 6
    steps_per_node: int = 25

    def __post_init__(self):
        if self.max_depth < 1 or self.steps_per_node < 1:
            raise ValueError("max_depth and steps_per_node must both be >= 1")


@dataclass
class Step:
    index: int
    action: dict
    observation: str = ""
    log_prob: float | None = None
    awaited_children: list[str] = field(default_factory=list)
    virtual_duration: int = 1


@dataclass
class ExecutionNode:
    node_id: str
    parent_id: str | None
    depth: int
    task: Task
    budget: int
    start_counts: dict[str, int] = field(default_factory=dict)
    steps: list[Step] = field(default_factory=list)
    children: list[str] = field(default_factory=list)
    success_signal: float | None = None
    finish_message: str = ""
    # runtime-only bookkeeping, not persisted
    start_time: int = 0
    finish_time: int = 0
    score_grad: np.ndarray | None = None

    @property
    def trajectory(self) -> list[Step]:
        return self.steps


@dataclass
class ExecutionTree:
    nodes: dict[str, ExecutionNode]
    root_id: str
    seed: int
    limits: RolloutLimits
    world_ref: str
    makespan: int = 0

    @property
    def root(self) -> ExecutionNode:
        return self.nodes[self.root_id]

    @property
    def total_steps(self) -> int:
        return sum(len(n.steps) for n in self.nodes.values())

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes.values())

    @property
    def success(self) -> bool:
        return self.root.success_signal == 1.0


# -- rollout engine -------------------------------------------------------------------


class _Live:
    __slots__ = (
        "await_step",
        "child_finish",
        "done",
        "error",
        "node",
        "order",
        "queued",
        "rng",
        "state",
        "waiting",
    )

    def __init__(self, node: ExecutionNode, order: int, rng: random.Random):
        self.node = node
        self.order = order
        self.rng = rng
        self.state: NodeState | None = None
        self.done = False
        self.error = False
        self.waiting: set[str] = set()
        self.queued: list[ExecutionNode] = []
        self.await_step: Step | None = None
        self.child_finish: dict[str, str] = {}


def _node_rng(seed: int, node_id: str) -> random.Random:
    # str seeds hash through sha512, so streams are stable across processes
    return random.Random(f"{seed}/{node_id}")


class _Rollout:
    def __init__(self, policy: Policy, world: CraftingWorld, task: Task, inv: Inventory,
                 limits: RolloutLimits, seed: int, await_mode: str, threads: int):
        if await_mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown await_mode {await_mode!r}")
        self.policy = policy
        self.world = world
        self.task = task
        self.inv = inv
        self.limits = limits
        self.seed = seed
        self.sequential = await_mode == "sequential"
        self.threads = threads
        self.live: dict[str, _Live] = {}
        self.agenda: dict[int, list[_Live]] = {}
        self.tree = ExecutionTree({}, "0", seed, limits, world.world_ref)

    # scheduling helpers

    def _new_node(self, node_id: str, parent: ExecutionNode | None, targets: Mapping[str, int],
                  budget: int) -> ExecutionNode:
        task = self.task if parent is None else Task(dict(targets), None, self.task.world_ref)
        node = ExecutionNode(node_id, parent.node_id if parent else None,
                             0 if parent is None else parent.depth + 1, task, budget)
        self.tree.nodes[node_id] = node
        self.live[node_id] = _Live(node, len(self.live), _node_rng(self.seed, node_id))
        return node

    def _at(self, t: int, node: ExecutionNode) -> None:
        self.agenda.setdefault(t, []).append(self.live[node.node_id])

    def launch_subagent(self, parent: ExecutionNode, targets: Mapping[str, int],
                        num_steps: int) -> tuple[ExecutionNode | None, str]:
        """Create a child for ``parent``; returns (child, "") or (None, error message)."""
        if parent.depth + 1 > self.limits.max_depth:
            return None, DEPTH_LIMIT_MESSAGE
        if num_steps < 1:
            return None, "num_steps must be positive"
        if not targets or any(n < 1 for n in targets.values()):
            return None, "targets must be a non-empty map of positive counts"
        child_id = f"{parent.node_id}.{len(parent.children)}"
        parent.children.append(child_id)
        return self._new_node(child_id, parent, targets,
                              min(num_steps, self.limits.steps_per_node)), ""

    # main loop

    def run(self) -> ExecutionTree:
        root = self._new_node("0", None, self.task.targets, self.limits.steps_per_node)
        self._at(0, root)
        pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        try:
            while self.agenda:
                t = min(self.agenda)
                self._round(t, self.agenda.pop(t), pool)
        finally:
            if pool is not None:
                pool.shutdown()
        self.tree.makespan = root.finish_time
        return self.tree

    def _round(self, t: int, batch: list[_Live], pool) -> None:
        # a lone actor cannot race anyone, so it may read the live counts
        snapshot = self.inv._counts if len(batch) == 1 else self.inv.snapshot()
        work = list(batch)
        acting: list[_Live] = []
        while work:
            lv = work.pop(0)
            node = lv.node
            if lv.state is None:
                node.start_time = t
                node.start_counts = dict(snapshot)
                if self.policy.learned:
                    node.score_grad = np.zeros(FEATURE_DIM)
                lv.state = NodeState(node.node_id, node.depth, self.limits.max_depth, node.budget,
                                     self.limits.steps_per_node, node.task.targets,
                                     node.start_counts, JobBook(self.world, node.task.targets))
            if lv.await_step is not None:
                step = lv.await_step
                step.observation = " | ".join(lv.child_finish[c] for c in step.awaited_children)
                lv.await_step = None
            if lv.done or lv.state.steps_taken >= node.budget:
                work.extend(self._terminate(lv, t, snapshot))
            else:
                acting.append(lv)
        acting.sort(key=lambda lv: lv.order)
        if pool is not None and len(acting) > 1:
            decisions = list(pool.map(lambda lv: self._decide(lv, snapshot), acting))
        else:
            decisions = [self._decide(lv, snapshot) for lv in acting]
        for lv, (cands, dec) in zip(acting, decisions):
            self._apply(lv, cands, dec, t)

    def _decide(self, lv: _Live, snapshot: Mapping[str, int]):
        try:
            cands = enumerate_actions(lv.state, self.world, snapshot)
            return cands, self.policy.act(lv.state, cands, lv.rng)
        except Exception as exc:  # policy bugs end the node, not the rollout
            return None, exc

    def _apply(self, lv: _Live, cands: list[ActionCandidate] | None, dec, t: int) -> None:
        node, state = lv.node, lv.state
        index = state.steps_taken
        state.steps_taken += 1
        if cands is None or not isinstance(dec, Decision):
            node.steps.append(Step(index, {"kind": "error"}, f"policy error: {dec!r}"))
            lv.done = lv.error = True
            self._at(t + 1, node)
            return
        cand = cands[dec.index]
        if dec.grad is not None and node.score_grad is not None:
            node.score_grad += dec.grad
        step = Step(index, cand.to_record(), log_prob=dec.log_prob)
        node.steps.append(step)

        if cand.kind == "finish":
            step.observation = "finished"
            lv.done = True
        elif cand.kind == "craft":
            j = cand.jobs[0]
            item, total = cand.targets[0]
            recipe = self.world.recipes[item]
            try:
                step.observation = craft(self.world, self.inv,
                                         recipe.scaled(total // recipe.result_count),
                                         (item, total), actor=node.node_id)
                state.book.mark(j, CRAFTED)
            except CraftError as exc:
                step.observation = f"craft failed: {exc}"
        else:
            if self.sequential and len(cand.jobs) > 1:
                step.action["sequential"] = True
            kids = []
            for j, (item, n), budget in zip(cand.jobs, cand.targets, cand.budgets):
                child, err = self.launch_subagent(node, {item: n}, budget)
                if child is None:
                    step.observation = err
                    break
                state.book.mark(j, DELEGATED)
                kids.append(child)
            if kids:
                step.awaited_children = [k.node_id for k in kids]
                lv.waiting = set(step.awaited_children)
                lv.await_step = step
                if self.sequential:
                    self._at(t + 1, kids[0])
                    lv.queued = kids[1:]
                else:
                    for k in kids:
                        self._at(t + 1, k)
                return
        self._at(t + 1, node)

    def _terminate(self, lv: _Live, t: int, snapshot: Mapping[str, int]) -> list[_Live]:
        node = lv.node
        ok = (not lv.error) and check_success(node.task.targets, node.start_counts, snapshot)
        node.success_signal = 1.0 if ok else 0.0
        node.finish_time = t
        goal = ", ".join(f"{n}x {k}" for k, n in node.task.targets.items())
        if ok:
            node.finish_message = f"done: crafted {goal}"
        elif lv.error:
            node.finish_message = f"failed: policy error while crafting {goal}"
        else:
            node.finish_message = f"failed: could not craft {goal}"
        if node.parent_id is None:
            return []
        parent = self.live[node.parent_id]
        parent.child_finish[node.node_id] = node.finish_message
        parent.waiting.discard(node.node_id)
        if parent.queued:
            nxt = parent.queued.pop(0)
            return [self.live[nxt.node_id]]
        if not parent.waiting:
            return [parent]
        return []


def run_rollout(policy: Policy, world: CraftingWorld, task: Task, inventory: Inventory,
                limits: RolloutLimits, seed: int, await_mode: str = "parallel",
                threads: int = 1) -> ExecutionTree:
    """Run one recursive rollout to completion.  ``inventory`` is mutated in place."""
    return _Rollout(policy, world, task, inventory, limits, seed, await_mode, threads).run()


# -- virtual clock replay ---------------------------------------------------------------


def compute_makespan(tree: ExecutionTree) -> int:
    nodes = tree.nodes
    if tree.root_id not in nodes:
        raise TreeStructureError("root node missing")
    seen: set[str] = set()

    def finish(nid: str, start: int) -> int:
        if nid in seen:
            raise TreeStructureError(f"node {nid} reached twice")
        seen.add(nid)
        node = nodes.get(nid)
        if node is None:
            raise TreeStructureError(f"unknown node {nid}")
        t = start
        for step in node.steps:
            t0 = t + step.virtual_duration
            t = t0
            for cid in step.awaited_children:
                child = nodes.get(cid)
                if child is None or child.parent_id != nid:
                    raise TreeStructureError(f"step of {nid} awaits foreign node {cid}")
                if step.action.get("sequential"):
                    t = finish(cid, t)
                else:
                    t = max(t, finish(cid, t0))
        return t

    span = finish(tree.root_id, 0)
    if len(seen) != len(nodes):
        raise TreeStructureError("tree has unreachable nodes")
    return span


def validate_tree(tree: ExecutionTree) -> None:
    """Raise TreeStructureError unless links, depths and step counts are consistent."""
    nodes = tree.nodes
    root = nodes.get(tree.root_id)
    if root is None or root.parent_id is not None or root.depth != 0:
        raise TreeStructureError("bad root")
    for nid, node in nodes.items():
        if len(node.steps) > node.budget:
            raise TreeStructureError(f"{nid} exceeds its budget")
        if node.depth > tree.limits.max_depth:
            raise TreeStructureError(f"{nid} exceeds the depth limit")
        for cid in node.children:
            child = nodes.get(cid)
            if child is None or child.parent_id != nid or child.depth != node.depth + 1:
                raise TreeStructureError(f"bad link {nid} -> {cid}")
        if node.parent_id is not None:
            parent = nodes.get(node.parent_id)
            if parent is None or nid not in parent.children:
                raise TreeStructureError(f"{nid} has no parent link")
    compute_makespan(tree)


def longest_step_path(tree: ExecutionTree) -> int:
    """Most steps along any root-to-leaf chain of nodes."""
    def walk(nid: str) -> int:
        node = tree.nodes[nid]
        return len(node.steps) + max((walk(c) for c in node.children), default=0)
    return walk(tree.root_id)


# -- persistence ------------------------------------------------------------------------


def _task_record(task: Task) -> dict:
    return {
        "targets": dict(task.targets),
        "difficulty": task.difficulty.value if task.difficulty else None,
        "world_ref": task.world_ref,
        "task_id": task.task_id,
    }


def tree_to_lines(tree: ExecutionTree) -> list[str]:
    header = {
        "schema_version": TREE_SCHEMA_VERSION,
        "root_id": tree.root_id,
        "seed": tree.seed,
        "limits": {"max_depth": tree.limits.max_depth,
                   "steps_per_node": tree.limits.steps_per_node},
        "world_ref": tree.world_ref,
        "makespan": tree.makespan,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for node in tree.nodes.values():
        lines.append(json.dumps({
            "node_id": node.node_id,
            "parent_id": node.parent_id,
            "depth": node.depth,
            "budget": node.budget,
            "task": _task_record(node.task),
            "start_counts": node.start_counts,
            "steps": [
                {"action": s.action, "observation": s.observation, "log_prob": s.log_prob,
                 "awaited_children": s.awaited_children}
                for s in node.steps
            ],
            "children": node.children,
            "success_signal": node.success_signal,
            "finish_message": node.finish_message,
        }, sort_keys=True))
    return lines


def tree_to_jsonl(tree: ExecutionTree) -> str:
    return "\n".join(tree_to_lines(tree)) + "\n"


def trees_from_jsonl(text: str) -> list[ExecutionTree]:
    """Parse one or more concatenated tree records (each starts with a header line)."""
    from .world import Difficulty

    trees: list[ExecutionTree] = []
    for raw in text.splitlines():
        if not raw.strip():
            continue
        rec = json.loads(raw)
        if "root_id" in rec and "node_id" not in rec:
            if rec.get("schema_version") != TREE_SCHEMA_VERSION:
                raise ValueError(f"tree schema version {rec.get('schema_version')!r} "
                                 f"!= {TREE_SCHEMA_VERSION}")
            lim = rec["limits"]
            trees.append(ExecutionTree({}, rec["root_id"], rec["seed"],
                                       RolloutLimits(lim["max_depth"], lim["steps_per_node"]),
                                       rec["world_ref"], rec.get("makespan", 0)))
            continue
        if not trees:
            raise ValueError("node record before any tree header")
        t = rec["task"]
        task = Task({k: int(v) for k, v in t["targets"].items()},
                    Difficulty.parse(t["difficulty"]) if t.get("difficulty") else None,
                    t["world_ref"], t.get("task_id", ""))
        node = ExecutionNode(rec["node_id"], rec["parent_id"], rec["depth"], task, rec["budget"],
                             start_counts=rec["start_counts"], children=rec["children"],
                             success_signal=rec["success_signal"],
                             finish_message=rec["finish_message"])
        node.steps = [Step(i, s["action"], s["observation"], s["log_prob"], s["awaited_children"])
                      for i, s in enumerate(rec["steps"])]
        trees[-1].nodes[node.node_id] = node
    return trees


def tree_from_jsonl(text: str) -> ExecutionTree:
    trees = trees_from_jsonl(text)
    if len(trees) != 1:
        raise ValueError(f"expected one tree, found {len(trees)}")
    return trees[0]


def trees_to_jsonl(trees: Iterable[ExecutionTree]) -> str:
    return "".join(tree_to_jsonl(t) for t in trees)

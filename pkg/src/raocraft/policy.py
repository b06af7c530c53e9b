"""Node-level decision making: candidate actions, features, and policies.

Each running node keeps a ``JobBook``: the per-occurrence expansion of its
targets into craft jobs.  A job is pending, crafted by the node itself, or
handed to a child.  Candidates are built from the book plus the live
inventory:

* ``craft`` a pending job whose sub-jobs are complete and whose ingredients
  are in stock;
* ``delegate`` a pending job whose subtree is still untouched, either alone or
  together with every other top-level untouched deep subtree (the parallel
  option);
* ``finish``, always.

A job handed to a child is never revisited; if the child fails, the parent
finds the ingredient missing and cannot craft the job above it.
"""
from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .world import CraftingWorld, Inventory, crafting_depth, expand

PARAMS_VERSION = 1
BUDGET_PER_DEPTH = 8

FEATURES = (
    "finish_done",
    "finish_undone",
    "craft_target",
    "craft_near",
    "craft_deep",
    "delegate_deep",
    "delegate_shallow",
    "delegate_group",
    "delegate_blocked",
    "delegate_at_depth",
)
FEATURE_DIM = len(FEATURES)
_F = {name: i for i, name in enumerate(FEATURES)}

PENDING, CRAFTED, DELEGATED = 0, 1, 2


class JobBook:
    """Flattened job forest for one node's targets."""

    def __init__(self, world: CraftingWorld, targets: Mapping[str, int]):
        self.item: list[str] = []
        self.count: list[int] = []
        self.executions: list[int] = []
        self.parent: list[int] = []
        self.children: list[list[int]] = []
        self.depth: list[int] = []
        self.dist: list[int] = []
        self.status: list[int] = []
        self.touched: list[bool] = []
        self.roots: list[int] = []
        for item, n in targets.items():
            self.roots.append(self._add(expand(world, item, n), -1, 0, world))

    def _add(self, job, parent: int, dist: int, world: CraftingWorld) -> int:
        idx = len(self.item)
        self.item.append(job.item)
        self.count.append(job.count)
        self.executions.append(job.executions)
        self.parent.append(parent)
        self.children.append([])
        self.depth.append(crafting_depth(world, job.item))
        self.dist.append(dist)
        self.status.append(PENDING)
        self.touched.append(False)
        for c in job.children:
            self.children[idx].append(self._add(c, idx, dist + 1, world))
        return idx

    def __len__(self) -> int:
        return len(self.item)

    def mark(self, idx: int, status: int) -> None:
        self.status[idx] = status
        if status == DELEGATED:
            stack = list(self.children[idx])
            while stack:
                c = stack.pop()
                self.status[c] = DELEGATED
                self.touched[c] = True
                stack.extend(self.children[c])
        j = idx
        while j >= 0 and not self.touched[j]:
            self.touched[j] = True
            j = self.parent[j]

    def complete(self, idx: int) -> bool:
        return self.status[idx] != PENDING


@dataclass
class NodeState:
    """Everything a policy may look at when a node acts."""

    node_id: str
    depth: int
    max_depth: int
    budget: int
    steps_per_node: int
    targets: Mapping[str, int]
    start_counts: Mapping[str, int]
    book: JobBook
    steps_taken: int = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.steps_taken

    def can_delegate(self) -> bool:
        return self.depth + 1 <= self.max_depth


@dataclass(frozen=True)
class Observation:
    deficits: Mapping[str, tuple[int, int]]  # target -> (remaining deficit, crafting depth)
    coverage: float
    depth_frac: float
    budget_frac: float
    satisfied: bool


def observe(state: NodeState, world: CraftingWorld, counts: Mapping[str, int]) -> Observation:
    deficits = {}
    need = got = 0
    for t, n in state.targets.items():
        made = counts.get(t, 0) - state.start_counts.get(t, 0)
        deficits[t] = (max(0, n - made), crafting_depth(world, t))
        need += n
        got += min(n, max(0, made))
    coverage = got / need if need else 1.0
    return Observation(
        deficits=deficits,
        coverage=coverage,
        depth_frac=min(1.0, state.depth / state.max_depth) if state.max_depth else 1.0,
        budget_frac=max(0.0, state.remaining / state.budget),
        satisfied=got == need,
    )


@dataclass(eq=False)
class ActionCandidate:
    kind: str  # "finish" | "craft" | "delegate"
    jobs: tuple[int, ...] = ()
    targets: tuple[tuple[str, int], ...] = ()
    budgets: tuple[int, ...] = ()
    group: bool = False
    features: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))

    def to_record(self, sequential: bool = False) -> dict:
        if self.kind == "finish":
            return {"kind": "finish"}
        if self.kind == "craft":
            item, total = self.targets[0]
            return {"kind": "craft", "item": item, "count": total}
        rec = {
            "kind": "delegate",
            "targets": [{item: n} for item, n in self.targets],
            "budgets": list(self.budgets),
            "group": self.group,
        }
        if sequential:
            rec["sequential"] = True
        return rec


def delegation_budget(depth: int, cap: int) -> int:
    return max(1, min(depth * BUDGET_PER_DEPTH, cap))


def enumerate_actions(state: NodeState, world: CraftingWorld,
                      inv: Inventory | Mapping[str, int]) -> list[ActionCandidate]:
    counts = inv.snapshot() if isinstance(inv, Inventory) else inv
    book = state.book
    obs = observe(state, world, counts)

    finish = np.zeros(FEATURE_DIM)
    finish[_F["finish_done" if obs.satisfied else "finish_undone"]] = 1.0
    out = [ActionCandidate("finish", features=finish)]

    blocked = not state.can_delegate()
    multi = len(book.roots) > 1
    frontier = []
    crafts = []
    for j in range(len(book)):
        if book.status[j] != PENDING:
            continue
        p = book.parent[j]
        if not book.touched[j]:
            if p < 0:
                if multi:
                    frontier.append(j)
            elif book.status[p] == PENDING and (book.touched[p] or book.parent[p] < 0):
                frontier.append(j)
        if all(book.status[c] != PENDING for c in book.children[j]):
            recipe = world.recipes[book.item[j]]
            ex = book.executions[j]
            if all(counts.get(k, 0) >= v * ex for k, v in recipe.ingredients.items()):
                crafts.append(j)

    def delegate_features(kind: str) -> np.ndarray:
        f = np.zeros(FEATURE_DIM)
        f[_F[kind]] = 1.0
        if blocked:
            f[_F["delegate_blocked"]] = 1.0
        f[_F["delegate_at_depth"]] = obs.depth_frac
        return f

    fset = set(frontier)
    # maximal deep subtrees: no ancestor of theirs is itself on the frontier
    top_deep = []
    for j in frontier:
        if book.depth[j] < 2:
            continue
        a = book.parent[j]
        while a >= 0 and a not in fset:
            a = book.parent[a]
        if a < 0:
            top_deep.append(j)
    if len(top_deep) >= 2:
        out.append(ActionCandidate(
            "delegate",
            jobs=tuple(top_deep),
            targets=tuple((book.item[j], book.count[j]) for j in top_deep),
            budgets=tuple(delegation_budget(book.depth[j], state.steps_per_node) for j in top_deep),
            group=True,
            features=delegate_features("delegate_group"),
        ))
    for j in frontier:
        out.append(ActionCandidate(
            "delegate",
            jobs=(j,),
            targets=((book.item[j], book.count[j]),),
            budgets=(delegation_budget(book.depth[j], state.steps_per_node),),
            features=delegate_features("delegate_deep" if book.depth[j] >= 2 else "delegate_shallow"),
        ))
    for j in crafts:
        f = np.zeros(FEATURE_DIM)
        d = book.dist[j]
        f[_F["craft_target" if d == 0 else "craft_near" if d == 1 else "craft_deep"]] = 1.0
        rc = world.recipes[book.item[j]].result_count
        out.append(ActionCandidate(
            "craft",
            jobs=(j,),
            targets=((book.item[j], book.executions[j] * rc),),
            features=f,
        ))
    return out


# -- softmax policy -------------------------------------------------------------------


class PolicyError(ValueError):
    pass


def _feature_matrix(candidates: Sequence[ActionCandidate]) -> np.ndarray:
    return np.stack([c.features for c in candidates])


def action_probabilities(theta: np.ndarray, candidates: Sequence[ActionCandidate]) -> np.ndarray:
    scores = _feature_matrix(candidates) @ theta
    scores = scores - scores.max()
    p = np.exp(scores)
    return p / p.sum()


def sample_action(theta: np.ndarray, candidates: Sequence[ActionCandidate], rng) -> tuple[ActionCandidate, float]:
    if not candidates:
        raise PolicyError("empty candidate set")
    scores = _feature_matrix(candidates) @ theta
    shifted = scores - scores.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    cdf = np.cumsum(np.exp(logp))
    i = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(candidates) - 1)
    return candidates[i], float(logp[i])


def log_prob(theta: np.ndarray, candidates: Sequence[ActionCandidate], chosen: int) -> float:
    scores = _feature_matrix(candidates) @ theta
    m = scores.max()
    return float(scores[chosen] - m - np.log(np.exp(scores - m).sum()))


def log_prob_gradient(theta: np.ndarray, candidates: Sequence[ActionCandidate],
                      chosen: ActionCandidate | int) -> np.ndarray:
    """Score function of one decision: phi(chosen) - E_pi[phi]."""
    if isinstance(chosen, ActionCandidate):
        idx = next((i for i, c in enumerate(candidates) if c is chosen), None)
        if idx is None:
            raise PolicyError("chosen action is not among the candidates")
    else:
        idx = int(chosen)
        if not 0 <= idx < len(candidates):
            raise PolicyError("chosen index out of range")
    phi = _feature_matrix(candidates)
    p = action_probabilities(theta, candidates)
    return phi[idx] - p @ phi


@dataclass
class Decision:
    index: int
    log_prob: float | None = None
    grad: np.ndarray | None = None


class Policy:
    """Interface the runtime drives.  ``act`` must be a pure function of its inputs."""

    learned = False

    def act(self, state: NodeState, candidates: Sequence[ActionCandidate],
            rng: np.random.Generator) -> Decision:
        raise NotImplementedError


class SoftmaxPolicy(Policy):
    learned = True

    def __init__(self, theta=None, greedy: bool = False):
        self.theta = np.zeros(FEATURE_DIM) if theta is None else np.asarray(theta, dtype=float)
        if self.theta.shape != (FEATURE_DIM,):
            raise PolicyError(f"expected {FEATURE_DIM} parameters, got shape {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise PolicyError("parameters must be finite")
        self.greedy = greedy

    def act(self, state, candidates, rng):
        phi = _feature_matrix(candidates)
        scores = phi @ self.theta
        shifted = scores - scores.max()
        e = np.exp(shifted)
        z = e.sum()
        p = e / z
        if self.greedy:
            i = int(np.argmax(scores))
        else:
            i = min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")),
                    len(candidates) - 1)
        grad = phi[i] - p @ phi
        return Decision(i, float(shifted[i] - np.log(z)), grad)


class RandomPolicy(Policy):
    def act(self, state, candidates, rng):
        i = rng.randrange(len(candidates))
        return Decision(i, float(-np.log(len(candidates))))


def oracle_recursive(state: NodeState, candidates: Sequence[ActionCandidate]) -> ActionCandidate:
    book = state.book
    if state.can_delegate():
        deep = [c for c in candidates if c.kind == "delegate" and book.depth[c.jobs[0]] >= 2]
        group = [c for c in deep if c.group]
        if group:
            return group[0]
        if deep:
            # lone deep subtree: delegate only the top-most one
            return min(deep, key=lambda c: book.dist[c.jobs[0]])
    return _craft_or_finish(state, candidates)


def oracle_single(state: NodeState, candidates: Sequence[ActionCandidate]) -> ActionCandidate:
    return _craft_or_finish(state, candidates)


def _craft_or_finish(state: NodeState, candidates: Sequence[ActionCandidate]) -> ActionCandidate:
    crafts = [c for c in candidates if c.kind == "craft"]
    if crafts:
        return max(crafts, key=lambda c: state.book.dist[c.jobs[0]])
    return candidates[0]


def _position(candidates: Sequence[ActionCandidate], chosen: ActionCandidate) -> int:
    return next(i for i, c in enumerate(candidates) if c is chosen)


class RecursiveOracle(Policy):
    def act(self, state, candidates, rng):
        return Decision(_position(candidates, oracle_recursive(state, candidates)))


class SingleOracle(Policy):
    def act(self, state, candidates, rng):
        return Decision(_position(candidates, oracle_single(state, candidates)))


# -- checkpoints ----------------------------------------------------------------------


def params_to_text(theta: np.ndarray) -> str:
    header = json.dumps({"feature_dim": len(theta), "version": PARAMS_VERSION,
                         "features": list(FEATURES)})
    return header + "\n" + "\n".join(repr(float(x)) for x in theta) + "\n"


def params_from_text(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    header = json.loads(lines[0])
    if header.get("version") != PARAMS_VERSION:
        raise ValueError(f"params version {header.get('version')!r} != {PARAMS_VERSION}")
    theta = np.array([float(x) for x in lines[1:]])
    if len(theta) != header["feature_dim"]:
        raise ValueError("params length does not match header feature_dim")
    return theta

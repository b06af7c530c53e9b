"""Synthetic crafting worlds, tasks, and the shared inventory they act on.

A world is a layered recipe DAG: base items sit at level 0 and every crafted
item at level ``l`` has one recipe whose ingredients come from levels below
``l``, with at least one ingredient pinned to level ``l - 1``.  That pin makes
an item's crafting depth equal its level, which is what lets tasks be sampled
by difficulty band.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import threading
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

WORLD_SCHEMA_VERSION = 1
TASK_SCHEMA_VERSION = 1


class WorldConfigError(ValueError):
    pass


class TaskGenerationError(RuntimeError):
    pass


class CraftError(ValueError):
    """A rejected craft call.  The inventory is left untouched."""


class Difficulty(enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @property
    def band(self) -> tuple[int, int]:
        return _BANDS[self]

    @classmethod
    def parse(cls, value: str | Difficulty) -> Difficulty:
        if isinstance(value, Difficulty):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"invalid difficulty {value!r}; expected easy, medium or hard") from None


_BANDS = {
    Difficulty.EASY: (2, 3),
    Difficulty.MEDIUM: (4, 6),
    Difficulty.HARD: (7, 9),
}


@dataclass(frozen=True)
class Item:
    name: str
    level: int


@dataclass(frozen=True)
class Recipe:
    result_item: str
    ingredients: Mapping[str, int]
    result_count: int = 1

    def scaled(self, executions: int) -> dict[str, int]:
        return {k: v * executions for k, v in self.ingredients.items()}


@dataclass(frozen=True)
class WorldConfig:
    levels: int = 9
    items_per_level: int = 4
    base_items: int = 6
    ingredient_kinds: tuple[int, int] = (2, 3)
    ingredient_count: tuple[int, int] = (1, 3)
    result_count: tuple[int, int] = (1, 2)
    # chance that a non-pinned ingredient is a base item rather than a crafted one
    base_ingredient_prob: float = 0.5

    def validate(self) -> None:
        if self.levels < 1:
            raise WorldConfigError("levels must be >= 1")
        if self.items_per_level < 1:
            raise WorldConfigError("items_per_level must be >= 1")
        if self.base_items < 1:
            raise WorldConfigError("base_items must be >= 1")
        for name in ("ingredient_kinds", "ingredient_count", "result_count"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise WorldConfigError(f"{name} must be a range (lo, hi) with 1 <= lo <= hi")
        if not 0.0 <= self.base_ingredient_prob <= 1.0:
            raise WorldConfigError("base_ingredient_prob must lie in [0, 1]")


class CraftingWorld:
    """Immutable recipe universe.  Safe to share between threads."""

    def __init__(self, items: Iterable[Item], recipes: Mapping[str, Recipe], seed: int,
                 config: WorldConfig | None = None):
        self.items: dict[str, Item] = {it.name: it for it in items}
        self.recipes: dict[str, Recipe] = dict(recipes)
        self.seed = seed
        self.config = config or WorldConfig()
        self.levels = max(it.level for it in self.items.values())
        self._depth: dict[str, int] = {}
        for name in self.items:
            crafting_depth(self, name)
        self.world_ref = "w" + hashlib.sha256(world_to_json(self).encode()).hexdigest()[:12]

    def base_items(self) -> list[str]:
        return [n for n, it in self.items.items() if it.level == 0]

    def items_at_level(self, level: int) -> list[str]:
        return [n for n, it in self.items.items() if it.level == level]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CraftingWorld) and world_to_json(self) == world_to_json(other)

    def __repr__(self) -> str:
        return f"CraftingWorld(seed={self.seed}, levels={self.levels}, items={len(self.items)})"


def _base_name(i: int) -> str:
    return f"raw_m{i}"


def _crafted_name(level: int, i: int) -> str:
    return f"m{level}_i{i}"


def generate_world(seed: int, config: WorldConfig | None = None) -> CraftingWorld:
    config = config or WorldConfig()
    config.validate()
    rng = np.random.default_rng([seed, 0x5EED])
    items = [Item(_base_name(i), 0) for i in range(config.base_items)]
    by_level: list[list[str]] = [[it.name for it in items]]
    recipes: dict[str, Recipe] = {}
    for level in range(1, config.levels + 1):
        names = []
        for idx in range(config.items_per_level):
            name = _crafted_name(level, idx)
            lo, hi = config.ingredient_kinds
            kinds = int(rng.integers(lo, hi + 1))
            chosen = [str(rng.choice(by_level[level - 1]))]
            if level >= 2:
                # second crafted ingredient from the two levels below keeps trees bushy
                near = [n for lv in by_level[max(1, level - 2):level] for n in lv if n not in chosen]
                if near:
                    chosen.append(str(rng.choice(near)))
            lower_crafted = [n for lv in by_level[1:level] for n in lv]
            attempts = 0
            while len(chosen) < kinds and attempts < 50:
                attempts += 1
                if level == 1 or rng.random() < config.base_ingredient_prob:
                    pool = by_level[0]
                else:
                    pool = lower_crafted
                cand = str(rng.choice(pool))
                if cand not in chosen:
                    chosen.append(cand)
            clo, chi = config.ingredient_count
            ingredients = {c: int(rng.integers(clo, chi + 1)) for c in chosen}
            rlo, rhi = config.result_count
            recipes[name] = Recipe(name, ingredients, int(rng.integers(rlo, rhi + 1)))
            items.append(Item(name, level))
            names.append(name)
        by_level.append(names)
    return CraftingWorld(items, recipes, seed, config)


def crafting_depth(world: CraftingWorld, item: str) -> int:
    if item not in world.items:
        raise KeyError(f"unknown item {item!r}")
    cached = world._depth.get(item)
    if cached is not None:
        return cached
    recipe = world.recipes.get(item)
    depth = 0 if recipe is None else 1 + max(crafting_depth(world, i) for i in recipe.ingredients)
    world._depth[item] = depth
    return depth


# -- requirement expansion --------------------------------------------------------


@dataclass
class Job:
    """One craft call in the per-occurrence expansion of a demand.

    ``count`` is what the consumer needs; ``executions`` rounds it up to whole
    recipe runs.  ``children`` are the jobs for crafted ingredients; base
    ingredients are drawn straight from the inventory.
    """

    item: str
    count: int
    executions: int
    children: list[Job] = field(default_factory=list)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def size(self) -> int:
        return sum(1 for _ in self.walk())


def expand(world: CraftingWorld, item: str, count: int) -> Job:
    recipe = world.recipes.get(item)
    if recipe is None:
        raise ValueError(f"{item!r} is a base item; nothing to craft")
    executions = math.ceil(count / recipe.result_count)
    children = [
        expand(world, ing, qty * executions)
        for ing, qty in recipe.ingredients.items()
        if ing in world.recipes
    ]
    return Job(item, count, executions, children)


def base_requirements(world: CraftingWorld, targets: Mapping[str, int]) -> Counter:
    """Base-item totals consumed by crafting every target job by job."""
    need: Counter = Counter()
    for item, count in targets.items():
        for job in expand(world, item, count).walk():
            recipe = world.recipes[job.item]
            for ing, qty in recipe.ingredients.items():
                if ing not in world.recipes:
                    need[ing] += qty * job.executions
    return need


# -- inventory ----------------------------------------------------------------------


class Inventory:
    """Shared item counts with an append-only mutation log.

    Every mutation happens under one lock, so concurrent crafts linearize in
    log order.  ``journal`` records every craft attempt (accepted or not) with
    the sequence number it was serialized at.
    """

    def __init__(self, counts: Mapping[str, int] | None = None):
        initial = {k: int(v) for k, v in (counts or {}).items() if v}
        if any(v < 0 for v in initial.values()):
            raise ValueError("inventory counts must be nonnegative")
        self.initial = dict(initial)
        self._counts = dict(initial)
        self.log: list[tuple[str, dict[str, int]]] = []
        self.journal: list[tuple[int, str, dict, tuple[str, int], bool]] = []
        self._lock = threading.Lock()

    def __getitem__(self, item: str) -> int:
        return self._counts.get(item, 0)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def copy(self) -> Inventory:
        inv = Inventory(self.snapshot())
        return inv

    def replay(self) -> dict[str, int]:
        counts = Counter(self.initial)
        for _, delta in self.log:
            counts.update(delta)
        return {k: v for k, v in counts.items() if v}

    def _apply(self, delta: Mapping[str, int], actor: str) -> None:
        for k, v in delta.items():
            n = self._counts.get(k, 0) + v
            if n:
                self._counts[k] = n
            else:
                self._counts.pop(k, None)
        self.log.append((actor, dict(delta)))


def craft(world: CraftingWorld, inv: Inventory, ingredients: Mapping[str, int],
          target: tuple[str, int], actor: str = "root") -> str:
    item, total = target
    with inv._lock:
        seq = len(inv.journal)
        try:
            delta = _check_craft(world, inv, ingredients, item, int(total))
        except CraftError:
            inv.journal.append((seq, actor, dict(ingredients), (item, total), False))
            raise
        inv._apply(delta, actor)
        inv.journal.append((seq, actor, dict(ingredients), (item, total), True))
    return f"Crafted {total}x {item}"


def _check_craft(world: CraftingWorld, inv: Inventory, ingredients: Mapping[str, int],
                 item: str, total: int) -> dict[str, int]:
    recipe = world.recipes.get(item)
    if recipe is None:
        raise CraftError(f"no recipe for {item}")
    if total < 1 or total % recipe.result_count:
        raise CraftError(
            f"count not divisible by result_count: {item} is crafted in multiples of "
            f"{recipe.result_count}"
        )
    executions = total // recipe.result_count
    expected = recipe.scaled(executions)
    given = {k: int(v) for k, v in ingredients.items() if v}
    if given != expected:
        raise CraftError(f"ingredients do not match recipe for {item}")
    missing = {k: v - inv[k] for k, v in expected.items() if inv[k] < v}
    if missing:
        listed = ", ".join(f"{v}x {k}" for k, v in sorted(missing.items()))
        raise CraftError(f"missing ingredients: {listed}")
    delta = {k: -v for k, v in expected.items()}
    delta[item] = delta.get(item, 0) + total
    return delta


def get_info(world: CraftingWorld, inv: Inventory, items: Iterable[str]) -> list[dict]:
    counts = inv.snapshot()
    out = []
    for name in items:
        if name not in world.items:
            out.append({"item": name, "unknown": True})
            continue
        recipe = world.recipes.get(name)
        recipes = [] if recipe is None else [
            {"ingredients": dict(recipe.ingredients), "result_count": recipe.result_count}
        ]
        can_craft = recipe is not None and all(
            counts.get(k, 0) >= v for k, v in recipe.ingredients.items()
        )
        out.append({
            "item": name,
            "can_craft": can_craft,
            "is_base": recipe is None,
            "in_inventory": counts.get(name, 0),
            "crafting_depth": crafting_depth(world, name),
            "recipes": recipes,
        })
    return out


# -- tasks --------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    targets: Mapping[str, int]
    difficulty: Difficulty | None
    world_ref: str
    task_id: str = ""

    def describe(self) -> str:
        return "Craft the following items: " + ", ".join(
            f"{n}x {k}" for k, n in self.targets.items()
        )


def check_success(task: Task | Mapping[str, int], start_counts: Mapping[str, int],
                  inv: Inventory | Mapping[str, int]) -> bool:
    targets = task.targets if isinstance(task, Task) else task
    counts = inv.snapshot() if isinstance(inv, Inventory) else inv
    return all(counts.get(t, 0) >= start_counts.get(t, 0) + n for t, n in targets.items())


def generate_task(world: CraftingWorld, seed: int, difficulty: Difficulty | str,
                  verify: bool = True) -> tuple[Task, Inventory]:
    difficulty = Difficulty.parse(difficulty)
    lo, hi = difficulty.band
    band = sorted(
        (n for n in world.recipes if lo <= crafting_depth(world, n) <= hi),
        key=lambda n: (world.items[n].level, n),
    )
    if not band:
        raise TaskGenerationError(f"world has no items with depth in {lo}-{hi}")
    rng = np.random.default_rng([seed, world.seed, lo])
    kinds = min(int(rng.integers(1, 3)), len(band))
    picked = rng.choice(len(band), size=kinds, replace=False)
    targets = {band[i]: int(rng.integers(1, 4)) for i in sorted(picked)}

    need = base_requirements(world, targets)
    spare = [b for b in world.base_items() if b not in need]
    n_distract = min(int(rng.integers(0, 4)), len(spare))
    counts = dict(need)
    for i in rng.choice(len(spare), size=n_distract, replace=False) if n_distract else []:
        counts[spare[i]] = int(rng.integers(1, 4))

    task = Task(targets, difficulty, world.world_ref, task_id=f"{difficulty.value}-{seed}")
    inv = Inventory(counts)
    if verify and not _oracle_solves(world, task, inv):
        raise TaskGenerationError(f"generated task {task.task_id} is not solvable")
    return task, inv


def _oracle_solves(world: CraftingWorld, task: Task, inv: Inventory) -> bool:
    # deferred: the runtime sits on top of this module
    from .policy import RecursiveOracle
    from .runtime import RolloutLimits, run_rollout

    tree = run_rollout(RecursiveOracle(), world, task, inv.copy(),
                       RolloutLimits(max_depth=12, steps_per_node=25), seed=0)
    return tree.root.success_signal == 1.0


# -- persistence --------------------------------------------------------------------


def world_to_dict(world: CraftingWorld) -> dict:
    return {
        "schema_version": WORLD_SCHEMA_VERSION,
        "seed": world.seed,
        "levels": world.levels,
        "items": [{"name": it.name, "level": it.level} for it in world.items.values()],
        "recipes": {
            name: {"ingredients": dict(r.ingredients), "result_count": r.result_count}
            for name, r in world.recipes.items()
        },
    }


def world_to_json(world: CraftingWorld) -> str:
    return json.dumps(world_to_dict(world), sort_keys=True, indent=1)


def world_from_dict(data: Mapping) -> CraftingWorld:
    version = data.get("schema_version")
    if version != WORLD_SCHEMA_VERSION:
        raise ValueError(f"world schema version {version!r} != {WORLD_SCHEMA_VERSION}")
    items = [Item(d["name"], int(d["level"])) for d in data["items"]]
    recipes = {
        name: Recipe(name, {k: int(v) for k, v in r["ingredients"].items()}, int(r["result_count"]))
        for name, r in data["recipes"].items()
    }
    return CraftingWorld(items, recipes, int(data["seed"]))


def world_from_json(text: str) -> CraftingWorld:
    return world_from_dict(json.loads(text))


def task_to_dict(task: Task, inv: Inventory | Mapping[str, int]) -> dict:
    start = inv.initial if isinstance(inv, Inventory) else dict(inv)
    return {
        "schema_version": TASK_SCHEMA_VERSION,
        "task_id": task.task_id,
        "world_ref": task.world_ref,
        "targets": dict(task.targets),
        "difficulty": task.difficulty.value if task.difficulty else None,
        "start_inventory": dict(start),
    }


def task_from_dict(data: Mapping) -> tuple[Task, Inventory]:
    version = data.get("schema_version")
    if version != TASK_SCHEMA_VERSION:
        raise ValueError(f"task schema version {version!r} != {TASK_SCHEMA_VERSION}")
    diff = data.get("difficulty")
    task = Task(
        {k: int(v) for k, v in data["targets"].items()},
        Difficulty.parse(diff) if diff else None,
        data["world_ref"],
        data.get("task_id", ""),
    )
    return task, Inventory(data["start_inventory"])

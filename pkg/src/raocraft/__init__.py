"""Recursive agents on a synthetic crafting world, trained with tree-level credit assignment."""
from __future__ import annotations

__version__ = "0.1.0"

from .policy import RandomPolicy, RecursiveOracle, SingleOracle, SoftmaxPolicy
from .rao import RaoConfig, RewardMode, Weighting
from .runtime import ExecutionTree, RolloutLimits, run_rollout
from .trainer import TrainConfig, evaluate, run_ablation_grid, train
from .world import (
    CraftingWorld,
    Difficulty,
    Inventory,
    Task,
    generate_task,
    generate_world,
)

__all__ = [
    "CraftingWorld",
    "Difficulty",
    "ExecutionTree",
    "Inventory",
    "RandomPolicy",
    "RaoConfig",
    "RecursiveOracle",
    "RewardMode",
    "RolloutLimits",
    "SingleOracle",
    "SoftmaxPolicy",
    "Task",
    "TrainConfig",
    "Weighting",
    "evaluate",
    "generate_task",
    "generate_world",
    "run_ablation_grid",
    "run_rollout",
    "train",
]

"""Credit assignment over execution trees and the weighted policy-gradient estimate.

Node reward (dense mode) is the node's own success signal plus ``lam`` times
the mean signal of its immediate children.  Every trajectory in rollout ``g``
is compared to the same leave-one-out baseline: the mean root reward of the
other ``G - 1`` rollouts of that task.  Trajectories are then reweighted per
tree depth by ``alpha / N_d`` so that crowded depths do not swamp the update,
with ``alpha`` chosen to keep the total weight equal to the trajectory count.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .runtime import ExecutionTree

RECORDS_SCHEMA = "advantage-records/1"
RECORD_COLUMNS = ("group", "tree_index", "node_id", "depth", "reward", "baseline", "advantage",
                  "weight")


class RewardMode(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


class Weighting(enum.Enum):
    INVERSE_FREQUENCY = "inverse-frequency"
    UNIFORM = "uniform"


class SuccessSource(enum.Enum):
    EXACT = "exact"
    JUDGE = "judge"


@dataclass(frozen=True)
class RaoConfig:
    lam: float = 0.0
    reward_mode: RewardMode = RewardMode.DENSE
    weighting: Weighting = Weighting.INVERSE_FREQUENCY
    success_source: SuccessSource = SuccessSource.EXACT

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and >= 0")
        if self.success_source is not SuccessSource.EXACT:
            raise NotImplementedError("only exact verification is available as a success signal")

    @property
    def label(self) -> str:
        return f"{self.reward_mode.value}+{self.weighting.value}"


def node_reward(s_node: float, child_signals: Sequence[float], config: RaoConfig) -> float:
    """Reward of one node.

    In sparse mode the caller passes the root's signal as ``s_node`` and it is
    returned untouched; ``child_signals`` and ``lam`` play no part.
    """
    for s in (s_node, *child_signals):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"success signal {s} outside [0, 1]")
    if config.reward_mode is RewardMode.SPARSE or not child_signals:
        return float(s_node)
    # exact rational arithmetic, rounded once
    bonus = Fraction(config.lam) * sum(map(Fraction, child_signals)) / len(child_signals)
    return float(Fraction(s_node) + bonus)


def loo_baselines(root_rewards: Sequence[float]) -> list[float]:
    g = len(root_rewards)
    if g < 2:
        raise ValueError("leave-one-out baselines need a group of at least 2 rollouts")
    exact = [Fraction(r) for r in root_rewards]
    total = sum(exact)
    return [float((total - r) / (g - 1)) for r in exact]


@dataclass(frozen=True)
class DepthWeights:
    """Per-depth weights kept as exact rationals so the total-weight identity holds exactly."""

    counts: Mapping[int, int]
    alpha: Fraction
    weights: Mapping[int, Fraction]

    def as_floats(self) -> dict[int, float]:
        return {d: float(w) for d, w in self.weights.items()}


def depth_weights(counts: Mapping[int, int]) -> DepthWeights:
    present = {d: int(n) for d, n in counts.items() if n > 0}
    if not present:
        raise ValueError("no trajectories in batch")
    alpha = Fraction(sum(present.values()), len(present))
    return DepthWeights(present, alpha, {d: alpha / n for d, n in present.items()})


@dataclass(frozen=True)
class AdvantageRecord:
    group: int
    tree_index: int
    node_id: str
    depth: int
    reward: float
    baseline: float
    advantage: float
    weight: float

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.group, self.tree_index, self.node_id)


def tree_rewards(tree: ExecutionTree, config: RaoConfig) -> dict[str, float]:
    nodes = tree.nodes
    if config.reward_mode is RewardMode.SPARSE:
        root = nodes[tree.root_id].success_signal
        return {nid: node_reward(root, [], config) for nid in nodes}
    return {
        nid: node_reward(n.success_signal, [nodes[c].success_signal for c in n.children], config)
        for nid, n in nodes.items()
    }


def build_records(groups: Sequence[Sequence[ExecutionTree]], config: RaoConfig) -> list[AdvantageRecord]:
    """One record per node of every tree; groups hold the G rollouts of one task each."""
    rewards = [[tree_rewards(t, config) for t in trees] for trees in groups]
    counts: Counter = Counter()
    for trees in groups:
        for t in trees:
            counts.update(n.depth for n in t.nodes.values())
    if config.weighting is Weighting.UNIFORM:
        weights = {d: 1.0 for d in counts}
    else:
        weights = depth_weights(counts).as_floats()
    records = []
    for gi, trees in enumerate(groups):
        base = loo_baselines([r[t.root_id] for r, t in zip(rewards[gi], trees)])
        for ti, t in enumerate(trees):
            for nid, n in t.nodes.items():
                r = rewards[gi][ti][nid]
                records.append(AdvantageRecord(gi, ti, nid, n.depth, r, base[ti], r - base[ti],
                                               weights[n.depth]))
    return records


def assemble_update(records: Sequence[AdvantageRecord],
                    grads: Mapping[tuple[int, int, str], np.ndarray],
                    config: RaoConfig, dim: int | None = None) -> np.ndarray:
    if not records and dim is None:
        raise ValueError("empty batch and no dimension given")
    out = None if dim is None else np.zeros(dim)
    uniform = config.weighting is Weighting.UNIFORM
    for rec in records:
        g = grads.get(rec.key)
        if g is None:
            raise KeyError(f"no gradient for trajectory {rec.key}")
        if out is None:
            out = np.zeros(len(g))
        w = 1.0 if uniform else rec.weight
        out += (w * rec.advantage) * g
    return out


def estimate_objective(groups: Sequence[Sequence[ExecutionTree]], config: RaoConfig) -> float:
    by_depth: dict[int, list[float]] = {}
    for trees in groups:
        for t in trees:
            rewards = tree_rewards(t, config)
            for nid, n in t.nodes.items():
                by_depth.setdefault(n.depth, []).append(rewards[nid])
    return float(sum(math.fsum(v) / len(v) for v in by_depth.values()))


def records_to_tsv(records: Sequence[AdvantageRecord]) -> str:
    lines = [f"# schema: {RECORDS_SCHEMA}", "\t".join(RECORD_COLUMNS)]
    for r in records:
        lines.append("\t".join(str(x) for x in (r.group, r.tree_index, r.node_id, r.depth,
                                                 repr(r.reward), repr(r.baseline),
                                                 repr(r.advantage), repr(r.weight))))
    return "\n".join(lines) + "\n"


def records_from_tsv(text: str) -> list[AdvantageRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != f"# schema: {RECORDS_SCHEMA}":
        raise ValueError("not an advantage-record file of the expected schema")
    if tuple(lines[1].split("\t")) != RECORD_COLUMNS:
        raise ValueError("unexpected column layout")
    out = []
    for raw in lines[2:]:
        g, ti, nid, d, r, b, a, w = raw.split("\t")
        out.append(AdvantageRecord(int(g), int(ti), nid, int(d), float(r), float(b), float(a),
                                   float(w)))
    return out

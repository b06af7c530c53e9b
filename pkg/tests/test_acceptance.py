"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its measurement.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are printed even
without ``-s``.
"""
from __future__ import annotations

import math
import random
import threading
import time
from fractions import Fraction

import numpy as np
import pytest

from raocraft.policy import (
    ActionCandidate,
    RecursiveOracle,
    SingleOracle,
    log_prob,
    log_prob_gradient,
)
from raocraft.rao import (
    AdvantageRecord,
    RaoConfig,
    RewardMode,
    Weighting,
    assemble_update,
    depth_weights,
    loo_baselines,
    node_reward,
)
from raocraft.runtime import RolloutLimits, run_rollout
from raocraft.trainer import TrainConfig, _seed, evaluate, task_pool, train
from raocraft.world import (
    CraftError,
    Inventory,
    WorldConfig,
    check_success,
    craft,
    crafting_depth,
    generate_task,
    generate_world,
)

from .conftest import hand_world, relaxed_depths
from .test_rao import ref_assemble, ref_loo, ref_node_reward, ref_weights
from .test_world import _serial_replay
from .two_step_fixture import analytic, sample_groups

EVAL_LIMITS = RolloutLimits(12, 25)
SEEDS = (0, 1, 2)
# training settings for criteria 8-10; see README for the choice
LEARNING_RATE = 0.02
UPDATES = 30
EVAL_TASKS = 50


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# 1 ------------------------------------------------------------------------------------------


def test_c01_formula_oracles(report):
    rng = random.Random(101)
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    n = 0
    for _ in range(60):
        s = rng.choice(grid)
        kids = [rng.choice(grid) for _ in range(rng.randint(0, 6))]
        lam = rng.choice([0.0, 0.25, 0.5, 2.0])
        assert node_reward(s, kids, RaoConfig(lam=lam)) == float(ref_node_reward(s, kids, lam, False))
        roots = [rng.choice([0.0, 0.5, 1.0, 1.5]) for _ in range(rng.randint(2, 9))]
        assert loo_baselines(roots) == [float(b) for b in ref_loo(roots)]
        counts = {d: rng.randint(0, 40) for d in range(rng.randint(1, 7))}
        counts[0] += 1
        dw = depth_weights(counts)
        assert (dw.alpha, dict(dw.weights)) == ref_weights(counts)
        dim = rng.randint(1, 8)
        recs, grads = [], {}
        for k in range(rng.randint(1, 12)):
            r = AdvantageRecord(k % 3, k, "0", rng.randint(0, 3), 0.0, 0.0,
                                rng.randint(-16, 16) / 8, rng.randint(1, 32) / 16)
            recs.append(r)
            grads[r.key] = np.array([rng.randint(-64, 64) / 32 for _ in range(dim)])
        for w in Weighting:
            got = assemble_update(recs, grads, RaoConfig(weighting=w))
            assert np.array_equal(got, ref_assemble(recs, grads, w is Weighting.UNIFORM, dim))
        n += 1
    worked = depth_weights({0: 8, 1: 24})
    worked_ok = worked.alpha == 16 and worked.weights == {0: 2, 1: Fraction(2, 3)}
    bonus = node_reward(1, [1, 1, 0], RaoConfig(lam=0.4))
    bonus_ok = round(bonus, 4) == 1.2667
    assert report(1, worked_ok and bonus_ok,
                  f"{n} random fixtures x 4 operations exact; alpha={worked.alpha}, "
                  f"w={{0: {worked.weights[0]}, 1: {worked.weights[1]}}}, R(lam=0.4)={bonus:.4f}")


# 2 ------------------------------------------------------------------------------------------


def test_c02_weight_preservation(report):
    rng = random.Random(202)
    bad = 0
    for _ in range(1000):
        counts = {d: rng.randint(0, 1000) for d in range(rng.randint(1, 15))}
        counts[rng.randrange(len(counts))] += 1
        dw = depth_weights(counts)
        if sum(dw.weights[d] * c for d, c in dw.counts.items()) != sum(counts.values()):
            bad += 1
    assert report(2, bad == 0, f"1000 random count maps, {bad} violations of sum(w_d N_d) = sum(N_d)")


# 3 ------------------------------------------------------------------------------------------


def test_c03_unbiased_monte_carlo(report):
    theta = np.array([0.4, -0.3])
    n = 100_000
    t0 = time.perf_counter()
    root, child = sample_groups(theta, n, 4, seed=303)
    elapsed = time.perf_counter() - t0
    want_root, want_child = analytic(theta)
    worst = 0.0
    for got, want in ((root, want_root), (child, want_child)):
        se = got.std(axis=0, ddof=1) / math.sqrt(n)
        worst = max(worst, float(np.max(np.abs(got.mean(axis=0) - want) / se)))
    ok = worst <= 3.0 and elapsed < 120
    assert report(3, ok, f"{n} groups, worst deviation {worst:.2f} SE (root and depth-1), "
                         f"{elapsed:.1f}s")


# 4 ------------------------------------------------------------------------------------------


def test_c04_gradient_check(report):
    rng = np.random.default_rng(404)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 9))
        dim = 10
        cands = [ActionCandidate("craft", features=rng.normal(size=dim)) for _ in range(k)]
        theta = rng.normal(size=dim)
        c = int(rng.integers(k))
        g = log_prob_gradient(theta, cands, c)
        fd = np.array([(log_prob(theta + h * e, cands, c) - log_prob(theta - h * e, cands, c)) / (2 * h)
                       for e in np.eye(dim)])
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(g)))
    assert report(4, worst < 1e-6, f"100 random cases, worst relative error {worst:.2e}")


# 5 ------------------------------------------------------------------------------------------


def test_c05_environment_soundness(report):
    w = hand_world()
    recipes = ["bar", "mid2", "mid3", "deep4", "m1_i1", "m2_i2"]
    # conservation: random craft sequences keep counts nonnegative and replayable
    rng = random.Random(505)
    conserved = True
    for _ in range(200):
        inv = Inventory({"ore": rng.randint(0, 20), "wood": rng.randint(0, 4),
                         "m0_i1": rng.randint(0, 10)})
        for _ in range(20):
            item = rng.choice(recipes)
            ex = rng.randint(1, 3)
            before = inv.snapshot()
            try:
                craft(w, inv, w.recipes[item].scaled(ex), (item, ex * w.recipes[item].result_count))
            except CraftError:
                conserved &= inv.snapshot() == before
        conserved &= inv.replay() == inv.snapshot() and min(inv.snapshot().values(), default=0) >= 0

    # atomicity: 100 concurrent schedules, each equivalent to its serial journal order
    serial_ok = 0
    for trial in range(100):
        r = random.Random(trial)
        initial = {"ore": r.randint(0, 12), "wood": r.randint(0, 3), "m0_i1": r.randint(0, 8)}
        inv = Inventory(initial)
        barrier = threading.Barrier(4)

        def worker(k, inv=inv, barrier=barrier, trial=trial):
            rr = random.Random(trial * 31 + k)
            barrier.wait()
            for _ in range(15):
                item = rr.choice(recipes)
                ex = rr.randint(1, 2)
                try:
                    craft(w, inv, w.recipes[item].scaled(ex), (item, ex * w.recipes[item].result_count),
                          actor=str(k))
                except CraftError:
                    pass

        ts = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        serial_ok += _serial_replay(w, initial, inv.journal) == inv.snapshot()

    # depth oracle on 1000 items
    r = random.Random(5)
    worlds = [generate_world(s, WorldConfig(levels=r.randint(1, 9), items_per_level=r.randint(1, 5)))
              for s in range(30)]
    oracles = [relaxed_depths(x) for x in worlds]
    depth_ok = 0
    for _ in range(1000):
        k = r.randrange(len(worlds))
        name = r.choice(sorted(worlds[k].items))
        depth_ok += crafting_depth(worlds[k], name) == oracles[k][name]

    # solvability of 300 generated tasks
    world = generate_world(1)
    solved = 0
    for diff in ("easy", "medium", "hard"):
        for i in range(100):
            task, inv = generate_task(world, 5000 + i, diff)
            start = inv.snapshot()
            tree = run_rollout(RecursiveOracle(), world, task, inv, EVAL_LIMITS, seed=i)
            solved += tree.success and check_success(task, start, inv)
    ok = conserved and serial_ok == 100 and depth_ok == 1000 and solved == 300
    assert report(5, ok, f"conservation {'ok' if conserved else 'BROKEN'}; serial-equivalent "
                         f"{serial_ok}/100; depth oracle {depth_ok}/1000; solvable {solved}/300")


# 6 ------------------------------------------------------------------------------------------


def _hard_tasks(world, n=100):
    return [generate_task(world, 9000 + i, "hard") for i in range(n)]


def test_c06_context_constraint(report):
    world = generate_world(1)
    tasks = _hard_tasks(world)
    rec = sum(run_rollout(RecursiveOracle(), world, t, inv.copy(), EVAL_LIMITS, seed=i).success
              for i, (t, inv) in enumerate(tasks))
    single = sum(run_rollout(SingleOracle(), world, t, inv.copy(), RolloutLimits(12, 25), seed=i).success
                 for i, (t, inv) in enumerate(tasks))
    assert report(6, rec >= 99 and single == 0,
                  f"Hard, 25 steps/node: recursive {rec}/100, single {single}/100")


# 7 ------------------------------------------------------------------------------------------


def test_c07_parallel_speedup(report):
    world = generate_world(1)
    spans = {"parallel": [], "sequential": []}
    steps = {"parallel": [], "sequential": []}
    for i, (t, inv) in enumerate(_hard_tasks(world)):
        for mode in spans:
            tree = run_rollout(RecursiveOracle(), world, t, inv.copy(), EVAL_LIMITS, seed=i,
                               await_mode=mode)
            spans[mode].append(tree.makespan)
            steps[mode].append(tree.total_steps)
    ratio = np.mean(spans["parallel"]) / np.mean(spans["sequential"])
    step_diff = abs(np.mean(steps["parallel"]) - np.mean(steps["sequential"])) / np.mean(steps["sequential"])
    assert report(7, ratio <= 0.5 and step_diff < 0.05,
                  f"mean makespan {np.mean(spans['parallel']):.1f} vs {np.mean(spans['sequential']):.1f} "
                  f"(ratio {ratio:.3f}); total steps differ by {100 * step_diff:.2f}%")


# 8-10: shared training runs ----------------------------------------------------------------


@pytest.fixture(scope="module")
def runs():
    world = generate_world(1)
    out = {}
    for seed in SEEDS:
        for mode, weighting in ((RewardMode.DENSE, Weighting.INVERSE_FREQUENCY),
                                (RewardMode.SPARSE, Weighting.INVERSE_FREQUENCY),
                                (RewardMode.DENSE, Weighting.UNIFORM)):
            cfg = TrainConfig(learning_rate=LEARNING_RATE, total_updates=UPDATES, seed=seed,
                              eval_every=0, rao=RaoConfig(reward_mode=mode, weighting=weighting))
            out[(cfg.rao.label, seed)] = train(cfg, world)
    return world, out


def _eval_sets(world, seed):
    return {d: task_pool(world, d, EVAL_TASKS, _seed(seed, 77, i))
            for i, d in enumerate(("easy", "medium", "hard"))}


def test_c08_learning(report, runs):
    world, res = runs
    lines, ok = [], True
    zero = np.zeros(10)
    for seed in SEEDS:
        sets = _eval_sets(world, seed)
        theta = res[("dense+inverse-frequency", seed)].theta
        before = evaluate(zero, world, ["medium", "hard"], EVAL_LIMITS, EVAL_TASKS, 8, seed=seed,
                          tasks=sets).per_difficulty
        after = evaluate(theta, world, ["medium", "hard"], EVAL_LIMITS, EVAL_TASKS, 8, seed=seed,
                         tasks=sets).per_difficulty
        m0, m1 = before["medium"].success_rate, after["medium"].success_rate
        h0, h1 = before["hard"].success_rate, after["hard"].success_rate
        ok &= m0 < 0.2 and m1 >= 0.8 and h1 - h0 >= 0.3
        lines.append(f"seed {seed}: medium {m0:.2f}->{m1:.2f}, hard {h0:.2f}->{h1:.2f}")
    assert report(8, ok, f"greedy success after {UPDATES} updates (lr {LEARNING_RATE}); " + "; ".join(lines))


def test_c09_ablation_direction(report, runs):
    _, res = runs
    mean = {label: np.mean([[c["success_rate"] for c in res[(label, s)].curves] for s in SEEDS], axis=0)
            for label in ("dense+inverse-frequency", "sparse+inverse-frequency", "dense+uniform")}
    dw = mean["dense+inverse-frequency"]
    hit = np.flatnonzero(dw >= 0.8)
    if not len(hit):
        assert report(9, False, f"dense+weighted never reached 0.8 (max {dw.max():.3f})")
    u = int(hit[0])
    gap_sparse = dw[u] - mean["sparse+inverse-frequency"][u]
    gap_uniform = dw[u] - mean["dense+uniform"][u]
    ok = gap_sparse >= 0.1 and gap_uniform >= 0.1
    assert report(9, ok, f"dense+weighted first >= 0.8 at update {u} ({dw[u]:.3f}); "
                         f"sparse-only gap {gap_sparse:.3f}, unweighted-only gap {gap_uniform:.3f} "
                         f"(3-seed mean training success)")


def test_c10_depth_adaptation(report, runs):
    world, res = runs
    lines, ok = [], True
    for seed in SEEDS:
        theta = res[("dense+inverse-frequency", seed)].theta
        rep = evaluate(theta, world, ["easy", "medium", "hard"], EVAL_LIMITS, EVAL_TASKS, 8,
                       seed=seed, tasks=_eval_sets(world, seed)).per_difficulty
        e, m, h = (rep[d].mean_max_depth for d in ("easy", "medium", "hard"))
        ok &= e < m < h
        lines.append(f"seed {seed}: {e:.2f} < {m:.2f} < {h:.2f}")
    assert report(10, ok, "mean max depth of successful rollouts easy/medium/hard; " + "; ".join(lines))


# 11 -----------------------------------------------------------------------------------------


def test_c11_determinism(report, tmp_path):
    from raocraft.cli import main

    world = tmp_path / "world.json"
    assert main(["gen-world", "--seed", "3", "--out", str(world)]) == 0
    blobs = []
    for k in range(2):
        run, ev = tmp_path / f"run{k}", tmp_path / f"ev{k}"
        assert main(["train", "--world", str(world), "--seed", "11", "--batch", "4", "--group", "4",
                     "--updates", "6", "--eval-every", "3", "--lr", "0.02", "--out", str(run)]) == 0
        assert main(["eval", "--world", str(world), "--policy", "learned", "--params",
                     str(run / "params.txt"), "--n", "8", "--group", "4", "--out", str(ev)]) == 0
        blobs.append([(run / "curves.tsv").read_bytes(), (run / "eval_curve.tsv").read_bytes(),
                      (run / "params.txt").read_bytes(), (ev / "report.json").read_bytes()])
    same = blobs[0] == blobs[1]
    assert report(11, same, "two train+eval runs, seed 11: curves, eval curve, params and report "
                            f"{'bit-identical' if same else 'DIFFER'}")

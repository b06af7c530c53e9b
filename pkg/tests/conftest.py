from __future__ import annotations

import pytest

from raocraft.world import CraftingWorld, Item, Recipe, generate_world


def relaxed_depths(world: CraftingWorld) -> dict[str, int]:
    """Crafting depth by repeated relaxation over the recipe table (no recursion)."""
    depth = {name: 0 for name in world.items}
    changed = True
    while changed:
        changed = False
        for name, recipe in world.recipes.items():
            d = 1 + max(depth[i] for i in recipe.ingredients)
            if d != depth[name]:
                depth[name] = d
                changed = True
    return depth


def hand_world() -> CraftingWorld:
    """Small fixed world used by the craft/get_info examples."""
    items = [Item("m0_i1", 0), Item("ore", 0), Item("wood", 0), Item("m1_i1", 1),
             Item("m2_i2", 2), Item("bar", 1), Item("deep4", 4), Item("mid3", 3),
             Item("mid2", 2), Item("top5", 5)]
    recipes = {
        "m1_i1": Recipe("m1_i1", {"m0_i1": 1}, 1),
        "m2_i2": Recipe("m2_i2", {"m0_i1": 2, "m1_i1": 1}, 2),
        "bar": Recipe("bar", {"ore": 2}, 2),
        "mid2": Recipe("mid2", {"bar": 1}, 1),
        "mid3": Recipe("mid3", {"mid2": 1}, 1),
        "deep4": Recipe("deep4", {"mid3": 1, "wood": 1}, 1),
        "top5": Recipe("top5", {"deep4": 1, "mid2": 2}, 1),
    }
    return CraftingWorld(items, recipes, seed=-1)


@pytest.fixture(scope="session")
def world():
    return generate_world(1)


@pytest.fixture
def small_world():
    return hand_world()

"""A tour of one arena: the generated map, then a random agent living until it dies.

Run:  python demos/01_arena_tour.py
"""
import numpy as np

from forageworld.config import desk_env_config
from forageworld.env import Action, reset, step
from forageworld.rng import derive_stream
from forageworld.world_gen import generate_arena

cfg = desk_env_config()
layout = generate_arena(7, cfg)

# '.' grass, ':' sand, '~' water, 'T' tree, '#' stone, 'c' cow spawn point, '@' start
glyphs = np.array(list(".:~T#"))
canvas = glyphs[layout.grid].copy()
for x, y in layout.cow_spawn_points:
    canvas[y, x] = "c"
canvas[layout.agent_start[1], layout.agent_start[0]] = "@"
print(f"arena seed 7, {layout.width}x{layout.height}, {len(layout.lake_cells)} water cells")
print("\n".join("".join(row) for row in canvas[::-1]))

# A uniformly random policy.  Watch the physiology drain: thirst is usually what kills it.
state = reset(cfg, 7, master_seed=0)
policy = derive_stream(0, "demo_policy")
total, counts = 0.0, np.zeros(len(Action), int)
while not state.done:
    a = policy.int_below(len(Action))
    counts[a] += 1
    _, _, r, _, _ = step(state, a, with_record=False)
    total += r
    if state.t % 50 == 0:
        p = state.physiology
        print(f"t={state.t:4d}  health {p.health} food {p.food} drink {p.drink} energy {p.energy}  "
              f"cows {state.live_cows()}")
print(f"died at t={state.t} with return {total:.1f}")
print("actions taken:", {Action(i).name: int(c) for i, c in enumerate(counts)})

"""ForageWorld step function.

One :class:`ArenaState` is advanced in place by :func:`step`.  Within a step
the update order is fixed, and replay depends on it:

1. action resolution (move, interact, sleep, craft)
2. physiology timers
3. creatures (cows, predator spawning, predators, projectiles)
4. light level
5. reward
6. termination
7. log record

All randomness comes from the state's own ``rng`` stream, so a step is a
pure function of ``(state, action)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig
from .rng import RngStream, derive_stream
from .telemetry import LogRecord
from .world_gen import BLOCKS_SIGHT, PASSABLE, ArenaLayout, TileKind, generate_arena

VIEW_ROWS = 9
VIEW_COLS = 11
VOID = 5  # tile code for cells outside the arena or outside the field of view
N_TILE_CODES = 6
N_CREATURE_CODES = 4
N_ITEM_CODES = 2


class Action(enum.IntEnum):
    MOVE_UP = 0
    MOVE_DOWN = 1
    MOVE_LEFT = 2
    MOVE_RIGHT = 3
    INTERACT = 4
    SLEEP = 5
    CRAFT_SWORD = 6
    CRAFT_PICK = 7
    NOOP = 8


N_ACTIONS = len(Action)


class Facing(enum.IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


FACING_DELTA = {Facing.N: (0, -1), Facing.E: (1, 0), Facing.S: (0, 1), Facing.W: (-1, 0)}
MOVE_FACING = {Action.MOVE_UP: Facing.N, Action.MOVE_DOWN: Facing.S,
               Action.MOVE_LEFT: Facing.W, Action.MOVE_RIGHT: Facing.E}
_DIRS = [(0, -1), (1, 0), (0, 1), (-1, 0)]


class CreatureKind(enum.IntEnum):
    NONE = 0
    COW = 1
    MELEE = 2
    RANGED = 3


class EpisodeFinished(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


@dataclass
class Physiology:
    health: int = 9
    food: int = 9
    drink: int = 9
    energy: int = 9
    hunger_timer: int = 0
    thirst_timer: int = 0
    fatigue_timer: int = 0
    recover_timer: int = 0
    damage_timer: int = 0  # starvation / dehydration damage accumulator
    rest_timer: int = 0  # energy restoration while asleep

    def levels(self):
        return (self.health, self.food, self.drink, self.energy)


@dataclass
class PhysioRates:
    max_level: int = 9
    hunger_period: int = 25
    thirst_period: int = 17
    fatigue_period: int = 30
    starvation_period: int = 20
    recover_period: int = 30
    sleep_restore_period: int = 8

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "PhysioRates":
        return cls(cfg.max_level, cfg.hunger_period, cfg.thirst_period, cfg.fatigue_period,
                   cfg.starvation_period, cfg.recover_period, cfg.sleep_restore_period)


@dataclass
class Creature:
    kind: CreatureKind
    x: int
    y: int
    health: int = 1
    home_spawn: int = -1
    cooldown: int = 0
    unseen: int = 0


@dataclass
class Projectile:
    x: int
    y: int
    dx: int
    dy: int


@dataclass
class Inventory:
    has_sword: bool = False
    has_pick: bool = False
    wood: int = 0
    stone: int = 0
    iron: int = 0


@dataclass
class Observation:
    tiles: np.ndarray  # (9, 11) tile codes, VOID outside arena / view
    creatures: np.ndarray  # (9, 11) CreatureKind codes
    items: np.ndarray  # (9, 11) 1 where a projectile is in flight
    physiology: tuple  # (health, food, drink, energy)
    inventory: tuple  # (has_sword, has_pick, wood, stone, iron)
    light_level: float
    facing: int
    sleeping: bool
    max_level: int = 9

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (np.array_equal(self.tiles, other.tiles)
                and np.array_equal(self.creatures, other.creatures)
                and np.array_equal(self.items, other.items)
                and self.physiology == other.physiology and self.inventory == other.inventory
                and self.light_level == other.light_level and self.facing == other.facing
                and self.sleeping == other.sleeping)


@dataclass
class ArenaState:
    config: EnvConfig
    layout: ArenaLayout
    grid: np.ndarray  # mutable copy of layout.grid (stone can be mined)
    physiology: Physiology
    agent_pos: tuple
    agent_facing: Facing
    rng: RngStream
    episode_id: str = ""
    sleeping: bool = False
    inventory: Inventory = field(default_factory=Inventory)
    cows: list = field(default_factory=list)  # one slot per possible cow, None when vacant
    predators: list = field(default_factory=list)
    projectiles: list = field(default_factory=list)
    creature_map: np.ndarray = None
    light_level: float = 1.0
    t: int = 0
    done: bool = False
    kills: int = 0

    @property
    def start_pos(self):
        return self.layout.agent_start

    def live_cows(self) -> int:
        return sum(c is not None for c in self.cows)

    def creatures(self) -> list:
        return [c for c in self.cows if c is not None] + list(self.predators)


# -- pure helpers -----------------------------------------------------------

def _sign(v: int) -> int:
    return (v > 0) - (v < 0)


def reward(p: Physiology, threshold: int = 5) -> float:
    """0.1 * (1 + sum of sign(level - threshold)) over health, food, drink, energy."""
    s = 1 + _sign(p.health - threshold) + _sign(p.food - threshold) \
        + _sign(p.drink - threshold) + _sign(p.energy - threshold)
    return 0.1 * s


def light_at(t: int, period: int) -> float:
    phase = (t % period) / period
    return abs(1.0 - 2.0 * phase)


def update_physiology(p: Physiology, sleeping: bool, rates: PhysioRates) -> Physiology:
    """Advance the physiology timers by one tick (in place) and return ``p``."""
    top = rates.max_level
    p.hunger_timer += 1
    if p.hunger_timer >= rates.hunger_period:
        p.food = max(0, p.food - 1)
        p.hunger_timer = 0
    p.thirst_timer += 1
    if p.thirst_timer >= rates.thirst_period:
        p.drink = max(0, p.drink - 1)
        p.thirst_timer = 0
    if sleeping:
        p.rest_timer += 1
        if p.rest_timer >= rates.sleep_restore_period:
            p.energy = min(top, p.energy + 1)
            p.rest_timer = 0
    else:
        p.fatigue_timer += 1
        if p.fatigue_timer >= rates.fatigue_period:
            p.energy = max(0, p.energy - 1)
            p.fatigue_timer = 0
    if p.food == 0 or p.drink == 0:
        p.damage_timer += 1
        if p.damage_timer >= rates.starvation_period:
            p.health = max(0, p.health - 1)
            p.damage_timer = 0
    else:
        p.damage_timer = 0
    if p.food > 0 and p.drink > 0 and (p.energy > 0 or sleeping):
        p.recover_timer += 1
        if p.recover_timer >= rates.recover_period:
            p.health = min(top, p.health + 1)
            p.recover_timer = 0
    return p


def supercover_cells(a, b):
    """Cells whose closed unit square meets the segment between cell centres a and b.

    Integer grid traversal; when the segment passes exactly through a cell
    corner, both side cells and the diagonal cell are included.
    """
    x0, y0 = a
    x1, y1 = b
    dx, dy = x1 - x0, y1 - y0
    nx, ny = abs(dx), abs(dy)
    sx, sy = _sign(dx), _sign(dy)
    x, y = x0, y0
    cells = [(x, y)]
    ix = iy = 0
    while ix < nx or iy < ny:
        # compare (ix + 0.5) / nx with (iy + 0.5) / ny without division
        decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx
        if decision == 0:
            cells.append((x + sx, y))
            cells.append((x, y + sy))
            x += sx
            y += sy
            ix += 1
            iy += 1
        elif decision < 0:
            x += sx
            ix += 1
        else:
            y += sy
            iy += 1
        cells.append((x, y))
    return cells


def line_of_sight(a, b, grid: np.ndarray) -> bool:
    """True iff no tree or stone lies strictly between cells ``a`` and ``b``."""
    if a == b:
        return True
    for x, y in supercover_cells(a, b):
        if (x, y) == a or (x, y) == b:
            continue
        if BLOCKS_SIGHT[grid[y, x]]:
            return False
    return True


# -- episode construction ----------------------------------------------------

def _episode_id(stream: RngStream) -> str:
    return f"{stream.next_u64():016x}"


def _free(state: ArenaState, x: int, y: int) -> bool:
    h, w = state.grid.shape
    if not (0 <= x < w and 0 <= y < h):
        return False
    if not PASSABLE[state.grid[y, x]]:
        return False
    if state.creature_map[y, x] != 0:
        return False
    return (x, y) != state.agent_pos


def reset(config: EnvConfig, arena_seed: int, master_seed: int, episode_label: str = "0",
          layout: ArenaLayout | None = None) -> ArenaState:
    """New episode on the arena for ``arena_seed``.

    Dynamics draw from stream ``dynamics/<arena_seed>/<episode_label>`` of
    ``master_seed``; the episode id is the first draw of that stream.
    """
    if layout is None:
        layout = generate_arena(arena_seed, config)
    rng = derive_stream(master_seed, f"dynamics/{arena_seed}/{episode_label}")
    episode_id = _episode_id(rng)
    top = config.max_level
    state = ArenaState(config=config, layout=layout, grid=layout.grid.copy(),
                       physiology=Physiology(top, top, top, top), agent_pos=tuple(layout.agent_start),
                       agent_facing=Facing.S, rng=rng, episode_id=episode_id,
                       light_level=light_at(0, config.light_period))
    state.creature_map = np.zeros_like(layout.grid, dtype=np.int8)
    state.cows = [None] * config.max_cows
    spawn_rng = rng.child("initial_cows")
    for slot in range(config.max_cows):
        home = slot % len(layout.cow_spawn_points)
        hx, hy = layout.cow_spawn_points[home]
        r = config.cow_spawn_radius
        for _ in range(4):
            ox, oy = spawn_rng.ints_below(2 * r + 1, 2) - r
            x, y = hx + int(ox), hy + int(oy)
            if _free(state, x, y):
                _place_cow(state, slot, x, y)
                break
    return state


def _place_cow(state: ArenaState, slot: int, x: int, y: int):
    home = slot % len(state.layout.cow_spawn_points)
    state.cows[slot] = Creature(CreatureKind.COW, x, y, health=1, home_spawn=home)
    state.creature_map[y, x] = CreatureKind.COW


def spawn_cow(state: ArenaState, slot: int) -> bool:
    """Place a cow for ``slot`` at its home spawn point if allowed and free."""
    if state.live_cows() >= state.config.max_cows or state.cows[slot] is not None:
        return False
    hx, hy = state.layout.cow_spawn_points[slot % len(state.layout.cow_spawn_points)]
    if not _free(state, hx, hy):
        return False
    _place_cow(state, slot, hx, hy)
    return True


def _move_creature(state: ArenaState, c: Creature, x: int, y: int):
    state.creature_map[c.y, c.x] = 0
    c.x, c.y = x, y
    state.creature_map[y, x] = c.kind


def _remove_creature(state: ArenaState, c: Creature):
    state.creature_map[c.y, c.x] = 0
    if c.kind == CreatureKind.COW:
        state.cows[state.cows.index(c)] = None
    else:
        state.predators.remove(c)


def _creature_at(state: ArenaState, x: int, y: int):
    code = state.creature_map[y, x]
    if code == CreatureKind.COW:
        for c in state.cows:
            if c is not None and c.x == x and c.y == y:
                return c
    elif code:
        for c in state.predators:
            if c.x == x and c.y == y:
                return c
    return None


# -- creatures -------------------------------------------------------------

def _damage_agent(state: ArenaState, amount: int):
    p = state.physiology
    p.health = max(0, p.health - amount)
    state.sleeping = False


def _greedy_step(state: ArenaState, c: Creature):
    ax, ay = state.agent_pos
    dx, dy = ax - c.x, ay - c.y
    options = []
    if abs(dx) >= abs(dy):
        if dx:
            options.append((_sign(dx), 0))
        if dy:
            options.append((0, _sign(dy)))
    else:
        if dy:
            options.append((0, _sign(dy)))
        if dx:
            options.append((_sign(dx), 0))
    for mx, my in options:
        if _free(state, c.x + mx, c.y + my):
            _move_creature(state, c, c.x + mx, c.y + my)
            return


def _random_step(state: ArenaState, c: Creature):
    if state.rng.uniform() < 0.5:
        mx, my = _DIRS[state.rng.int_below(4)]
        if _free(state, c.x + mx, c.y + my):
            _move_creature(state, c, c.x + mx, c.y + my)


def _spawn_predator(state: ArenaState):
    cfg = state.config
    rng = state.rng
    if rng.uniform() >= cfg.predator_spawn_prob * (1.0 - state.light_level):
        return
    ranged = cfg.ranged_enabled and rng.uniform() < cfg.ranged_fraction
    kind = CreatureKind.RANGED if ranged else CreatureKind.MELEE
    cap = cfg.max_ranged if ranged else cfg.max_melee
    if sum(p.kind == kind for p in state.predators) >= cap:
        return
    spawns = state.layout.cow_spawn_points
    sx, sy = spawns[rng.int_below(len(spawns))]
    r = cfg.predator_spawn_radius
    ox, oy = rng.ints_below(2 * r + 1, 2) - r
    x, y = sx + int(ox), sy + int(oy)
    ax, ay = state.agent_pos
    if not _free(state, x, y) or abs(x - ax) + abs(y - ay) < 3:
        return
    health = cfg.ranged_health if ranged else cfg.melee_health
    c = Creature(kind, x, y, health=health)
    state.predators.append(c)
    state.creature_map[y, x] = kind


def _fire(state: ArenaState, c: Creature):
    ax, ay = state.agent_pos
    dx, dy = _sign(ax - c.x), _sign(ay - c.y)
    x, y = c.x + dx, c.y + dy
    if (x, y) == state.agent_pos:
        _damage_agent(state, state.config.ranged_damage)
    elif PASSABLE[state.grid[y, x]]:
        state.projectiles.append(Projectile(x, y, dx, dy))


def _move_projectiles(state: ArenaState):
    h, w = state.grid.shape
    keep = []
    for pr in state.projectiles:
        x, y = pr.x + pr.dx, pr.y + pr.dy
        if (x, y) == state.agent_pos:
            _damage_agent(state, state.config.ranged_damage)
            continue
        if not (0 <= x < w and 0 <= y < h) or not PASSABLE[state.grid[y, x]] or state.creature_map[y, x]:
            continue
        pr.x, pr.y = x, y
        keep.append(pr)
    state.projectiles = keep


def update_creatures(state: ArenaState) -> ArenaState:
    """Cows diffuse and respawn; predators spawn, pursue, attack and despawn."""
    cfg = state.config
    rng = state.rng

    live = [c for c in state.cows if c is not None]
    if live:
        movers = np.nonzero(rng.uniforms(len(live)) < cfg.cow_move_prob)[0]
        if len(movers):
            dirs = rng.ints_below(4, len(movers))
            for i, d in zip(movers, dirs):
                c = live[i]
                mx, my = _DIRS[d]
                if _free(state, c.x + mx, c.y + my):
                    _move_creature(state, c, c.x + mx, c.y + my)

    vacant = [slot for slot, c in enumerate(state.cows) if c is None]
    if vacant:
        hits = rng.uniforms(len(vacant)) < cfg.cow_respawn_prob
        for slot, hit in zip(vacant, hits):
            if hit:
                spawn_cow(state, slot)

    _move_projectiles(state)

    if cfg.predators_enabled:
        _spawn_predator(state)
        ax, ay = state.agent_pos
        for c in list(state.predators):
            dist = abs(c.x - ax) + abs(c.y - ay)
            seen = dist <= cfg.pursuit_radius and line_of_sight((c.x, c.y), state.agent_pos, state.grid)
            c.unseen = 0 if seen else c.unseen + 1
            if c.unseen >= cfg.predator_lifetime:
                _remove_creature(state, c)
                continue
            c.cooldown = max(0, c.cooldown - 1)
            if c.kind == CreatureKind.MELEE:
                if dist == 1:
                    if c.cooldown == 0:
                        dmg = cfg.melee_damage_sword if state.inventory.has_sword else cfg.melee_damage
                        _damage_agent(state, dmg)
                        c.cooldown = cfg.melee_cooldown
                elif seen:
                    _greedy_step(state, c)
                else:
                    _random_step(state, c)
            else:
                aligned = c.x == ax or c.y == ay
                if seen and aligned and dist <= cfg.ranged_range:
                    if c.cooldown == 0:
                        _fire(state, c)
                        c.cooldown = cfg.ranged_cooldown
                elif seen:
                    _greedy_step(state, c)
                else:
                    _random_step(state, c)
    return state


# -- observation -----------------------------------------------------------

def observe(state: ArenaState, fov_mode: str | None = None) -> Observation:
    fov_mode = fov_mode or state.config.fov_mode
    h, w = state.grid.shape
    x, y = state.agent_pos
    hr, hc = VIEW_ROWS // 2, VIEW_COLS // 2
    y0, x0 = y - hr, x - hc
    tiles = np.full((VIEW_ROWS, VIEW_COLS), VOID, dtype=np.int8)
    creatures = np.zeros((VIEW_ROWS, VIEW_COLS), dtype=np.int8)
    items = np.zeros((VIEW_ROWS, VIEW_COLS), dtype=np.int8)
    ys, ye = max(0, y0), min(h, y0 + VIEW_ROWS)
    xs, xe = max(0, x0), min(w, x0 + VIEW_COLS)
    tiles[ys - y0:ye - y0, xs - x0:xe - x0] = state.grid[ys:ye, xs:xe]
    creatures[ys - y0:ye - y0, xs - x0:xe - x0] = state.creature_map[ys:ye, xs:xe]
    for pr in state.projectiles:
        r, c = pr.y - y0, pr.x - x0
        if 0 <= r < VIEW_ROWS and 0 <= c < VIEW_COLS:
            items[r, c] = 1
    if fov_mode == "front_only":
        mask = np.zeros((VIEW_ROWS, VIEW_COLS), dtype=bool)
        f = state.agent_facing
        if f == Facing.N:
            mask[hr + 1:, :] = True
        elif f == Facing.S:
            mask[:hr, :] = True
        elif f == Facing.E:
            mask[:, :hc] = True
        else:
            mask[:, hc + 1:] = True
        tiles[mask] = VOID
        creatures[mask] = 0
        items[mask] = 0
    inv = state.inventory
    return Observation(tiles=tiles, creatures=creatures, items=items,
                       physiology=state.physiology.levels(),
                       inventory=(inv.has_sword, inv.has_pick, inv.wood, inv.stone, inv.iron),
                       light_level=state.light_level, facing=int(state.agent_facing),
                       sleeping=state.sleeping, max_level=state.config.max_level)


CELL_CODES = N_TILE_CODES + N_CREATURE_CODES + N_ITEM_CODES
N_CELLS = VIEW_ROWS * VIEW_COLS
OBS_DIM = N_CELLS * CELL_CODES + 4 + 5 + 1 + 1 + 4
_CELL_BASE = np.arange(N_CELLS) * CELL_CODES


def encode_observation(obs: Observation, out: np.ndarray | None = None) -> np.ndarray:
    """Flat feature vector: per-cell one-hots, then scaled levels, inventory, light, sleep, facing."""
    if out is None:
        out = np.zeros(OBS_DIM, dtype=np.float32)
    else:
        out[:] = 0.0
    out[_CELL_BASE + obs.tiles.ravel()] = 1.0
    out[_CELL_BASE + N_TILE_CODES + obs.creatures.ravel()] = 1.0
    out[_CELL_BASE + N_TILE_CODES + N_CREATURE_CODES + obs.items.ravel()] = 1.0
    i = N_CELLS * CELL_CODES
    top = float(obs.max_level)
    out[i:i + 4] = np.asarray(obs.physiology, dtype=np.float32) / top
    sword, pick, wood, stone, iron = obs.inventory
    out[i + 4] = float(sword)
    out[i + 5] = float(pick)
    out[i + 6] = min(wood, top) / top
    out[i + 7] = min(stone, top) / top
    out[i + 8] = min(iron, top) / top
    out[i + 9] = obs.light_level
    out[i + 10] = float(obs.sleeping)
    out[i + 11 + obs.facing] = 1.0
    return out


# -- step ------------------------------------------------------------------

def _resolve_action(state: ArenaState, action: Action) -> tuple:
    cfg = state.config
    p = state.physiology
    inv = state.inventory
    ate = drank = False
    if state.sleeping:
        return ate, drank
    if action in MOVE_FACING:
        facing = MOVE_FACING[action]
        state.agent_facing = facing
        dx, dy = FACING_DELTA[facing]
        nx, ny = state.agent_pos[0] + dx, state.agent_pos[1] + dy
        if _free(state, nx, ny):
            state.agent_pos = (nx, ny)
    elif action == Action.INTERACT:
        dx, dy = FACING_DELTA[state.agent_facing]
        tx, ty = state.agent_pos[0] + dx, state.agent_pos[1] + dy
        h, w = state.grid.shape
        if not (0 <= tx < w and 0 <= ty < h):
            return ate, drank
        target = _creature_at(state, tx, ty)
        if target is not None:
            if target.kind == CreatureKind.COW:
                _remove_creature(state, target)
                p.food = min(cfg.max_level, p.food + cfg.eat_food_gain)
                ate = True
            elif cfg.agent_damages_predators:
                target.health -= cfg.attack_damage_sword if inv.has_sword else cfg.attack_damage
                if target.health <= 0:
                    _remove_creature(state, target)
                    state.kills += 1
            return ate, drank
        tile = state.grid[ty, tx]
        if tile == TileKind.WATER:
            p.drink = min(cfg.max_level, p.drink + cfg.drink_gain)
            drank = True
        elif tile == TileKind.TREE:
            inv.wood += 1
        elif tile == TileKind.STONE:
            inv.stone += 1
            border = tx in (0, w - 1) or ty in (0, h - 1)
            if inv.has_pick and not border:
                state.grid[ty, tx] = TileKind.GRASS
                if state.rng.uniform() < cfg.iron_prob:
                    inv.iron += 1
    elif action == Action.SLEEP:
        if p.energy < math.ceil(cfg.max_level / 2):
            state.sleeping = True
    elif action == Action.CRAFT_SWORD:
        if not inv.has_sword and inv.wood >= 1 and inv.stone >= 1:
            inv.wood -= 1
            inv.stone -= 1
            inv.has_sword = True
    elif action == Action.CRAFT_PICK:
        if not inv.has_pick and inv.wood >= 1 and inv.stone >= 1:
            inv.wood -= 1
            inv.stone -= 1
            inv.has_pick = True
    return ate, drank


def _screen_stats(state: ArenaState, obs: Observation) -> dict:
    sentinel = 2 * state.config.map_size
    ax, ay = state.agent_pos
    dist = {CreatureKind.COW: sentinel, CreatureKind.MELEE: sentinel, CreatureKind.RANGED: sentinel}
    for c in state.cows:
        if c is not None:
            d = abs(c.x - ax) + abs(c.y - ay)
            if d < dist[CreatureKind.COW]:
                dist[CreatureKind.COW] = d
    for c in state.predators:
        d = abs(c.x - ax) + abs(c.y - ay)
        if d < dist[c.kind]:
            dist[c.kind] = d
    counts = np.bincount(obs.creatures.ravel(), minlength=N_CREATURE_CODES)
    return dict(
        distance_to_melee=dist[CreatureKind.MELEE], num_melee_nearby=int(counts[CreatureKind.MELEE]),
        distance_to_passive=dist[CreatureKind.COW], num_passives_nearby=int(counts[CreatureKind.COW]),
        distance_to_ranged=dist[CreatureKind.RANGED], num_ranged_nearby=int(counts[CreatureKind.RANGED]),
    )


def step(state: ArenaState, action, with_record: bool = True) -> tuple:
    """Advance ``state`` in place by one timestep.

    Returns ``(state, observation, reward, done, record)``; the record holds the
    environment fields of the post-step state (agent-side fields are NaN).
    ``with_record=False`` skips building it and returns ``None`` instead.
    """
    if state.done:
        raise EpisodeFinished(f"episode {state.episode_id} already finished at t={state.t}")
    cfg = state.config
    action = Action(int(action))
    ate, drank = _resolve_action(state, action)
    update_physiology(state.physiology, state.sleeping, PhysioRates.from_config(cfg))
    if state.sleeping and state.physiology.energy >= cfg.max_level:
        state.sleeping = False
    update_creatures(state)  # damage also wakes the agent
    state.t += 1
    state.light_level = light_at(state.t, cfg.light_period)
    r = reward(state.physiology, cfg.reward_threshold)
    state.done = state.physiology.health <= 0 or state.t >= cfg.episode_cap
    obs = observe(state)
    record = make_record(state, obs, action, r, ate, drank) if with_record else None
    return state, obs, r, state.done, record


def make_record(state: ArenaState, obs: Observation, action, r: float, ate: bool, drank: bool) -> LogRecord:
    p = state.physiology
    sx, sy = state.start_pos
    x, y = state.agent_pos
    stats = _screen_stats(state, obs)
    inv = state.inventory
    return LogRecord(
        timestep=state.t, action=int(action), health=p.health, food=p.food, drink=p.drink,
        energy=p.energy, done=state.done, is_sleeping=state.sleeping, is_resting=False,
        player_x=x, player_y=y, recover=p.recover_timer, hunger=p.hunger_timer,
        thirst=p.thirst_timer, fatigue=p.fatigue_timer, light_level=state.light_level,
        melee_on_screen=stats["num_melee_nearby"] > 0, passive_on_screen=stats["num_passives_nearby"] > 0,
        ranged_on_screen=stats["num_ranged_nearby"] > 0,
        delta_x=x - sx, delta_y=y - sy, num_monsters_killed=state.kills,
        has_sword=inv.has_sword, has_pick=inv.has_pick, held_iron=inv.iron,
        episode_id=state.episode_id, facing=int(state.agent_facing), reward=r,
        ate=ate, drank=drank, **stats)

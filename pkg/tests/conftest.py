import numpy as np
import pytest

from forageworld.config import EnvConfig, desk_env_config
from forageworld.env import reset
from forageworld.world_gen import ArenaLayout, TileKind


def open_layout(size=16, spawns=((3, 3),), water=((12, 12),), start=None, seed=0):
    """Grass arena with a stone border, given water cells and spawn points."""
    grid = np.full((size, size), TileKind.GRASS, dtype=np.int8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = TileKind.STONE
    for x, y in water:
        grid[y, x] = TileKind.WATER
    start = start or (size // 2, size // 2)
    return ArenaLayout(grid=grid, cow_spawn_points=[tuple(p) for p in spawns],
                       lake_cells=[tuple(p) for p in water], agent_start=tuple(start), arena_seed=seed)


def fixture_state(layout=None, config=None, **cfg):
    """Episode on a hand-built arena with no cows and no predators unless asked."""
    base = dict(map_size=16, max_cows=1, n_spawn_points=1, predators_enabled=False,
                cow_move_prob=0.0, cow_respawn_prob=0.0)
    base.update(cfg)
    config = config or EnvConfig(**base)
    layout = layout or open_layout()
    state = reset(config, layout.arena_seed, 0, layout=layout)
    for c in list(state.cows):
        if c is not None:
            state.creature_map[c.y, c.x] = 0
    state.cows = [None] * config.max_cows
    return state


@pytest.fixture
def desk_env():
    return desk_env_config()


def synthetic_log(positions, hidden=None, facing=0, episode_id="syn", stride=1, **columns):
    """EpisodeLog whose records follow ``positions`` (x, y) with optional hidden states."""
    from forageworld.telemetry import EpisodeLog, LogRecord, append_record

    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    n = len(pos)
    facing = np.broadcast_to(np.asarray(facing), (n,))
    log = EpisodeLog(header={"episode_id": episode_id, "hidden_dim": 0 if hidden is None else hidden.shape[1]},
                     hidden_stride=stride)
    for t in range(n):
        rec = LogRecord(player_x=int(pos[t, 0]), player_y=int(pos[t, 1]),
                        delta_x=int(pos[t, 0] - pos[0, 0]), delta_y=int(pos[t, 1] - pos[0, 1]),
                        facing=int(facing[t]), timestep=t + 1, episode_id=episode_id, health=9)
        for name, values in columns.items():
            setattr(rec, name, values[t])
        append_record(log, rec, None if hidden is None else hidden[t])
    return log


def random_walk(n, seed, p_move=0.8):
    rng = np.random.default_rng(seed)
    steps = np.array([(0, -1), (1, 0), (0, 1), (-1, 0)])
    moves = steps[rng.integers(0, 4, n)] * (rng.random(n) < p_move)[:, None]
    moves[0] = 0
    return 50 + np.cumsum(moves, axis=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

"""Procedural arena generation from layered Perlin noise."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import EnvConfig
from .rng import MASK64, RngStream, _mix, derive_stream

LAYOUT_FORMAT_VERSION = 1
MAX_GEN_RETRIES = 8


class TileKind(enum.IntEnum):
    GRASS = 0
    SAND = 1
    WATER = 2
    TREE = 3
    STONE = 4


PASSABLE = np.array([True, True, False, False, False])
BLOCKS_SIGHT = np.array([False, False, False, True, True])


class ArenaGenerationError(RuntimeError):
    pass


@dataclass
class ArenaLayout:
    """A generated arena.  ``grid`` is indexed ``grid[y, x]``; points are ``(x, y)``."""

    grid: np.ndarray
    cow_spawn_points: list
    lake_cells: list
    agent_start: tuple
    arena_seed: int
    retries: int = 0
    patch_threshold: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    def passable(self) -> np.ndarray:
        return PASSABLE[self.grid]

    def __eq__(self, other):
        if not isinstance(other, ArenaLayout):
            return NotImplemented
        return (np.array_equal(self.grid, other.grid)
                and self.cow_spawn_points == other.cow_spawn_points
                and self.lake_cells == other.lake_cells
                and self.agent_start == other.agent_start
                and self.arena_seed == other.arena_seed
                and self.retries == other.retries)


# -- noise -----------------------------------------------------------------

def make_lattice(stream: RngStream, nx: int, ny: int) -> np.ndarray:
    """Unit gradient vectors on an ``(ny, nx)`` lattice (wrapping)."""
    theta = 2.0 * np.pi * stream.uniforms(nx * ny)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1).reshape(ny, nx, 2)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2(x, y, lattice: np.ndarray):
    """Gradient noise at lattice-unit coordinates; exactly zero at integer points.

    With unit gradients the magnitude never exceeds ``sqrt(2)/2``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ny, nx, _ = lattice.shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)

    def corner(dx, dy):
        g = lattice[(iy + dy) % ny, (ix + dx) % nx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u = _fade(fx)
    v = _fade(fy)
    top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0))
    bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1))
    out = top + v * (bottom - top)
    return out if out.ndim else float(out)


def noise_field(stream: RngStream, width: int, height: int, spacing: float, octaves: int) -> np.ndarray:
    """Octave-summed Perlin field sampled at cell centres, normalised to [-1, 1]."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    total = np.zeros((height, width))
    amp_sum = 0.0
    for octave in range(octaves):
        freq = 2.0 ** octave / spacing
        n_lat = int(np.ceil(max(width, height) * freq)) + 2
        lattice = make_lattice(stream.child(f"octave{octave}"), n_lat, n_lat)
        amp = 0.5 ** octave
        total += amp * perlin2(xs * freq, ys * freq, lattice)
        amp_sum += amp
    return total / amp_sum


# -- arenas ----------------------------------------------------------------

def _sub_seed(arena_seed: int, attempt: int) -> int:
    if attempt == 0:
        return arena_seed
    return _mix((arena_seed + attempt * 0x9E3779B97F4A7C15) & MASK64) >> 1


def patch_field(layout_seed: int, config: EnvConfig) -> np.ndarray:
    stream = derive_stream(layout_seed, "worldgen")
    return noise_field(stream.child("patch"), config.map_size, config.map_size,
                       config.noise_spacing, config.noise_octaves)


def _generate_once(seed: int, config: EnvConfig) -> ArenaLayout | None:
    size = config.map_size
    stream = derive_stream(seed, "worldgen")
    water_f = noise_field(stream.child("water"), size, size, config.noise_spacing, config.noise_octaves)
    tree_f = noise_field(stream.child("tree"), size, size, config.noise_spacing, config.noise_octaves)
    patch_f = noise_field(stream.child("patch"), size, size, config.noise_spacing, config.noise_octaves)

    interior = np.zeros((size, size), dtype=bool)
    interior[1:-1, 1:-1] = True
    cx, cy = size // 2, size // 2
    start_zone = np.zeros_like(interior)
    start_zone[cy - 1:cy + 2, cx - 1:cx + 2] = True

    grid = np.full((size, size), TileKind.GRASS, dtype=np.int8)
    if config.water_fraction > 0:
        thr = np.quantile(water_f[interior], 1.0 - config.water_fraction)
        grid[(water_f >= thr) & interior] = TileKind.WATER
    water = grid == TileKind.WATER
    beach = ndimage.binary_dilation(water, structure=np.ones((3, 3), dtype=bool)) & ~water
    grid[beach] = TileKind.SAND
    if config.tree_fraction > 0:
        thr = np.quantile(tree_f[interior], 1.0 - config.tree_fraction)
        grid[(tree_f >= thr) & interior & (grid == TileKind.GRASS)] = TileKind.TREE
    stones = stream.child("stones").uniforms(size * size).reshape(size, size) < config.stone_density
    grid[stones & (grid == TileKind.GRASS)] = TileKind.STONE
    grid[~interior] = TileKind.STONE
    grid[start_zone] = TileKind.GRASS

    passable = PASSABLE[grid]
    region_pool = passable & interior & ~start_zone
    if not region_pool.any():
        return None
    patch_thr = float(np.quantile(patch_f[region_pool], 1.0 - config.patch_fraction))
    region = region_pool & (patch_f >= patch_thr)
    cand_y, cand_x = np.nonzero(region)
    order = stream.child("spawn").permutation(len(cand_x))

    spawns: list[tuple[int, int]] = []
    sep = float(config.min_spawn_separation)
    while len(spawns) < config.n_spawn_points:
        for i in order:
            if len(spawns) >= config.n_spawn_points:
                break
            p = (int(cand_x[i]), int(cand_y[i]))
            if p in spawns:
                continue
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= sep * sep for q in spawns):
                spawns.append(p)
        if sep <= 0:
            break
        sep = sep / 2.0 if sep > 1.0 else 0.0
    if len(spawns) < config.n_spawn_points:
        return None

    wy, wx = np.nonzero(grid == TileKind.WATER)
    lakes = [(int(x), int(y)) for y, x in zip(wy, wx)]
    return ArenaLayout(grid=grid, cow_spawn_points=spawns, lake_cells=lakes,
                       agent_start=(cx, cy), arena_seed=seed, patch_threshold=patch_thr,
                       meta={"spawn_separation": sep})


def generate_arena(arena_seed: int, config: EnvConfig) -> ArenaLayout:
    """Deterministic arena for ``arena_seed``.

    Layouts that fail :func:`connectivity_check` are regenerated from a
    perturbed sub-seed, up to ``MAX_GEN_RETRIES`` times.
    """
    config.validate()
    for attempt in range(MAX_GEN_RETRIES + 1):
        sub = _sub_seed(arena_seed, attempt)
        layout = _generate_once(sub, config)
        if layout is not None and connectivity_check(layout):
            layout.retries = attempt
            layout.meta["sub_seed"] = sub
            layout.arena_seed = arena_seed
            return layout
    raise ArenaGenerationError(
        f"no well-connected arena after {MAX_GEN_RETRIES} retries (arena_seed={arena_seed})")


def reachable_mask(layout: ArenaLayout) -> np.ndarray:
    passable = layout.passable()
    labels, _ = ndimage.label(passable)
    sx, sy = layout.agent_start
    if not passable[sy, sx]:
        return np.zeros_like(passable)
    return labels == labels[sy, sx]


def connectivity_check(layout: ArenaLayout) -> bool:
    """True iff the start reaches >= 90% of passable cells, a lake and a spawn point."""
    passable = layout.passable()
    reach = reachable_mask(layout)
    if not reach.any() or reach.sum() < 0.9 * passable.sum():
        return False
    near = ndimage.binary_dilation(reach, structure=ndimage.generate_binary_structure(2, 1))
    if not any(near[y, x] for x, y in layout.lake_cells):
        return False
    return any(reach[y, x] for x, y in layout.cow_spawn_points)


# -- serialisation ---------------------------------------------------------

def _rle(flat: np.ndarray) -> list:
    runs = []
    start = 0
    for i in range(1, len(flat) + 1):
        if i == len(flat) or flat[i] != flat[start]:
            runs.append([int(flat[start]), i - start])
            start = i
    return runs


def layout_to_dict(layout: ArenaLayout, config: EnvConfig | None = None) -> dict:
    import dataclasses
    return {
        "format_version": LAYOUT_FORMAT_VERSION,
        "arena_seed": layout.arena_seed,
        "width": layout.width,
        "height": layout.height,
        "tile_kinds": [k.name.lower() for k in TileKind],
        "grid_rle": _rle(layout.grid.ravel()),
        "cow_spawn_points": [list(p) for p in layout.cow_spawn_points],
        "lake_cells": [list(p) for p in layout.lake_cells],
        "agent_start": list(layout.agent_start),
        "retries": layout.retries,
        "patch_threshold": layout.patch_threshold,
        "meta": layout.meta,
        "config": dataclasses.asdict(config) if config is not None else None,
    }


def layout_from_dict(data: dict) -> ArenaLayout:
    if data.get("format_version") != LAYOUT_FORMAT_VERSION:
        raise ValueError(f"unsupported layout format version {data.get('format_version')}")
    flat = np.concatenate([np.full(n, k, dtype=np.int8) for k, n in data["grid_rle"]])
    grid = flat.reshape(data["height"], data["width"])
    return ArenaLayout(grid=grid,
                       cow_spawn_points=[tuple(p) for p in data["cow_spawn_points"]],
                       lake_cells=[tuple(p) for p in data["lake_cells"]],
                       agent_start=tuple(data["agent_start"]),
                       arena_seed=data["arena_seed"], retries=data["retries"],
                       patch_threshold=data["patch_threshold"], meta=data.get("meta", {}))


def save_layout(layout: ArenaLayout, path, config: EnvConfig | None = None):
    with open(path, "w") as fh:
        json.dump(layout_to_dict(layout, config), fh, indent=1)


def load_layout(path) -> ArenaLayout:
    with open(path) as fh:
        return layout_from_dict(json.load(fh))

"""Per-timestep episode logs: schema, file persistence and replay verification.

An episode is stored as a pair of files::

    <episode_id>.records.csv   '#'-prefixed JSON header line, column header row,
                               one row per timestep, '#'-prefixed footer with
                               row count and SHA-256 checksums
    <episode_id>.h.bin         16-byte preamble (8-byte magic, uint32 rows,
                               uint32 cols, little endian) + row-major float32

Missing-creature distances are written as the sentinel ``2 * map_size``.
Absent agent-side values (e.g. predicted position with the auxiliary head
disabled) are written as empty cells and read back as NaN.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FORMAT_VERSION = 1
H_MAGIC = b"FWHSTATE"
_NAN = float("nan")


class LogCorruptionError(RuntimeError):
    """Truncated, mis-paired or checksum-failing log."""


class LogVersionError(LogCorruptionError):
    pass


@dataclass
class LogRecord:
    action: int = 0
    health: int = 0
    food: int = 0
    drink: int = 0
    energy: int = 0
    done: bool = False
    is_sleeping: bool = False
    is_resting: bool = False
    player_x: int = 0
    player_y: int = 0
    recover: int = 0
    hunger: int = 0
    thirst: int = 0
    fatigue: int = 0
    light_level: float = 0.0
    distance_to_melee: int = 0
    melee_on_screen: bool = False
    distance_to_passive: int = 0
    passive_on_screen: bool = False
    distance_to_ranged: int = 0
    ranged_on_screen: bool = False
    num_melee_nearby: int = 0
    num_passives_nearby: int = 0
    num_ranged_nearby: int = 0
    delta_x: int = 0
    delta_y: int = 0
    predicted_delta_x: float = _NAN
    predicted_delta_y: float = _NAN
    num_monsters_killed: int = 0
    has_sword: bool = False
    has_pick: bool = False
    held_iron: int = 0
    value: float = _NAN
    entropy: float = _NAN
    log_probability: float = _NAN
    episode_id: str = ""
    # extensions beyond the per-timestep variable table
    timestep: int = 0
    facing: int = 0
    reward: float = 0.0
    ate: bool = False
    drank: bool = False
    hidden_state_ref: int = -1


COLUMN_NAMES = {
    "action": "Action", "health": "Health", "food": "Food", "drink": "Drink",
    "energy": "Energy", "done": "Done", "is_sleeping": "Is Sleeping", "is_resting": "Is Resting",
    "player_x": "Player Position X", "player_y": "Player Position Y",
    "recover": "Recover", "hunger": "Hunger", "thirst": "Thirst", "fatigue": "Fatigue",
    "light_level": "Light Level",
    "distance_to_melee": "Distance to Melee", "melee_on_screen": "Melee on Screen",
    "distance_to_passive": "Distance to Passive", "passive_on_screen": "Passive on Screen",
    "distance_to_ranged": "Distance to Ranged", "ranged_on_screen": "Ranged on Screen",
    "num_melee_nearby": "Num Melee Nearby", "num_passives_nearby": "Num Passives Nearby",
    "num_ranged_nearby": "Num Ranged Nearby",
    "delta_x": "Delta X", "delta_y": "Delta Y",
    "predicted_delta_x": "Predicted Delta X", "predicted_delta_y": "Predicted Delta Y",
    "num_monsters_killed": "Num Monsters Killed", "has_sword": "Has Sword",
    "has_pick": "Has Pick", "held_iron": "Held Iron", "value": "Value", "entropy": "Entropy",
    "log_probability": "Log Probability", "episode_id": "Episode ID",
    "timestep": "Timestep", "facing": "Facing", "reward": "Reward", "ate": "Ate",
    "drank": "Drank", "hidden_state_ref": "Hidden State Ref",
}
FIELDS = [f.name for f in dataclasses.fields(LogRecord)]
FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(LogRecord)}
AGENT_FIELDS = ("predicted_delta_x", "predicted_delta_y", "value", "entropy",
                "log_probability", "hidden_state_ref")
ENV_FIELDS = tuple(f for f in FIELDS if f not in AGENT_FIELDS)


def format_value(name: str, value) -> str:
    kind = FIELD_TYPES[name]
    if kind == "bool":
        return "1" if value else "0"
    if kind == "float":
        value = float(value)
        return "" if math.isnan(value) else repr(value)
    return str(value)


def parse_value(name: str, text: str):
    kind = FIELD_TYPES[name]
    if kind == "bool":
        return text == "1"
    if kind == "float":
        return _NAN if text == "" else float(text)
    if kind == "int":
        return int(text)
    return text


def format_row(record: LogRecord) -> str:
    return ",".join(format_value(n, getattr(record, n)) for n in FIELDS)


@dataclass
class EpisodeLog:
    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    hidden_states: list = field(default_factory=list)
    hidden_stride: int = 1

    @property
    def finalized(self) -> bool:
        return bool(self.records) and self.records[-1].done

    def __len__(self):
        return len(self.records)

    def append(self, record: LogRecord, h=None) -> "EpisodeLog":
        return append_record(self, record, h)

    def hidden_matrix(self) -> np.ndarray:
        if not self.hidden_states:
            return np.zeros((0, self.header.get("hidden_dim", 0)), dtype=np.float32)
        return np.asarray(np.stack(self.hidden_states), dtype=np.float32)

    def column(self, name: str) -> np.ndarray:
        values = [getattr(r, name) for r in self.records]
        kind = FIELD_TYPES[name]
        dtype = {"bool": bool, "int": np.int64, "float": np.float64}.get(kind, object)
        return np.array(values, dtype=dtype)

    def positions(self) -> np.ndarray:
        return np.stack([self.column("player_x"), self.column("player_y")], axis=1)

    def deltas(self) -> np.ndarray:
        return np.stack([self.column("delta_x"), self.column("delta_y")], axis=1)

    @property
    def episode_id(self) -> str:
        return self.header.get("episode_id", self.records[0].episode_id if self.records else "")

    def __eq__(self, other):
        if not isinstance(other, EpisodeLog):
            return NotImplemented
        return (self.header == other.header and self.hidden_stride == other.hidden_stride
                and [format_row(r) for r in self.records] == [format_row(r) for r in other.records]
                and np.array_equal(self.hidden_matrix(), other.hidden_matrix()))


def append_record(log: EpisodeLog, record: LogRecord, h=None) -> EpisodeLog:
    """Append a record and, on stride steps, its hidden state as one unit."""
    if log.finalized:
        raise LogCorruptionError("cannot append after a done=True record")
    t = len(log.records)
    if h is not None and t % log.hidden_stride == 0:
        if record.hidden_state_ref not in (-1, len(log.hidden_states)):
            raise LogCorruptionError(
                f"hidden_state_ref {record.hidden_state_ref} != state row {len(log.hidden_states)}")
        record.hidden_state_ref = len(log.hidden_states)
        log.hidden_states.append(np.asarray(h, dtype=np.float32).copy())
    elif record.hidden_state_ref != -1:
        raise LogCorruptionError("record references a hidden state that was not supplied")
    log.records.append(record)
    return log


# -- files -----------------------------------------------------------------

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_log(log: EpisodeLog, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    eid = log.episode_id
    rec_path = directory / f"{eid}.records.csv"
    h_path = directory / f"{eid}.h.bin"

    H = log.hidden_matrix()
    rows, cols = H.shape
    h_bytes = H_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(H, dtype="<f4").tobytes()
    header = dict(log.header, format_version=LOG_FORMAT_VERSION, hidden_stride=log.hidden_stride)
    body = ",".join(COLUMN_NAMES[n] for n in FIELDS) + "\n"
    body += "".join(format_row(r) + "\n" for r in log.records)
    text = "# " + json.dumps(header, sort_keys=True) + "\n" + body
    text += f"# end rows={len(log.records)} sha256={_sha(body.encode())} h_sha256={_sha(h_bytes)}\n"
    rec_path.write_text(text)
    h_path.write_bytes(h_bytes)
    return rec_path, h_path


def read_hidden(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != H_MAGIC:
        raise LogCorruptionError(f"{path}: bad hidden-state preamble")
    rows, cols = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * rows * cols:
        raise LogCorruptionError(f"{path}: expected {rows}x{cols} floats, file is truncated or padded")
    return np.frombuffer(data[16:], dtype="<f4").reshape(rows, cols).astype(np.float32)


def read_log(path) -> EpisodeLog:
    """Read ``<episode>.records.csv`` and its ``.h.bin`` sidecar, verifying integrity."""
    path = Path(path)
    lines = path.read_text().splitlines(keepends=True)
    if not lines or not lines[0].startswith("# "):
        raise LogCorruptionError(f"{path}: missing header line")
    header = json.loads(lines[0][2:])
    if header.get("format_version") != LOG_FORMAT_VERSION:
        raise LogVersionError(f"{path}: format version {header.get('format_version')} "
                              f"!= {LOG_FORMAT_VERSION}")
    if len(lines) < 3 or not lines[-1].startswith("# end ") or not lines[-1].endswith("\n"):
        raise LogCorruptionError(f"{path}: missing footer, file truncated")
    footer = dict(kv.split("=", 1) for kv in lines[-1][6:].split())
    body = "".join(lines[1:-1])
    if _sha(body.encode()) != footer["sha256"]:
        raise LogCorruptionError(f"{path}: records checksum mismatch")
    columns = lines[1].rstrip("\n").split(",")
    if columns != [COLUMN_NAMES[n] for n in FIELDS]:
        raise LogVersionError(f"{path}: unexpected column set")
    records = []
    for line in lines[2:-1]:
        cells = line.rstrip("\n").split(",")
        if len(cells) != len(FIELDS):
            raise LogCorruptionError(f"{path}: malformed row {len(records)}")
        records.append(LogRecord(**{n: parse_value(n, c) for n, c in zip(FIELDS, cells)}))
    if len(records) != int(footer["rows"]):
        raise LogCorruptionError(f"{path}: row count mismatch")

    h_path = path.with_name(path.name.replace(".records.csv", ".h.bin"))
    h_bytes = h_path.read_bytes() if h_path.exists() else b""
    if _sha(h_bytes) != footer["h_sha256"]:
        raise LogCorruptionError(f"{h_path}: hidden-state checksum mismatch")
    H = read_hidden(h_path)
    n_refs = sum(r.hidden_state_ref >= 0 for r in records)
    if n_refs != H.shape[0]:
        raise LogCorruptionError(f"{path}: {n_refs} hidden refs but {H.shape[0]} state rows")
    stride = header.pop("hidden_stride", 1)
    header.pop("format_version")
    return EpisodeLog(header=header, records=records, hidden_states=list(H), hidden_stride=stride)


# -- run manifests -----------------------------------------------------------

def write_manifest(directory, entries: list, **meta) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(dict(meta, format_version=LOG_FORMAT_VERSION, episodes=entries),
                               indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_logs(directory) -> list:
    """All episode logs of a run directory, ordered by manifest (or episode id)."""
    directory = Path(directory)
    if (directory / "manifest.json").exists():
        names = [e["records"] for e in read_manifest(directory)["episodes"]]
    else:
        names = sorted(p.name for p in directory.glob("*.records.csv"))
    return [read_log(directory / n) for n in names]


# -- replay ----------------------------------------------------------------

@dataclass
class ReplayResult:
    ok: bool
    timestep: int | None = None
    field: str | None = None
    message: str = ""

    def __bool__(self):
        return self.ok


def replay_verify(log: EpisodeLog, config=None) -> ReplayResult:
    """Re-simulate the logged actions and compare every environment field byte-for-byte.

    If ``config`` is given it must equal the config echoed in the log header.
    """
    from .config import EnvConfig, block_from_dict
    from .env import reset, step

    logged_cfg = block_from_dict(EnvConfig, log.header["config"], "env")
    if config is not None and dataclasses.asdict(config) != dataclasses.asdict(logged_cfg):
        diff = sorted(k for k, v in dataclasses.asdict(config).items() if log.header["config"].get(k) != v)
        return ReplayResult(False, message=f"config mismatch: {', '.join(diff)}")
    state = reset(logged_cfg, log.header["arena_seed"], log.header["master_seed"],
                  log.header["episode_label"])
    if state.episode_id != log.header["episode_id"]:
        return ReplayResult(False, 0, "episode_id", "episode id mismatch")
    for i, rec in enumerate(log.records):
        if state.done:
            return ReplayResult(False, i, "done", "log continues after episode end")
        _, _, _, _, replayed = step(state, rec.action)
        replayed.episode_id = state.episode_id
        for name in ENV_FIELDS:
            a = format_value(name, getattr(rec, name))
            b = format_value(name, getattr(replayed, name))
            if a != b:
                return ReplayResult(False, i, name, f"t={i} field {name}: logged {a!r} replayed {b!r}")
    return ReplayResult(True, message=f"{len(log.records)} records verified")

import dataclasses

import numpy as np
import pytest

from forageworld import agent_net as net
from forageworld.config import EnvConfig, desk_env_config
from forageworld.ppo import run_episode
from forageworld.rng import RngStream
from forageworld.telemetry import (
    COLUMN_NAMES, FIELDS, EpisodeLog, LogCorruptionError, LogRecord, LogVersionError,
    append_record, load_logs, read_hidden, read_log, replay_verify, write_log, write_manifest,
)


def small_episode(seed=1, steps=120, stride=1, aux=True, greedy=False):
    cfg = desk_env_config()
    params = net.init_params(net.NetConfig(1203, hidden_dim=8), RngStream(seed, "init"))
    return run_episode(params, cfg, 2 * seed + 1, seed, "ep0", greedy, RngStream(seed, "policy"),
                       aux_enabled=aux, hidden_stride=stride, max_steps=steps)


def fixture_log(n=3):
    log = EpisodeLog(header={"episode_id": "fx", "hidden_dim": 2})
    for t in range(n):
        append_record(log, LogRecord(action=t, health=9, timestep=t + 1, episode_id="fx",
                                     light_level=0.25 * t, done=t == n - 1), np.array([t, -t]))
    return log


@pytest.fixture(scope="module")
def episode():
    return small_episode()


class TestAppend:
    def test_append_to_empty(self):
        log = EpisodeLog()
        append_record(log, LogRecord(), np.zeros(3))
        assert len(log) == 1 and len(log.hidden_states) == 1

    def test_append_after_done_raises(self):
        log = fixture_log()
        with pytest.raises(LogCorruptionError):
            append_record(log, LogRecord(), np.zeros(2))

    def test_many_appends_pair_with_states(self):
        log = EpisodeLog()
        h = np.zeros(4)
        for _ in range(10_000):
            append_record(log, LogRecord(), h)
        assert log.hidden_matrix().shape == (10_000, 4)
        np.testing.assert_array_equal(log.column("hidden_state_ref"), np.arange(10_000))

    def test_reference_without_state_raises(self):
        with pytest.raises(LogCorruptionError):
            append_record(EpisodeLog(), LogRecord(hidden_state_ref=0))

    def test_stride(self):
        log = EpisodeLog(hidden_stride=3)
        for _ in range(7):
            append_record(log, LogRecord(), np.ones(2))
        assert len(log.hidden_states) == 3
        assert log.column("hidden_state_ref").tolist() == [0, -1, -1, 1, -1, -1, 2]


class TestFiles:
    def test_round_trip_fixture(self, tmp_path):
        log = fixture_log()
        rec, h = write_log(log, tmp_path)
        assert rec.name == "fx.records.csv" and h.name == "fx.h.bin"
        assert read_log(rec) == log

    def test_round_trip_episode(self, tmp_path, episode):
        rec, _ = write_log(episode, tmp_path)
        back = read_log(rec)
        assert back == episode
        assert np.isnan(back.column("predicted_delta_x")).sum() == 0

    def test_header_names_columns(self, tmp_path):
        rec, _ = write_log(fixture_log(), tmp_path)
        names = rec.read_text().splitlines()[1].split(",")
        assert names[:4] == ["Action", "Health", "Food", "Drink"]
        assert names == [COLUMN_NAMES[f] for f in FIELDS]
        assert "Player Position X" in names and "Log Probability" in names

    def test_sidecar_preamble(self, tmp_path):
        _, h = write_log(fixture_log(), tmp_path)
        data = h.read_bytes()
        assert data[:8] == b"FWHSTATE" and len(data) == 16 + 3 * 2 * 4
        np.testing.assert_array_equal(read_hidden(h), [[0, 0], [1, -1], [2, -2]])

    def test_truncated_records(self, tmp_path):
        rec, _ = write_log(fixture_log(), tmp_path)
        text = rec.read_text()
        rec.write_text(text[: len(text) - 40])
        with pytest.raises(LogCorruptionError):
            read_log(rec)

    def test_truncated_sidecar(self, tmp_path):
        rec, h = write_log(fixture_log(), tmp_path)
        h.write_bytes(h.read_bytes()[:-4])
        with pytest.raises(LogCorruptionError):
            read_log(rec)

    def test_edited_cell_fails_checksum(self, tmp_path):
        rec, _ = write_log(fixture_log(), tmp_path)
        lines = rec.read_text().splitlines(keepends=True)
        lines[2] = "1" + lines[2][1:]
        rec.write_text("".join(lines))
        with pytest.raises(LogCorruptionError, match="checksum"):
            read_log(rec)

    def test_version_mismatch(self, tmp_path):
        rec, _ = write_log(fixture_log(), tmp_path)
        rec.write_text(rec.read_text().replace('"format_version": 1', '"format_version": 99'))
        with pytest.raises(LogVersionError):
            read_log(rec)

    def test_manifest_ordering(self, tmp_path):
        a, b = fixture_log(), fixture_log(2)
        b.header["episode_id"] = "fy"
        for r in b.records:
            r.episode_id = "fy"
        ra, _ = write_log(a, tmp_path)
        rb, _ = write_log(b, tmp_path)
        write_manifest(tmp_path, [{"records": rb.name}, {"records": ra.name}])
        assert [l.episode_id for l in load_logs(tmp_path)] == ["fy", "fx"]


class TestRecordInvariants:
    def test_delta_is_position_minus_start(self, episode):
        start = episode.positions()[0] - episode.deltas()[0]
        np.testing.assert_array_equal(episode.positions() - episode.deltas(),
                                      np.broadcast_to(start, episode.positions().shape))

    def test_states_pair_with_records(self, episode):
        assert episode.hidden_matrix().shape == (len(episode), 8)

    def test_sentinel_and_screen_flags(self, episode):
        sentinel = 2 * desk_env_config().map_size
        for name in ("melee", "passive", "ranged"):
            d = episode.column(f"distance_to_{name}")
            on = episode.column(f"{name}_on_screen")
            assert np.all((d <= sentinel) & (d >= 1))
            assert np.all(d[on] <= 9)  # 4 rows + 5 columns from the centre cell

    def test_resting_is_never_set(self, episode):
        assert not episode.column("is_resting").any()

    def test_aux_absent_coded(self):
        log = small_episode(steps=20, aux=False)
        assert np.isnan(log.column("predicted_delta_x")).all()


class TestReplay:
    def test_artifact_logs_replay(self, episode, tmp_path):
        assert replay_verify(episode)
        rec, _ = write_log(episode, tmp_path)
        assert replay_verify(read_log(rec))

    def test_greedy_strided_log_replays(self):
        assert replay_verify(small_episode(seed=4, steps=200, stride=5, greedy=True))

    def test_corrupted_position(self, episode):
        bad = read_copy(episode)
        bad.records[37].player_x += 1
        res = replay_verify(bad)
        assert not res and res.timestep == 37 and res.field == "player_x"

    def test_config_mismatch(self, episode):
        other = dataclasses.replace(desk_env_config(), hunger_period=26)
        res = replay_verify(episode, other)
        assert not res and "config mismatch" in res.message and "hunger_period" in res.message

    def test_matching_config_accepted(self, episode):
        assert replay_verify(episode, desk_env_config())

    def test_default_config_differs(self, episode):
        assert not replay_verify(episode, EnvConfig())


def read_copy(log):
    return EpisodeLog(dict(log.header), [dataclasses.replace(r) for r in log.records],
                      list(log.hidden_states), log.hidden_stride)

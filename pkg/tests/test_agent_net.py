import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forageworld import agent_net as net
from forageworld.rng import RngStream

from oracles import bptt_draw, grad_rel_error, gru_step_reference, linear_loss_grads, random_params


def zero_params(cfg):
    p = net.init_params(cfg, RngStream(0, "z"))
    for k in p:
        p.tensors[k][...] = 0
    return p


class TestShapes:
    def test_default_parameter_count(self):
        cfg = net.NetConfig(1203)
        D, H, A = 1203, 512, 9
        expected = D * H + H + 2 * 3 * H * H + 3 * H + H + H * A + A + H + 1 + 2 * H + 2
        assert cfg.n_params() == expected == 2_197_516

    def test_feedforward_has_no_gru(self):
        shapes = net.NetConfig(10, 4, recurrent=False).tensor_shapes()
        assert not any(k.startswith("gru") for k in shapes)

    def test_init_recurrent_blocks_orthogonal(self):
        p = net.init_params(net.NetConfig(6, 8), RngStream(3, "init"), dtype=np.float64)
        for g in range(3):
            Q = p["gru_wh"][:, 8 * g:8 * (g + 1)]
            np.testing.assert_allclose(Q.T @ Q, np.eye(8), atol=1e-12)
        assert np.all(p["enc_b"] == 0) and np.abs(p["enc_w"]).max() <= 1 / np.sqrt(6)


class TestForward:
    def test_zero_params(self):
        cfg = net.NetConfig(7, 5)
        x = np.random.default_rng(0).standard_normal(7).astype(np.float32)
        h, logits, value, pos = net.forward(zero_params(cfg), np.zeros(5, np.float32), x)
        assert np.all(h == 0) and np.all(logits == 0) and value == 0
        np.testing.assert_allclose(net.softmax(logits), np.full(9, 1 / 9))

    def test_zero_params_gate_is_half(self):
        # h' = (1 - z) n + z h with z = 0.5 and n = 0 halves the carried state
        h, *_ = net.forward(zero_params(net.NetConfig(3, 4)), np.ones(4, np.float32), np.ones(3, np.float32))
        np.testing.assert_allclose(h, 0.5)

    @pytest.mark.parametrize("recurrent", [True, False])
    def test_tiny_net_matches_scalar_oracle(self, recurrent):
        cfg = net.NetConfig(4, hidden_dim=3, n_actions=2, recurrent=recurrent)
        p = random_params(cfg, 11)
        rng = np.random.default_rng(5)
        x, h0 = rng.standard_normal(4), rng.standard_normal(3)
        h, logits, value, pos = net.forward(p, h0, x)
        rh, rl, rv, rp = gru_step_reference(p, h0, x, recurrent)
        np.testing.assert_allclose(h, rh, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(logits, rl, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(value, rv, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(pos, rp, rtol=1e-12, atol=1e-14)

    def test_pure_function(self):
        p = net.init_params(net.NetConfig(6, 4), RngStream(1, "i"))
        x, h0 = np.ones(6, np.float32), np.full(4, 0.1, np.float32)
        a, b = net.forward(p, h0, x), net.forward(p, h0, x)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_sequence_matches_stepwise(self):
        p = random_params(net.NetConfig(5, 4), 2)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 3, 5))
        starts = np.zeros((6, 3), bool)
        starts[3, 1] = True
        out, _ = net.forward_sequence(p, X, np.ones((3, 4)) * 0.2, starts)
        h = np.ones((3, 4)) * 0.2
        for t in range(6):
            h = np.where(starts[t][:, None], 0.0, h)
            h, logits, _, _ = net.forward(p, h, X[t])
            np.testing.assert_allclose(out["h"][t], h, rtol=1e-13)
            np.testing.assert_allclose(out["logits"][t], logits, rtol=1e-13)

    def test_non_finite_raises(self):
        p = net.init_params(net.NetConfig(3, 2), RngStream(0, "i"))
        with pytest.raises(net.NumericFault):
            net.forward(p, np.zeros(2, np.float32), np.array([np.nan, 0, 0], np.float32))


class TestBackward:
    @pytest.mark.parametrize("recurrent", [True, False])
    def test_matches_finite_differences(self, recurrent):
        for seed in range(5):
            g, fd = bptt_draw(seed, recurrent)
            assert grad_rel_error(g, fd) < 1e-6

    def test_masked_weight_gets_zero_gradient(self):
        p = random_params(net.NetConfig(5, 4), 1)
        p.masks["gru_wh"][0, :] = False
        p.masks["enc_w"][2, 3] = False
        p.apply_mask()
        rng = np.random.default_rng(1)
        X = rng.standard_normal((4, 2, 5))
        W = {"logits": rng.standard_normal((4, 2, 9)), "value": rng.standard_normal((4, 2)),
             "pos": rng.standard_normal((4, 2, 2))}
        _, g = linear_loss_grads(p, X, np.zeros((2, 4)), None, W)
        assert np.all(g["gru_wh"][0] == 0) and g["enc_w"][2, 3] == 0
        assert np.any(g["gru_wh"][1] != 0)

    def test_zero_aux_weight_gives_zero_aux_gradient(self):
        p = random_params(net.NetConfig(5, 4), 1)
        rng = np.random.default_rng(2)
        X = rng.standard_normal((4, 2, 5))
        W = {"logits": rng.standard_normal((4, 2, 9)), "value": rng.standard_normal((4, 2)),
             "pos": np.zeros((4, 2, 2))}
        _, g = linear_loss_grads(p, X, np.zeros((2, 4)), None, W)
        assert np.all(g["aux_w"] == 0) and np.all(g["aux_b"] == 0)

    def test_window_mismatch_raises(self):
        p = random_params(net.NetConfig(5, 4), 1)
        _, cache = net.forward_sequence(p, np.zeros((4, 2, 5)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            net.backward(p, cache, np.zeros((3, 2, 9)), np.zeros((3, 2)), np.zeros((3, 2, 2)))


class TestPruning:
    def _single(self, w):
        cfg = net.NetConfig(1, hidden_dim=len(w))
        p = net.init_params(cfg, RngStream(0, "i"), dtype=np.float64)
        p.tensors["enc_w"][0] = w
        return p

    def test_magnitude_order(self):
        p = self._single([0.1, -0.5, 0.3, 0.01])
        assert net.make_prune_mask(p, 0.5)["enc_w"][0].tolist() == [False, True, True, False]

    def test_zero_sparsity_all_ones(self):
        p = net.init_params(net.NetConfig(5, 4), RngStream(0, "i"))
        assert all(m.all() for m in net.make_prune_mask(p, 0.0).values())

    def test_default_net_ninety_percent(self):
        p = net.init_params(net.NetConfig(1203), RngStream(0, "i"))
        for name, m in net.make_prune_mask(p, 0.9).items():
            assert abs((~m).sum() - 0.9 * m.size) <= 1, name

    @pytest.mark.parametrize("s", [1.0, 1.5, -0.1])
    def test_invalid_sparsity(self, s):
        p = net.init_params(net.NetConfig(5, 4), RngStream(0, "i"))
        with pytest.raises(ValueError):
            net.make_prune_mask(p, s)

    @settings(max_examples=50, deadline=None)
    @given(s=st.floats(0.0, 0.99), seed=st.integers(0, 10_000))
    def test_pruned_entries_are_smallest(self, s, seed):
        p = net.init_params(net.NetConfig(6, 5), RngStream(seed, "i"), dtype=np.float64)
        net.prune(p, s)
        for name, m in p.masks.items():
            w = np.abs(p[name])
            assert np.all(w[~m] == 0)
            if (~m).any() and m.any():
                orig = np.abs(net.init_params(net.NetConfig(6, 5), RngStream(seed, "i"), np.float64)[name])
                assert orig[~m].max() <= orig[m].min()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = net.init_params(net.NetConfig(7, 6), RngStream(2, "i"))
        net.prune(p, 0.3)
        net.checkpoint_save(p, tmp_path / "ck", step=42, config_hash="abc")
        q = net.checkpoint_load(tmp_path / "ck", net.NetConfig(7, 6), "abc")
        assert q.digest() == p.digest()
        for k in p:
            np.testing.assert_array_equal(q[k], p[k])
            assert q[k].dtype == p[k].dtype
        for k in p.masks:
            np.testing.assert_array_equal(q.masks[k], p.masks[k])
        assert net.read_checkpoint_manifest(tmp_path / "ck")["step"] == 42

    def test_mismatched_config(self, tmp_path):
        net.checkpoint_save(net.init_params(net.NetConfig(7, 6), RngStream(2, "i")), tmp_path / "ck")
        with pytest.raises(net.CheckpointMismatch):
            net.checkpoint_load(tmp_path / "ck", net.NetConfig(7, 8))
        with pytest.raises(net.CheckpointMismatch):
            net.checkpoint_load(tmp_path / "ck", config_hash="other")

"""Independent reference implementations used as test oracles."""
import math

import numpy as np

from forageworld import agent_net as net
from forageworld.rng import RngStream


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_step_reference(p, h_prev, x, recurrent=True):
    """Scalar-loop evaluation of encoder, reset-after GRU and heads."""
    D, H = p["enc_w"].shape
    e = [math.tanh(sum(x[i] * p["enc_w"][i, j] for i in range(D)) + p["enc_b"][j]) for j in range(H)]
    if recurrent:
        def gx(k):
            return sum(e[i] * p["gru_wx"][i, k] for i in range(H)) + p["gru_bx"][k]

        def gh(k):
            return sum(h_prev[i] * p["gru_wh"][i, k] for i in range(H))

        h = []
        for j in range(H):
            r = sigmoid(gx(j) + gh(j))
            z = sigmoid(gx(H + j) + gh(H + j))
            n = math.tanh(gx(2 * H + j) + r * (gh(2 * H + j) + p["gru_bhn"][j]))
            h.append((1 - z) * n + z * h_prev[j])
    else:
        h = e

    def head(w, b):
        return [sum(h[i] * w[i, k] for i in range(H)) + b[k] for k in range(w.shape[1])]

    return (np.array(h), np.array(head(p["pi_w"], p["pi_b"])), head(p["v_w"], p["v_b"])[0],
            np.array(head(p["aux_w"], p["aux_b"])))


def random_params(cfg, seed, scale=1.0):
    p = net.init_params(cfg, RngStream(seed, "params"), dtype=np.float64)
    rng = np.random.default_rng(seed)
    for k in p:
        p.tensors[k] = p.tensors[k] + scale * 0.3 * rng.standard_normal(p[k].shape)
    return p


def linear_loss_grads(params, X, h0, starts, W):
    """Loss = sum of W-weighted outputs; returns (loss, analytic grads)."""
    out, cache = net.forward_sequence(params, X, h0, starts)
    loss = float((W["logits"] * out["logits"]).sum() + (W["value"] * out["value"]).sum()
                 + (W["pos"] * out["pos"]).sum())
    return loss, net.backward(params, cache, W["logits"], W["value"], W["pos"])


def fd_gradient(f, params, eps=1e-5):
    """Central differences of ``f(params)`` for every parameter entry."""
    g = {}
    for k in params:
        arr = params.tensors[k]
        gk = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = f(params)
            arr[idx] = old - eps
            fm = f(params)
            arr[idx] = old
            gk[idx] = (fp - fm) / (2 * eps)
        g[k] = gk
    return g


def grad_rel_error(a, b):
    """max |a - b| / max(max |a|, max |b|) over all tensors (masked entries included)."""
    num = max(float(np.max(np.abs(a[k] - b[k]))) for k in a)
    den = max(max(float(np.max(np.abs(a[k]))), float(np.max(np.abs(b[k])))) for k in a)
    return num / max(den, 1e-300)


def bptt_draw(seed, recurrent=True, hidden=4, input_dim=5, T=6, B=2):
    """One random instance: returns (analytic, finite-difference) gradients."""
    cfg = net.NetConfig(input_dim, hidden_dim=hidden, n_actions=3, recurrent=recurrent)
    params = random_params(cfg, seed)
    rng = np.random.default_rng(10_000 + seed)
    X = rng.standard_normal((T, B, input_dim))
    h0 = 0.5 * rng.standard_normal((B, hidden))
    starts = rng.random((T, B)) < 0.2
    W = {"logits": rng.standard_normal((T, B, 3)), "value": rng.standard_normal((T, B)),
         "pos": rng.standard_normal((T, B, 2))}
    _, g = linear_loss_grads(params, X, h0, starts, W)
    fd = fd_gradient(lambda p: linear_loss_grads(p, X, h0, starts, W)[0], params)
    return g, fd


def gae_direct(rewards, values, dones, bootstrap, gamma, lam):
    """Advantages as explicit truncated sums of (gamma*lam)^k * delta_{t+k}."""
    T = len(rewards)
    nxt = np.append(values[1:], bootstrap)
    deltas = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, coef = 0.0, 1.0
        for k in range(t, T):
            total += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv[t] = total
    return adv

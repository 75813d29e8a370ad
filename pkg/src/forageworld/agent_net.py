"""Encoder + GRU + policy/value/position heads with exact BPTT gradients.

Shapes use ``D`` input features, ``H`` hidden units and ``A`` actions.  The
GRU follows the reset-after convention::

    e   = tanh(x W_e + b_e)
    r   = sigmoid(e Wx_r + bx_r + h Wh_r)
    z   = sigmoid(e Wx_z + bx_z + h Wh_z)
    n   = tanh(e Wx_n + bx_n + r * (h Wh_n + bh_n))
    h'  = (1 - z) * n + z * h

With ``recurrent=False`` the core is skipped and ``h' = e``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream

CHECKPOINT_FORMAT_VERSION = 1


class NumericFault(FloatingPointError):
    """Non-finite activations or losses."""


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dim: int = 512
    n_actions: int = 9
    recurrent: bool = True

    def tensor_shapes(self) -> dict:
        D, H, A = self.input_dim, self.hidden_dim, self.n_actions
        shapes = {"enc_w": (D, H), "enc_b": (H,)}
        if self.recurrent:
            shapes.update(gru_wx=(H, 3 * H), gru_bx=(3 * H,), gru_wh=(H, 3 * H), gru_bhn=(H,))
        shapes.update(pi_w=(H, A), pi_b=(A,), v_w=(H, 1), v_b=(1,), aux_w=(H, 2), aux_b=(2,))
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


WEIGHT_NAMES = ("enc_w", "gru_wx", "gru_wh", "pi_w", "v_w", "aux_w")


class AgentParams:
    """Named parameter tensors plus a congruent binary mask per weight matrix."""

    def __init__(self, config: NetConfig, tensors: dict, masks: dict | None = None):
        self.config = config
        self.tensors = tensors
        if masks is None:
            masks = {k: np.ones(v.shape, dtype=bool) for k, v in tensors.items() if k in WEIGHT_NAMES}
        self.masks = masks

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def dtype(self):
        return self.tensors["enc_w"].dtype

    def astype(self, dtype) -> "AgentParams":
        return AgentParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                           {k: m.copy() for k, m in self.masks.items()})

    def copy(self) -> "AgentParams":
        return self.astype(self.dtype)

    def apply_mask(self) -> "AgentParams":
        for k, m in self.masks.items():
            self.tensors[k] *= m
        return self

    def sparsity(self) -> dict:
        return {k: float(1.0 - m.mean()) for k, m in self.masks.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()


def _orthogonal(rng: RngStream, n: int) -> np.ndarray:
    a = rng.normals(n * n).reshape(n, n)
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(config: NetConfig, rng: RngStream, dtype=np.float32) -> AgentParams:
    """Orthogonal recurrent blocks, uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif name == "gru_wh":
            H = config.hidden_dim
            tensors[name] = np.concatenate([_orthogonal(rng.child(f"{name}/{g}"), H) for g in range(3)], axis=1)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            u = rng.child(name).uniforms(int(np.prod(shape))).reshape(shape)
            tensors[name] = (2.0 * u - 1.0) * bound
    return AgentParams(config, {k: v.astype(dtype) for k, v in tensors.items()})


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _gru_cell(p, e_gx, h):
    H = h.shape[-1]
    gh = h @ p["gru_wh"]
    r = _sigmoid(e_gx[..., :H] + gh[..., :H])
    z = _sigmoid(e_gx[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:] + p["gru_bhn"]
    n = np.tanh(e_gx[..., 2 * H:] + r * hn)
    return (1.0 - z) * n + z * h, r, z, n, hn


def forward(params: AgentParams, h_prev, x):
    """One step: returns ``(h, logits, value, pos_pred)``.  Batch dims are allowed."""
    p = params.tensors
    e = np.tanh(x @ p["enc_w"] + p["enc_b"])
    if params.config.recurrent:
        h, *_ = _gru_cell(p, e @ p["gru_wx"] + p["gru_bx"], h_prev)
    else:
        h = e
    logits = h @ p["pi_w"] + p["pi_b"]
    value = (h @ p["v_w"] + p["v_b"])[..., 0]
    pos = h @ p["aux_w"] + p["aux_b"]
    if not (np.isfinite(h).all() and np.isfinite(logits).all()):
        raise NumericFault("non-finite activations in forward pass")
    return h, logits, value, pos


def forward_sequence(params: AgentParams, X, h0, starts=None):
    """Unroll over ``X`` of shape ``(T, B, D)`` from ``h0`` ``(B, H)``.

    ``starts[t, b]`` marks the first step of an episode; the carried state is
    zeroed there.  Returns ``(outputs, cache)`` where outputs holds ``h``,
    ``logits``, ``value`` and ``pos`` for every step.
    """
    p = params.tensors
    T, B, _ = X.shape
    H = params.config.hidden_dim
    if starts is None:
        starts = np.zeros((T, B), dtype=bool)
    keep = (~np.asarray(starts, dtype=bool)).astype(X.dtype)[..., None]
    E = np.tanh(X @ p["enc_w"] + p["enc_b"])
    cache = {"X": X, "E": E, "keep": keep, "h0": h0}
    if params.config.recurrent:
        GX = E @ p["gru_wx"] + p["gru_bx"]
        hs = np.empty((T, B, H), dtype=X.dtype)
        hps = np.empty_like(hs)
        rs = np.empty_like(hs)
        zs = np.empty_like(hs)
        ns = np.empty_like(hs)
        hns = np.empty_like(hs)
        h = h0
        for t in range(T):
            hp = h * keep[t]
            h, r, z, n, hn = _gru_cell(p, GX[t], hp)
            hps[t], hs[t], rs[t], zs[t], ns[t], hns[t] = hp, h, r, z, n, hn
        cache.update(hps=hps, rs=rs, zs=zs, ns=ns, hns=hns)
    else:
        hs = E
    logits = hs @ p["pi_w"] + p["pi_b"]
    value = (hs @ p["v_w"] + p["v_b"])[..., 0]
    pos = hs @ p["aux_w"] + p["aux_b"]
    if not (np.isfinite(hs).all() and np.isfinite(logits).all()):
        raise NumericFault("non-finite activations in sequence forward pass")
    cache["hs"] = hs
    return {"h": hs, "logits": logits, "value": value, "pos": pos}, cache


def backward(params: AgentParams, cache: dict, dlogits, dvalue, dpos) -> dict:
    """Exact gradients of a loss given its gradients w.r.t. the per-step outputs.

    ``dlogits`` is ``(T, B, A)``, ``dvalue`` ``(T, B)``, ``dpos`` ``(T, B, 2)``.
    The initial state is treated as a constant.  Masked entries get zero.
    """
    p = params.tensors
    X, E, hs = cache["X"], cache["E"], cache["hs"]
    if dlogits.shape[:2] != hs.shape[:2]:
        raise ValueError(f"gradient window {dlogits.shape[:2]} does not match cache {hs.shape[:2]}")
    T, B, H = hs.shape
    flat = lambda a: a.reshape(T * B, -1)
    g = {}
    dv = dvalue[..., None]
    g["pi_w"] = flat(hs).T @ flat(dlogits)
    g["pi_b"] = dlogits.sum(axis=(0, 1))
    g["v_w"] = flat(hs).T @ flat(dv)
    g["v_b"] = dv.sum(axis=(0, 1))
    g["aux_w"] = flat(hs).T @ flat(dpos)
    g["aux_b"] = dpos.sum(axis=(0, 1))
    dH = dlogits @ p["pi_w"].T + dv @ p["v_w"].T + dpos @ p["aux_w"].T

    if params.config.recurrent:
        hps, rs, zs, ns, hns, keep = cache["hps"], cache["rs"], cache["zs"], cache["ns"], cache["hns"], cache["keep"]
        wh_t = p["gru_wh"].T
        dGX = np.empty((T, B, 3 * H), dtype=hs.dtype)
        dGH = np.empty_like(dGX)
        dh_next = np.zeros((B, H), dtype=hs.dtype)
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            r, z, n = rs[t], zs[t], ns[t]
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (hps[t] - n) * z * (1.0 - z)
            da_r = da_n * hns[t] * r * (1.0 - r)
            dGX[t, :, :H] = da_r
            dGX[t, :, H:2 * H] = da_z
            dGX[t, :, 2 * H:] = da_n
            dGH[t, :, :H] = da_r
            dGH[t, :, H:2 * H] = da_z
            dGH[t, :, 2 * H:] = da_n * r
            dhp = dh * z + dGH[t] @ wh_t
            dh_next = dhp * keep[t]
        g["gru_wh"] = flat(hps).T @ flat(dGH)
        g["gru_bhn"] = dGH[..., 2 * H:].sum(axis=(0, 1))
        g["gru_wx"] = flat(E).T @ flat(dGX)
        g["gru_bx"] = dGX.sum(axis=(0, 1))
        dE = dGX @ p["gru_wx"].T
    else:
        dE = dH
    dA = dE * (1.0 - E * E)
    g["enc_w"] = flat(X).T @ flat(dA)
    g["enc_b"] = dA.sum(axis=(0, 1))
    for k, m in params.masks.items():
        g[k] = g[k] * m
    return {k: g[k].astype(p[k].dtype, copy=False) for k in p}


# -- pruning ---------------------------------------------------------------

def make_prune_mask(params: AgentParams, target_sparsity: float) -> dict:
    """Per weight matrix, mask the ceil(s * n) smallest magnitudes (ties by index).

    Biases are never pruned.  Already-masked entries have magnitude zero and
    are therefore selected first.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    masks = {}
    for name, w in params.tensors.items():
        if name not in WEIGHT_NAMES:
            continue
        n = w.size
        k = int(np.ceil(target_sparsity * n - 1e-9))
        flat_mask = np.ones(n, dtype=bool)
        if k:
            order = np.argsort(np.abs(w.ravel()), kind="stable")
            flat_mask[order[:k]] = False
        masks[name] = flat_mask.reshape(w.shape)
    return masks


def prune(params: AgentParams, target_sparsity: float) -> AgentParams:
    params.masks = make_prune_mask(params, target_sparsity)
    return params.apply_mask()


# -- checkpoints -----------------------------------------------------------

def checkpoint_save(params: AgentParams, path, step: int = 0, config_hash: str = "", extra=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in params.tensors.items():
        np.save(path / f"{name}.npy", arr, allow_pickle=False)
        entries[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
    for name, m in params.masks.items():
        np.save(path / f"mask_{name}.npy", m, allow_pickle=False)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_config": dataclasses.asdict(params.config),
        "tensors": entries,
        "masks": sorted(params.masks),
        "config_hash": config_hash,
        "step": int(step),
        "digest": params.digest(),
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_checkpoint_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def checkpoint_load(path, net_config: NetConfig | None = None, config_hash: str | None = None) -> AgentParams:
    """Load a checkpoint; optional expectations raise :class:`CheckpointMismatch`."""
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version")
    cfg = NetConfig(**manifest["net_config"])
    if net_config is not None and cfg != net_config:
        raise CheckpointMismatch(f"{path}: network config {cfg} != expected {net_config}")
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointMismatch(f"{path}: config hash {manifest['config_hash']} != {config_hash}")
    tensors = {}
    for name, meta in manifest["tensors"].items():
        arr = np.load(path / f"{name}.npy", allow_pickle=False)
        if list(arr.shape) != meta["shape"] or tuple(arr.shape) != cfg.tensor_shapes()[name]:
            raise CheckpointMismatch(f"{path}: tensor {name} has shape {arr.shape}")
        tensors[name] = arr
    masks = {name: np.load(path / f"mask_{name}.npy", allow_pickle=False) for name in manifest["masks"]}
    return AgentParams(cfg, tensors, masks)

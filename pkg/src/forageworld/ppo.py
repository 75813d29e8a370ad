"""Recurrent PPO: rollouts, GAE, clipped-surrogate loss, Adam and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent_net as net
from .config import EnvConfig, TrainConfig, config_hash
from .env import N_ACTIONS, OBS_DIM, encode_observation, observe, reset, step
from .rng import RngStream, derive_stream
from .telemetry import EpisodeLog, append_record, write_log, write_manifest

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADV_STD_FLOOR = 1e-8

# reference action rates of the trained expert agent; reported, never asserted
EXPERT_RATES = {"eat": 0.011, "drink": 0.034, "sleep": 0.262}

# mean episode length of a random-init, sampled policy (hidden 64) over 20 held-out
# desk arenas, as returned by measure_random_baseline(desk_env_config())
RANDOM_BASELINE_DESK = 330.9

CURVE_COLUMNS = ("iteration", "step", "updates", "return_mean", "ep_len_mean", "episodes",
                 "loss_total", "loss_clip", "loss_value", "loss_entropy", "loss_aux",
                 "entropy", "cross_entropy", "grad_norm", "sparsity")


class TrainingAborted(RuntimeError):
    def __init__(self, message, last_checkpoint=None, components=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.components = components or {}


def train_arena_seed(env_index: int, episode: int, n_envs: int) -> int:
    """Training arenas use even seeds; :func:`eval_arena_seed` uses odd ones."""
    return 2 * (env_index + n_envs * episode)


def eval_arena_seed(k: int) -> int:
    return 2 * k + 1


def net_config_for(train: TrainConfig) -> net.NetConfig:
    return net.NetConfig(input_dim=OBS_DIM, hidden_dim=train.hidden_dim,
                         n_actions=N_ACTIONS, recurrent=train.recurrent)


# -- GAE ---------------------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Time-major GAE by backward recursion.  Returns ``(advantages, returns)``.

    ``dones[t]`` cuts both the bootstrap and the trace after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# -- loss ----------------------------------------------------------------------

@dataclass
class Minibatch:
    obs: np.ndarray  # (T, B, D)
    actions: np.ndarray  # (T, B)
    old_logp: np.ndarray  # (T, B)
    advantages: np.ndarray  # (T, B), unnormalised
    returns: np.ndarray  # (T, B)
    starts: np.ndarray  # (T, B) bool
    h0: np.ndarray  # (B, H)
    pos_targets: np.ndarray  # (T, B, 2)


def normalize_advantages(adv):
    return (adv - adv.mean()) / max(float(adv.std()), ADV_STD_FLOOR)


def ppo_loss(params: net.AgentParams, batch: Minibatch, cfg: TrainConfig, with_grads: bool = True):
    """Total loss, its components and (optionally) parameter gradients.

    total = -L_clip + vf_coef * L_value - ent_coef * H + aux_coef * L_aux
    """
    out, cache = net.forward_sequence(params, batch.obs, batch.h0, batch.starts)
    logits, value, pos = out["logits"], out["value"], out["pos"]
    n = batch.actions.size
    logpi = net.log_softmax(logits)
    pi = np.exp(logpi)
    a = batch.actions[..., None]
    logp = np.take_along_axis(logpi, a, axis=-1)[..., 0]
    adv = normalize_advantages(batch.advantages)

    ratio = np.exp(logp - batch.old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    l_clip = float(np.minimum(surr1, surr2).mean())
    ent_rows = -(pi * logpi).sum(axis=-1)
    entropy = float(ent_rows.mean())
    l_value = float(((value - batch.returns) ** 2).mean())
    if cfg.aux_enabled:
        l_aux = float(((pos - batch.pos_targets) ** 2).sum(axis=-1).mean())
    else:
        l_aux = 0.0
    total = -l_clip + cfg.vf_coef * l_value - cfg.ent_coef * entropy + cfg.aux_coef * l_aux
    greedy = np.take_along_axis(logpi, logits.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    comps = {"total": total, "clip": l_clip, "value": l_value, "entropy": entropy, "aux": l_aux,
             "cross_entropy": float(-greedy.mean()),
             "approx_kl": float((batch.old_logp - logp).mean())}
    if not all(math.isfinite(v) for v in comps.values()):
        raise net.NumericFault(f"non-finite loss: {comps}")
    if not with_grads:
        return total, comps, None

    # d(-L_clip)/dlogp: only the unclipped branch carries gradient
    dlogp = -np.where(surr1 <= surr2, surr1, 0.0) / n
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, a, 1.0, axis=-1)
    dlogits = dlogp[..., None] * (onehot - pi)
    dlogits += (cfg.ent_coef / n) * pi * (logpi + ent_rows[..., None])
    dvalue = (2.0 * cfg.vf_coef / n) * (value - batch.returns)
    if cfg.aux_enabled:
        dpos = (2.0 * cfg.aux_coef / n) * (pos - batch.pos_targets)
    else:
        dpos = np.zeros_like(pos)
    dt = params.dtype
    grads = net.backward(params, cache, dlogits.astype(dt), dvalue.astype(dt), dpos.astype(dt))
    return total, comps, grads


# -- optimiser -------------------------------------------------------------------

def global_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grads(grads: dict, max_norm: float):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: net.AgentParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.tensors.items()},
                   {k: np.zeros_like(p) for k, p in params.tensors.items()})


def adam_step(params: net.AgentParams, grads: dict, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """Bias-corrected Adam, in place; masked entries stay exactly zero."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.tensors.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    params.apply_mask()
    return params, state


# -- rollouts --------------------------------------------------------------------

class VecEnv:
    """``n`` independent episodes stepped in lockstep; finished ones are reset."""

    def __init__(self, config: EnvConfig, n: int, master_seed: int, seed_fn=train_arena_seed):
        self.config = config
        self.n = n
        self.master_seed = master_seed
        self.seed_fn = seed_fn
        self.episodes = [0] * n
        self.states = [self._new(i) for i in range(n)]
        self.obs = np.zeros((n, OBS_DIM), dtype=np.float32)
        for i, s in enumerate(self.states):
            encode_observation(observe(s), self.obs[i])
        self.starts = np.ones(n, dtype=bool)
        self.ep_return = np.zeros(n)
        self.ep_len = np.zeros(n, dtype=np.int64)

    def _new(self, i):
        arena = self.seed_fn(i, self.episodes[i], self.n)
        return reset(self.config, arena, self.master_seed, episode_label=f"train{i}.{self.episodes[i]}")

    def positions(self) -> np.ndarray:
        out = np.empty((self.n, 2))
        for i, s in enumerate(self.states):
            out[i] = (s.agent_pos[0] - s.start_pos[0], s.agent_pos[1] - s.start_pos[1])
        return out

    def step(self, actions):
        """Step all envs; returns ``(rewards, dones, finished)`` where ``finished``
        lists ``(return, length)`` of episodes that ended this step."""
        rewards = np.zeros(self.n)
        dones = np.zeros(self.n, dtype=bool)
        finished = []
        for i, s in enumerate(self.states):
            _, obs, r, done, _ = step(s, int(actions[i]), with_record=False)
            rewards[i] = r
            dones[i] = done
            self.ep_return[i] += r
            self.ep_len[i] += 1
            if done:
                finished.append((float(self.ep_return[i]), int(self.ep_len[i])))
                self.ep_return[i] = 0.0
                self.ep_len[i] = 0
                self.episodes[i] += 1
                self.states[i] = s = self._new(i)
                obs = observe(s)
            encode_observation(obs, self.obs[i])
        self.starts = dones.copy()
        return rewards, dones, finished


@dataclass
class Rollout:
    obs: np.ndarray  # (T, N, D)
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    starts: np.ndarray
    pos_targets: np.ndarray
    pos_preds: np.ndarray
    h0: np.ndarray  # (N, H) state entering the segment
    hs: np.ndarray  # (T, N, H) states computed during collection
    bootstrap_value: np.ndarray
    finished: list = field(default_factory=list)

    def minibatch(self, envs, advantages, returns) -> Minibatch:
        return Minibatch(self.obs[:, envs], self.actions[:, envs], self.logp[:, envs],
                         advantages[:, envs], returns[:, envs], self.starts[:, envs],
                         self.h0[envs], self.pos_targets[:, envs])


def collect_rollout(params: net.AgentParams, venv: VecEnv, h: np.ndarray, T: int,
                    rng: RngStream) -> tuple:
    """Run ``T`` lockstep steps with the sampled policy.  Returns ``(rollout, h)``."""
    N, D = venv.obs.shape
    H = h.shape[1]
    dt = params.dtype
    buf = {k: np.zeros((T, N), dtype=np.float64) for k in ("logp", "values", "rewards")}
    obs = np.zeros((T, N, D), dtype=dt)
    actions = np.zeros((T, N), dtype=np.int64)
    dones = np.zeros((T, N), dtype=bool)
    starts = np.zeros((T, N), dtype=bool)
    pos_t = np.zeros((T, N, 2), dtype=dt)
    pos_p = np.zeros((T, N, 2), dtype=dt)
    hs = np.zeros((T, N, H), dtype=dt)
    h0 = h.copy()
    finished = []
    for t in range(T):
        obs[t] = venv.obs
        starts[t] = venv.starts
        pos_t[t] = venv.positions()
        h, logits, value, pos = net.forward(params, h * (~venv.starts)[:, None], obs[t])
        hs[t] = h
        pos_p[t] = pos
        probs = net.softmax(logits.astype(np.float64))
        a = rng.categorical(probs)
        actions[t] = a
        buf["logp"][t] = np.log(probs[np.arange(N), a])
        buf["values"][t] = value
        r, d, fin = venv.step(a)
        buf["rewards"][t] = r
        dones[t] = d
        finished.extend(fin)
    _, _, boot, _ = net.forward(params, h * (~venv.starts)[:, None], venv.obs)
    ro = Rollout(obs, actions, buf["logp"], buf["values"], buf["rewards"], dones, starts,
                 pos_t, pos_p, h0, hs, boot.astype(np.float64), finished)
    return ro, h


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: net.AgentParams
    final_checkpoint: Path | None
    curve_path: Path | None
    checkpoints: list
    history: list
    prune_update: int | None = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def train(env_config: EnvConfig, train_config: TrainConfig, out_dir=None, seed: int | None = None,
          log_every: int = 0, progress=None) -> TrainResult:
    """Run recurrent PPO; write ``curves.csv`` and ``checkpoints/`` under ``out_dir``.

    Pruning is applied once, after the optimiser update whose count equals
    ``prune_step``; the mask is frozen afterwards.
    """
    cfg = train_config.validate()
    env_config.validate()
    seed = cfg.seed if seed is None else seed
    ncfg = net_config_for(cfg)
    chash = config_hash({"env": dataclasses.asdict(env_config), "train": dataclasses.asdict(cfg)})
    extra = {"aux_enabled": cfg.aux_enabled, "seed": seed,
             "env_config": dataclasses.asdict(env_config), "train_config": dataclasses.asdict(cfg)}
    params = net.init_params(ncfg, derive_stream(seed, "init"), dtype=np.float32)
    opt = AdamState.zeros_like(params)
    venv = VecEnv(env_config, cfg.n_envs, seed)
    act_rng = derive_stream(seed, "policy")
    perm_rng = derive_stream(seed, "minibatch")
    h = np.zeros((cfg.n_envs, ncfg.hidden_dim), dtype=np.float32)

    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = curve_path = None
    fh = writer = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        curve_path = out / "curves.csv"
        fh = open(curve_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)

    per_iter = cfg.n_envs * cfg.rollout_steps
    n_iters = max(1, cfg.total_steps // per_iter)
    envs_per_mb = cfg.n_envs // cfg.minibatches
    recent: list = []
    history = []
    checkpoints = []
    last_good = None
    next_ckpt = cfg.checkpoint_interval
    updates = 0
    prune_update = None

    def save(step_count):
        nonlocal last_good
        if ckpt_dir is None:
            return None
        path = net.checkpoint_save(params, ckpt_dir / f"step_{step_count:010d}", step=step_count,
                                   config_hash=chash, extra=dict(extra, updates=updates))
        checkpoints.append(path)
        last_good = path
        return path

    try:
        for it in range(n_iters):
            try:
                ro, h = collect_rollout(params, venv, h, cfg.rollout_steps, act_rng)
                adv, ret = compute_gae(ro.rewards, ro.values, ro.dones, ro.bootstrap_value,
                                       cfg.gamma, cfg.gae_lambda)
                sums = {}
                n_mb = 0
                for _ in range(cfg.epochs):
                    order = perm_rng.permutation(cfg.n_envs)
                    for j in range(cfg.minibatches):
                        envs = np.sort(order[j * envs_per_mb:(j + 1) * envs_per_mb])
                        _, comps, grads = ppo_loss(params, ro.minibatch(envs, adv, ret), cfg)
                        grads, gnorm = clip_grads(grads, cfg.grad_clip_norm)
                        adam_step(params, grads, opt, cfg.lr)
                        updates += 1
                        comps["grad_norm"] = gnorm
                        for k, v in comps.items():
                            sums[k] = sums.get(k, 0.0) + v
                        n_mb += 1
                        if prune_update is None and cfg.target_sparsity > 0 and updates >= cfg.prune_step:
                            net.prune(params, cfg.target_sparsity)
                            prune_update = updates
            except net.NumericFault as exc:
                raise TrainingAborted(f"numeric fault at iteration {it}: {exc}", last_good) from exc
            recent.extend(ro.finished)
            recent = recent[-cfg.curve_window:]
            steps = (it + 1) * per_iter
            mean = {k: v / n_mb for k, v in sums.items()}
            sp = params.sparsity()
            row = {
                "iteration": it, "step": steps, "updates": updates,
                "return_mean": float(np.mean([r for r, _ in recent])) if recent else float("nan"),
                "ep_len_mean": float(np.mean([n for _, n in recent])) if recent else float("nan"),
                "episodes": len(ro.finished),
                "loss_total": mean["total"], "loss_clip": mean["clip"], "loss_value": mean["value"],
                "loss_entropy": -cfg.ent_coef * mean["entropy"], "loss_aux": mean["aux"],
                "entropy": mean["entropy"], "cross_entropy": mean["cross_entropy"],
                "grad_norm": mean["grad_norm"],
                "sparsity": float(np.mean(list(sp.values()))),
            }
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in CURVE_COLUMNS])
                fh.flush()
            if progress is not None and log_every and it % log_every == 0:
                progress(row)
            if steps >= next_ckpt:
                save(steps)
                while next_ckpt <= steps:
                    next_ckpt += cfg.checkpoint_interval
        final = save(n_iters * per_iter) if (not checkpoints or checkpoints[-1].name != f"step_{n_iters * per_iter:010d}") else checkpoints[-1]
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, final, curve_path, checkpoints, history, prune_update)


def read_curve(path) -> list:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalSummary:
    n_episodes: int
    return_mean: float
    return_ci: float
    length_mean: float
    length_ci: float
    eat_rate: float
    drink_rate: float
    sleep_rate: float
    lengths: list
    returns: list
    expert_rates: dict = field(default_factory=lambda: dict(EXPERT_RATES))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ci95(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(1.96 * x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


def run_episode(params: net.AgentParams, env_config: EnvConfig, arena_seed: int, master_seed: int,
                episode_label: str, greedy: bool, policy_rng: RngStream | None = None,
                aux_enabled: bool = True, hidden_stride: int = 1, log: bool = True,
                max_steps: int | None = None, header_extra=None):
    """One episode with frozen ``params``.  Returns an :class:`EpisodeLog`, or
    ``(return, length)`` when ``log`` is False."""
    state = reset(env_config, arena_seed, master_seed, episode_label)
    H = params.config.hidden_dim
    h = np.zeros(H, dtype=params.dtype)
    x = np.zeros(OBS_DIM, dtype=params.dtype)
    encode_observation(observe(state), x)
    elog = None
    if log:
        header = {"config": dataclasses.asdict(env_config), "arena_seed": arena_seed,
                  "master_seed": master_seed, "episode_label": episode_label,
                  "episode_id": state.episode_id, "hidden_dim": H,
                  "policy": "greedy" if greedy else "sampled", "aux_enabled": aux_enabled}
        header.update(header_extra or {})
        elog = EpisodeLog(header=header, hidden_stride=hidden_stride)
    total = 0.0
    n = 0
    while not state.done and (max_steps is None or n < max_steps):
        h, logits, value, pos = net.forward(params, h, x)
        logpi = net.log_softmax(logits.astype(np.float64))
        pi = np.exp(logpi)
        a = int(np.argmax(logits)) if greedy else int(policy_rng.categorical(pi[None])[0])
        _, obs, r, done, rec = step(state, a, with_record=log)
        total += r
        n += 1
        if log:
            if aux_enabled:
                rec.predicted_delta_x = float(pos[0])
                rec.predicted_delta_y = float(pos[1])
            rec.value = float(value)
            rec.entropy = float(-(pi * logpi).sum())
            rec.log_probability = float(logpi[a])
            append_record(elog, rec, h)
        encode_observation(obs, x)
    return elog if log else (total, n)


def evaluate(params, env_config: EnvConfig, n_episodes: int, arena_seeds=None, master_seed: int = 0,
             greedy: bool = False, out_dir=None, hidden_stride: int = 1, aux_enabled: bool | None = None,
             max_steps: int | None = None):
    """Frozen-weight evaluation on held-out (odd) arena seeds.

    ``params`` is an :class:`AgentParams` or a checkpoint directory.  Returns
    ``(logs, summary)``; logs and a manifest are written when ``out_dir`` is set.
    """
    checkpoint_id = None
    if not isinstance(params, net.AgentParams):
        ckpt = Path(params)
        manifest = net.read_checkpoint_manifest(ckpt)
        checkpoint_id = f"{ckpt.name}:{manifest['digest'][:12]}"
        if aux_enabled is None:
            aux_enabled = manifest.get("extra", {}).get("aux_enabled", True)
        params = net.checkpoint_load(ckpt)
    if aux_enabled is None:
        aux_enabled = True
    if arena_seeds is None:
        arena_seeds = [eval_arena_seed(k) for k in range(n_episodes)]
    arena_seeds = list(arena_seeds)
    if len(arena_seeds) < n_episodes:
        arena_seeds = [arena_seeds[k % len(arena_seeds)] for k in range(n_episodes)]
    policy_rng = derive_stream(master_seed, "eval_policy")
    logs = []
    for k in range(n_episodes):
        elog = run_episode(params, env_config, arena_seeds[k], master_seed, f"eval{k}", greedy,
                           policy_rng, aux_enabled, hidden_stride, True, max_steps,
                           header_extra={"checkpoint_id": checkpoint_id} if checkpoint_id else None)
        logs.append(elog)
    summary = summarize_logs(logs)
    if out_dir is not None:
        out = Path(out_dir)
        entries = []
        for elog in logs:
            rec_path, h_path = write_log(elog, out)
            entries.append({"episode_id": elog.episode_id, "records": rec_path.name,
                            "hidden": h_path.name, "arena_seed": elog.header["arena_seed"],
                            "length": len(elog)})
        write_manifest(out, entries, summary=summary.to_dict(), checkpoint_id=checkpoint_id,
                       master_seed=master_seed, policy="greedy" if greedy else "sampled")
    return logs, summary


def summarize_logs(logs) -> EvalSummary:
    returns = [float(l.column("reward").sum()) for l in logs]
    lengths = [len(l) for l in logs]
    steps = max(1, sum(lengths))
    eat = sum(int(l.column("ate").sum()) for l in logs)
    drink = sum(int(l.column("drank").sum()) for l in logs)
    sleep = sum(int(l.column("is_sleeping").sum()) for l in logs)
    return EvalSummary(len(logs), float(np.mean(returns)), _ci95(returns), float(np.mean(lengths)),
                       _ci95(lengths), eat / steps, drink / steps, sleep / steps, lengths, returns)


def measure_random_baseline(env_config: EnvConfig, n_episodes: int = 20, seed: int = 0,
                            hidden_dim: int = 64, recurrent: bool = True) -> float:
    """Mean episode length of a randomly initialised, sampled policy on held-out arenas."""
    ncfg = net.NetConfig(OBS_DIM, hidden_dim, N_ACTIONS, recurrent)
    params = net.init_params(ncfg, derive_stream(seed, "init"))
    rng = derive_stream(seed, "baseline_policy")
    lengths = [run_episode(params, env_config, eval_arena_seed(k), seed, f"baseline{k}", False, rng,
                           log=False)[1] for k in range(n_episodes)]
    return float(np.mean(lengths))

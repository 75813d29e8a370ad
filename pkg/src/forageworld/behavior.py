"""Behavioural analyses: patches, revisit choices, logistic GLM, VIF, movement metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.cluster.vq import kmeans2
from scipy.sparse.csgraph import connected_components

PREDICTORS = ("EatRate", "DrinkRate", "PredRate", "Recency", "Dwelltime", "CowCount", "Uncertainty")
RECENCY_CONVENTION = "Recency = decision_t - last exit time; larger means visited longer ago"
SEGMENTATION_NOTE = "k-means on (mean step length, mean |turning angle|); simplified segmenter"


class GlmConvergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class GlmWarning(UserWarning):
    pass


# -- patches -------------------------------------------------------------------

@dataclass
class Patch:
    id: int
    center: tuple
    members: list
    radius: float


def detect_patches(spawn_points, radius: float = 6.0) -> list:
    """Single-linkage clusters of spawn points (link distance ``2 * radius``).

    ``spawn_points`` may also be an :class:`ArenaLayout`.  Patch ids follow
    the sorted order of each cluster's smallest member, so the result does
    not depend on input order.
    """
    pts = getattr(spawn_points, "cow_spawn_points", spawn_points)
    pts = sorted({(int(x), int(y)) for x, y in pts})
    if not pts:
        return []
    P = np.array(pts, dtype=np.float64)
    D = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    _, labels = connected_components(D <= 2.0 * radius, directed=False)
    patches = []
    seen = {}
    for i, lab in enumerate(labels):  # pts sorted, so first hit is the smallest member
        if lab not in seen:
            seen[lab] = len(seen)
            patches.append([])
        patches[seen[lab]].append(pts[i])
    return [Patch(i, tuple(np.mean(m, axis=0).tolist()), m, float(radius)) for i, m in enumerate(patches)]


def patch_membership(positions, patches) -> np.ndarray:
    """Patch id for each position (within ``radius`` of a member spawn point), else -1."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(pos), -1, dtype=np.int64)
    best = np.full(len(pos), np.inf)
    for p in patches:
        m = np.asarray(p.members, dtype=np.float64)
        d = np.sqrt(((pos[:, None] - m[None]) ** 2).sum(-1)).min(axis=1)
        hit = (d <= p.radius) & (d < best)
        out[hit] = p.id
        best[hit] = d[hit]
    return out


def _runs(labels):
    """``(label, start, end)`` of maximal runs with label >= 0; ``end`` exclusive."""
    runs = []
    start = None
    for t, lab in enumerate(list(labels) + [-2]):
        if start is not None and lab != labels[start]:
            runs.append((int(labels[start]), start, t))
            start = None
        if start is None and lab >= 0:
            start = t
    return runs


def aux_targets(log) -> np.ndarray:
    """Position the auxiliary head predicts at each record: the pre-action ``delta_xy``."""
    d = log.deltas().astype(np.float64)
    prev = np.zeros_like(d)
    prev[1:] = d[:-1]
    return prev


def prediction_error(log) -> np.ndarray:
    """``||predicted_delta - target||`` per record (NaN without the auxiliary head)."""
    pred = np.stack([log.column("predicted_delta_x"), log.column("predicted_delta_y")], axis=1)
    return np.linalg.norm(pred - aux_targets(log), axis=1)


# -- choice events -----------------------------------------------------------------

@dataclass
class ChoiceEvent:
    episode_id: str
    agent_id: str
    eat_t: int
    decision_t: int
    chosen: int
    candidates: list
    predictors: dict  # patch id -> {name: value}
    uncertainty_available: bool = True


def extract_choice_events(log, patches, revisit_gap: int = 100, decision_lead: int = 50,
                          drink_radius: float = 8.0, agent_id: str | None = None) -> list:
    """Revisit decisions: the first eat of a visit to a patch last left >= ``revisit_gap`` earlier.

    Only events with at least two candidate patches are kept.  Predictors use
    records with ``t < decision_t`` only.
    """
    n = len(log)
    if n == 0 or not patches:
        return []
    agent_id = agent_id or str(log.header.get("agent_id", log.header.get("checkpoint_id", "agent0")))
    pos = log.positions()
    inp = patch_membership(pos, patches)
    runs = _runs(inp)
    ate = log.column("ate")
    drank = log.column("drank")
    pred_on = log.column("melee_on_screen") | log.column("ranged_on_screen")
    cows = log.column("num_passives_nearby").astype(np.float64)
    err = prediction_error(log)
    has_unc = bool(np.isfinite(err).any())
    centers = {p.id: np.asarray(p.center) for p in patches}

    events = []
    last_exit: dict = {}
    for pid, s, e in runs:
        prev_exit = last_exit.get(pid)
        last_exit[pid] = e
        if prev_exit is None or s - prev_exit < revisit_gap:
            continue
        eats = np.nonzero(ate[s:e])[0]
        if len(eats) == 0:
            continue
        eat_t = s + int(eats[0])
        d = eat_t - decision_lead
        if d <= 0:
            continue
        cand = sorted({r[0] for r in runs if r[1] < d})
        if pid not in cand or len(cand) < 2:
            continue
        preds = {c: _patch_history(c, d, runs, inp, ate, drank, pred_on, cows, err, pos, centers[c],
                                   drink_radius) for c in cand}
        if not has_unc:
            for v in preds.values():
                v.pop("Uncertainty")
        events.append(ChoiceEvent(log.episode_id, agent_id, eat_t, d, pid, cand, preds, has_unc))
    return events


def _patch_history(c, d, runs, inp, ate, drank, pred_on, cows, err, pos, center, drink_radius) -> dict:
    inside = inp[:d] == c
    t_in = max(1, int(inside.sum()))
    visits = [(s, min(e, d)) for p, s, e in runs if p == c and s < d]
    near = np.sqrt(((pos[:d] - center) ** 2).sum(-1)) <= drink_radius
    e_in = err[:d][inside]
    e_in = e_in[np.isfinite(e_in)]
    return {
        "EatRate": float((ate[:d] & inside).sum()) / t_in,
        "DrinkRate": float((drank[:d] & near).sum()) / t_in,
        "PredRate": float((pred_on[:d] & inside).sum()) / t_in,
        "Recency": float(d - visits[-1][1]),
        "Dwelltime": float(np.mean([e - s for s, e in visits])),
        "CowCount": float(cows[:d][inside].mean()) if inside.any() else 0.0,
        "Uncertainty": float(e_in.mean()) if len(e_in) else float("nan"),
    }


def events_to_design(events, predictors=None):
    """Long-format design: one row per (event, candidate).

    Returns ``(X, y, agents, event_index, names)``.
    """
    if predictors is None:
        predictors = [p for p in PREDICTORS
                      if p != "Uncertainty" or all(e.uncertainty_available for e in events)]
    X, y, agents, idx = [], [], [], []
    for k, ev in enumerate(events):
        for c in ev.candidates:
            X.append([ev.predictors[c][p] for p in predictors])
            y.append(1.0 if c == ev.chosen else 0.0)
            agents.append(ev.agent_id)
            idx.append(k)
    return (np.asarray(X, dtype=np.float64).reshape(-1, len(predictors)), np.asarray(y),
            np.asarray(agents, dtype=object), np.asarray(idx), list(predictors))


# -- GLM ---------------------------------------------------------------------------

@dataclass
class GlmFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    intercepts: dict
    n_obs: int
    iterations: int
    converged: bool
    loglik: float
    separation: bool = False
    warnings: list = field(default_factory=list)
    vif: dict = field(default_factory=dict)
    means: np.ndarray = None
    sds: np.ndarray = None

    def stars(self) -> list:
        return [significance_stars(p) for p in self.p]

    def table(self) -> list:
        return [{"predictor": n, "coef": float(b), "se": float(s), "z": float(z), "p": float(p),
                 "stars": significance_stars(p), "vif": self.vif.get(n, float("nan"))}
                for n, b, s, z, p in zip(self.names, self.coef, self.se, self.z, self.p)]


def significance_stars(p: float) -> str:
    if not p < 0.05:
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*"


def _loglik(eta, y):
    # sum y*eta - log(1 + exp(eta)), stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def irls_logistic(X, y, max_iter: int = 100, tol: float = 1e-8):
    """Plain IRLS on a full design (no standardisation or intercept added).

    Returns ``(beta, cov, iterations, converged, loglik, trace)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beta = np.zeros(X.shape[1])
    ll = _loglik(X @ beta, y)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(mu * (1.0 - mu), 1e-12, None)
        z = eta + (y - mu) / w
        XtW = X.T * w
        beta = np.linalg.lstsq(XtW @ X, XtW @ z, rcond=None)[0]
        new_ll = _loglik(X @ beta, y)
        trace.append(new_ll)
        if abs(new_ll - ll) <= tol * max(1.0, abs(ll)):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    info = (X.T * (mu * (1.0 - mu))) @ X
    cov = np.linalg.pinv(info)
    return beta, cov, it, converged, ll, trace


def fit_glm_logistic(X, y, groups=None, names=None, standardize: bool = True,
                     max_iter: int = 100, tol: float = 1e-8) -> GlmFit:
    """Logistic regression with one fixed-effect intercept per group (agent).

    Predictors are standardised (mean 0, sd 1) first; coefficients are in
    standardised units.  Wald SEs come from the inverse Fisher information.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    groups = np.zeros(n, dtype=object) if groups is None else np.asarray(groups, dtype=object)
    notes = []
    means = X.mean(axis=0) if standardize else np.zeros(k)
    sds = X.std(axis=0) if standardize else np.ones(k)
    if standardize and np.any(sds == 0):
        notes.append("constant predictor(s): " + ", ".join(n_ for n_, s in zip(names, sds) if s == 0))
        sds = np.where(sds == 0, 1.0, sds)
    Z = (X - means) / sds
    levels = sorted(set(groups.tolist()), key=str)
    G = np.stack([(groups == g).astype(np.float64) for g in levels], axis=1)
    D = np.hstack([Z, G])
    if np.linalg.matrix_rank(D) < D.shape[1]:
        notes.append("design matrix is rank deficient (collinear predictors or separation)")
    beta, cov, it, conv, ll, trace = irls_logistic(D, y, max_iter, tol)
    if not conv:
        raise GlmConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)
    eta = D @ beta
    separation = bool(np.max(np.abs(eta)) > 30 or np.max(np.abs(beta)) > 25)
    if separation:
        notes.append("possible perfect separation: fitted probabilities at 0 or 1")
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    for msg in notes:
        warnings.warn(msg, GlmWarning, stacklevel=2)
    vifs = vif(X) if k >= 2 and n > k else np.full(k, np.nan)
    return GlmFit(names, beta[:k], se[:k], z[:k], p[:k], dict(zip(map(str, levels), beta[k:].tolist())),
                  n, it, conv, ll, separation, notes, dict(zip(names, vifs.tolist())), means, sds)


def fit_choice_glm(events, min_events_per_agent: int = 10, predictors=None) -> GlmFit:
    """GLM over choice events; agents with too few events are excluded."""
    counts = {}
    for e in events:
        counts[e.agent_id] = counts.get(e.agent_id, 0) + 1
    keep = [e for e in events if counts[e.agent_id] >= min_events_per_agent]
    if not keep:
        raise ValueError(f"no agent has >= {min_events_per_agent} choice events")
    X, y, agents, _, names = events_to_design(keep, predictors)
    fit = fit_glm_logistic(X, y, agents, names)
    dropped = sorted(a for a, c in counts.items() if c < min_events_per_agent)
    if dropped:
        fit.warnings.append(f"agents with < {min_events_per_agent} events excluded: {dropped}")
    if "Uncertainty" not in names:
        fit.warnings.append("Uncertainty predictor absent (no auxiliary position head)")
    return fit


def vif(X) -> np.ndarray:
    """Variance inflation factors via OLS of each column on the others plus intercept."""
    X = np.asarray(X, dtype=np.float64)
    n, k = X.shape
    if k < 2 or n <= k:
        raise ValueError("vif needs >= 2 predictors and more rows than predictors")
    out = np.empty(k)
    for j in range(k):
        target = X[:, j]
        others = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef = np.linalg.lstsq(others, target, rcond=None)[0]
        resid = target - others @ coef
        tss = np.sum((target - target.mean()) ** 2)
        r2 = 1.0 - resid @ resid / tss if tss > 0 else 1.0
        out[j] = np.inf if r2 >= 1.0 - 1e-12 else 1.0 / (1.0 - r2)
    return out


# -- movement metrics ----------------------------------------------------------------

def occupancy_entropy(positions, bin_size: float = 4) -> float:
    """Shannon entropy (nats) of visits over square bins of side ``bin_size``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("need at least one position")
    bins = np.floor(pos / bin_size).astype(np.int64)
    _, counts = np.unique(bins, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def headings(positions) -> np.ndarray:
    """Angles of consecutive non-zero displacements (stationary steps skipped)."""
    d = np.diff(np.asarray(positions, dtype=np.float64).reshape(-1, 2), axis=0)
    d = d[np.any(d != 0, axis=1)]
    return np.arctan2(d[:, 1], d[:, 0])


def angular_variance(angles) -> float:
    """Circular variance ``1 - |mean unit vector|``; NaN for an empty sequence."""
    a = np.asarray(angles, dtype=np.float64)
    if a.size == 0:
        return float("nan")
    r = math.hypot(np.cos(a).mean(), np.sin(a).mean())
    return float(min(1.0, max(0.0, 1.0 - r)))


PANEL_COLUMNS = ("spatial_uncertainty", "distance_early", "distance_late", "occupancy_entropy",
                 "angular_variance", "predator_exposure", "tool_rate", "food_mean", "drink_mean",
                 "eat_rate", "drink_rate", "sleep_rate", "episode_length", "return")


def episode_metrics(log, bin_size: float = 4) -> dict:
    delta = log.deltas().astype(np.float64)
    dist = np.linalg.norm(delta, axis=1)
    n = len(log)
    q = max(1, n // 4)
    err = prediction_error(log)
    norm_err = err / np.maximum(1.0, np.linalg.norm(aux_targets(log), axis=1))
    last = log.records[-1]
    return {
        "spatial_uncertainty": float(np.mean(norm_err)) if np.isfinite(norm_err).all() else float("nan"),
        "distance_early": float(dist[:q].mean()),
        "distance_late": float(dist[-q:].mean()),
        "occupancy_entropy": occupancy_entropy(log.positions(), bin_size),
        "angular_variance": angular_variance(headings(log.positions())),
        "predator_exposure": float((log.column("melee_on_screen") | log.column("ranged_on_screen")).mean()),
        "tool_rate": int(last.has_sword) + int(last.has_pick),
        "food_mean": float(log.column("food").mean()),
        "drink_mean": float(log.column("drink").mean()),
        "eat_rate": float(log.column("ate").mean()),
        "drink_rate": float(log.column("drank").mean()),
        "sleep_rate": float(log.column("is_sleeping").mean()),
        "episode_length": n,
        "return": float(log.column("reward").sum()),
    }


def metric_panel(logs, bin_size: float = 4) -> dict:
    """Per-episode metrics averaged over episodes (NaN-aware)."""
    per = [episode_metrics(l, bin_size) for l in logs if len(l)]
    row = {}
    for c in PANEL_COLUMNS:
        vals = np.array([m[c] for m in per], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        row[c] = float(finite.mean()) if len(finite) else float("nan")
    row["episodes"] = len(per)
    return row


# -- segmentation -------------------------------------------------------------------

@dataclass
class Segmentation:
    labels: np.ndarray  # (n,) states 1..k, 1 = shortest mean step
    features: np.ndarray  # (n, 2)
    centers: np.ndarray  # (k, 2) in feature units
    warning: str = ""
    note: str = SEGMENTATION_NOTE


def movement_features(positions, window: int = 7) -> np.ndarray:
    """Centred moving means of step length and |turning angle| per timestep."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(pos)
    d = np.diff(pos, axis=0)
    step = np.zeros(n)
    step[1:] = np.linalg.norm(d, axis=1)
    ang = np.full(n, np.nan)
    moving = step[1:] > 0
    ang[1:][moving] = np.arctan2(d[moving, 1], d[moving, 0])
    turn = np.full(n, np.nan)
    # turning angle between this move and the most recent earlier move
    last = np.nan
    for t in range(1, n):
        if np.isfinite(ang[t]):
            if np.isfinite(last):
                turn[t] = abs((ang[t] - last + np.pi) % (2 * np.pi) - np.pi)
            last = ang[t]
    half = window // 2
    feats = np.zeros((n, 2))
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        feats[t, 0] = step[lo:hi].mean()
        w = turn[lo:hi]
        w = w[np.isfinite(w)]
        feats[t, 1] = w.mean() if len(w) else 0.0
    return feats


def segment_movement(positions, window: int = 7, k: int = 3, restarts: int = 50, seed: int = 0) -> Segmentation:
    """k-means movement states; best of ``restarts`` seeded k-means++ runs."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(pos) <= window:
        raise ValueError(f"need more than {window} positions")
    F = movement_features(pos, window)
    sd = F.std(axis=0)
    if np.all(sd < 1e-12):
        warnings.warn("all movement features identical; single state", GlmWarning, stacklevel=2)
        return Segmentation(np.ones(len(F), dtype=np.int64), F, F[:1].copy(), "degenerate features")
    Z = (F - F.mean(axis=0)) / np.where(sd < 1e-12, 1.0, sd)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cent, lab = kmeans2(Z, k, minit="++", seed=rng)
        inertia = float(((Z - cent[lab]) ** 2).sum())
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, lab)
    lab = best[1]
    used = np.unique(lab)
    order = sorted(used, key=lambda c: (F[lab == c, 0].mean(), F[lab == c, 1].mean()))
    remap = {c: i + 1 for i, c in enumerate(order)}
    labels = np.array([remap[c] for c in lab], dtype=np.int64)
    centers = np.array([F[labels == i + 1].mean(axis=0) for i in range(len(order))])
    return Segmentation(labels, F, centers)


# -- curve smoothing -----------------------------------------------------------------

def ema_smooth(x, y, halflife: float) -> np.ndarray:
    """Time-weighted, debiased EMA: weight decays by half every ``halflife`` units of ``x``.

    NaN inputs are skipped (the previous estimate carries over).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.full(len(y), np.nan)
    s = w = 0.0
    prev = None
    for i in range(len(y)):
        if prev is not None:
            a = 0.5 ** ((x[i] - prev) / halflife)
            s *= a
            w *= a
        prev = x[i]
        if np.isfinite(y[i]):
            s += y[i]
            w += 1.0
        out[i] = s / w if w > 0 else np.nan
    return out

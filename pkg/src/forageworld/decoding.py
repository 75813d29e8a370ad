"""Linear (ridge) decoding of position from hidden states at temporal offsets.

Targets
    allocentric: ``delta_xy`` at ``t + dt`` (position relative to the episode start).
    egocentric:  displacement from ``t`` to ``t + dt`` expressed in the body frame
                 at ``t``: forward is ``+y`` and rightward is ``+x``.

RMSE is per coordinate: ``sqrt(mean ||pred - Y||^2 / 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAMES = ("allocentric", "egocentric")
RMSE_CONVENTION = "per-coordinate: sqrt(mean over rows of ||pred - target||^2 / 2)"
TARGET_SEMANTICS = {
    "allocentric": "delta_xy(t+dt): position at t+dt minus episode start position",
    "egocentric": "position(t+dt) - position(t) in the body frame at t (forward=+y, right=+x)",
}
BASELINE_KINDS = {
    "mean_displacement": "train-set mean target, independent of the hidden state",
    "persistence": "target at dt=0 plus train-set mean displacement over |dt| steps",
}


class EmptyDatasetError(ValueError):
    pass


@dataclass
class DecodingDataset:
    H: np.ndarray  # (n, hidden_dim)
    Y: np.ndarray  # (n, 2)
    dt: int
    frame: str
    train: np.ndarray  # bool (n,)
    episode: np.ndarray  # (n,) episode index
    t: np.ndarray  # (n,) timestep of the hidden state
    Y0: np.ndarray = None  # (n, 2) target at dt=0, used by the persistence baseline

    def __len__(self):
        return len(self.Y)

    def subset(self, mask) -> "DecodingDataset":
        m = np.asarray(mask)
        return DecodingDataset(self.H[m], self.Y[m], self.dt, self.frame, self.train[m],
                               self.episode[m], self.t[m], None if self.Y0 is None else self.Y0[m])

    def train_part(self) -> "DecodingDataset":
        return self.subset(self.train)

    def test_part(self) -> "DecodingDataset":
        return self.subset(~self.train)


@dataclass
class DecoderModel:
    A: np.ndarray  # (2, hidden_dim)
    b: np.ndarray  # (2,)
    alpha: float
    dt: int
    frame: str
    meta: dict = field(default_factory=dict)

    def predict(self, H) -> np.ndarray:
        return np.asarray(H) @ self.A.T + self.b


def egocentric_rotate(d, facing) -> np.ndarray:
    """Rotate screen-frame displacements ``d`` (y down) into the body frame.

    ``facing`` uses N=0, E=1, S=2, W=3; a step straight ahead maps to ``(0, 1)``.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1, 2)
    facing = np.broadcast_to(np.asarray(facing, dtype=np.int64), (len(d),))
    x, y = d[:, 0], -d[:, 1]  # y up
    out = np.empty_like(d)
    for k in range(4):
        m = facing == k
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
        out[m, 0] = c * x[m] - s * y[m]
        out[m, 1] = s * x[m] + c * y[m]
    return out


def _episode_rows(log, dt, frame):
    n = len(log)
    refs = log.column("hidden_state_ref")
    t = np.nonzero(refs >= 0)[0]
    t = t[(t + dt >= 0) & (t + dt < n)]
    if len(t) == 0:
        return None
    H = log.hidden_matrix()[refs[t]].astype(np.float64)
    delta = log.deltas().astype(np.float64)
    if frame == "allocentric":
        Y = delta[t + dt]
        Y0 = delta[t]
    else:
        Y = egocentric_rotate(delta[t + dt] - delta[t], log.column("facing")[t])
        Y0 = np.zeros_like(Y)
    return H, Y, Y0, t


def build_dataset(logs, dt: int, frame: str = "allocentric", train_fraction: float = 0.75) -> DecodingDataset:
    """Hidden states paired with targets ``dt`` steps away, within each episode.

    Per episode the first ``train_fraction`` of usable rows train and the rest test.
    """
    if frame not in FRAMES:
        raise ValueError(f"frame must be one of {FRAMES}, got {frame!r}")
    parts = []
    for e, log in enumerate(logs):
        if not log.hidden_states:
            raise ValueError(f"episode {log.episode_id} has no hidden states")
        rows = _episode_rows(log, dt, frame)
        if rows is None:
            continue
        H, Y, Y0, t = rows
        n_train = int(np.floor(train_fraction * len(t)))
        train = np.arange(len(t)) < n_train
        parts.append((H, Y, Y0, train, np.full(len(t), e), t))
    if not parts:
        raise EmptyDatasetError(f"dt={dt} leaves no usable rows in any episode")
    H, Y, Y0, train, ep, t = (np.concatenate(x) for x in zip(*parts))
    return DecodingDataset(H, Y, dt, frame, train, ep, t, Y0)


def fit_ridge(train: DecodingDataset, alpha: float) -> DecoderModel:
    """Closed-form ridge on centred data; the intercept is not penalised."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    H, Y = train.H, train.Y
    if len(Y) == 0:
        raise EmptyDatasetError("no training rows")
    mh = H.mean(axis=0)
    my = Y.mean(axis=0)
    Hc = H - mh
    Yc = Y - my
    G = Hc.T @ Hc + alpha * np.eye(H.shape[1])
    try:
        A = np.linalg.solve(G, Hc.T @ Yc).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge system singular (cond ~ {np.linalg.cond(G):.3g})") from exc
    if not np.isfinite(A).all():
        raise np.linalg.LinAlgError(f"ridge solution non-finite (cond ~ {np.linalg.cond(G):.3g})")
    meta = {"n_train": len(Y)}
    if len(Y) < H.shape[1] / 4:
        meta["warning"] = "under-determined: fewer than hidden_dim/4 training rows"
    return DecoderModel(A, my - A @ mh, float(alpha), train.dt, train.frame, meta)


def ridge_objective_grad(model: DecoderModel, data: DecodingDataset) -> np.ndarray:
    """Gradient w.r.t. ``A`` of ``sum ||A h + b - y||^2 + alpha ||A||_F^2`` (``b`` at its optimum)."""
    R = model.predict(data.H) - data.Y
    return 2.0 * R.T @ data.H + 2.0 * model.alpha * model.A


def evaluate_rmse(model: DecoderModel, test: DecodingDataset) -> float:
    if len(test) == 0:
        raise EmptyDatasetError("no test rows")
    if model.dt != test.dt or model.frame != test.frame:
        raise ValueError(f"model ({model.frame}, dt={model.dt}) does not match data ({test.frame}, dt={test.dt})")
    return rmse(model.predict(test.H), test.Y)


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1) / 2.0)))


def baseline_rmse(data, dt: int | None = None, frame: str = "allocentric",
                  kind: str = "mean_displacement") -> float:
    """Test RMSE of a hidden-state-free predictor.

    ``data`` is a :class:`DecodingDataset` or a list of episode logs.
    ``mean_displacement`` predicts the train-set mean target;
    ``persistence`` predicts the dt=0 target plus the train-set mean displacement.
    """
    if not isinstance(data, DecodingDataset):
        data = build_dataset(data, dt, frame)
    tr, te = data.train_part(), data.test_part()
    if len(te) == 0 or len(tr) == 0:
        raise EmptyDatasetError("baseline needs train and test rows")
    if kind == "mean_displacement":
        pred = np.broadcast_to(tr.Y.mean(axis=0), te.Y.shape)
    elif kind == "persistence":
        pred = te.Y0 + (tr.Y - tr.Y0).mean(axis=0)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return rmse(pred, te.Y)


def kfold_slices(n: int, k: int) -> list:
    """Contiguous fold boundaries over ``n`` rows."""
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(k)]


def cv_alpha(train: DecodingDataset, alpha_grid, folds: int = 5) -> tuple[float, dict]:
    """Pick alpha by contiguous k-fold CV on the training rows (mean validation MSE)."""
    n = len(train)
    folds = max(2, min(folds, n))
    alphas = sorted(float(a) for a in alpha_grid)
    errs = np.zeros(len(alphas))
    for sl in kfold_slices(n, folds):
        val = np.zeros(n, dtype=bool)
        val[sl] = True
        if val.all() or not val.any():
            continue
        H, Y = train.H[~val], train.Y[~val]
        mh, my = H.mean(axis=0), Y.mean(axis=0)
        Hc, Yc = H - mh, Y - my
        lam, V = np.linalg.eigh(Hc.T @ Hc)
        P = V.T @ (Hc.T @ Yc)  # (hidden, 2)
        Hv = (train.H[val] - mh) @ V
        for i, a in enumerate(alphas):
            pred = Hv @ (P / (lam + a)[:, None]) + my
            errs[i] += np.mean(np.sum((pred - train.Y[val]) ** 2, axis=1))
    best = int(np.argmin(errs))
    return alphas[best], dict(zip(alphas, (errs / folds).tolist()))


def horizon_sweep(logs, dts, frame: str = "allocentric", alpha_grid=None, folds: int = 5,
                  baseline_kind: str = "mean_displacement", return_models: bool = False):
    """One CV-tuned decoder per offset.  Rows: dt, frame, alpha, rmse, baseline, n_train, n_test."""
    if alpha_grid is None:
        alpha_grid = [10.0 ** k for k in range(-2, 5)]
    rows, models = [], []
    for dt in dts:
        ds = build_dataset(logs, int(dt), frame)
        tr, te = ds.train_part(), ds.test_part()
        alpha, _ = cv_alpha(tr, alpha_grid, folds)
        model = fit_ridge(tr, alpha)
        rows.append({"dt": int(dt), "frame": frame, "alpha": alpha, "rmse": evaluate_rmse(model, te),
                     "baseline": baseline_rmse(ds, kind=baseline_kind),
                     "n_train": len(tr), "n_test": len(te)})
        models.append(model)
    return (rows, models) if return_models else rows


def sweep_metadata(frame: str, baseline_kind: str = "mean_displacement") -> dict:
    return {"frame": frame, "target": TARGET_SEMANTICS[frame], "rmse": RMSE_CONVENTION,
            "baseline": f"{baseline_kind}: {BASELINE_KINDS[baseline_kind]}",
            "alpha_selection": "contiguous k-fold CV on train rows"}


# -- coefficient profiles ----------------------------------------------------------

def unit_weights(model: DecoderModel) -> np.ndarray:
    """L2 norm of each hidden unit's column of ``A``."""
    return np.linalg.norm(model.A, axis=0)


def overlap_score(m1: DecoderModel, m2: DecoderModel) -> float:
    w1, w2 = unit_weights(m1), unit_weights(m2)
    if w1.shape != w2.shape:
        raise ValueError("models have different hidden dimensions")
    denom = np.linalg.norm(w1) * np.linalg.norm(w2)
    return float(w1 @ w2 / denom) if denom > 0 else 0.0


@dataclass
class CoefficientProfile:
    weights: np.ndarray  # (hidden_dim, n_models)
    dts: list
    overlaps: dict  # |dt| -> cosine between the -dt and +dt models


def coefficient_profile(models) -> CoefficientProfile:
    dims = {m.A.shape[1] for m in models}
    if len(dims) != 1:
        raise ValueError(f"models have different hidden dimensions: {sorted(dims)}")
    W = np.stack([unit_weights(m) for m in models], axis=1)
    by_dt = {m.dt: m for m in models}
    overlaps = {d: overlap_score(by_dt[-d], by_dt[d]) for d in sorted(by_dt) if d > 0 and -d in by_dt}
    return CoefficientProfile(W, [m.dt for m in models], overlaps)

"""Behavior predictors and split-conformal calibration of their error.

Each CAV predicts the next-step acceleration of surrounding vehicles from
the previous step's observations: (spacing, velocity, own acceleration,
preceding velocity) for CAV targets, the same minus the acceleration for
HDV targets.  The nonconformity score of a time step is the worst absolute
prediction error across the vehicles an ego observes; the calibrated
threshold C is the (1 - epsilon)-quantile of calibration scores with the
usual +inf sentinel, so prediction errors stay below C with probability at
least 1 - epsilon under exchangeability.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path

import numpy as np

from ._mlp import Adam, Mlp
from .dynamics import PlatoonConfig, PlatoonState, equilibrium_state, step
from .policies import HeuristicPolicy
from .safety import Estimates

__all__ = [
    "PredictorNet",
    "BehaviorDataset",
    "ConformalCalibrator",
    "BehaviorPredictor",
    "generate_dataset",
    "train_predictor",
    "nonconformity",
    "calibrate",
    "coverage_test",
    "pooled_scores",
    "resampled_coverages",
    "save_predictor",
    "load_predictor",
]

_CAV_FEATURES = 4  # spacing, velocity, own accel, preceding velocity
_HDV_FEATURES = 3  # spacing, velocity, preceding velocity


@dataclass
class PredictorNet:
    """Fully connected accelerator predictor for one vehicle role."""

    role: str  # "cav" | "hdv"
    mlp: Mlp
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        want = _CAV_FEATURES if self.role == "cav" else _HDV_FEATURES
        if self.role not in ("cav", "hdv"):
            raise ValueError("role must be 'cav' or 'hdv'")
        if self.mlp.layer_sizes[0] != want or self.mlp.layer_sizes[-1] != 1:
            raise ValueError(f"{self.role} predictor must map {want} features to 1 output")

    @classmethod
    def create(cls, role: str, hidden=(32, 32), seed: int = 0) -> "PredictorNet":
        d_in = _CAV_FEATURES if role == "cav" else _HDV_FEATURES
        rng = np.random.default_rng(seed)
        return cls(role=role, mlp=Mlp([d_in, *hidden, 1], rng))

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        if self.x_mean is not None:
            x = (x - self.x_mean) / self.x_std
        return self.mlp.forward(x)[:, 0]


@dataclass
class BehaviorDataset:
    """Flat table of (previous observation -> current acceleration) samples
    with enough keys to regroup rows by simulation time step."""

    episode: np.ndarray
    t: np.ndarray
    vehicle: np.ndarray
    is_cav: np.ndarray
    spacing: np.ndarray
    velocity: np.ndarray
    accel_prev: np.ndarray
    velocity_prev: np.ndarray
    accel: np.ndarray

    COLUMNS = (
        "episode",
        "t",
        "vehicle",
        "is_cav",
        "spacing",
        "velocity",
        "accel_prev",
        "velocity_prev",
        "accel",
    )

    def __len__(self) -> int:
        return self.episode.shape[0]

    def features(self, role: str) -> np.ndarray:
        mask = self.is_cav if role == "cav" else ~self.is_cav
        cols = [self.spacing[mask], self.velocity[mask]]
        if role == "cav":
            cols.append(self.accel_prev[mask])
        cols.append(self.velocity_prev[mask])
        return np.column_stack(cols)

    def targets(self, role: str) -> np.ndarray:
        mask = self.is_cav if role == "cav" else ~self.is_cav
        return self.accel[mask]

    def subset(self, mask: np.ndarray) -> "BehaviorDataset":
        return BehaviorDataset(**{c: getattr(self, c)[mask] for c in self.COLUMNS})

    def group_ids(self) -> np.ndarray:
        """One id per (episode, time step)."""
        return self.episode.astype(np.int64) * 1_000_000 + self.t.astype(np.int64)

    def split(
        self, fractions=(0.5, 0.25, 0.25), seed: int = 0
    ) -> tuple["BehaviorDataset", "BehaviorDataset", "BehaviorDataset"]:
        """Disjoint train/calibration/test split by whole time steps, so a
        step's score never straddles two splits."""
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        gids = self.group_ids()
        uniq = np.unique(gids)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(uniq)
        n_train = int(round(fractions[0] * len(uniq)))
        n_cal = int(round(fractions[1] * len(uniq)))
        parts = (perm[:n_train], perm[n_train : n_train + n_cal], perm[n_train + n_cal :])
        return tuple(self.subset(np.isin(gids, part)) for part in parts)

    def save_csv(self, path):
        path = Path(path)
        with open(path, "w") as f:
            f.write(",".join(self.COLUMNS) + "\n")
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                ep, t, veh, cav, s, v, ap, vp, a = row
                f.write(
                    f"{int(ep)},{int(t)},{int(veh)},{int(cav)},"
                    f"{float(s)!r},{float(v)!r},{float(ap)!r},{float(vp)!r},{float(a)!r}\n"
                )

    @classmethod
    def load_csv(cls, path) -> "BehaviorDataset":
        raw = np.genfromtxt(path, delimiter=",", names=True)
        return cls(
            episode=raw["episode"].astype(int),
            t=raw["t"].astype(int),
            vehicle=raw["vehicle"].astype(int),
            is_cav=raw["is_cav"].astype(bool),
            spacing=raw["spacing"],
            velocity=raw["velocity"],
            accel_prev=raw["accel_prev"],
            velocity_prev=raw["velocity_prev"],
            accel=raw["accel"],
        )


def generate_dataset(
    cfg: PlatoonConfig,
    episodes: int,
    noise_std: float = 0.2,
    seed: int = 0,
    steps: int = 1000,
    policy=None,
    action_noise_std: float = 0.5,
) -> BehaviorDataset:
    """Roll out the platoon under random head-vehicle velocity disturbance
    and a baseline CAV policy, recording per-vehicle behavior samples.

    Per step, the head velocity receives a zero-mean Gaussian increment of
    std noise_std; CAV actions add exploration noise so the CAV predictor
    sees a spread of inputs.  Rows hold the observation at step t-1 and the
    acceleration realized at step t, giving n*(steps-1) rows per episode.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    policy = policy or HeuristicPolicy()
    rng = np.random.default_rng(seed)
    cols: dict[str, list] = {c: [] for c in BehaviorDataset.COLUMNS}
    cav_set = set(cfg.cav_indices)
    for ep in range(episodes):
        state = equilibrium_state(cfg)
        prev_state = None
        prev_accel = None
        for t in range(steps):
            u = np.array([policy.act(state, j, cfg) for j in cfg.cav_indices])
            u += rng.normal(0.0, action_noise_std, size=u.shape)
            u = np.clip(u, -5.0, 5.0)
            head_accel = rng.normal(0.0, noise_std) / cfg.dt
            next_state = step(state, u, head_accel, cfg)
            # realized accelerations this step (post-clamp, matching the integrator)
            accel_now = (next_state.velocity - state.velocity) / cfg.dt
            if prev_state is not None:
                for i in range(1, cfg.n + 1):
                    cols["episode"].append(ep)
                    cols["t"].append(t)
                    cols["vehicle"].append(i)
                    cols["is_cav"].append(i in cav_set)
                    cols["spacing"].append(prev_state.s(i))
                    cols["velocity"].append(prev_state.v(i))
                    cols["accel_prev"].append(prev_accel[i - 1])
                    cols["velocity_prev"].append(prev_state.v_prev(i))
                    cols["accel"].append(accel_now[i - 1])
            prev_state = state
            prev_accel = accel_now
            state = next_state
    return BehaviorDataset(
        episode=np.array(cols["episode"], dtype=int),
        t=np.array(cols["t"], dtype=int),
        vehicle=np.array(cols["vehicle"], dtype=int),
        is_cav=np.array(cols["is_cav"], dtype=bool),
        spacing=np.array(cols["spacing"]),
        velocity=np.array(cols["velocity"]),
        accel_prev=np.array(cols["accel_prev"]),
        velocity_prev=np.array(cols["velocity_prev"]),
        accel=np.array(cols["accel"]),
    )


def train_predictor(
    ds: BehaviorDataset,
    net: PredictorNet,
    lr: float = 1e-3,
    epochs: int = 60,
    batch_size: int = 256,
    seed: int = 0,
) -> PredictorNet:
    """Adam / mean-squared-error training on the rows matching net.role.

    Normalization constants come from the training rows.  Raises on
    divergence (non-finite loss).
    """
    x = ds.features(net.role)
    y = ds.targets(net.role)
    if x.shape[0] == 0:
        raise ValueError("no training rows for role " + net.role)
    net.x_mean = x.mean(axis=0)
    net.x_std = np.maximum(x.std(axis=0), 1e-6)
    xn = (x - net.x_mean) / net.x_std

    rng = np.random.default_rng(seed)
    opt = Adam(net.mlp.params(), lr=lr)
    n = x.shape[0]
    net.history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred, cache = net.mlp.forward_cached(xn[idx])
            err = pred[:, 0] - y[idx]
            sq_sum += float(err @ err)
            dy = (2.0 * err / idx.size)[:, None]
            gw, gb, _ = net.mlp.backward(cache, dy)
            opt.step(gw + gb)
        mse = sq_sum / n
        if not np.isfinite(mse):
            raise RuntimeError(
                f"predictor training diverged at epoch {epoch} (mse={mse}); lower the learning rate"
            )
        net.history.append(mse)
    return net


def nonconformity(truth: np.ndarray, pred: np.ndarray) -> float:
    """Worst absolute error across vehicles: max_i |a_i - a_hat_i|."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape or truth.size == 0:
        raise ValueError("need equal-length, nonempty acceleration vectors")
    return float(np.max(np.abs(truth - pred)))


@dataclass
class ConformalCalibrator:
    """Sorted calibration scores (with +inf sentinel), failure probability,
    and the resulting quantile threshold."""

    scores: np.ndarray
    epsilon: float
    threshold: float
    p: int  # 1-based index of the threshold within `scores`

    @property
    def n_cal(self) -> int:
        return self.scores.shape[0] - 1  # excludes the sentinel

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "threshold": self.threshold if np.isfinite(self.threshold) else "inf",
            "p": self.p,
            "n_cal": self.n_cal,
        }


def calibrate(scores, epsilon: float) -> ConformalCalibrator:
    """Threshold C = R_(p), p = ceil((n+1)(1-epsilon)), over the sorted
    scores with an appended +inf sentinel.

    p = n+1 selects the sentinel: the bound is valid but vacuous, and a
    warning suggests more calibration data or a larger epsilon.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size == 0:
        raise ValueError("need at least one calibration score")
    padded = np.append(scores, np.inf)
    p = ceil((scores.size + 1) * (1.0 - epsilon))
    threshold = float(padded[p - 1])
    if not np.isfinite(threshold):
        warnings.warn(
            f"calibration set of {scores.size} scores is too small for epsilon={epsilon}; "
            "threshold is +inf",
            stacklevel=2,
        )
    return ConformalCalibrator(scores=padded, epsilon=epsilon, threshold=threshold, p=p)


def coverage_test(cal: ConformalCalibrator, test_scores) -> float:
    """Fraction of held-out scores within the calibrated threshold."""
    test_scores = np.asarray(test_scores, dtype=float)
    return float(np.mean(test_scores <= cal.threshold))


class BehaviorPredictor:
    """Pair of role predictors applied over a platoon snapshot."""

    def __init__(self, net_cav: PredictorNet, net_hdv: PredictorNet):
        self.net_cav = net_cav
        self.net_hdv = net_hdv

    def predict_rows(self, ds: BehaviorDataset) -> np.ndarray:
        out = np.empty(len(ds))
        out[ds.is_cav] = self.net_cav.predict(ds.features("cav"))
        out[~ds.is_cav] = self.net_hdv.predict(ds.features("hdv"))
        return out

    def predict_accels(
        self, prev_state: PlatoonState, prev_accel: np.ndarray, cfg: PlatoonConfig
    ) -> np.ndarray:
        """Predicted current-step acceleration for every vehicle from the
        previous step's observations."""
        out = np.empty(cfg.n)
        feats_c, feats_h, idx_c, idx_h = [], [], [], []
        for i in range(1, cfg.n + 1):
            s, v, vp = prev_state.s(i), prev_state.v(i), prev_state.v_prev(i)
            if cfg.is_cav(i):
                feats_c.append((s, v, prev_accel[i - 1], vp))
                idx_c.append(i - 1)
            else:
                feats_h.append((s, v, vp))
                idx_h.append(i - 1)
        if idx_c:
            out[idx_c] = self.net_cav.predict(np.array(feats_c))
        if idx_h:
            out[idx_h] = self.net_hdv.predict(np.array(feats_h))
        return out

    def estimates(
        self, prev_state: PlatoonState, prev_accel: np.ndarray, cfg: PlatoonConfig
    ) -> Estimates:
        acc = self.predict_accels(prev_state, prev_accel, cfg)
        return Estimates(
            u_hat={j: float(acc[j - 1]) for j in cfg.cav_indices},
            f_hat={i: float(acc[i - 1]) for i in cfg.hdv_indices},
        )


def pooled_scores(
    ds: BehaviorDataset, predictor: BehaviorPredictor, cfg: PlatoonConfig
) -> np.ndarray:
    """Per-ego, per-time-step nonconformity scores pooled over all egos.

    Each CAV scores the worst absolute prediction error among the vehicles
    inside its communication range at that step.
    """
    pred = predictor.predict_rows(ds)
    err = np.abs(pred - ds.accel)
    gids = ds.group_ids()
    order = np.argsort(gids, kind="stable")
    scores = []
    bounds = np.flatnonzero(np.diff(gids[order])) + 1
    for chunk in np.split(order, bounds):
        veh = ds.vehicle[chunk]
        for ego in cfg.cav_indices:
            mask = np.abs(veh - ego) <= cfg.comm_range
            if mask.any():
                scores.append(err[chunk[mask]].max())
    return np.asarray(scores)


def resampled_coverages(
    group_scores: np.ndarray,
    group_ids: np.ndarray,
    epsilon: float,
    n_splits: int = 20,
    seed: int = 0,
) -> list[float]:
    """Coverage over repeated random halvings of the held-out groups into
    calibration/test (the empirical check of the conformal bound)."""
    uniq = np.unique(group_ids)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_splits):
        perm = rng.permutation(uniq)
        cal_groups = set(perm[: len(uniq) // 2].tolist())
        cal_mask = np.array([g in cal_groups for g in group_ids])
        cal = calibrate(group_scores[cal_mask], epsilon)
        out.append(coverage_test(cal, group_scores[~cal_mask]))
    return out


def save_calibration(path, predictor: BehaviorPredictor, calibrator: ConformalCalibrator):
    """Bundle both role predictors and the calibrated threshold in one
    versioned document (what the evaluation harness consumes)."""
    doc = {
        "format": "platoonsafe-calibration",
        "version": 1,
        "epsilon": calibrator.epsilon,
        "threshold": calibrator.threshold,
        "n_cal": calibrator.n_cal,
        "net_cav": _predictor_dict(predictor.net_cav),
        "net_hdv": _predictor_dict(predictor.net_hdv),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_calibration(path) -> tuple[BehaviorPredictor, float, float]:
    """Returns (predictor, threshold C, epsilon)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "platoonsafe-calibration" or doc.get("version") != 1:
        raise ValueError(f"unrecognized calibration document at {path}")
    pred = BehaviorPredictor(
        _predictor_from_dict(doc["net_cav"], "cav"),
        _predictor_from_dict(doc["net_hdv"], "hdv"),
    )
    return pred, float(doc["threshold"]), float(doc["epsilon"])


def _predictor_dict(net: PredictorNet) -> dict:
    return {
        "role": net.role,
        "x_mean": None if net.x_mean is None else net.x_mean.tolist(),
        "x_std": None if net.x_std is None else net.x_std.tolist(),
        "net": net.mlp.to_dict(),
        "history": [float(h) for h in net.history],
    }


def _predictor_from_dict(d: dict, role: str) -> PredictorNet:
    if d["role"] != role:
        raise ValueError(f"expected a {role} predictor, found {d['role']}")
    return PredictorNet(
        role=role,
        mlp=Mlp.from_dict(d["net"]),
        x_mean=None if d["x_mean"] is None else np.asarray(d["x_mean"]),
        x_std=None if d["x_std"] is None else np.asarray(d["x_std"]),
        history=list(d["history"]),
    )


def save_predictor(net: PredictorNet, path):
    doc = {
        "format": "platoonsafe-predictor",
        "version": 1,
        "role": net.role,
        "x_mean": None if net.x_mean is None else net.x_mean.tolist(),
        "x_std": None if net.x_std is None else net.x_std.tolist(),
        "net": net.mlp.to_dict(),
        "history": [float(h) for h in net.history],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_predictor(path) -> PredictorNet:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "platoonsafe-predictor" or doc.get("version") != 1:
        raise ValueError(f"unrecognized predictor document at {path}")
    return PredictorNet(
        role=doc["role"],
        mlp=Mlp.from_dict(doc["net"]),
        x_mean=None if doc["x_mean"] is None else np.asarray(doc["x_mean"]),
        x_std=None if doc["x_std"] is None else np.asarray(doc["x_std"]),
        history=list(doc["history"]),
    )

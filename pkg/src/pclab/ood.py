"""Out-of-distribution detection against a rollout history.

Two detector families behind one score/is_ood interface: a Deep-SVDD-style
one-class model (bias-free embedding net contracted around a fixed center)
and a nearest-neighbor distance baseline. A state is OOD when its score is
strictly greater than the calibrated threshold, so calibration states at the
quantile stay in-distribution.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import nets
from .errors import DimensionMismatchError, NonFiniteGradientError
from .rollouts import METRIC_L1, RolloutHistory, StateIndex

SVDD_FORMAT = "svdd-detector"
SVDD_VERSION = 1


@dataclass
class SvddConfig:
    hidden: tuple = (32, 32)
    embed_dim: int = 8
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    quantile: float = 0.99
    seed: int = 0


@dataclass
class SvddDetector:
    net: nets.DenseNet          # bias-free: guards the degenerate constant map
    center: np.ndarray
    radius_threshold: float
    quantile: float
    input_scale: np.ndarray
    # states are shifted then scaled before embedding; centering the data on
    # the origin matters for a bias-free net (its kink planes pass through 0)
    input_shift: np.ndarray | None = None
    train_digest: str = ""
    calibration_radii: np.ndarray | None = None
    mean_radius_before: float | None = None
    mean_radius_after: float | None = None

    def __post_init__(self):
        if not self.net.bias_free:
            raise ValueError("embedding net must be bias-free")
        if self.input_shift is None:
            self.input_shift = np.zeros(self.net.input_dim)

    @property
    def state_dim(self) -> int:
        return self.net.input_dim

    @property
    def threshold(self) -> float:
        return self.radius_threshold


@dataclass
class KnnDetector:
    index: StateIndex
    distance_threshold: float
    quantile: float

    @property
    def state_dim(self) -> int:
        return self.index.state_dim

    @property
    def threshold(self) -> float:
        return self.distance_threshold


def _embed(detector: SvddDetector, states: np.ndarray) -> np.ndarray:
    return nets.forward(detector.net,
                        (states - detector.input_shift) / detector.input_scale)


def score(detector, s) -> float:
    """Non-negative OOD score; SVDD: embedding radius, kNN: NN distance."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (detector.state_dim,):
        raise DimensionMismatchError(
            f"state dim {s.shape} != detector dim ({detector.state_dim},)")
    if isinstance(detector, KnnDetector):
        return detector.index.nearest(s).distance
    phi = _embed(detector, s)
    return float(np.linalg.norm(phi - detector.center))


def score_batch(detector, states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if isinstance(detector, KnnDetector):
        return np.array([detector.index.nearest(s).distance for s in states])
    phi = _embed(detector, states)
    return np.linalg.norm(phi - detector.center, axis=1)


def is_ood(detector, s) -> bool:
    """Strictly above threshold; the boundary itself is in-distribution."""
    return score(detector, s) > detector.threshold


def fit_svdd(states: np.ndarray, cfg: SvddConfig | None = None,
             input_scale=None, input_shift=None,
             train_digest: str = "") -> SvddDetector:
    """One-class fit: fix the center at the mean initial embedding, then
    minimize the mean squared radius; threshold at the q-quantile of the
    final training radii. input_shift defaults to the training mean so the
    bias-free net sees zero-centered data."""
    cfg = cfg or SvddConfig()
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) < 100:
        raise ValueError("need at least 100 training states")
    dim = states.shape[1]
    scale = (np.ones(dim) if input_scale is None
             else np.asarray(input_scale, dtype=np.float64))
    shift = (states.mean(axis=0) if input_shift is None
             else np.asarray(input_shift, dtype=np.float64))
    x = (states - shift) / scale

    rng = np.random.default_rng(cfg.seed)
    h = list(cfg.hidden)
    net = nets.init_net([dim] + h + [cfg.embed_dim],
                        ["relu"] * len(h) + ["identity"],
                        seed=int(rng.integers(0, 2**31 - 1)), bias_free=True)
    embed0 = nets.forward(net, x)
    center = embed0.mean(axis=0)
    radius_before = float(np.mean(np.linalg.norm(embed0 - center, axis=1)))

    opt = nets.adam_init(net.params(), lr=cfg.lr)
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = x[order[lo:lo + cfg.batch_size]]
            phi, cache = nets.forward_cached(net, batch)
            diff = phi - center
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
            if not np.isfinite(loss):
                raise NonFiniteGradientError("SVDD training diverged")
            upstream = (2.0 / len(batch)) * diff
            grads, _ = nets.backward_from_cache(net, cache, upstream)
            nets.adam_step(net.params(), nets.flatten_grads(net, grads), opt)

    radii = np.linalg.norm(nets.forward(net, x) - center, axis=1)
    rho = float(np.quantile(radii, cfg.quantile))
    return SvddDetector(net=net, center=center, radius_threshold=rho,
                        quantile=cfg.quantile, input_scale=scale,
                        input_shift=shift,
                        train_digest=train_digest, calibration_radii=radii,
                        mean_radius_before=radius_before,
                        mean_radius_after=float(np.mean(radii)))


def fit_knn(history: RolloutHistory, quantile: float = 0.99,
            metric: str = METRIC_L1, weights=None) -> KnnDetector:
    """Threshold at the q-quantile of leave-one-out NN distances on the
    training states."""
    index = StateIndex(history, metric=metric, weights=weights, accel=True)
    pts = index._scaled
    if len(pts) < 2:
        raise ValueError("need at least 2 states for leave-one-out distances")
    d, idx = index._tree.query(pts, k=2, p=1)
    # self-match lands in column 0 unless duplicates tie; pick the column
    # whose index differs from the query row
    rows = np.arange(len(pts))
    loo = np.where(idx[:, 0] != rows, d[:, 0], d[:, 1])
    delta = float(np.quantile(loo, quantile))
    return KnnDetector(index=index, distance_threshold=delta, quantile=quantile)


# ---------------------------------------------------------------------------
# Checkpoints: net + JSON sidecar fields in one file
# ---------------------------------------------------------------------------

def svdd_to_dict(det: SvddDetector) -> dict:
    return {"format": SVDD_FORMAT, "version": SVDD_VERSION,
            "net": nets.net_to_dict(det.net),
            "center": det.center.tolist(),
            "radius_threshold": det.radius_threshold,
            "quantile": det.quantile,
            "input_scale": det.input_scale.tolist(),
            "input_shift": det.input_shift.tolist(),
            "train_digest": det.train_digest,
            "calibration_digest": calibration_digest(det)}


def calibration_digest(det: SvddDetector) -> str:
    if det.calibration_radii is None:
        return ""
    return hashlib.sha256(np.ascontiguousarray(det.calibration_radii).tobytes()).hexdigest()


def svdd_from_dict(d: dict) -> SvddDetector:
    if d.get("format") != SVDD_FORMAT:
        raise ValueError("not an SVDD detector checkpoint")
    if d.get("version") != SVDD_VERSION:
        raise ValueError(f"unsupported detector version {d.get('version')}")
    return SvddDetector(net=nets.net_from_dict(d["net"]),
                        center=np.asarray(d["center"]),
                        radius_threshold=d["radius_threshold"],
                        quantile=d["quantile"],
                        input_scale=np.asarray(d["input_scale"]),
                        input_shift=np.asarray(d["input_shift"]),
                        train_digest=d.get("train_digest", ""))


def save_svdd(det: SvddDetector, path, radii_path=None) -> None:
    with open(path, "w") as f:
        json.dump(svdd_to_dict(det), f)
    if radii_path is not None and det.calibration_radii is not None:
        with open(radii_path, "w") as f:
            json.dump({"radii": det.calibration_radii.tolist()}, f)


def load_svdd(path) -> SvddDetector:
    with open(path) as f:
        return svdd_from_dict(json.load(f))

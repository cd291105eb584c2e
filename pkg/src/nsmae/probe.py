"""Linear-probe transfer proxy: per-voxel occupancy readout from frozen fused features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .checkpoint import Checkpoint
from .dataio import Sample, voxelize
from .embednet import embed
from .masking import mask_image
from .optim import OptimState, adamw_step
from .synth import SceneSpec


class ProbeError(ValueError):
    pass


@dataclass
class ProbeMetrics:
    auc: float
    accuracy: float
    n_train: int
    n_test: int
    positive_rate: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ProbeError("AUC is undefined for single-class labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def scene_features(params: dict, samples: list[Sample], cfg: dict) -> np.ndarray:
    """Fused features at every voxel of every sample, inputs left unmasked; (S*V, C)."""
    from .trainer import grid_from_config, net_shape

    grid = grid_from_config(cfg)
    shape = net_shape(cfg)
    feats = []
    for s in samples:
        masked = [mask_image(img, shape.patch, 0.0) for img in s.images]
        vol = embed([masked], [s.cameras], [voxelize(s.cloud, grid)], grid, params, shape)
        feats.append(np.asarray(vol.values))
    return np.concatenate(feats)


def occupancy_labels(samples: list[Sample], cfg: dict) -> np.ndarray:
    from .trainer import grid_from_config

    grid = grid_from_config(cfg)
    centers = grid.voxel_centers()
    out = []
    for s in samples:
        if s.scene is None:
            raise ProbeError("occupancy probe needs samples with a known scene")
        out.append(SceneSpec.from_dict(s.scene).occupancy(centers))
    return np.concatenate(out).astype(bool)


def fit_probe(x: np.ndarray, y: np.ndarray, steps: int = 200, lr: float = 0.05, seed: int = 0,
              weight_decay: float = 0.01) -> tuple[np.ndarray, float]:
    """Logistic regression trained with AdamW on the mean cross-entropy.

    Returns ``(w, b)``. ``seed`` sets the small random initial weights.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.min() == y.max():
        raise ProbeError("probe labels are a single class")
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(0.0, 0.01, size=x.shape[1]), "b": np.zeros(())}
    state = OptimState.zeros_like(params, weight_decay=weight_decay)
    n = x.shape[0]
    for _ in range(steps):
        z = x @ params["w"] + params["b"]
        r = (expit(z) - y) / n
        grads = {"w": x.T @ r, "b": np.asarray(r.sum())}
        params, state = adamw_step(params, grads, state, lr)
    return params["w"], float(params["b"])


def probe_loss(x, y, w, b) -> float:
    z = x @ w + b
    return float(-np.mean(y * log_expit(z) + (1 - y) * log_expit(-z)))


def linear_probe_eval(ckpt: Checkpoint | dict, train: list[Sample], test: list[Sample], cfg: dict,
                      seed: int = 0, labels=None) -> ProbeMetrics:
    """Freeze the embedding, fit a readout on ``train`` scenes, report AUC on ``test``.

    Features are standardized with training-set statistics so that encoders
    with different activation scales are compared on equal footing.
    ``labels`` optionally replaces the occupancy labels as ``(y_train, y_test)``.
    """
    params = ckpt.params if isinstance(ckpt, Checkpoint) else ckpt
    x_tr, x_te = scene_features(params, train, cfg), scene_features(params, test, cfg)
    if labels is None:
        y_tr, y_te = occupancy_labels(train, cfg), occupancy_labels(test, cfg)
    else:
        y_tr, y_te = (np.asarray(a, dtype=bool) for a in labels)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    p = cfg["probe"]
    w, b = fit_probe(x_tr, y_tr, p["steps"], p["lr"], seed)
    z = x_te @ w + b
    return ProbeMetrics(roc_auc(z, y_te), float(np.mean((z > 0) == y_te)), int(y_tr.size), int(y_te.size),
                        float(y_te.mean()))


def probe_split(cfg: dict) -> tuple[list[Sample], list[Sample]]:
    from .trainer import synth_samples

    p = cfg["probe"]
    train = synth_samples(cfg, p["train_scenes"], p["scene_seed"])
    test = synth_samples(cfg, p["test_scenes"], p["scene_seed"] + p["train_scenes"])
    return train, test

"""Reconstruction losses and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng

COLOR = "C"
DEPTH_PER = "D_PER"
DEPTH_BEV = "D_BEV"


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossTerm:
    target: str
    p: int
    weight: float

    def __post_init__(self):
        if self.p not in (1, 2):
            raise LossError(f"{self.target}: exponent p must be 1 or 2, got {self.p}")
        if not self.weight >= 0:
            raise LossError(f"{self.target}: coefficient must be non-negative, got {self.weight}")


@dataclass(frozen=True)
class LossConfig:
    terms: tuple[LossTerm, ...] = (
        LossTerm(COLOR, 2, 1e4),
        LossTerm(DEPTH_PER, 1, 1e-2),
        LossTerm(DEPTH_BEV, 1, 1e-2),
    )

    def __post_init__(self):
        names = [t.target for t in self.terms]
        if len(set(names)) != len(names):
            raise LossError(f"duplicate loss targets in {names}")

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(t.weight for t in self.terms)

    def term(self, target: str) -> LossTerm:
        for t in self.terms:
            if t.target == target:
                return t
        raise LossError(f"no loss term for target {target!r}")

    def scaled(self, factor: float) -> "LossConfig":
        return LossConfig(tuple(LossTerm(t.target, t.p, t.weight * factor) for t in self.terms))

    def to_list(self) -> list[dict]:
        return [{"target": t.target, "p": t.p, "weight": t.weight} for t in self.terms]

    @classmethod
    def from_list(cls, items: list[dict]) -> "LossConfig":
        return cls(tuple(LossTerm(d["target"], int(d["p"]), float(d["weight"])) for d in items))


@dataclass
class LossReport:
    raw: dict[str, float]
    weighted: dict[str, float]
    counts: dict[str, int]
    total: float
    total_var: object = field(default=None, repr=False)  # tape variable, when differentiable

    def to_json(self) -> dict:
        return {"raw": self.raw, "weighted": self.weighted, "counts": self.counts, "total": self.total}


def color_loss(rendered, target) -> object:
    """Mean over rays of the squared L2 color error.

    ``rendered`` is (R, 3); ``target`` is an (R, 3) array of ground truth.
    """
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[0]
    if n == 0:
        raise LossError("color loss over an empty ray set")
    diff = ng.abspow(rendered - target, 2)
    return ng.sum_(diff) * (1.0 / n)


def modality_loss(rendered, target, p: int, valid=None) -> object:
    """Mean over valid rays of ``||pred - target||_p^p``.

    ``rendered``/``target`` are (R,) or (R, K); invalid rays contribute
    nothing and are not counted.
    """
    target = np.asarray(target, dtype=np.float64)
    valid = np.ones(target.shape[0], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise LossError("modality loss has no valid rays")
    if p not in (1, 2):
        raise LossError(f"exponent p must be 1 or 2, got {p}")
    mask = valid.astype(np.float64)
    if target.ndim == 2:
        mask = mask[:, None]
    safe_target = np.where(mask > 0, target, 0.0)
    err = ng.abspow(rendered - safe_target, p) * mask
    return ng.sum_(err) * (1.0 / n)


def total_loss(raws: dict, config: LossConfig, counts: dict | None = None) -> LossReport:
    """sum_k lambda_k L_k over the configured targets.

    ``raws`` maps target id to a raw loss (float or tape variable).
    """
    for t in config.terms:
        if t.target not in raws:
            raise LossError(f"missing raw loss for target {t.target!r}")
    total = None
    raw_f, weighted_f = {}, {}
    for t in config.terms:
        term = raws[t.target] * t.weight
        total = term if total is None else total + term
        raw_f[t.target] = float(ng.value(raws[t.target]))
        weighted_f[t.target] = float(ng.value(term))
    if total is None:
        total = 0.0
    # compensated sum keeps the reported float independent of term order
    total_f = math.fsum(weighted_f.values())
    return LossReport(raw_f, weighted_f, dict(counts or {}), total_f,
                      total if isinstance(total, ng.Var) else None)

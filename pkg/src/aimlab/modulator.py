"""Auxiliary-weak interaction and depth-adaptive aggregation of block losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

METRIC_KINDS = ("cv", "mad", "variance", "std")


class DegeneratePerformanceError(ValueError):
    pass


def ema(prev, batch, momentum: float):
    """Exponential moving average; ``prev is None`` means first batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if prev is None:
        return batch.copy()
    return momentum * np.asarray(prev) + (1.0 - momentum) * batch


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def imbalance(s, metric: str = "cv") -> float:
    """Spread of per-modality performance ``s`` (population normalisation)."""
    s = np.asarray(s, dtype=np.float64)
    dev = s - s.mean()
    if metric == "cv":
        if s.mean() <= 0:
            raise DegeneratePerformanceError("coefficient of variation needs a positive mean")
        return float(np.sqrt(np.mean(dev ** 2)) / s.mean())
    if metric == "mad":
        return float(np.mean(np.abs(dev)))
    if metric == "variance":
        return float(np.mean(dev ** 2))
    if metric == "std":
        return float(np.sqrt(np.mean(dev ** 2)))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class ModulationRecord:
    """Per-depth, per-modality modulation state; ``s[d][m]`` with 0-based ``d``."""

    D: int
    M: int
    metric_kind: str = "cv"
    ema_momentum: float = 0.9
    s: np.ndarray | None = None
    s_aux: np.ndarray | None = None
    s_hat: np.ndarray = field(init=False)
    alpha: np.ndarray = field(init=False)
    L_block: np.ndarray = field(init=False)
    L_aux: np.ndarray = field(init=False)
    L_depth: np.ndarray = field(init=False)
    L_mod: float = 0.0

    def __post_init__(self):
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.metric_kind!r}")
        self.s_hat = np.full((self.D, self.M), 1.0 / self.M)
        self.alpha = np.zeros(self.D)
        self.L_block = np.zeros((self.D, self.M))
        self.L_aux = np.zeros((self.D, self.M))
        self.L_depth = np.zeros(self.D)

    def estimate_performance(self, s_batch, s_aux_batch=None) -> None:
        """Blend batch estimates into ``s``, then refresh ``s_hat`` and ``alpha``."""
        self.s = ema(self.s, s_batch, self.ema_momentum)
        if s_aux_batch is not None:
            self.s_aux = ema(self.s_aux, s_aux_batch, self.ema_momentum)
        for d in range(self.D):
            self.s_hat[d] = modality_weights(self, d)
            self.alpha[d] = imbalance_level(self, d, self.metric_kind)


def estimate_performance(rec: ModulationRecord, s_batch, s_aux_batch=None) -> ModulationRecord:
    rec.estimate_performance(s_batch, s_aux_batch)
    return rec


def modality_weights(rec: ModulationRecord, d: int) -> np.ndarray:
    """Softmax over modalities of ``s[d]``; constants for every downstream loss."""
    return softmax(rec.s[d])


def imbalance_level(rec: ModulationRecord, d: int, metric_kind: str | None = None) -> float:
    return imbalance(rec.s[d], metric_kind or rec.metric_kind)


def depth_loss(s_hat_d, l_block: list, l_aux: list | None) -> Tensor:
    """``sum_m (1 - s_hat_m) * L_block_m + s_hat_m * L_aux_m``.

    ``l_aux=None`` drops the auxiliary terms (the variant without parameter
    decoupling). Weights enter as detached constants.
    """
    total = None
    for m, lb in enumerate(l_block):
        w = float(s_hat_d[m])
        term = ad.scalar_mul(lb, 1.0 - w)
        if l_aux is not None:
            term = term + ad.scalar_mul(l_aux[m], w)
        total = term if total is None else total + term
    return total


def total_modulation_loss(alpha, l_depth: list, unit_alpha: bool = False) -> Tensor:
    """``sum_d alpha_d * L_d``; ``unit_alpha`` sets every depth weight to 1."""
    total = None
    for a, ld in zip(alpha, l_depth):
        term = ld if unit_alpha else ad.scalar_mul(ld, float(a))
        total = term if total is None else total + term
    return total

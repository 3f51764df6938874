"""Training objectives for LLR estimation and window classification.

The LSEL objective averages log(1 + sum_{l != y} exp(-lambda_yl(t))) over
samples and timesteps; since the trajectory's diagonal lambda_yy is exactly
zero, this is a plain log-sum-exp over the true-class row of -lambda, which
is how it is computed here (stable by construction). Multiplet
cross-entropy is the mean negative log posterior of the true class over
every full- and short-window posterior the integrator produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, DomainError, ShapeError, Tensor
from .tandem import LLRMatrixTrajectory, PosteriorTrajectoryPair


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's objective values and their convex mix."""

    lsel: float
    mce: float
    total: float
    llre_ratio: float

    @classmethod
    def build(cls, lsel_value: float, mce_value: float, llre_ratio: float) -> "LossBreakdown":
        return cls(
            lsel=float(lsel_value),
            mce=float(mce_value),
            total=combine(lsel_value, mce_value, llre_ratio),
            llre_ratio=float(llre_ratio),
        )


def _onehot(labels: Array, num_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ShapeError(f"labels must be a nonempty 1-D array, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"labels must lie in [0, {num_classes}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def lsel_graph(llr: Tensor, labels: Array) -> Tensor:
    """Differentiable LSEL over a (B, S, K, K) trajectory tensor."""
    b, s, k, _ = llr.shape
    onehot = Tensor(_onehot(labels, k).reshape(b, 1, k, 1))
    true_rows = dc.sum_axis(dc.multiply(llr, onehot), axis=2)  # (B, S, K) of lambda_yl
    per_step = dc.logsumexp(dc.scale(true_rows, -1.0))  # (B, S)
    return dc.scale(dc.sum_axis(per_step), 1.0 / (b * s))


def mce_graph(log_posterior_families: list[Tensor], labels: Array) -> Tensor:
    """Differentiable multiplet cross-entropy over posterior families.

    Each family is (B, S_f, K) log posteriors; the result is the mean of
    -log p[y] over every window in every family.
    """
    families = [f for f in log_posterior_families if f is not None and f.shape[1] > 0]
    if not families:
        raise ShapeError("mce: no posterior families supplied")
    k = families[0].shape[-1]
    onehot = Tensor(_onehot(labels, k).reshape(-1, 1, k))
    total = None
    count = 0
    for fam in families:
        picked = dc.sum_axis(dc.multiply(fam, onehot), axis=2)  # (B, S_f)
        fam_sum = dc.sum_axis(picked)
        total = fam_sum if total is None else dc.add(total, fam_sum)
        count += fam.shape[0] * fam.shape[1]
    return dc.scale(total, -1.0 / count)


def lsel(trajectories: list[LLRMatrixTrajectory], labels) -> float:
    """Mean LSEL of a batch of equally-shaped LLR trajectories."""
    if not trajectories:
        raise ShapeError("lsel: empty batch")
    values = np.stack([t.values for t in trajectories])
    return float(lsel_graph(Tensor(values), np.asarray(labels)).data)


def mce(pairs: list[PosteriorTrajectoryPair], labels) -> float:
    """Mean multiplet cross-entropy of a batch of posterior pairs."""
    if not pairs:
        raise ShapeError("mce: empty batch")
    labels = np.asarray(labels)
    k = pairs[0].num_classes
    _onehot(labels, k)  # validates labels
    total, count = 0.0, 0
    for pair, y in zip(pairs, labels):
        for family in (pair.full, pair.short):
            if family.size == 0:
                continue
            if np.any(family[:, y] <= 0):
                raise DomainError("mce: zero posterior at the true class")
            total += -np.log(family[:, y]).sum()
            count += len(family)
    return total / count


def combine(lsel_value: float, mce_value: float, llre_ratio: float) -> float:
    """Convex combination ratio * lsel + (1 - ratio) * mce."""
    if not 0.0 <= llre_ratio <= 1.0:
        raise DomainError(f"llre_ratio must be in [0, 1], got {llre_ratio}")
    if llre_ratio == 1.0:
        return float(lsel_value)
    if llre_ratio == 0.0:
        return float(mce_value)
    return float(llre_ratio * lsel_value + (1.0 - llre_ratio) * mce_value)

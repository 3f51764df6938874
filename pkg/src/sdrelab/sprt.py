"""Multiclass sequential probability ratio test over LLR trajectories.

A class k wins at the first timestep where its worst pairwise margin
min_{l != k} (lambda_kl - a_kl) is nonnegative. If nothing crosses by the
horizon the decision is forced to the class with the largest worst margin
at the final step and flagged as such. Speed-accuracy curves sweep a scalar
threshold and report per-class error against mean hitting time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Array, DomainError, ShapeError
from .tandem import LLRMatrixTrajectory


@dataclass
class ThresholdMatrix:
    """Pairwise decision thresholds a_kl; the diagonal is ignored."""

    values: Array

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeError(f"thresholds must be square, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("thresholds must be finite")

    @classmethod
    def scalar(cls, a: float, num_classes: int) -> "ThresholdMatrix":
        """All off-diagonal thresholds equal to a."""
        values = np.full((num_classes, num_classes), float(a))
        np.fill_diagonal(values, 0.0)
        return cls(values)


@dataclass
class SPRTOutcome:
    decided_class: int
    stopping_time: int
    forced: bool


def _worst_margins(values: Array, thresholds: Array) -> Array:
    """min over l != k of lambda_kl - a_kl, shape (steps, K)."""
    gap = values - thresholds[None, :, :]
    k = values.shape[1]
    gap[:, np.arange(k), np.arange(k)] = np.inf
    return gap.min(axis=2)


def sprt_run(llrs: LLRMatrixTrajectory, thresholds: ThresholdMatrix) -> SPRTOutcome:
    """Stop at the first timestep where some class clears every pairwise bar.

    Ties at the same timestep go to the largest worst margin, then the
    lowest class index. Without any crossing by the horizon, the decision
    is the final argmax of worst margins with forced=True.
    """
    if len(llrs.values) == 0:
        raise ShapeError("sprt_run: empty trajectory")
    if thresholds.values.shape[0] != llrs.num_classes:
        raise ShapeError(
            f"threshold matrix is {thresholds.values.shape[0]}-class, trajectory is {llrs.num_classes}"
        )
    margins = _worst_margins(llrs.values.copy(), thresholds.values)
    hits = margins >= 0.0
    step_hit = hits.any(axis=1)
    if step_hit.any():
        i = int(np.argmax(step_hit))
        row = np.where(hits[i], margins[i], -np.inf)
        return SPRTOutcome(
            decided_class=int(np.argmax(row)),
            stopping_time=llrs.start_t + i,
            forced=False,
        )
    return SPRTOutcome(
        decided_class=int(np.argmax(margins[-1])),
        stopping_time=llrs.horizon,
        forced=True,
    )


@dataclass
class SATPoint:
    threshold: float
    mean_hitting_time: float
    mean_per_class_error: float
    sem_hitting_time: float
    sem_error: float


def _per_class_error(decisions: Array, labels: Array) -> float:
    classes = np.unique(labels)
    errors = []
    for c in classes:
        mask = labels == c
        errors.append(float(np.mean(decisions[mask] != c)))
    return float(np.mean(errors))


def sat_curve(
    groups: list[tuple[list[LLRMatrixTrajectory], Array]],
    thresholds: list[float],
) -> list[SATPoint]:
    """Speed-accuracy tradeoff over a scalar threshold sweep.

    ``groups`` holds one (trajectories, labels) pair per repetition (seed);
    the returned means are over repetitions and the SEMs are the sample
    standard deviation across repetitions divided by sqrt(#repetitions).
    """
    if not groups or not thresholds:
        raise ShapeError("sat_curve: need at least one group and one threshold")
    for trajs, labels in groups:
        labels = np.asarray(labels)
        k = trajs[0].num_classes
        if set(np.unique(labels).tolist()) != set(range(k)):
            raise DomainError("sat_curve: every class must appear in the dataset")
    points = []
    for a in thresholds:
        times, errors = [], []
        for trajs, labels in groups:
            labels = np.asarray(labels)
            tm = ThresholdMatrix.scalar(a, trajs[0].num_classes)
            outcomes = [sprt_run(t, tm) for t in trajs]
            times.append(float(np.mean([o.stopping_time for o in outcomes])))
            errors.append(_per_class_error(np.array([o.decided_class for o in outcomes]), labels))
        g = len(groups)
        points.append(SATPoint(
            threshold=float(a),
            mean_hitting_time=float(np.mean(times)),
            mean_per_class_error=float(np.mean(errors)),
            sem_hitting_time=float(np.std(times, ddof=1) / np.sqrt(g)) if g > 1 else 0.0,
            sem_error=float(np.std(errors, ddof=1) / np.sqrt(g)) if g > 1 else 0.0,
        ))
    return points


def wald_error_probe(a: float, trajectories: list[LLRMatrixTrajectory], labels) -> float:
    """Empirical misclassification rate of the symmetric binary test.

    Only non-forced decisions count; with i.i.d. increments the rate should
    sit below exp(-a) (threshold crossing bound, overshoot ignored).
    """
    labels = np.asarray(labels)
    if trajectories and trajectories[0].num_classes != 2:
        raise ShapeError("wald_error_probe: binary trajectories only")
    tm = ThresholdMatrix.scalar(a, 2)
    wrong = 0
    decided = 0
    for traj, y in zip(trajectories, labels):
        outcome = sprt_run(traj, tm)
        if outcome.forced:
            continue
        decided += 1
        wrong += int(outcome.decided_class != y)
    if decided == 0:
        raise DomainError("wald_error_probe: every trial was forced; horizon too short")
    return wrong / decided

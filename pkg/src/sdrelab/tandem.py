"""Assembling LLR-matrix trajectories from sliding-window posteriors.

The TANDEM decomposition writes the sequence log-likelihood ratio under an
N-th order Markov assumption as a difference of two running sums of
posterior log-ratios: windows of N+1 frames ending at s = N+1..t, minus
windows of N frames ending at s-1 = N+1..t-1. Everything here is expressed
through per-class evidence scores A_k(t), so the pairwise matrix
lambda_kl = A_k - A_l is antisymmetric with a zero diagonal by construction.

The Oblivion baseline keeps only the newest window's posterior log-ratio,
discarding the accumulated sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Array, DomainError, ShapeError, Tensor

POSTERIOR_ATOL = 1e-12


@dataclass
class LLRMatrixTrajectory:
    """Pairwise LLR matrices for timesteps start_t..horizon (inclusive)."""

    values: Array  # (steps, K, K)
    markov_order: int
    horizon: int
    start_t: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise ShapeError(f"trajectory values must be (steps, K, K), got {self.values.shape}")
        if len(self.values) != self.horizon - self.start_t + 1:
            raise ShapeError(
                f"trajectory covers {len(self.values)} steps but start_t={self.start_t}, "
                f"horizon={self.horizon}"
            )

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def timesteps(self) -> Array:
        return np.arange(self.start_t, self.horizon + 1)

    def at(self, t: int) -> Array:
        """K x K LLR matrix at absolute timestep t."""
        if not self.start_t <= t <= self.horizon:
            raise IndexError(f"t={t} outside [{self.start_t}, {self.horizon}]")
        return self.values[t - self.start_t]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise DomainError("trajectory contains non-finite LLRs")
        if not np.array_equal(self.values, -np.swapaxes(self.values, 1, 2)):
            raise DomainError("trajectory is not exactly antisymmetric")


@dataclass
class PosteriorTrajectoryPair:
    """Per-timestep class posteriors over the two window families.

    ``full[i]`` is the posterior of the N+1-frame window ending at
    s = markov_order+1+i; ``short[i]`` the posterior of the N-frame window
    ending at s-1 for s = markov_order+2+i. ``priors`` stand in for the
    short family when N = 0 (a window with no frames carries only the
    prior). ``prefix``, when present, holds posteriors of the growing
    startup windows x(1..t) for t = 1..N, which extend the trajectory back
    to t = 1.
    """

    full: Array  # (T - N, K)
    short: Array  # (max(T - N - 1, 0), K) — empty when N == 0
    priors: Array  # (K,)
    markov_order: int
    horizon: int
    prefix: Array | None = field(default=None)

    def __post_init__(self):
        self.full = np.asarray(self.full, dtype=np.float64)
        self.short = np.asarray(self.short, dtype=np.float64).reshape(-1, self.full.shape[-1])
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.prefix is not None:
            self.prefix = np.asarray(self.prefix, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.full.shape[-1]

    def validate(self) -> None:
        n, t = self.markov_order, self.horizon
        if not 0 <= n <= t - 1:
            raise ShapeError(f"markov_order={n} incompatible with horizon={t}")
        if len(self.full) != t - n:
            raise ShapeError(f"expected {t - n} full-window posteriors, got {len(self.full)}")
        expected_short = t - n - 1 if n >= 1 else 0
        if len(self.short) != expected_short:
            raise ShapeError(f"expected {expected_short} short-window posteriors, got {len(self.short)}")
        if self.prefix is not None and len(self.prefix) != n:
            raise ShapeError(f"expected {n} prefix posteriors, got {len(self.prefix)}")
        families = [self.full, self.short, self.priors[None]]
        if self.prefix is not None:
            families.append(self.prefix)
        for fam in families:
            if fam.size == 0:
                continue
            if np.any(fam <= 0):
                raise DomainError("posterior entries must be strictly positive")
            if np.max(np.abs(fam.sum(axis=-1) - 1.0)) > POSTERIOR_ATOL:
                raise DomainError("posteriors must sum to 1")


def sliding_windows(frames: Array, markov_order: int) -> tuple[Array, Array]:
    """Complete full and short window stacks for one sequence.

    Returns ``(full, short)`` where full has shape (T-N, N+1, d) with the
    window ending at s = N+1..T, and short has shape (T-N-1, N, d) with the
    window ending at s-1 for s = N+2..T (empty when N = 0).
    """
    frames = np.asarray(frames, dtype=np.float64)
    t_max = frames.shape[0]
    n = int(markov_order)
    if n < 0:
        raise ShapeError(f"markov_order must be nonnegative, got {n}")
    if n >= t_max:
        raise ShapeError(f"markov_order={n} must be < sequence length {t_max}")
    full = np.stack([frames[s - n - 1 : s] for s in range(n + 1, t_max + 1)])
    if n == 0:
        short = np.empty((0, 0, frames.shape[1]))
    else:
        short = np.stack([frames[s - n - 1 : s - 1] for s in range(n + 2, t_max + 1)]) \
            if t_max - n - 1 > 0 else np.empty((0, n, frames.shape[1]))
    return full, short


def prefix_windows(frames: Array, markov_order: int) -> list[Array]:
    """Growing startup windows x(1..t) for t = 1..N."""
    frames = np.asarray(frames, dtype=np.float64)
    return [frames[:t] for t in range(1, markov_order + 1)]


def pairwise_from_scores(scores: Array) -> Array:
    """lambda_kl = scores_k - scores_l over the last axis; exactly antisymmetric."""
    return scores[..., :, None] - scores[..., None, :]


def _log_posteriors(p: Array, what: str) -> Array:
    if np.any(p <= 0):
        raise DomainError(f"{what}: zero or negative posterior entry")
    return np.log(p)


def _evidence_scores(pair: PosteriorTrajectoryPair) -> Array:
    """Per-class running evidence A_k(t) for t = N+1..T."""
    logf = _log_posteriors(pair.full, "tandem_llr full posteriors")
    steps = len(pair.full)
    if pair.markov_order == 0:
        logs = np.broadcast_to(_log_posteriors(pair.priors, "priors"), (steps - 1, pair.num_classes))
    else:
        logs = _log_posteriors(pair.short, "tandem_llr short posteriors")
    cum_full = np.cumsum(logf, axis=0)
    cum_short = np.zeros_like(cum_full)
    if steps > 1:
        cum_short[1:] = np.cumsum(logs, axis=0)
    return cum_full - cum_short


def tandem_llr(pair: PosteriorTrajectoryPair) -> LLRMatrixTrajectory:
    """LLR trajectory on t = N+1..T from the two window families."""
    pair.validate()
    return LLRMatrixTrajectory(
        values=pairwise_from_scores(_evidence_scores(pair)),
        markov_order=pair.markov_order,
        horizon=pair.horizon,
        start_t=pair.markov_order + 1,
    )


def oblivion_llr(pair: PosteriorTrajectoryPair) -> LLRMatrixTrajectory:
    """Instantaneous log posterior-ratio of the newest full window only."""
    pair.validate()
    scores = _log_posteriors(pair.full, "oblivion_llr full posteriors")
    return LLRMatrixTrajectory(
        values=pairwise_from_scores(scores),
        markov_order=pair.markov_order,
        horizon=pair.horizon,
        start_t=pair.markov_order + 1,
    )


def _extended(pair: PosteriorTrajectoryPair, tail_scores: Array) -> LLRMatrixTrajectory:
    if pair.prefix is None:
        raise ShapeError("extended trajectory needs prefix posteriors for t = 1..N")
    head = _log_posteriors(pair.prefix, "prefix posteriors") if pair.markov_order else \
        np.empty((0, pair.num_classes))
    scores = np.concatenate([head, tail_scores], axis=0)
    return LLRMatrixTrajectory(
        values=pairwise_from_scores(scores),
        markov_order=pair.markov_order,
        horizon=pair.horizon,
        start_t=1,
    )


def extended_tandem_llr(pair: PosteriorTrajectoryPair) -> LLRMatrixTrajectory:
    """TANDEM trajectory extended back to t = 1 via the startup windows.

    For t <= N the N-th order decomposition over the windows available so
    far telescopes exactly to the posterior log-ratio of x(1..t), so the
    head is read off pair.prefix directly; values on t >= N+1 are bit-equal
    to tandem_llr's.
    """
    pair.validate()
    return _extended(pair, _evidence_scores(pair))


def extended_oblivion_llr(pair: PosteriorTrajectoryPair) -> LLRMatrixTrajectory:
    """Oblivion trajectory extended back to t = 1 (newest window's ratio)."""
    pair.validate()
    return _extended(pair, _log_posteriors(pair.full, "oblivion_llr full posteriors"))


# --- differentiable (Tensor) versions used by the training loop ------------

def evidence_scores_graph(
    full_logp: Tensor,
    short_logp: Tensor | None,
    log_priors: Array,
    markov_order: int,
) -> Tensor:
    """Batched per-class evidence A_k(t), t = N+1..T, as a Tensor graph.

    ``full_logp`` is (B, T-N, K) log posteriors of the full windows;
    ``short_logp`` is (B, T-N-1, K) or None when N = 0, in which case the
    log priors are charged for every short slot.
    """
    batch, steps, k = full_logp.shape
    cum_full = dc.cumsum(full_logp, axis=1)
    if steps == 1:
        return cum_full
    if markov_order == 0 or short_logp is None:
        prior_rows = np.cumsum(
            np.broadcast_to(np.asarray(log_priors, dtype=np.float64), (steps - 1, k)), axis=0
        )
        cum_short = Tensor(np.concatenate([np.zeros((1, k)), prior_rows])[None].repeat(batch, axis=0))
        return dc.add(cum_full, dc.scale(cum_short, -1.0))
    zero_row = Tensor(np.zeros((batch, 1, k)))
    cum_short = dc.concat([zero_row, dc.cumsum(short_logp, axis=1)], axis=1)
    return dc.add(cum_full, dc.scale(cum_short, -1.0))


def trajectory_scores_graph(
    prefix_logp: Tensor | None,
    full_logp: Tensor,
    short_logp: Tensor | None,
    log_priors: Array,
    markov_order: int,
    formula: str = "tandem",
) -> Tensor:
    """Per-class scores over t = 1..T (with prefix) or t = N+1..T (without)."""
    if formula == "tandem":
        tail = evidence_scores_graph(full_logp, short_logp, log_priors, markov_order)
    elif formula == "oblivion":
        tail = full_logp
    else:
        raise ValueError(f"unknown formula {formula!r}")
    if prefix_logp is None or markov_order == 0:
        return tail
    return dc.concat([prefix_logp, tail], axis=1)


def pairwise_llr_graph(scores: Tensor) -> Tensor:
    """(B, S, K) scores -> (B, S, K, K) antisymmetric LLR matrices."""
    b, s, k = scores.shape
    left = dc.reshape(scores, (b, s, k, 1))
    right = dc.reshape(scores, (b, s, 1, k))
    return dc.add(left, dc.scale(right, -1.0))

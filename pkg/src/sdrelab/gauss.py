"""Simulated sequential Gaussian datasets with analytic ground-truth LLRs.

Class k emits i.i.d. frames from N(mu_k, I) where mu_k puts the offset on
coordinate k, so per-class log-evidence at time t is the running sum of
x_s . mu_k - |mu_k|^2 / 2 and every pairwise LLR, posterior, and KL rate is
available in closed form. This module is the oracle the estimated
trajectories are judged against.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffcore import Array, DomainError, ShapeError
from .tandem import LLRMatrixTrajectory, pairwise_from_scores

_FORMAT = "sdrelab-dataset-v1"


@dataclass(frozen=True)
class GaussianSpec:
    """Generator knobs for one split of the simulated dataset."""

    offset: float
    dim: int = 128
    num_classes: int = 2
    horizon: int = 50
    per_class_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.offset <= 0:
            raise DomainError(f"offset must be positive, got {self.offset}")
        if self.num_classes < 2:
            raise DomainError(f"need at least 2 classes, got {self.num_classes}")
        if self.dim < self.num_classes:
            raise ShapeError(f"dim={self.dim} cannot host {self.num_classes} distinct class means")
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if self.per_class_count < 0:
            raise DomainError("per_class_count must be nonnegative")

    @property
    def means(self) -> Array:
        m = np.zeros((self.num_classes, self.dim))
        for k in range(self.num_classes):
            m[k, k] = self.offset
        return m

    @property
    def total_count(self) -> int:
        return self.num_classes * self.per_class_count


@dataclass
class FeatureSequence:
    """One time series of feature vectors with its class label."""

    frames: Array  # (T, dim)
    label: int
    sample_id: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"frames must be (T, dim), got {self.frames.shape}")


def standard_normal(rng: np.random.Generator, size) -> Array:
    """Box-Muller draws from a seeded uniform stream."""
    n = int(np.prod(size))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # in (0, 1], keeps the log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(size)


def derive_seeds(master_seed: int, n: int) -> list[int]:
    """n reproducible, mutually independent integer seeds."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n, dtype=np.uint64)]


def make_dataset(spec: GaussianSpec) -> list[FeatureSequence]:
    """Balanced i.i.d. Gaussian sequences, deterministic given spec.seed.

    Each sequence draws from its own child stream of the generator seed, so
    generation could be parallelized per sequence without changing output.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.total_count)
    means = spec.means
    out: list[FeatureSequence] = []
    idx = 0
    for label in range(spec.num_classes):
        for _ in range(spec.per_class_count):
            rng = np.random.default_rng(children[idx])
            frames = means[label] + standard_normal(rng, (spec.horizon, spec.dim))
            out.append(FeatureSequence(frames=frames, label=label, sample_id=idx))
            idx += 1
    return out


def frames_and_labels(dataset: list[FeatureSequence]) -> tuple[Array, Array]:
    """Stack a dataset into (M, T, dim) frames and (M,) labels."""
    frames = np.stack([seq.frames for seq in dataset])
    labels = np.array([seq.label for seq in dataset], dtype=np.int64)
    return frames, labels


def true_score_matrix(frames: Array, spec: GaussianSpec) -> Array:
    """Running per-class log-evidence, shape (..., T, K).

    Pairwise differences of these scores are the exact LLR trajectories;
    the common -|x|^2/2 term cancels there and is dropped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    means = spec.means
    per_frame = frames @ means.T - 0.5 * np.sum(means**2, axis=1)
    return np.cumsum(per_frame, axis=-2)


def true_llr(seq: FeatureSequence | Array, spec: GaussianSpec) -> LLRMatrixTrajectory:
    """Ground-truth LLR trajectory of one sequence, defined for t = 1..T."""
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if frames.shape != (spec.horizon, spec.dim):
        raise ShapeError(f"frames shape {frames.shape} does not match spec ({spec.horizon}, {spec.dim})")
    return LLRMatrixTrajectory(
        values=pairwise_from_scores(true_score_matrix(frames, spec)),
        markov_order=0,
        horizon=spec.horizon,
        start_t=1,
    )


def true_posterior(window: Array, spec: GaussianSpec, priors: Array | None = None) -> Array:
    """Bayes posterior over classes given a window of frames."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    if window.shape[0] == 0:
        raise ShapeError("true_posterior: empty window")
    if priors is None:
        priors = np.full(spec.num_classes, 1.0 / spec.num_classes)
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(priors <= 0):
        raise DomainError("priors must be strictly positive")
    means = spec.means
    log_joint = (
        np.log(priors)
        + (window @ means.T).sum(axis=0)
        - 0.5 * window.shape[0] * np.sum(means**2, axis=1)
    )
    log_joint -= log_joint.max()
    post = np.exp(log_joint)
    return post / post.sum()


def save_dataset(path: str | Path, dataset: list[FeatureSequence], spec: GaussianSpec) -> None:
    """Write a dataset as a one-line JSON header plus float64 LE payload."""
    frames, labels = frames_and_labels(dataset)
    header = {
        "format": _FORMAT,
        "spec": asdict(spec),
        "count": len(dataset),
        "horizon": spec.horizon,
        "dim": spec.dim,
        "labels": labels.tolist(),
        "sample_ids": [seq.sample_id for seq in dataset],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(frames, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> tuple[list[FeatureSequence], GaussianSpec]:
    """Read a dataset written by save_dataset, validating shape and count."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != _FORMAT:
        raise ValueError(f"not a {_FORMAT} file: format={header.get('format')!r}")
    spec = GaussianSpec(**header["spec"])
    count, horizon, dim = header["count"], header["horizon"], header["dim"]
    expected = count * horizon * dim * 8
    if len(payload) != expected:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {expected}")
    frames = np.frombuffer(payload, dtype="<f8").reshape(count, horizon, dim)
    labels = header["labels"]
    ids = header["sample_ids"]
    if len(labels) != count or len(ids) != count:
        raise ValueError("label/id count does not match the header count")
    return (
        [
            FeatureSequence(frames=frames[i].copy(), label=int(labels[i]), sample_id=int(ids[i]))
            for i in range(count)
        ],
        spec,
    )

"""Adam with decoupled weight decay plus the trajectory-regression loop.

One training step: stack the batch's windows, run the integrator over
every family (startup prefixes, full windows, short windows), assemble the
LLR trajectory tensor, take LSEL (optionally mixed with multiplet
cross-entropy), backprop, and apply Adam. Weight decay multiplies
parameters down before the Adam delta, so the decay knob is an explicit
shrinkage independent of the gradient moments.

Validation tracks the mean absolute LLR error at the final timestep; the
returned model is the best-validation checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import gauss, losses, tandem
from .diffcore import Array, DomainError, Tensor
from .gauss import GaussianSpec
from .nets import Integrator


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss goes non-finite during training."""

    def __init__(self, what: str, seed: int, step: int):
        super().__init__(f"{what} (seed={seed}, update step={step})")
        self.what = what
        self.seed = seed
        self.step = step


@dataclass
class OptimizerState:
    """Adam accumulators; moments are shaped like their parameters."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def ensure_moments(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adam_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, Array],
    seed: int = -1,
) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.ensure_moments(params)
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}", seed, t)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# --- batched forward pipeline ----------------------------------------------

def window_stacks(frames: Array, markov_order: int) -> tuple[Array, Array | None]:
    """Stack every sequence's complete windows for batched processing.

    Returns full windows (B*(T-N), N+1, d) and short windows
    (B*(T-N-1), N, d), the latter None when N = 0 or T = N+1.
    """
    b, t, d = frames.shape
    n = markov_order
    view = np.lib.stride_tricks.sliding_window_view(frames, n + 1, axis=1)
    full = np.ascontiguousarray(np.moveaxis(view, -1, 2)).reshape(b * (t - n), n + 1, d)
    if n == 0 or t - n - 1 <= 0:
        return full, None
    view_s = np.lib.stride_tricks.sliding_window_view(frames[:, 1:, :], n, axis=1)
    # short windows end at s-1 for s = N+2..T: starts 1..T-N-1, so drop the last view row
    short = np.ascontiguousarray(np.moveaxis(view_s, -1, 2)[:, : t - n - 1]).reshape(
        b * (t - n - 1), n, d
    )
    return full, short


def log_posterior_families(
    model: Integrator,
    frames: Array,
    markov_order: int,
    extended: bool = True,
) -> tuple[Tensor | None, Tensor, Tensor | None]:
    """(prefix, full, short) log-posterior tensors for a batch of sequences.

    Shapes are (B, N, K), (B, T-N, K) and (B, T-N-1, K). When N = T-1 the
    whole trajectory is served by one growing-window pass, so full is that
    pass's last row and there is no short family.
    """
    frames = np.asarray(frames, dtype=np.float64)
    b, t, _ = frames.shape
    n = markov_order
    if not 0 <= n <= t - 1:
        raise DomainError(f"markov_order={n} incompatible with horizon={t}")
    k = model.num_classes
    if n == t - 1:
        if not extended:
            # the single full window is the whole sequence
            full = dc.reshape(model.window_log_posteriors(frames), (b, 1, k))
            return None, full, None
        rows = model.prefix_log_posteriors(frames, upto=t)  # (B, T, K)
        return rows, None, None  # caller treats the single pass as the whole score matrix
    prefix = None
    if extended and n >= 1:
        prefix = model.prefix_log_posteriors(frames, upto=n)
    full_stack, short_stack = window_stacks(frames, n)
    full = dc.reshape(model.window_log_posteriors(full_stack), (b, t - n, k))
    short = None
    if short_stack is not None:
        short = dc.reshape(model.window_log_posteriors(short_stack), (b, t - n - 1, k))
    return prefix, full, short


def trajectory_graph(
    model: Integrator,
    frames: Array,
    markov_order: int,
    formula: str = "tandem",
    priors: Array | None = None,
    extended: bool = True,
    with_families: bool = False,
):
    """Batched LLR trajectory tensor (B, S, K, K) for a batch of sequences.

    S is the horizon T when extended (trajectory starts at t=1) and T-N
    otherwise (starts at t=N+1). With ``with_families`` also returns the
    log-posterior families for the classification loss.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = markov_order
    k = model.num_classes
    if priors is None:
        priors = np.full(k, 1.0 / k)
    log_priors = np.log(np.asarray(priors, dtype=np.float64))
    if n == frames.shape[1] - 1:
        rows_or_prefix, full, short = log_posterior_families(model, frames, n, extended)
        if extended:
            scores = rows_or_prefix  # growing-window scores are the trajectory for both formulas
            families = [rows_or_prefix]
        else:
            scores = full
            families = [full]
    else:
        prefix, full, short = log_posterior_families(model, frames, n, extended)
        scores = tandem.trajectory_scores_graph(prefix, full, short, log_priors, n, formula)
        families = [fam for fam in (prefix, full, short) if fam is not None]
    llr = tandem.pairwise_llr_graph(scores)
    if with_families:
        return llr, families
    return llr


def estimate_trajectories(
    model: Integrator,
    frames: Array,
    markov_order: int,
    formula: str = "tandem",
    priors: Array | None = None,
    extended: bool = True,
    batch_size: int = 250,
) -> Array:
    """Inference-mode trajectories (B, S, K, K), computed in bounded batches."""
    frames = np.asarray(frames, dtype=np.float64)
    chunks = []
    for lo in range(0, frames.shape[0], batch_size):
        t = trajectory_graph(model, frames[lo : lo + batch_size], markov_order, formula, priors, extended)
        chunks.append(t.data)
    return np.concatenate(chunks)


def final_t_llr_mae(
    model: Integrator,
    frames: Array,
    spec: GaussianSpec,
    markov_order: int,
    formula: str = "tandem",
    priors: Array | None = None,
    batch_size: int = 250,
) -> float:
    """Mean |estimated - true| LLR over class pairs k<l at the final timestep."""
    est = estimate_trajectories(
        model, frames, markov_order, formula, priors, extended=False, batch_size=batch_size
    )[:, -1]
    truth = tandem.pairwise_from_scores(gauss.true_score_matrix(frames, spec)[:, -1])
    k = est.shape[-1]
    iu = np.triu_indices(k, 1)
    return float(np.mean(np.abs(est[:, iu[0], iu[1]] - truth[:, iu[0], iu[1]])))


# --- batching ----------------------------------------------------------------

def balanced_batches(labels: Array, batch_size: int, rng: np.random.Generator) -> list[Array]:
    """Shuffled mini-batches holding equal per-class counts (+-1 on remainder)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    k = len(classes)
    if batch_size < k:
        raise DomainError(f"batch_size={batch_size} cannot balance {k} classes")
    pools = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    used = {c: 0 for c in classes}
    base, extra = divmod(batch_size, k)
    batches = []
    i = 0
    while True:
        quotas = {c: base for c in classes}
        for j in range(extra):
            quotas[classes[(i + j) % k]] += 1
        if any(used[c] + quotas[c] > len(pools[c]) for c in classes):
            break
        batch = np.concatenate([pools[c][used[c] : used[c] + quotas[c]] for c in classes])
        for c in classes:
            used[c] += quotas[c]
        batches.append(rng.permutation(batch))
        i += 1
    return batches


# --- training loop -----------------------------------------------------------

@dataclass
class TrainingConfig:
    markov_order: int
    formula: str = "tandem"
    llre_ratio: float = 1.0
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    patience: int | None = None
    seed: int = 0

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
        )


@dataclass
class TrainResult:
    model: Integrator
    best_val_mae: float
    best_epoch: int
    metrics: list[dict]


def train(
    model: Integrator,
    train_set: tuple[Array, Array],
    val_set: tuple[Array, Array],
    spec: GaussianSpec,
    config: TrainingConfig,
) -> TrainResult:
    """Optimize the integrator and return the best-validation checkpoint.

    ``train_set`` and ``val_set`` are (frames, labels) pairs. Metrics rows
    carry (seed, epoch, split, lsel, mce, total_loss, mae_final_t); the
    mCE column is NaN on train rows when llre_ratio is 1 because the
    classification loss then never enters the update path.
    """
    from .nets import restore, snapshot  # local import avoids a cycle at module load

    if not 0.0 <= config.llre_ratio <= 1.0:
        raise DomainError(f"llre_ratio must be in [0, 1], got {config.llre_ratio}")
    frames, labels = train_set
    val_frames, val_labels = val_set
    params = model.parameters()
    state = config.optimizer_state()
    rng = np.random.default_rng(config.seed)
    ratio = config.llre_ratio
    metrics: list[dict] = []
    best = (np.inf, -1, snapshot(model))
    for epoch in range(1, config.epochs + 1):
        sums = {"lsel": 0.0, "mce": 0.0, "total": 0.0}
        batches = balanced_batches(labels, config.batch_size, rng)
        for batch in batches:
            with dc.Tape() as tape:
                tape.watch(*params.values())
                llr, families = trajectory_graph(
                    model, frames[batch], config.markov_order, config.formula,
                    extended=True, with_families=True,
                )
                loss_lsel = losses.lsel_graph(llr, labels[batch])
                if ratio < 1.0:
                    loss_mce = losses.mce_graph(families, labels[batch])
                    total = dc.add(dc.scale(loss_lsel, ratio), dc.scale(loss_mce, 1.0 - ratio))
                    sums["mce"] += float(loss_mce.data)
                else:
                    total = loss_lsel
                if not np.isfinite(total.data):
                    raise TrainingDiverged("non-finite training loss", config.seed, state.step + 1)
                grads_by_tensor = dc.backward(total, tape)
            grads = {name: grads_by_tensor[p] for name, p in params.items()}
            adam_step(state, params, grads, seed=config.seed)
            sums["lsel"] += float(loss_lsel.data)
            sums["total"] += float(total.data)
        n_b = max(len(batches), 1)
        metrics.append({
            "seed": config.seed, "epoch": epoch, "split": "train",
            "lsel": sums["lsel"] / n_b,
            "mce": sums["mce"] / n_b if ratio < 1.0 else np.nan,
            "total_loss": sums["total"] / n_b,
            "mae_final_t": np.nan,
        })
        val_row = _validation_row(model, val_frames, val_labels, spec, config, epoch)
        metrics.append(val_row)
        if val_row["mae_final_t"] < best[0]:
            best = (val_row["mae_final_t"], epoch, snapshot(model))
        elif config.patience is not None and epoch - best[1] >= config.patience:
            break
    restore(model, best[2])
    return TrainResult(model=model, best_val_mae=best[0], best_epoch=best[1], metrics=metrics)


def _validation_row(model, val_frames, val_labels, spec, config, epoch) -> dict:
    n = config.markov_order
    val_lsel = 0.0
    val_mce = 0.0
    weight = 0
    mae = 0.0
    total = val_frames.shape[0]
    for lo in range(0, total, 250):
        fr = val_frames[lo : lo + 250]
        lb = val_labels[lo : lo + 250]
        llr, families = trajectory_graph(
            model, fr, n, config.formula, extended=False, with_families=True
        )
        w = fr.shape[0]
        val_lsel += float(losses.lsel_graph(llr, lb).data) * w
        val_mce += float(losses.mce_graph(families, lb).data) * w
        truth = tandem.pairwise_from_scores(gauss.true_score_matrix(fr, spec)[:, -1])
        k = truth.shape[-1]
        iu = np.triu_indices(k, 1)
        mae += float(np.sum(np.abs(llr.data[:, -1, iu[0], iu[1]] - truth[:, iu[0], iu[1]]))) / len(iu[0])
        weight += w
    val_lsel /= weight
    val_mce /= weight
    return {
        "seed": config.seed, "epoch": epoch, "split": "val",
        "lsel": val_lsel, "mce": val_mce,
        "total_loss": losses.combine(val_lsel, val_mce, config.llre_ratio),
        "mae_final_t": mae / weight,
    }

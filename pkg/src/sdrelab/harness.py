"""Experiment presets and the run/evaluate/emit pipeline.

A preset expands to a list of variant configs (one trained model per
variant); every variant runs over the preset's seeds with paired data
streams, so model comparisons share datasets and batch orders. Artifacts
are plain CSVs (one subdirectory per variant) plus a preset-level
summary.json with per-seed final-timestep MAEs, their means and SEMs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gauss, nets, optim, sprt, tandem
from .diffcore import DomainError, ShapeError
from .gauss import GaussianSpec
from .nets import ActivationKind, PoolingKind
from .optim import TrainingConfig, TrainingDiverged
from .tandem import LLRMatrixTrajectory

MODEL_KINDS = (
    "b2bsqrt-tandem",
    "tanh-tandem",
    "tandemformer-nsp",
    "tandemformer-gap",
    "tandemformer-onetoken",
    "oblivion-lsel",
)

ORACLE_KIND = "oracle-posteriors"


@dataclass
class DataConfig:
    offset: float = 2.0
    dim: int = 128
    num_classes: int = 2
    horizon: int = 20
    train_per_class: int = 4000
    val_per_class: int = 500
    test_per_class: int = 500


@dataclass
class ModelConfig:
    kind: str = "b2bsqrt-tandem"
    hidden_size: int = 32
    model_dim: int = 32
    num_heads: int = 4
    ff_dim: int = 64
    num_blocks: int = 1
    use_layernorm: bool = False
    alpha: float = 1.0


@dataclass
class ExperimentConfig:
    """All knobs of one trained variant within a preset."""

    preset: str
    variant: str
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    markov_order: int = 19
    llre_ratio: float = 1.0
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    patience: int | None = None
    sat_thresholds: list[float] | None = None
    trajectory_samples: int = 5

    def __post_init__(self):
        if self.model.kind not in MODEL_KINDS + (ORACLE_KIND,):
            raise DomainError(f"unknown model kind {self.model.kind!r}")
        if self.markov_order > self.data.horizon - 1:
            raise ShapeError(
                f"markov_order={self.markov_order} exceeds horizon-1={self.data.horizon - 1}"
            )

    def formula(self) -> str:
        return "oblivion" if self.model.kind == "oblivion-lsel" else "tandem"

    def split_spec(self, split: str, seed: int) -> GaussianSpec:
        per_class = {
            "train": self.data.train_per_class,
            "val": self.data.val_per_class,
            "test": self.data.test_per_class,
        }[split]
        stream = {"train": 0, "val": 1, "test": 2}[split]
        return GaussianSpec(
            offset=self.data.offset,
            dim=self.data.dim,
            num_classes=self.data.num_classes,
            horizon=self.data.horizon,
            per_class_count=per_class,
            seed=gauss.derive_seeds(seed, 4)[stream],
        )

    def build_model(self, seed: int) -> nets.Integrator:
        rng = np.random.default_rng(gauss.derive_seeds(seed, 4)[3])
        kind = self.model.kind
        if kind in ("b2bsqrt-tandem", "tanh-tandem", "oblivion-lsel"):
            act = ActivationKind.b2bsqrt(self.model.alpha) if kind == "b2bsqrt-tandem" \
                else ActivationKind.tanh()
            return nets.LSTMIntegrator(
                input_size=self.data.dim,
                hidden_size=self.model.hidden_size,
                num_classes=self.data.num_classes,
                cell_activation=act,
                output_activation=act,
                rng=rng,
            )
        pooling = {
            "tandemformer-nsp": PoolingKind.NSP,
            "tandemformer-gap": PoolingKind.GAP,
            "tandemformer-onetoken": PoolingKind.ONE_TOKEN,
        }[kind]
        return nets.TransformerIntegrator(
            input_size=self.data.dim,
            markov_order=self.markov_order,
            model_dim=self.model.model_dim,
            num_heads=self.model.num_heads,
            ff_dim=self.model.ff_dim,
            num_blocks=self.model.num_blocks,
            num_classes=self.data.num_classes,
            pooling=pooling,
            use_layernorm=self.model.use_layernorm,
            rng=rng,
        )

    def training_config(self, seed: int) -> TrainingConfig:
        return TrainingConfig(
            markov_order=self.markov_order,
            formula=self.formula(),
            llre_ratio=self.llre_ratio,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
            patience=self.patience,
            seed=seed,
        )


def compute_mae(
    estimates: list[LLRMatrixTrajectory],
    truths: list[LLRMatrixTrajectory],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep mean |estimate - truth| over samples and pairs k < l.

    The truth trajectories may start earlier than the estimates (they are
    defined from t=1); they are restricted to the estimates' range.
    """
    if len(estimates) != len(truths) or not estimates:
        raise ShapeError(f"batch sizes differ: {len(estimates)} vs {len(truths)}")
    start, horizon = estimates[0].start_t, estimates[0].horizon
    k = estimates[0].num_classes
    iu = np.triu_indices(k, 1)
    acc = np.zeros(horizon - start + 1)
    for est, truth in zip(estimates, truths):
        if est.values.shape != (horizon - start + 1, k, k):
            raise ShapeError("estimates are not equally shaped")
        if truth.start_t > start or truth.horizon < horizon:
            raise ShapeError("truth trajectory does not cover the estimate's range")
        offset = start - truth.start_t
        diff = est.values - truth.values[offset : offset + len(est.values)]
        acc += np.abs(diff[:, iu[0], iu[1]]).mean(axis=1)
    return np.arange(start, horizon + 1), acc / len(estimates)


def _mae_per_t_from_arrays(est: np.ndarray, truth_scores: np.ndarray, start_t: int) -> np.ndarray:
    k = est.shape[-1]
    iu = np.triu_indices(k, 1)
    truth = tandem.pairwise_from_scores(truth_scores)[:, start_t - 1 :]
    return np.abs(est[:, :, iu[0], iu[1]] - truth[:, :, iu[0], iu[1]]).mean(axis=(0, 2))


# --- per-seed variant run -----------------------------------------------------

@dataclass
class SeedArtifacts:
    seed: int
    mae_per_t: np.ndarray
    timesteps: np.ndarray
    final_t_mae: float
    metrics: list[dict]
    trajectory_rows: list[tuple]
    sat_rows: list[tuple]
    est_trajectories: list[LLRMatrixTrajectory]
    test_labels: np.ndarray


def _oracle_posterior_pair(frames: np.ndarray, spec: GaussianSpec) -> tandem.PosteriorTrajectoryPair:
    scores = frames @ spec.means.T - 0.5 * np.sum(spec.means**2, axis=1)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    post = np.exp(shifted)
    post /= post.sum(axis=-1, keepdims=True)
    return tandem.PosteriorTrajectoryPair(
        full=post,
        short=np.empty((0, spec.num_classes)),
        priors=np.full(spec.num_classes, 1.0 / spec.num_classes),
        markov_order=0,
        horizon=spec.horizon,
    )


def run_variant_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedArtifacts:
    """Generate data, train (unless analytic), evaluate on the test split."""
    test_spec = cfg.split_spec("test", seed)
    test_set = gauss.make_dataset(test_spec)
    test_frames, test_labels = gauss.frames_and_labels(test_set)
    metrics: list[dict] = []

    if cfg.model.kind == ORACLE_KIND:
        if cfg.markov_order != 0:
            raise DomainError("analytic-posterior runs require markov_order=0")
        est_trajs = [
            tandem.tandem_llr(_oracle_posterior_pair(seq.frames, test_spec)) for seq in test_set
        ]
        est = np.stack([t.values for t in est_trajs])
        start_t = 1
    else:
        train_spec = cfg.split_spec("train", seed)
        val_spec = cfg.split_spec("val", seed)
        model = cfg.build_model(seed)
        result = optim.train(
            model,
            gauss.frames_and_labels(gauss.make_dataset(train_spec)),
            gauss.frames_and_labels(gauss.make_dataset(val_spec)),
            val_spec,
            cfg.training_config(seed),
        )
        metrics = result.metrics
        if out_dir is not None:
            nets.save_checkpoint(out_dir / f"checkpoint_seed{seed}.ckpt", result.model, seed=seed)
        est = optim.estimate_trajectories(
            model, test_frames, cfg.markov_order, cfg.formula(), extended=True, batch_size=200
        )
        start_t = 1
        est_trajs = [
            LLRMatrixTrajectory(values=v, markov_order=cfg.markov_order,
                                horizon=test_spec.horizon, start_t=start_t)
            for v in est
        ]

    truth_scores = gauss.true_score_matrix(test_frames, test_spec)
    mae_per_t = _mae_per_t_from_arrays(est, truth_scores, start_t)
    timesteps = np.arange(start_t, test_spec.horizon + 1)

    trajectory_rows = []
    for seq, traj in list(zip(test_set, est_trajs))[: cfg.trajectory_samples]:
        truth = gauss.true_llr(seq, test_spec)
        for t in timesteps:
            for k in range(test_spec.num_classes):
                for l in range(test_spec.num_classes):
                    if k == l:
                        continue
                    trajectory_rows.append(
                        (seed, seq.sample_id, int(t), k, l, truth.at(t)[k, l], traj.at(t)[k, l])
                    )

    sat_rows = []
    if cfg.sat_thresholds:
        points = sprt.sat_curve([(est_trajs, test_labels)], cfg.sat_thresholds)
        sat_rows = [
            (seed, p.threshold, p.mean_hitting_time, p.mean_per_class_error) for p in points
        ]

    return SeedArtifacts(
        seed=seed,
        mae_per_t=mae_per_t,
        timesteps=timesteps,
        final_t_mae=float(mae_per_t[-1]),
        metrics=metrics,
        trajectory_rows=trajectory_rows,
        sat_rows=sat_rows,
        est_trajectories=est_trajs,
        test_labels=test_labels,
    )


# --- CSV / JSON emission ------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sem(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def _worker_count(seeds: list[int]) -> int:
    # sequential by default: the numeric kernels already saturate the BLAS
    # threads, so seed-level threading only pays off with many spare cores
    import os

    env = os.environ.get("SDRELAB_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def run_experiment(
    configs: list[ExperimentConfig],
    seeds: list[int],
    out_dir: str | Path,
) -> Path:
    """Run every variant over every seed; write CSVs and summary.json.

    Seeds run concurrently (each with fully isolated state; merge order is
    fixed by the seed list, so output bytes do not depend on scheduling).
    A seed that aborts (diverged training) is excluded from the summary
    statistics and recorded under "warnings".
    """
    from concurrent.futures import ThreadPoolExecutor

    if not configs:
        raise ShapeError("run_experiment: no variant configs")
    preset = configs[0].preset
    root = Path(out_dir) / preset
    root.mkdir(parents=True, exist_ok=True)
    summary: dict = {"preset": preset, "seeds": list(seeds), "variants": {}, "warnings": []}
    workers = _worker_count(seeds)
    for cfg in configs:
        vdir = root / cfg.variant
        vdir.mkdir(parents=True, exist_ok=True)
        per_seed: dict[int, SeedArtifacts] = {}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(run_variant_seed, cfg, seed, vdir) for seed in seeds}
        for seed in seeds:
            try:
                per_seed[seed] = futures[seed].result()
            except TrainingDiverged as err:
                summary["warnings"].append(f"{cfg.variant} seed {seed} aborted: {err}")
        mae_rows = []
        metric_rows = []
        traj_rows = []
        sat_rows = []
        sat_groups = []
        for seed in seeds:
            art = per_seed.get(seed)
            if art is None:
                continue
            mae_rows += [(seed, int(t), m) for t, m in zip(art.timesteps, art.mae_per_t)]
            metric_rows += [
                (r["seed"], r["epoch"], r["split"], r["lsel"], r["mce"], r["total_loss"], r["mae_final_t"])
                for r in art.metrics
            ]
            traj_rows += art.trajectory_rows
            sat_rows += art.sat_rows
            if cfg.sat_thresholds:
                sat_groups.append((art.est_trajectories, art.test_labels))
        _write_csv(vdir / "mae_vs_t.csv", ["seed", "t", "mae"], mae_rows)
        if metric_rows:
            _write_csv(
                vdir / "metrics.csv",
                ["seed", "epoch", "split", "lsel", "mce", "total_loss", "mae_final_t"],
                metric_rows,
            )
        if cfg.trajectory_samples:
            _write_csv(
                vdir / "llr_trajectories.csv",
                ["seed", "sample_id", "t", "k", "l", "true_llr", "est_llr"],
                traj_rows,
            )
        if cfg.sat_thresholds:
            _write_csv(
                vdir / "sat_curve.csv",
                ["seed", "threshold", "mean_hitting_time", "mean_per_class_error"],
                sat_rows,
            )
        finals = {s: a.final_t_mae for s, a in per_seed.items()}
        entry = {
            "config": asdict(cfg),
            "final_t_mae": {
                "per_seed": {str(s): finals[s] for s in finals},
                "mean": float(np.mean(list(finals.values()))) if finals else None,
                "sem": _sem(list(finals.values())),
            },
            "completed_seeds": sorted(finals),
        }
        if cfg.sat_thresholds and sat_groups:
            entry["sat"] = [asdict(p) for p in sprt.sat_curve(sat_groups, cfg.sat_thresholds)]
        summary["variants"][cfg.variant] = entry
    (root / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return root


# --- statistics helpers --------------------------------------------------------

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Rank correlation with midranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ShapeError("spearman_rho needs two equal-length vectors of size >= 2")
    rx, ry = _midranks(x), _midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def pooled_sem(sem_a: float, sem_b: float) -> float:
    return float(np.hypot(sem_a, sem_b))


# --- presets -------------------------------------------------------------------

def _sat_thresholds() -> list[float]:
    return [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]


def preset_configs(name: str) -> tuple[list[ExperimentConfig], list[int]]:
    """Variant configs and default seeds of a named preset."""
    builders = {
        "oracle-sanity": _preset_oracle_sanity,
        "fig1-trajectories": _preset_fig1,
        "fig2-weightdecay": _preset_weightdecay,
        "fig2-layernorm": _preset_layernorm,
        "fig2-datasize": _preset_datasize,
        "fig2-pooling": _preset_pooling,
        "fig2-loss": _preset_loss,
        "appendix-3class": _preset_3class,
        "sat-gaussian": _preset_sat,
    }
    if name not in builders:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(builders)}")
    return builders[name]()


def preset_names() -> list[str]:
    return [
        "oracle-sanity", "fig1-trajectories", "fig2-weightdecay", "fig2-layernorm",
        "fig2-datasize", "fig2-pooling", "fig2-loss", "appendix-3class", "sat-gaussian",
    ]


def _preset_oracle_sanity():
    configs = [
        ExperimentConfig(
            preset="oracle-sanity",
            variant=f"offset-{offset:g}",
            data=DataConfig(offset=offset, horizon=50, train_per_class=0, val_per_class=0,
                            test_per_class=50),
            model=ModelConfig(kind=ORACLE_KIND),
            markov_order=0,
        )
        for offset in (1.0, 2.0)
    ]
    return configs, [0]


def _big_protocol(offset: float = 2.0) -> DataConfig:
    # criterion-pinned: d_feat=128, T=20, N=19, 8K/1K/1K
    return DataConfig(offset=offset, dim=128, horizon=20,
                      train_per_class=4000, val_per_class=500, test_per_class=500)


def _preset_fig1():
    configs = []
    for kind in ("b2bsqrt-tandem", "tanh-tandem", "tandemformer-nsp"):
        for offset in (1.0, 2.0):
            configs.append(ExperimentConfig(
                preset="fig1-trajectories",
                variant=f"{kind}-offset-{offset:g}",
                data=DataConfig(offset=offset, horizon=20, train_per_class=1000,
                                val_per_class=200, test_per_class=200),
                model=ModelConfig(kind=kind),
                markov_order=19,
                epochs=8,
                trajectory_samples=10,
            ))
    return configs, [0]


def _preset_weightdecay():
    # the shrinkage-vs-expression tradeoff needs many cheap updates and a
    # large LLR scale before the decay knob separates every model kind, so
    # this preset runs a narrow-feature, high-offset protocol
    configs = []
    for kind in MODEL_KINDS:
        for wd in (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
            configs.append(ExperimentConfig(
                preset="fig2-weightdecay",
                variant=f"{kind}-wd-{wd:g}",
                data=DataConfig(offset=6.0, dim=16, horizon=10, train_per_class=1000,
                                val_per_class=150, test_per_class=250),
                model=ModelConfig(kind=kind, model_dim=16, num_heads=2, ff_dim=32),
                markov_order=9,
                epochs=50,
                learning_rate=1e-2,
                weight_decay=wd,
            ))
    return configs, [0, 1, 2]


def _preset_layernorm():
    configs = [
        ExperimentConfig(
            preset="fig2-layernorm",
            variant=f"tandemformer-nsp-ln-{'on' if ln else 'off'}",
            data=DataConfig(offset=2.0, horizon=20, train_per_class=1000,
                            val_per_class=200, test_per_class=250),
            model=ModelConfig(kind="tandemformer-nsp", use_layernorm=ln),
            markov_order=19,
            epochs=8,
        )
        for ln in (False, True)
    ]
    return configs, [0, 1, 2]


def _preset_datasize():
    # update-matched: every arm gets at least as many optimizer updates as
    # the smaller ones, so non-mitigation is not an undertraining artifact
    arms = [(500, 48), (4000, 6), (32000, 1)]
    configs = [
        ExperimentConfig(
            preset="fig2-datasize",
            variant=f"tanh-tandem-train-{2 * per_class}",
            data=DataConfig(offset=2.0, horizon=20, train_per_class=per_class,
                            val_per_class=500, test_per_class=500),
            model=ModelConfig(kind="tanh-tandem"),
            markov_order=19,
            epochs=epochs,
        )
        for per_class, epochs in arms
    ]
    return configs, [0, 1, 2]


def _preset_pooling():
    configs = [
        ExperimentConfig(
            preset="fig2-pooling",
            variant=kind,
            data=_big_protocol(),
            model=ModelConfig(kind=kind),
            markov_order=19,
            epochs=6,
        )
        for kind in ("tandemformer-nsp", "tandemformer-gap", "tandemformer-onetoken")
    ]
    return configs, [0, 1, 2, 3, 4]


def _preset_loss():
    configs = [
        ExperimentConfig(
            preset="fig2-loss",
            variant=kind,
            data=_big_protocol(),
            model=ModelConfig(kind=kind),
            markov_order=19,
            epochs=30,
        )
        for kind in ("b2bsqrt-tandem", "tanh-tandem", "oblivion-lsel")
    ]
    return configs, [0, 1, 2, 3, 4]


def _preset_3class():
    configs = [
        ExperimentConfig(
            preset="appendix-3class",
            variant=kind,
            data=DataConfig(offset=2.0, num_classes=3, horizon=20, train_per_class=1300,
                            val_per_class=160, test_per_class=160),
            model=ModelConfig(kind=kind),
            markov_order=19,
            epochs=8,
        )
        for kind in ("b2bsqrt-tandem", "tandemformer-nsp")
    ]
    return configs, [0, 1, 2, 3, 4]


def _preset_sat():
    configs = [
        ExperimentConfig(
            preset="sat-gaussian",
            variant=kind,
            data=DataConfig(offset=2.0, horizon=20, train_per_class=1000,
                            val_per_class=250, test_per_class=250),
            model=ModelConfig(kind=kind),
            markov_order=5,
            epochs=12,
            sat_thresholds=_sat_thresholds(),
        )
        for kind in ("b2bsqrt-tandem", "tandemformer-nsp")
    ]
    return configs, [0, 1, 2]


# --- overrides -------------------------------------------------------------------

def apply_override(configs: list[ExperimentConfig], dotted_key: str, raw_value: str) -> None:
    """Set a dotted config field (e.g. data.offset=1.0) on every variant."""
    for cfg in configs:
        target = cfg
        parts = dotted_key.split(".")
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise KeyError(f"unknown config section {part!r} in {dotted_key!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise KeyError(f"unknown config field {dotted_key!r}")
        current = getattr(target, leaf)
        setattr(target, leaf, _coerce(raw_value, current))


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None or isinstance(current, (list, tuple)):
        raise ValueError(f"field with value {current!r} cannot be overridden from the CLI")
    return raw


# --- built-in verification battery (sdrelab verify) -----------------------------

def verification_suite() -> list[tuple[str, bool, str]]:
    """Oracle-equivalence run plus quick invariant checks; (name, ok, detail)."""
    from . import diffcore as dc
    from .diffcore import Tensor

    checks: list[tuple[str, bool, str]] = []

    def check(name: str, fn):
        try:
            detail = fn() or ""
            checks.append((name, True, detail))
        except Exception as err:  # deliberate: one failing check must not stop the rest
            checks.append((name, False, f"{type(err).__name__}: {err}"))

    def oracle_equivalence():
        worst = 0.0
        for offset in (1.0, 2.0):
            spec = GaussianSpec(offset=offset, dim=16, horizon=30, per_class_count=10, seed=123)
            for seq in gauss.make_dataset(spec):
                pair = _oracle_posterior_pair(seq.frames, spec)
                est = tandem.tandem_llr(pair)
                truth = gauss.true_llr(seq, spec)
                worst = max(worst, float(np.max(np.abs(est.values - truth.values))))
        assert worst < 1e-9, f"max deviation {worst:.3e}"
        return f"max |est-true| = {worst:.2e}"

    def primitive_gradients():
        rng = np.random.default_rng(0)
        worst = 0.0
        x = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)))
        w = Tensor(rng.uniform(-1.0, 1.0, size=(4, 4)))

        def f(x, w):
            h = dc.matmul(x, w)
            h = dc.concat([dc.tanh(h), dc.sigmoid(h), dc.b2bsqrt(h)], axis=1)
            h = dc.layernorm(h)
            h = dc.cumsum(dc.reshape(h, (4, 9)), axis=1)
            h = dc.multiply(h, dc.scale(h, 0.5))
            return dc.sum_axis(dc.add(dc.logsumexp(h), dc.sum_axis(dc.log(dc.softmax(h)), axis=1)))

        worst = dc.finite_diff_check(f, [x, w], eps=1e-3)
        assert worst < 1e-4, f"finite-diff error {worst:.3e}"
        return f"finite-diff error = {worst:.2e}"

    def softmax_simplex():
        rng = np.random.default_rng(1)
        y = dc.softmax(Tensor(rng.normal(0, 10, size=(50, 6)))).data
        assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12) and np.all((y > 0) & (y < 1))

    def b2bsqrt_shape():
        xs = np.linspace(-50, 50, 1000)
        ys = nets.b2bsqrt(xs)
        assert np.array_equal(nets.b2bsqrt(-xs), -ys)
        assert np.all(np.diff(ys) > 0)
        ratio = nets.b2bsqrt(1e4) / np.sqrt(1e4)
        assert 0.9 <= ratio <= 1.0

    def nsp_bound():
        rng = np.random.default_rng(2)
        for _ in range(50):
            tokens = [rng.normal(size=5) for _ in range(int(rng.integers(1, 7)))]
            pooled = nets.nsp_pool(tokens, markov_order=6)
            assert np.linalg.norm(pooled) <= max(np.linalg.norm(t) for t in tokens) + 1e-12

    def antisymmetry():
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(8, 3))
        post = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        pair = tandem.PosteriorTrajectoryPair(
            full=post, short=post[:-1].copy(), priors=np.full(3, 1 / 3),
            markov_order=1, horizon=9,
        )
        tandem.tandem_llr(pair).validate()

    def sprt_agreement():
        rng = np.random.default_rng(4)
        for _ in range(200):
            steps = int(rng.integers(3, 30))
            lam = np.cumsum(rng.normal(rng.normal(scale=0.5), 1.0, size=steps))
            a = float(rng.uniform(0.2, 5.0))
            values = np.zeros((steps, 2, 2))
            values[:, 1, 0] = lam
            values[:, 0, 1] = -lam
            traj = LLRMatrixTrajectory(values=values, markov_order=0, horizon=steps, start_t=1)
            got = sprt.sprt_run(traj, sprt.ThresholdMatrix.scalar(a, 2))
            want = None
            for i, v in enumerate(lam):
                if v >= a:
                    want = (1, i + 1, False)
                    break
                if -v >= a:
                    want = (0, i + 1, False)
                    break
            if want is None:
                want = (1 if lam[-1] > 0 else 0, steps, True)
            assert (got.decided_class, got.stopping_time, got.forced) == want

    def adam_reference():
        p = {"w": Tensor(np.array(1.0))}
        state = optim.OptimizerState(learning_rate=0.1)
        optim.adam_step(state, p, {"w": np.array(1.0)})
        assert abs(float(p["w"].data) - 0.9) < 1e-7

    def wald_bound():
        spec = GaussianSpec(offset=1.0, dim=2, horizon=50, per_class_count=1000, seed=7)
        data = gauss.make_dataset(spec)
        trajs = [gauss.true_llr(s, spec) for s in data]
        labels = np.array([s.label for s in data])
        err = sprt.wald_error_probe(2.0, trajs, labels)
        bound = float(np.exp(-2.0))
        sem = float(np.sqrt(bound * (1 - bound) / len(trajs)))
        assert err <= bound + 3 * sem, f"error {err:.4f} vs bound {bound:.4f}+3sem"
        return f"error {err:.4f} <= {bound + 3 * sem:.4f}"

    check("oracle-equivalence", oracle_equivalence)
    check("primitive-gradients", primitive_gradients)
    check("softmax-simplex", softmax_simplex)
    check("b2bsqrt-shape", b2bsqrt_shape)
    check("nsp-norm-bound", nsp_bound)
    check("tandem-antisymmetry", antisymmetry)
    check("sprt-two-boundary-agreement", sprt_agreement)
    check("adam-reference-step", adam_reference)
    check("wald-error-bound", wald_bound)
    return checks

"""The two temporal integrators that emit window posteriors.

An LSTM whose saturating cell/output activations can be swapped for the
unbounded b2bsqrt, and a sliding-window transformer whose token pooling can
be swapped between normalized summation (divide by the constant N+1),
global averaging, and a learned classification token. Activation and
pooling swaps change no shapes, so ablations are pure config changes.

Both integrators run on diffcore tensors; with no active tape they act as
plain numpy inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Array, DomainError, ShapeError, Tensor


@dataclass(frozen=True)
class ActivationKind:
    """Saturating tanh or the unbounded sqrt-shaped alternative."""

    name: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.name not in ("tanh", "b2bsqrt"):
            raise DomainError(f"unknown activation {self.name!r}")
        if self.name == "b2bsqrt" and self.alpha <= 0:
            raise DomainError(f"b2bsqrt alpha must be positive, got {self.alpha}")

    @classmethod
    def tanh(cls) -> "ActivationKind":
        return cls("tanh")

    @classmethod
    def b2bsqrt(cls, alpha: float = 1.0) -> "ActivationKind":
        return cls("b2bsqrt", alpha)

    def apply(self, t: Tensor) -> Tensor:
        if self.name == "tanh":
            return dc.tanh(t)
        return dc.b2bsqrt(t, alpha=self.alpha)

    def as_dict(self) -> dict:
        return {"name": self.name, "alpha": self.alpha}


class PoolingKind(str, Enum):
    NSP = "nsp"
    GAP = "gap"
    ONE_TOKEN = "onetoken"


def b2bsqrt(x, alpha: float = 1.0):
    """sign(x) * (sqrt(alpha + |x|) - sqrt(alpha)); odd, strictly increasing."""
    if alpha <= 0:
        raise DomainError(f"b2bsqrt alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * (np.sqrt(alpha + np.abs(x)) - np.sqrt(alpha))
    return float(out) if out.ndim == 0 else out


def nsp_pool(tokens, markov_order: int) -> Array:
    """Sum the window's tokens and divide by the constant N+1.

    The divisor stays N+1 however full the window is, so the pooled
    magnitude grows as evidence accumulates instead of being renormalized.
    """
    tokens = [np.asarray(t, dtype=np.float64) for t in tokens]
    if len(tokens) == 0:
        raise ShapeError("nsp_pool: empty token list")
    if len(tokens) > markov_order + 1:
        raise ShapeError(f"nsp_pool: {len(tokens)} tokens exceed window capacity {markov_order + 1}")
    return np.sum(tokens, axis=0) / float(markov_order + 1)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _log_softmax(logits: Tensor) -> Tensor:
    lse = dc.logsumexp(logits, keepdims=True)
    return dc.add(logits, dc.scale(lse, -1.0))


def _silu(t: Tensor) -> Tensor:
    return dc.multiply(t, dc.sigmoid(t))


class LSTMIntegrator:
    """Gated recurrent integrator with a softmax posterior head.

    ``cell_activation`` shapes the candidate cell update and
    ``output_activation`` the hidden-state readout; both default to tanh,
    and both are what the b2bsqrt variant replaces. Gates stay sigmoid.
    """

    kind = "lstm"

    def __init__(
        self,
        input_size: int,
        hidden_size: int = 64,
        num_classes: int = 2,
        cell_activation: ActivationKind | None = None,
        output_activation: ActivationKind | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_classes = num_classes
        self.cell_activation = cell_activation or ActivationKind.tanh()
        self.output_activation = output_activation or ActivationKind.tanh()
        rng = rng or np.random.default_rng(0)
        self._params: dict[str, Tensor] = {}
        for gate in ("i", "f", "g", "o"):
            self._add(f"w_{gate}", _uniform_init(rng, (input_size, hidden_size), input_size))
            self._add(f"u_{gate}", _uniform_init(rng, (hidden_size, hidden_size), hidden_size))
            self._add(f"b_{gate}", np.zeros(hidden_size))
        self._add("head_w", _uniform_init(rng, (hidden_size, num_classes), hidden_size))
        self._add("head_b", np.zeros(num_classes))

    def _add(self, name: str, value: Array) -> None:
        self._params[name] = Tensor(value, name=name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "input_size": self.input_size,
            "hidden_size": self.hidden_size,
            "num_classes": self.num_classes,
            "cell_activation": self.cell_activation.as_dict(),
            "output_activation": self.output_activation.as_dict(),
        }

    def _gate(self, name: str, x: Tensor, h: Tensor) -> Tensor:
        p = self._params
        return dc.add(
            dc.add(dc.matmul(x, p[f"w_{name}"]), dc.matmul(h, p[f"u_{name}"])),
            p[f"b_{name}"],
        )

    def step(self, x_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One LSTM update for a batch of frames (B, input_size)."""
        if x_t.shape[-1] != self.input_size:
            raise ShapeError(f"lstm step: frame width {x_t.shape[-1]} != input size {self.input_size}")
        i = dc.sigmoid(self._gate("i", x_t, h))
        f = dc.sigmoid(self._gate("f", x_t, h))
        g = self.cell_activation.apply(self._gate("g", x_t, h))
        o = dc.sigmoid(self._gate("o", x_t, h))
        c_next = dc.add(dc.multiply(f, c), dc.multiply(i, g))
        h_next = dc.multiply(o, self.output_activation.apply(c_next))
        return h_next, c_next

    def _head(self, h: Tensor) -> Tensor:
        return dc.add(dc.matmul(h, self._params["head_w"]), self._params["head_b"])

    def _zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_size))
        return Tensor(z), Tensor(z.copy())

    def window_log_posteriors(self, windows: Array) -> Tensor:
        """(M, L, d) stacked windows -> (M, K) log posteriors, zero initial state."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1] == 0:
            raise ShapeError(f"windows must be (M, L>=1, d), got {windows.shape}")
        h, c = self._zero_state(windows.shape[0])
        for t in range(windows.shape[1]):
            h, c = self.step(Tensor(windows[:, t, :]), h, c)
        return _log_softmax(self._head(h))

    def prefix_log_posteriors(self, frames: Array, upto: int) -> Tensor:
        """Log posteriors of the growing windows x(1..t) for t = 1..upto.

        One recurrent pass: the state after frame t is exactly the state of
        the prefix window of length t. Returns (B, upto, K).
        """
        frames = np.asarray(frames, dtype=np.float64)
        batch = frames.shape[0]
        if not 1 <= upto <= frames.shape[1]:
            raise ShapeError(f"upto={upto} outside 1..{frames.shape[1]}")
        h, c = self._zero_state(batch)
        logits = []
        for t in range(upto):
            h, c = self.step(Tensor(frames[:, t, :]), h, c)
            logits.append(dc.reshape(self._head(h), (batch, 1, self.num_classes)))
        return _log_softmax(dc.concat(logits, axis=1))


def _sinusoid_table(max_positions: int, dim: int) -> Array:
    pos = np.arange(max_positions)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class TransformerIntegrator:
    """Self-attention over a sliding window plus a pooled posterior head.

    Window-relative sinusoidal positions, one or more pre-norm-free blocks
    (a layernorm flag exists for the normalization ablation), and one of
    three pooling modes ahead of the head.
    """

    kind = "transformer"

    def __init__(
        self,
        input_size: int,
        markov_order: int,
        model_dim: int = 64,
        num_heads: int = 4,
        ff_dim: int = 128,
        num_blocks: int = 1,
        num_classes: int = 2,
        pooling: PoolingKind = PoolingKind.NSP,
        use_layernorm: bool = False,
        rng: np.random.Generator | None = None,
    ):
        if model_dim % num_heads != 0:
            raise ShapeError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        if markov_order < 0:
            raise DomainError(f"markov_order must be nonnegative, got {markov_order}")
        self.input_size = input_size
        self.markov_order = markov_order
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.ff_dim = ff_dim
        self.num_blocks = num_blocks
        self.num_classes = num_classes
        self.pooling = PoolingKind(pooling)
        self.use_layernorm = bool(use_layernorm)
        self.positions = _sinusoid_table(markov_order + 1, model_dim)
        rng = rng or np.random.default_rng(0)
        self._params: dict[str, Tensor] = {}
        self._add("embed_w", _uniform_init(rng, (input_size, model_dim), input_size))
        self._add("embed_b", np.zeros(model_dim))
        for b in range(num_blocks):
            for h in range(num_heads):
                for proj in ("q", "k", "v"):
                    self._add(f"block{b}_head{h}_{proj}", _uniform_init(rng, (model_dim, self.head_dim), model_dim))
            self._add(f"block{b}_out_w", _uniform_init(rng, (model_dim, model_dim), model_dim))
            self._add(f"block{b}_out_b", np.zeros(model_dim))
            self._add(f"block{b}_ff1_w", _uniform_init(rng, (model_dim, ff_dim), model_dim))
            self._add(f"block{b}_ff1_b", np.zeros(ff_dim))
            self._add(f"block{b}_ff2_w", _uniform_init(rng, (ff_dim, model_dim), ff_dim))
            self._add(f"block{b}_ff2_b", np.zeros(model_dim))
        if self.pooling is PoolingKind.ONE_TOKEN:
            self._add("cls_token", _uniform_init(rng, (1, model_dim), model_dim))
        self._add("head_w", _uniform_init(rng, (model_dim, num_classes), model_dim))
        self._add("head_b", np.zeros(num_classes))

    def _add(self, name: str, value: Array) -> None:
        self._params[name] = Tensor(value, name=name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "input_size": self.input_size,
            "markov_order": self.markov_order,
            "model_dim": self.model_dim,
            "num_heads": self.num_heads,
            "ff_dim": self.ff_dim,
            "num_blocks": self.num_blocks,
            "num_classes": self.num_classes,
            "pooling": self.pooling.value,
            "use_layernorm": self.use_layernorm,
        }

    def _block(self, x: Tensor, b: int) -> Tensor:
        p = self._params
        heads = []
        for h in range(self.num_heads):
            q = dc.matmul(x, p[f"block{b}_head{h}_q"])
            k = dc.matmul(x, p[f"block{b}_head{h}_k"])
            v = dc.matmul(x, p[f"block{b}_head{h}_v"])
            scores = dc.scale(dc.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(self.head_dim))
            heads.append(dc.matmul(dc.softmax(scores), v))
        mixed = dc.add(dc.matmul(dc.concat(heads, axis=-1), p[f"block{b}_out_w"]), p[f"block{b}_out_b"])
        x = dc.add(x, mixed)
        if self.use_layernorm:
            x = dc.layernorm(x)
        inner = _silu(dc.add(dc.matmul(x, p[f"block{b}_ff1_w"]), p[f"block{b}_ff1_b"]))
        ff = dc.add(dc.matmul(inner, p[f"block{b}_ff2_w"]), p[f"block{b}_ff2_b"])
        x = dc.add(x, ff)
        if self.use_layernorm:
            x = dc.layernorm(x)
        return x

    def _pooled(self, windows: Array) -> Tensor:
        """(M, L, d) -> (M, model_dim) pooled representation."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1] == 0:
            raise ShapeError(f"windows must be (M, L>=1, d), got {windows.shape}")
        m, length, width = windows.shape
        if length > self.markov_order + 1:
            raise ShapeError(f"window of {length} frames exceeds capacity N+1 = {self.markov_order + 1}")
        if width != self.input_size:
            raise ShapeError(f"frame width {width} != input size {self.input_size}")
        p = self._params
        x = dc.add(dc.matmul(Tensor(windows), p["embed_w"]), p["embed_b"])
        x = dc.add(x, Tensor(self.positions[:length]))
        if self.pooling is PoolingKind.ONE_TOKEN:
            tile = dc.add(Tensor(np.zeros((m, 1, self.model_dim))), dc.reshape(p["cls_token"], (1, 1, self.model_dim)))
            x = dc.concat([tile, x], axis=1)
        for b in range(self.num_blocks):
            x = self._block(x, b)
        if self.pooling is PoolingKind.NSP:
            return dc.scale(dc.sum_axis(x, axis=1), 1.0 / (self.markov_order + 1))
        if self.pooling is PoolingKind.GAP:
            return dc.scale(dc.sum_axis(x, axis=1), 1.0 / length)
        mask = np.zeros((1, length + 1, 1))
        mask[0, 0, 0] = 1.0
        return dc.sum_axis(dc.multiply(x, Tensor(mask)), axis=1)

    def window_log_posteriors(self, windows: Array) -> Tensor:
        """(M, L, d) stacked windows -> (M, K) log posteriors."""
        pooled = self._pooled(windows)
        logits = dc.add(dc.matmul(pooled, self._params["head_w"]), self._params["head_b"])
        return _log_softmax(logits)

    def prefix_log_posteriors(self, frames: Array, upto: int) -> Tensor:
        """Log posteriors of the growing windows x(1..t) for t = 1..upto."""
        frames = np.asarray(frames, dtype=np.float64)
        batch = frames.shape[0]
        if not 1 <= upto <= min(frames.shape[1], self.markov_order + 1):
            raise ShapeError(f"upto={upto} outside valid prefix range")
        rows = []
        for t in range(1, upto + 1):
            lp = self.window_log_posteriors(frames[:, :t, :])
            rows.append(dc.reshape(lp, (batch, 1, self.num_classes)))
        return dc.concat(rows, axis=1)


Integrator = LSTMIntegrator | TransformerIntegrator


def lstm_step(m: LSTMIntegrator, x_t: Array, h: Array, c: Array) -> tuple[Array, Array]:
    """One recurrent update on plain arrays (inference convenience)."""
    h2, c2 = m.step(Tensor(np.atleast_2d(x_t)), Tensor(np.atleast_2d(h)), Tensor(np.atleast_2d(c)))
    if np.ndim(x_t) == 1:
        return h2.data[0], c2.data[0]
    return h2.data, c2.data


def lstm_posterior(m: LSTMIntegrator, window: Array) -> Array:
    """Class posterior of one window of frames (runs from zero state)."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    return np.exp(m.window_log_posteriors(window[None]).data[0])


def transformer_posterior(m: TransformerIntegrator, window: Array) -> Array:
    """Class posterior of one window of at most N+1 frames."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    return np.exp(m.window_log_posteriors(window[None]).data[0])


def snapshot(model: Integrator) -> dict[str, Array]:
    """Copy of every parameter array, for checkpoint selection."""
    return {name: t.data.copy() for name, t in model.parameters().items()}


def restore(model: Integrator, state: dict[str, Array]) -> None:
    params = model.parameters()
    if set(params) != set(state):
        raise ShapeError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
    for name, t in params.items():
        if t.data.shape != state[name].shape:
            raise ShapeError(f"shape mismatch for {name}")
        t.data[...] = state[name]


_CHECKPOINT_FORMAT = "sdrelab-checkpoint-v1"


def build_integrator(config: dict, rng: np.random.Generator | None = None) -> Integrator:
    config = dict(config)
    kind = config.pop("kind")
    if kind == "lstm":
        config["cell_activation"] = ActivationKind(**config["cell_activation"])
        config["output_activation"] = ActivationKind(**config["output_activation"])
        return LSTMIntegrator(rng=rng, **config)
    if kind == "transformer":
        config["pooling"] = PoolingKind(config["pooling"])
        return TransformerIntegrator(rng=rng, **config)
    raise ValueError(f"unknown integrator kind {kind!r}")


def save_checkpoint(path: str | Path, model: Integrator, seed: int | None = None) -> None:
    """JSON header (config, shapes, seed) + little-endian float64 payload."""
    params = model.parameters()
    header = {
        "format": _CHECKPOINT_FORMAT,
        "config": model.config(),
        "seed": seed,
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Integrator:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"not a {_CHECKPOINT_FORMAT} file")
    model = build_integrator(header["config"], rng=np.random.default_rng(0))
    state: dict[str, Array] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        state[entry["name"]] = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(payload):
        raise ValueError(f"payload holds {len(payload)} bytes, expected {offset}")
    restore(model, state)
    return model

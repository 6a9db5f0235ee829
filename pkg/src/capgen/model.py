"""Captioning network forward pass.

The sequence fed to the recurrent stack has ``n + 1`` steps: position 0
is the image embedding projected to the shared embedding width, and
positions ``1..n`` are word-embedding rows for the (padded) token prefix.
Two stacked LSTM layers process the sequence; when bidirectional, each
layer runs both directions from zero initial state and concatenates the
per-step outputs. The layer-2 output at the last time step maps affinely
to one logit per vocabulary entry.

Gate blocks are ordered (input, forget, cell candidate, output) inside
every ``4*hidden`` LSTM tensor; checkpoints rely on this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INIT_SCALE = 0.08  # weights start i.i.d. uniform on [-INIT_SCALE, INIT_SCALE]
FORGET_BIAS = 1.0

DIRECTION_NAMES = ("fwd", "bwd")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and precision of the captioning network.

    ``d_img`` and ``vocab_size`` may be None while unresolved (they come
    from the embeddings file and the built vocabulary at training time);
    everything that touches parameters requires them to be set.
    """

    d_img: int | None = None
    vocab_size: int | None = None
    d_embed: int = 512
    hidden: int = 256
    layers: int = 2
    bidirectional: bool = True
    n: int = 10
    precision: int = 64

    def __post_init__(self) -> None:
        for name in ("d_img", "vocab_size"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_embed < 1 or self.hidden < 1 or self.n < 1:
            raise ValueError("d_embed, hidden and n must be positive")
        if self.layers != 2:
            raise ValueError(f"the stack is fixed at 2 LSTM layers, got {self.layers}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def h_out(self) -> int:
        """Per-step output width of one bidirectional layer."""
        return self.hidden * self.directions

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == 64 else np.float32)

    def require_resolved(self) -> None:
        if self.d_img is None or self.vocab_size is None:
            raise ValueError("model config has unresolved d_img or vocab_size")

    def layer_input_dim(self, layer: int) -> int:
        """Input width of layer 1 or 2 (embedding width, then h_out)."""
        return self.d_embed if layer == 1 else self.h_out


@dataclass
class LstmDirWeights:
    """One direction of one LSTM layer: gate order (i, f, g, o)."""

    W_x: np.ndarray  # (4*hidden, input_dim)
    W_h: np.ndarray  # (4*hidden, hidden)
    b: np.ndarray  # (4*hidden,)


@dataclass
class ModelParams:
    """All trainable tensors, shape-consistent with ``config``."""

    config: ModelConfig
    E: np.ndarray  # (vocab_size, d_embed) word embeddings
    W_img: np.ndarray  # (d_embed, d_img) image projection
    b_img: np.ndarray  # (d_embed,)
    lstm: tuple[tuple[LstmDirWeights, ...], ...]  # [layer][direction]
    W_out: np.ndarray  # (vocab_size, h_out)
    b_out: np.ndarray  # (vocab_size,)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in the canonical (checkpoint) order."""
        out = [("E", self.E), ("W_img", self.W_img), ("b_img", self.b_img)]
        for layer_index, directions in enumerate(self.lstm, start=1):
            for direction, w in zip(DIRECTION_NAMES, directions):
                out.append((f"lstm{layer_index}.{direction}.W_x", w.W_x))
                out.append((f"lstm{layer_index}.{direction}.W_h", w.W_h))
                out.append((f"lstm{layer_index}.{direction}.b", w.b))
        out.append(("W_out", self.W_out))
        out.append(("b_out", self.b_out))
        return out

    def copy(self) -> ModelParams:
        lstm = tuple(
            tuple(LstmDirWeights(w.W_x.copy(), w.W_h.copy(), w.b.copy()) for w in directions)
            for directions in self.lstm
        )
        return ModelParams(
            self.config,
            self.E.copy(),
            self.W_img.copy(),
            self.b_img.copy(),
            lstm,
            self.W_out.copy(),
            self.b_out.copy(),
        )

    @classmethod
    def from_tensor_dict(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelParams:
        """Assemble params from named tensors, validating names and shapes."""
        expected = dict(tensor_shapes(config))
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
        arrays = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(tensors[name], dtype=config.dtype)
            if arr.shape != shape:
                raise ValueError(f"tensor {name}: shape {arr.shape}, expected {shape}")
            arrays[name] = arr
        lstm = tuple(
            tuple(
                LstmDirWeights(
                    arrays[f"lstm{layer}.{direction}.W_x"],
                    arrays[f"lstm{layer}.{direction}.W_h"],
                    arrays[f"lstm{layer}.{direction}.b"],
                )
                for direction in DIRECTION_NAMES[: config.directions]
            )
            for layer in range(1, config.layers + 1)
        )
        return cls(
            config,
            arrays["E"],
            arrays["W_img"],
            arrays["b_img"],
            lstm,
            arrays["W_out"],
            arrays["b_out"],
        )


@dataclass(frozen=True)
class SequenceInput:
    """The model's two inputs: an image vector and an n-id token prefix."""

    image_vec: np.ndarray
    prefix: tuple[int, ...]


def tensor_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list for every trainable tensor."""
    config.require_resolved()
    h4 = 4 * config.hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("E", (config.vocab_size, config.d_embed)),
        ("W_img", (config.d_embed, config.d_img)),
        ("b_img", (config.d_embed,)),
    ]
    for layer in range(1, config.layers + 1):
        d_in = config.layer_input_dim(layer)
        for direction in DIRECTION_NAMES[: config.directions]:
            shapes.append((f"lstm{layer}.{direction}.W_x", (h4, d_in)))
            shapes.append((f"lstm{layer}.{direction}.W_h", (h4, config.hidden)))
            shapes.append((f"lstm{layer}.{direction}.b", (h4,)))
    shapes.append(("W_out", (config.vocab_size, config.h_out)))
    shapes.append(("b_out", (config.vocab_size,)))
    return shapes


def init_params(config: ModelConfig, seed) -> ModelParams:
    """Draw initial parameters deterministically from ``seed``.

    Weights are i.i.d. uniform on [-0.08, 0.08], drawn tensor by tensor in
    canonical order; biases are zero except forget-gate blocks, which
    start at 1.0 to keep the cell-state path open early in training.
    """
    rng = np.random.default_rng(seed)
    hidden = config.hidden
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            arr = np.zeros(shape, dtype=config.dtype)
            if leaf == "b":  # LSTM bias: open the forget gates
                arr[hidden : 2 * hidden] = FORGET_BIAS
        else:
            arr = rng.uniform(-INIT_SCALE, INIT_SCALE, shape).astype(config.dtype)
        tensors[name] = arr
    return ModelParams.from_tensor_dict(config, tensors)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function; inputs are clamped so np.exp never overflows."""
    return 1.0 / (1.0 + np.exp(-np.clip(np.asarray(z), -500.0, 500.0)))


def lstm_cell(
    x_t: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    W_x: np.ndarray,
    W_h: np.ndarray,
    b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step: gates (i, f, g, o), then the c and h updates."""
    hidden = W_h.shape[1]
    z = W_x @ np.asarray(x_t) + W_h @ np.asarray(h_prev) + b
    i = sigmoid(z[:hidden])
    f = sigmoid(z[hidden : 2 * hidden])
    g = np.tanh(z[2 * hidden : 3 * hidden])
    o = sigmoid(z[3 * hidden :])
    c = f * np.asarray(c_prev) + i * g
    h = o * np.tanh(c)
    return h, c


@dataclass
class DirectionRun:
    """Forward trace of one direction, stored as per-step arrays.

    All arrays are indexed by processing step; ``order`` maps processing
    steps to time indices (the identity forward, reversed backward).
    """

    order: np.ndarray  # (T,) time indices in processing order
    hs_time: np.ndarray  # (T, hidden), indexed by time step
    hs: np.ndarray  # (T, hidden) hidden states, processing order
    cs: np.ndarray  # (T, hidden) cell states, processing order
    gates_i: np.ndarray
    gates_f: np.ndarray
    gates_g: np.ndarray
    gates_o: np.ndarray
    tanh_c: np.ndarray


def _run_direction(w: LstmDirWeights, xs: np.ndarray, reverse: bool, dtype: np.dtype) -> DirectionRun:
    steps = xs.shape[0]
    hidden = w.W_h.shape[1]
    order = np.arange(steps)[::-1] if reverse else np.arange(steps)
    # input contributions for every step in one matmul, bias folded in
    x_part = xs @ w.W_x.T + w.b

    hs = np.empty((steps, hidden), dtype=dtype)
    cs = np.empty((steps, hidden), dtype=dtype)
    gi = np.empty((steps, hidden), dtype=dtype)
    gf = np.empty((steps, hidden), dtype=dtype)
    gg = np.empty((steps, hidden), dtype=dtype)
    go = np.empty((steps, hidden), dtype=dtype)
    tc = np.empty((steps, hidden), dtype=dtype)
    h = np.zeros(hidden, dtype=dtype)
    c = np.zeros(hidden, dtype=dtype)
    for s in range(steps):
        z = x_part[order[s]] + w.W_h @ h
        i = sigmoid(z[:hidden])
        f = sigmoid(z[hidden : 2 * hidden])
        g = np.tanh(z[2 * hidden : 3 * hidden])
        o = sigmoid(z[3 * hidden :])
        c = f * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        gi[s], gf[s], gg[s], go[s] = i, f, g, o
        cs[s], tc[s], hs[s] = c, tanh_c, h
    hs_time = hs[np.argsort(order)]
    return DirectionRun(order, hs_time, hs, cs, gi, gf, gg, go, tc)


@dataclass
class ForwardCache:
    """Intermediate state of one forward pass, kept for backprop."""

    seq_input: SequenceInput
    image_vec: np.ndarray  # cast to model dtype
    layer_inputs: list[np.ndarray]  # per layer: (T, input_dim)
    runs: list[list[DirectionRun]]  # [layer][direction]
    h_last: np.ndarray  # layer-2 output at the final time step


def embed_sequence(params: ModelParams, seq_input: SequenceInput) -> np.ndarray:
    """Build the (n+1, d_embed) step sequence for one input.

    Position 0 is the affine image projection; positions ``1..n`` are the
    embedding rows of the prefix ids.
    """
    config = params.config
    config.require_resolved()
    image_vec = np.asarray(seq_input.image_vec, dtype=config.dtype)
    if image_vec.shape != (config.d_img,):
        raise ValueError(f"image vector has shape {image_vec.shape}, expected ({config.d_img},)")
    if len(seq_input.prefix) != config.n:
        raise ValueError(f"prefix has {len(seq_input.prefix)} ids, expected {config.n}")
    ids = np.asarray(seq_input.prefix)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("prefix contains token ids outside the vocabulary")
    out = np.empty((config.n + 1, config.d_embed), dtype=config.dtype)
    out[0] = params.W_img @ image_vec + params.b_img
    out[1:] = params.E[ids]
    return out


def forward_with_cache(params: ModelParams, seq_input: SequenceInput) -> tuple[np.ndarray, ForwardCache]:
    """Full forward pass returning logits plus the backprop cache."""
    config = params.config
    dtype = config.dtype
    embedded = embed_sequence(params, seq_input)
    xs = embedded
    layer_inputs = []
    runs: list[list[DirectionRun]] = []
    for directions in params.lstm:
        layer_inputs.append(xs)
        layer_runs = [
            _run_direction(w, xs, reverse=(d == 1), dtype=dtype)
            for d, w in enumerate(directions)
        ]
        runs.append(layer_runs)
        xs = np.concatenate([run.hs_time for run in layer_runs], axis=1)
    h_last = xs[-1]
    logits = params.W_out @ h_last + params.b_out
    cache = ForwardCache(
        seq_input,
        np.asarray(seq_input.image_vec, dtype=dtype),
        layer_inputs,
        runs,
        h_last,
    )
    return logits, cache


def forward(params: ModelParams, seq_input: SequenceInput) -> np.ndarray:
    """Logits over the vocabulary for one (image, prefix) input."""
    logits, _ = forward_with_cache(params, seq_input)
    return logits


def softmax_cross_entropy(logits: np.ndarray, target_id: int) -> tuple[float, np.ndarray]:
    """Stable softmax probabilities and ``-ln p[target_id]``."""
    logits = np.asarray(logits)
    if not 0 <= target_id < logits.shape[0]:
        raise ValueError(f"target id {target_id} out of range for {logits.shape[0]} logits")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    probs = exp / total
    # -ln(probs[target]) without ever taking log of a flushed-to-zero prob
    loss = float(np.log(total) - shifted[target_id])
    return loss, probs

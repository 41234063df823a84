"""Causal transformer language model over the autodiff engine.

Each layer applies multi-head self-attention over the step's history,
a residual connection, layer normalization, a GELU feed-forward block,
a second residual, and a second normalization. Token embeddings are
summed with a learned positional table; an output projection produces
vocabulary logits, and position t is scored against token t+1.

Two evaluation paths exist on purpose: a stepwise one that threads an
explicit key/value cache (the definition), and a full-sequence masked
one (the fast path used for training). Tests pin them together.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    ShapeError,
    StateMismatchError,
)

LN_EPS = 1e-5
INIT_RANGE = 0.1
MASK_VALUE = -1e9


class TransformerLayer:
    """One attention + feed-forward block with its normalization pairs.

    Projection matrices act on column vectors (q = Q x), so a row-batch
    X of shape (T, d_model) is projected as X @ Q^T.
    """

    PARAM_SUFFIXES = (
        "Q", "K", "V", "Wh", "W1", "b1", "W2", "b2",
        "ln1.g", "ln1.b", "ln2.g", "ln2.b",
    )

    def __init__(self, d_model: int, d_ff: int, n_heads: int, params: dict):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        expected = {
            "Q": (d_model, d_model), "K": (d_model, d_model), "V": (d_model, d_model),
            "Wh": (d_model, d_model),
            "W1": (d_ff, d_model), "b1": (d_ff,),
            "W2": (d_model, d_ff), "b2": (d_model,),
            "ln1.g": (d_model,), "ln1.b": (d_model,),
            "ln2.g": (d_model,), "ln2.b": (d_model,),
        }
        for name, shape in expected.items():
            p = params[name]
            if p.data.shape != shape:
                raise ShapeError(f"parameter {name} has shape {p.data.shape}, expected {shape}")
        self.params = {k: params[k] for k in self.PARAM_SUFFIXES}

    @classmethod
    def init_random(cls, rng, d_model: int, d_ff: int, n_heads: int, dtype=np.float32):
        def mat(*shape):
            return T.Tensor(
                rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(dtype),
                requires_grad=True,
            )

        def vec(shape, fill):
            return T.Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)

        params = {
            "Q": mat(d_model, d_model),
            "K": mat(d_model, d_model),
            "V": mat(d_model, d_model),
            "Wh": mat(d_model, d_model),
            "W1": mat(d_ff, d_model),
            "b1": vec(d_ff, 0.0),
            "W2": mat(d_model, d_ff),
            "b2": vec(d_model, 0.0),
            "ln1.g": vec(d_model, 1.0),
            "ln1.b": vec(d_model, 0.0),
            "ln2.g": vec(d_model, 1.0),
            "ln2.b": vec(d_model, 0.0),
        }
        return cls(d_model, d_ff, n_heads, params)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]


class AttentionState:
    """Per-layer key/value history for stepwise evaluation."""

    def __init__(self, layer: TransformerLayer):
        self.layer = layer
        self.keys: list = []
        self.values: list = []

    def __len__(self) -> int:
        return len(self.keys)


def _split_heads(x: T.Tensor, t: int, n_heads: int, d_head: int) -> T.Tensor:
    # (t, d_model) -> (n_heads, t, d_head)
    return T.transpose(T.reshape(x, (t, n_heads, d_head)), (1, 0, 2))


def _merge_heads(x: T.Tensor, t: int, d_model: int) -> T.Tensor:
    # (n_heads, t, d_head) -> (t, d_model)
    return T.reshape(T.transpose(x, (1, 0, 2)), (t, d_model))


def attention_step(layer: TransformerLayer, x_t: T.Tensor, state: AttentionState,
                   return_weights: bool = False):
    """One time step of cached self-attention plus residual and norm.

    Appends this step's key/value to ``state`` and attends over the full
    history including the current position. Scores are scaled by
    1/sqrt(d_head).
    """
    if state.layer is not layer:
        raise StateMismatchError("attention state belongs to a different layer")
    d, h, dh = layer.d_model, layer.n_heads, layer.d_head
    if x_t.data.shape != (d,):
        raise ShapeError(f"expected input of shape ({d},), got {x_t.data.shape}")

    x2 = T.reshape(x_t, (1, d))
    q = T.matmul(x2, T.transpose(layer["Q"]))
    k = T.matmul(x2, T.transpose(layer["K"]))
    v = T.matmul(x2, T.transpose(layer["V"]))
    state.keys.append(k)
    state.values.append(v)
    t = len(state)

    keys = T.concat(state.keys, axis=0)      # (t, d)
    values = T.concat(state.values, axis=0)  # (t, d)
    qh = _split_heads(q, 1, h, dh)           # (h, 1, dh)
    kh = _split_heads(keys, t, h, dh)        # (h, t, dh)
    vh = _split_heads(values, t, h, dh)

    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    weights = T.softmax(T.reshape(scores, (h, t)))
    ctx = T.matmul(T.reshape(weights, (h, 1, t)), vh)  # (h, 1, dh)
    attended = T.matmul(_merge_heads(ctx, 1, d), T.transpose(layer["Wh"]))

    y = T.add(attended, x2)
    z = T.reshape(T.layer_norm(y, layer["ln1.g"], layer["ln1.b"], LN_EPS), (d,))
    if return_weights:
        return z, weights.data.copy()
    return z


def feed_forward(layer: TransformerLayer, z_t: T.Tensor) -> T.Tensor:
    """Position-wise feed-forward with residual and norm: one step."""
    d = layer.d_model
    if z_t.data.shape != (d,):
        raise ShapeError(f"expected input of shape ({d},), got {z_t.data.shape}")
    z2 = T.reshape(z_t, (1, d))
    hidden = T.gelu(T.add(T.matmul(z2, T.transpose(layer["W1"])), layer["b1"]))
    s = T.add(T.add(T.matmul(hidden, T.transpose(layer["W2"])), layer["b2"]), z2)
    return T.reshape(T.layer_norm(s, layer["ln2.g"], layer["ln2.b"], LN_EPS), (d,))


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """(t, t) additive mask: 0 at or before the diagonal, large negative after."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = MASK_VALUE
    return m


def attention_sublayer(layer: TransformerLayer, x: T.Tensor,
                       mask: T.Tensor) -> T.Tensor:
    """Multi-head attention + residual + first norm; x is (t, d_model)."""
    t, d = x.data.shape
    h, dh = layer.n_heads, layer.d_head
    q = T.matmul(x, T.transpose(layer["Q"]))
    k = T.matmul(x, T.transpose(layer["K"]))
    v = T.matmul(x, T.transpose(layer["V"]))
    qh = _split_heads(q, t, h, dh)
    kh = _split_heads(k, t, h, dh)
    vh = _split_heads(v, t, h, dh)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = T.softmax(T.add(scores, mask))
    ctx = _merge_heads(T.matmul(attn, vh), t, d)
    y = T.add(T.matmul(ctx, T.transpose(layer["Wh"])), x)
    return T.layer_norm(y, layer["ln1.g"], layer["ln1.b"], LN_EPS)


def ffn_sublayer(layer: TransformerLayer, z: T.Tensor) -> T.Tensor:
    """Feed-forward + residual + second norm; z is (t, d_model)."""
    hidden = T.gelu(T.add(T.matmul(z, T.transpose(layer["W1"])), layer["b1"]))
    s = T.add(T.add(T.matmul(hidden, T.transpose(layer["W2"])), layer["b2"]), z)
    return T.layer_norm(s, layer["ln2.g"], layer["ln2.b"], LN_EPS)


def layer_forward(layer: TransformerLayer, x: T.Tensor, mask: T.Tensor) -> T.Tensor:
    """Full-sequence evaluation of one layer; x is (t, d_model)."""
    return ffn_sublayer(layer, attention_sublayer(layer, x, mask))


class TransformerLM:
    """Stacked transformer layers plus embeddings and output projection."""

    def __init__(self, embed_tok: T.Tensor, embed_pos: T.Tensor,
                 layers: list, out_proj, tied: bool = False):
        self.embed_tok = embed_tok
        self.embed_pos = embed_pos
        self.layers = list(layers)
        self.tied = bool(tied)
        self.out_proj = embed_tok if self.tied else out_proj
        v, d = embed_tok.data.shape
        if embed_pos.data.shape[1] != d:
            raise ShapeError("positional table width must match d_model")
        if self.out_proj.data.shape != (v, d):
            raise ShapeError("output projection must be (vocab, d_model)")
        for layer in self.layers:
            if layer.d_model != d:
                raise ShapeError("layer width must match embedding width")

    @classmethod
    def init_random(cls, vocab_size: int, d_model: int = 64, d_ff: int = 256,
                    n_heads: int = 2, n_layers: int = 2, max_len: int = 128,
                    seed: int = 0, tied: bool = False, dtype=np.float32):
        if vocab_size < 2:
            raise ConfigError("vocabulary must have at least 2 entries")
        rng = np.random.default_rng(seed)

        def mat(*shape):
            return T.Tensor(
                rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(dtype),
                requires_grad=True,
            )

        embed_tok = mat(vocab_size, d_model)
        embed_pos = mat(max_len, d_model)
        layers = [
            TransformerLayer.init_random(rng, d_model, d_ff, n_heads, dtype)
            for _ in range(n_layers)
        ]
        out_proj = None if tied else mat(vocab_size, d_model)
        return cls(embed_tok, embed_pos, layers, out_proj, tied=tied)

    @property
    def vocab_size(self) -> int:
        return self.embed_tok.data.shape[0]

    @property
    def d_model(self) -> int:
        return self.embed_tok.data.shape[1]

    @property
    def max_len(self) -> int:
        return self.embed_pos.data.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return self.layers[0].n_heads if self.layers else 1

    @property
    def d_ff(self) -> int:
        return self.layers[0].d_ff if self.layers else 0

    def params(self) -> dict:
        """Name -> tensor, in a fixed order; tied models list no out.proj."""
        out = {"embed.tok": self.embed_tok, "embed.pos": self.embed_pos}
        for i, layer in enumerate(self.layers):
            for suffix in TransformerLayer.PARAM_SUFFIXES:
                out[f"layer{i}.{suffix}"] = layer.params[suffix]
        if not self.tied:
            out["out.proj"] = self.out_proj
        return out

    def param_list(self) -> list:
        return list(self.params().values())

    def copy(self) -> "TransformerLM":
        """Deep copy: fresh tensors with copied data."""
        def clone(t):
            return T.Tensor(t.data.copy(), requires_grad=True)

        layers = [
            TransformerLayer(l.d_model, l.d_ff, l.n_heads,
                             {k: clone(v) for k, v in l.params.items()})
            for l in self.layers
        ]
        embed_tok = clone(self.embed_tok)
        out_proj = None if self.tied else clone(self.out_proj)
        return TransformerLM(embed_tok, clone(self.embed_pos), layers,
                             out_proj, tied=self.tied)

    def zero_grad(self):
        for p in self.param_list():
            p.grad = None

    def meta(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "max_len": self.max_len,
            "tied": self.tied,
        }


def from_param_arrays(meta: dict, arrays: dict) -> TransformerLM:
    """Assemble a model from a meta descriptor and named weight arrays."""
    def tensor(name):
        try:
            arr = arrays[name]
        except KeyError:
            raise ShapeError(f"missing parameter {name}") from None
        return T.Tensor(np.asarray(arr), requires_grad=True)

    layers = []
    for i in range(meta["n_layers"]):
        params = {s: tensor(f"layer{i}.{s}") for s in TransformerLayer.PARAM_SUFFIXES}
        layers.append(TransformerLayer(meta["d_model"], meta["d_ff"],
                                       meta["n_heads"], params))
    tied = bool(meta.get("tied", False))
    embed_tok = tensor("embed.tok")
    out_proj = None if tied else tensor("out.proj")
    return TransformerLM(embed_tok, tensor("embed.pos"), layers, out_proj, tied=tied)


def _check_tokens(model: TransformerLM, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1:
        raise ShapeError("token sequence must be one-dimensional")
    if toks.size > model.max_len:
        raise ShapeError(
            f"sequence of length {toks.size} exceeds max_len {model.max_len}")
    if toks.size and (toks.min() < 0 or toks.max() >= model.vocab_size):
        raise IndexError("token id out of vocabulary range")
    return toks


def embed_sequence(model: TransformerLM, toks: np.ndarray) -> T.Tensor:
    t = toks.size
    pos = T.slice_rows(model.embed_pos, 0, t)
    return T.add(T.take_rows(model.embed_tok, toks), pos)


def hidden_states(model: TransformerLM, tokens) -> T.Tensor:
    """Final-layer states for a sequence, shape (t, d_model)."""
    toks = _check_tokens(model, tokens)
    x = embed_sequence(model, toks)
    mask = T.Tensor(causal_mask(toks.size, dtype=x.data.dtype))
    for layer in model.layers:
        x = layer_forward(layer, x, mask)
    return x


def forward_sequence(model: TransformerLM, tokens) -> T.Tensor:
    """Per-position negative log-likelihoods, shape (t-1,).

    Position i scores token i+1; a single-token sequence yields an empty
    result. Uses the masked full-sequence path.
    """
    toks = _check_tokens(model, tokens)
    if toks.size < 2:
        return T.Tensor(np.zeros(0, dtype=model.embed_tok.data.dtype))
    x = hidden_states(model, toks)
    logits = T.matmul(x, T.transpose(model.out_proj))
    return T.cross_entropy(T.slice_rows(logits, 0, toks.size - 1), toks[1:])


def forward_sequence_stepwise(model: TransformerLM, tokens) -> T.Tensor:
    """Same contract as forward_sequence via the explicit key/value cache."""
    toks = _check_tokens(model, tokens)
    if toks.size < 2:
        return T.Tensor(np.zeros(0, dtype=model.embed_tok.data.dtype))
    states = [AttentionState(layer) for layer in model.layers]
    nlls = []
    for t in range(toks.size - 1):
        x = T.add(
            T.reshape(T.take_rows(model.embed_tok, [toks[t]]), (model.d_model,)),
            T.reshape(T.slice_rows(model.embed_pos, t, t + 1), (model.d_model,)),
        )
        for layer, state in zip(model.layers, states):
            x = feed_forward(layer, attention_step(layer, x, state))
        logits = T.reshape(
            T.matmul(T.reshape(x, (1, model.d_model)), T.transpose(model.out_proj)),
            (model.vocab_size,),
        )
        nlls.append(T.reshape(T.cross_entropy(logits, int(toks[t + 1])), (1,)))
    return T.concat(nlls, axis=0)


def sequence_mean_nll(model: TransformerLM, tokens) -> T.Tensor:
    """Scalar mean NLL of a sequence; the training objective."""
    nll = forward_sequence(model, tokens)
    if nll.data.size == 0:
        raise DegenerateInputError("sequence has no predicted positions")
    return T.tmean(nll)


def perplexity(model: TransformerLM, stream, window: int | None = None) -> float:
    """exp(mean NLL) over consecutive windows of a token stream.

    The stream is cut into non-overlapping windows of ``window`` tokens
    (default: the model's max_len); the first token of each window is
    context only. Accumulation runs in float64.
    """
    toks = np.asarray(stream, dtype=np.int64).reshape(-1)
    if toks.size < 2:
        raise DegenerateInputError("perplexity needs at least two tokens")
    if window is None:
        window = model.max_len
    if window < 2:
        raise ConfigError("window must cover at least two tokens")
    total = 0.0
    count = 0
    with T.no_grad():
        for start in range(0, toks.size - 1, window):
            chunk = toks[start:start + window]
            if chunk.size < 2:
                break
            nll = forward_sequence(model, chunk)
            total += float(nll.data.astype(np.float64).sum())
            count += nll.data.size
    return float(np.exp(total / count))

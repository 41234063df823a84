"""Differentiable search over per-sub-layer quantization precisions.

A supernet stacks, for every attention and feed-forward sub-layer, one
candidate branch per bit width, each initialized from a separately trained
uniform-precision model. Branch outputs are blended by softmax selection
weights; the weights train against held-out likelihood plus a complexity
penalty, and the final architecture keeps each sub-layer's strongest
candidate.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import tensor as T
from .admm import corpus_windows
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    IncompatibilityError,
    TrainingDivergedError,
)
from .model import (
    TransformerLayer,
    attention_sublayer,
    causal_mask,
    ffn_sublayer,
)
from .quant import (
    ATTN_SUFFIXES,
    FFN_SUFFIXES,
    assignment_bookkeeping,
    quantize_cluster,
)
from .sensitivity import PrecisionAssignment

SLOT_KINDS = ("attn", "ffn")
_SLOT_SUFFIXES = {"attn": ATTN_SUFFIXES, "ffn": FFN_SUFFIXES}


@dataclass
class SearchOptions:
    """Alternating-update schedule for precision search."""

    epochs: int = 10
    lr_weights: float = 0.1
    lr_arch: float = 1.0
    lr_decay: float = 1.0
    beta: float = 0.01
    window: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    shuffle: bool = True
    freeze_weights: bool = False
    project_every: int = 1


# -- selection weights -----------------------------------------------------------


@dataclass
class SelectionWeights:
    """Snapshot of per-sub-layer candidate preferences."""

    beta: float
    slots: list                    # e.g. ["layer0.attn", "layer0.ffn", ...]
    candidates: tuple              # ascending bit widths
    logits: dict                   # slot -> np.ndarray (K,)
    weights: dict                  # slot -> np.ndarray (K,), softmax of logits
    sizes: dict = field(default_factory=dict)    # slot/cluster -> param count
    fixed: dict = field(default_factory=dict)    # shared cluster -> bit width
    residue_params: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"penalty coefficient must be >= 0, got {self.beta}")
        self.candidates = tuple(int(b) for b in self.candidates)
        k = len(self.candidates)
        for slot in self.slots:
            w = np.asarray(self.weights[slot], dtype=np.float64)
            if w.shape != (k,):
                raise ConfigError(f"slot {slot} has {w.size} weights, expected {k}")
            if (w < -1e-12).any() or (w > 1 + 1e-12).any():
                raise ConfigError(f"slot {slot} weights outside [0, 1]")
            if abs(w.sum() - 1.0) > 1e-6:
                raise ConfigError(f"slot {slot} weights do not sum to 1")

    HEADER = "layer,sublayer,n_bits,logit,weight"

    def to_text(self) -> str:
        lines = [f"# beta={float(self.beta)!r} residue_params={self.residue_params}"]
        if self.fixed:
            parts = ",".join(f"{c}={b}:{self.sizes.get(c, 0)}"
                             for c, b in sorted(self.fixed.items()))
            lines.append(f"# fixed: {parts}")
        if any(s in self.sizes for s in self.slots):
            parts = ",".join(f"{s}={self.sizes[s]}" for s in self.slots)
            lines.append(f"# sizes: {parts}")
        lines.append(self.HEADER)
        for slot in self.slots:
            layer, kind = slot.rsplit(".", 1)
            layer = layer.removeprefix("layer")
            for i, bits in enumerate(self.candidates):
                lines.append(
                    f"{layer},{kind},{bits},{float(self.logits[slot][i])!r},"
                    f"{float(self.weights[slot][i])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SelectionWeights":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# beta="):
            raise ConfigError("malformed selection-weight text")
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        fixed, sizes = {}, {}
        body = 1
        while body < len(lines) and lines[body].startswith("#"):
            tag, _, rest = lines[body][1:].strip().partition(":")
            if tag.strip() == "fixed":
                for item in rest.strip().split(","):
                    cid, entry = item.split("=")
                    bits, size = entry.split(":")
                    fixed[cid] = int(bits)
                    sizes[cid] = int(size)
            elif tag.strip() == "sizes":
                for item in rest.strip().split(","):
                    cid, size = item.split("=")
                    sizes[cid] = int(size)
            body += 1
        if body >= len(lines) or lines[body] != cls.HEADER:
            raise ConfigError("unexpected selection-weight header")
        slots, logits, weights, bit_set = [], {}, {}, []
        for ln in lines[body + 1:]:
            parts = ln.split(",")
            if len(parts) != 5:
                raise ConfigError(f"malformed selection record: {ln!r}")
            slot = f"layer{parts[0]}.{parts[1]}"
            bits = int(parts[2])
            if slot not in logits:
                slots.append(slot)
                logits[slot], weights[slot] = [], []
            if bits not in bit_set:
                bit_set.append(bits)
            logits[slot].append(float(parts[3]))
            weights[slot].append(float(parts[4]))
        return cls(
            beta=float(meta["beta"]), slots=slots,
            candidates=tuple(bit_set),
            logits={s: np.array(v) for s, v in logits.items()},
            weights={s: np.array(v) for s, v in weights.items()},
            sizes=sizes, fixed=fixed,
            residue_params=int(meta.get("residue_params", "0")))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "SelectionWeights":
        with open(path) as fh:
            return cls.from_text(fh.read())


def nas_loss(nll: float, weights: SelectionWeights) -> float:
    """Penalized objective: likelihood plus beta * sum alpha * sqrt(bits)."""
    penalty = 0.0
    roots = np.sqrt(np.asarray(weights.candidates, dtype=np.float64))
    for slot in weights.slots:
        penalty += float(np.asarray(weights.weights[slot]) @ roots)
    return float(nll) + weights.beta * penalty


def extract_1best(weights: SelectionWeights) -> PrecisionAssignment:
    """Keep each sub-layer's highest-weight candidate; ties take fewer bits.

    total_omega is reported as 0: selection weights carry no curvature
    score. Size bookkeeping assumes one parameter per slot when the
    snapshot carries no size table.
    """
    order = np.argsort(weights.candidates)
    assignment = {}
    for slot in weights.slots:
        w = np.asarray(weights.weights[slot], dtype=np.float64)
        best = order[int(np.argmax(w[order]))]   # scan in ascending bit order
        assignment[slot] = int(weights.candidates[best])
    assignment.update(weights.fixed)
    sizes = {c: weights.sizes.get(c, 1) for c in assignment}
    avg, size_mb, ratio = assignment_bookkeeping(
        assignment, sizes, weights.residue_params)
    return PrecisionAssignment(
        assignment=assignment, average_bits=avg, total_omega=0.0,
        size_mb=size_mb, compression_ratio=ratio, budget=0.0)


# -- supernet ---------------------------------------------------------------------


class Supernet:
    """Candidate branches per sub-layer around one set of shared parts.

    Shared parts (embeddings, output projection, norms, biases) come from
    the widest-precision donor model; branch matrices are copies of each
    uniform model's grid values, so later edits to the donors never leak
    in.
    """

    def __init__(self, shared_model, candidates, branches, tables, logits,
                 fixed=None, fixed_sizes=None, residue_params=0):
        self.shared = shared_model
        self.candidates = tuple(candidates)
        self.branches = branches      # (layer, kind, bits) -> {suffix: Tensor}
        self.tables = tables          # (layer, kind, bits) -> QuantTable
        self.logits = logits          # (layer, kind) -> Tensor (K,)
        self.fixed = dict(fixed or {})            # shared cluster -> bits
        self.fixed_sizes = dict(fixed_sizes or {})
        self.residue_params = int(residue_params)
        self._layers = {}
        for (l, kind, bits), mats in branches.items():
            base = self.shared.layers[l]
            params = dict(base.params)
            params.update(mats)       # other-slot entries stay shared; unused
            self._layers[(l, kind, bits)] = TransformerLayer(
                base.d_model, base.d_ff, base.n_heads, params)

    @property
    def n_layers(self) -> int:
        return self.shared.n_layers

    def slot_ids(self) -> list:
        return [f"layer{l}.{kind}" for l in range(self.n_layers)
                for kind in SLOT_KINDS]

    def arch_params(self) -> list:
        return [self.logits[(l, kind)] for l in range(self.n_layers)
                for kind in SLOT_KINDS]

    def weight_params(self) -> list:
        seen, out = set(), []
        for p in self.shared.param_list():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        for key in sorted(self.branches):
            for suffix in _SLOT_SUFFIXES[key[1]]:
                p = self.branches[key][suffix]
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def _combine(self, outputs: list, key) -> T.Tensor:
        alphas = T.softmax(self.logits[key])
        total = None
        for i, out in enumerate(outputs):
            a = T.reshape(T.slice_rows(alphas, i, i + 1), (1, 1))
            term = T.mul(out, a)
            total = term if total is None else T.add(total, term)
        return total

    def forward(self, tokens) -> T.Tensor:
        """Per-position NLL vector under the blended architecture."""
        from .model import _check_tokens, embed_sequence

        toks = _check_tokens(self.shared, tokens)
        if toks.size < 2:
            return T.Tensor(np.zeros(0, dtype=self.shared.embed_tok.data.dtype))
        x = embed_sequence(self.shared, toks)
        mask = T.Tensor(causal_mask(toks.size, dtype=x.data.dtype))
        for l in range(self.n_layers):
            z = self._combine(
                [attention_sublayer(self._layers[(l, "attn", b)], x, mask)
                 for b in self.candidates], (l, "attn"))
            x = self._combine(
                [ffn_sublayer(self._layers[(l, "ffn", b)], z)
                 for b in self.candidates], (l, "ffn"))
        logits = T.matmul(x, T.transpose(self.shared.out_proj))
        return T.cross_entropy(T.slice_rows(logits, 0, toks.size - 1), toks[1:])

    def mean_nll(self, tokens) -> T.Tensor:
        nll = self.forward(tokens)
        if nll.data.size == 0:
            raise DegenerateInputError("sequence has no predicted positions")
        return T.tmean(nll)

    def penalty_node(self, beta: float):
        """beta * sum_slot alpha . sqrt(bits) as a graph node, or None."""
        if beta == 0.0:
            return None
        roots = T.Tensor(np.sqrt(np.asarray(self.candidates, dtype=np.float64)))
        total = None
        for l in range(self.n_layers):
            for kind in SLOT_KINDS:
                term = T.tsum(T.mul(T.softmax(self.logits[(l, kind)]), roots))
                total = term if total is None else T.add(total, term)
        return T.scale(total, beta)

    def project(self) -> None:
        """Snap every branch back onto its own grid, rescaling warm-start."""
        for key in sorted(self.branches):
            _, kind, bits = key
            mats = self.branches[key]
            arrays = {s: mats[s].data.astype(np.float64)
                      for s in _SLOT_SUFFIXES[kind]}
            prev = self.tables[key]
            result = quantize_cluster(arrays, bits, extra_starts=(prev.alpha,))
            self.tables[key] = result.table
            for s in _SLOT_SUFFIXES[kind]:
                mats[s].data = (result.levels[s].astype(np.float64)
                                * result.table.alpha).astype(mats[s].data.dtype)

    def selection_weights(self, beta: float = 0.0) -> SelectionWeights:
        slots, logits, weights, sizes = [], {}, {}, {}
        for l in range(self.n_layers):
            for kind in SLOT_KINDS:
                slot = f"layer{l}.{kind}"
                slots.append(slot)
                raw = self.logits[(l, kind)].data.astype(np.float64)
                shifted = np.exp(raw - raw.max())
                logits[slot] = raw.copy()
                weights[slot] = shifted / shifted.sum()
                sizes[slot] = int(sum(
                    self.branches[(l, kind, self.candidates[0])][s].data.size
                    for s in _SLOT_SUFFIXES[kind]))
        sizes.update(self.fixed_sizes)
        return SelectionWeights(
            beta=beta, slots=slots, candidates=self.candidates, logits=logits,
            weights=weights, sizes=sizes, fixed=dict(self.fixed),
            residue_params=self.residue_params)


def build_supernet(uniform_models: dict) -> Supernet:
    """Assemble the search space from per-bit-width trained models.

    Branch matrices copy each donor's grid values; shared parts (and the
    placeholder entries a branch never evaluates) come from the
    widest-precision donor.
    """
    if not uniform_models:
        raise ConfigError("need at least one uniform-precision model")
    candidates = tuple(sorted(int(b) for b in uniform_models))
    metas = {b: dict(uniform_models[b].meta) for b in candidates}
    reference = metas[candidates[-1]]
    for b, meta in metas.items():
        if meta != reference:
            raise IncompatibilityError(
                f"candidate at {b} bits has architecture {meta}, "
                f"expected {reference}")
    donor = uniform_models[candidates[-1]]
    shared_model = donor.to_model()
    slot_ids = {f"layer{l}.{kind}" for l in range(shared_model.n_layers)
                for kind in SLOT_KINDS}
    fixed, fixed_sizes = {}, {}
    for c in donor.clusters:
        bits = donor.assignment[c.id]
        if c.id in slot_ids or c.id not in donor.tables:
            continue
        fixed[c.id] = bits
        fixed_sizes[c.id] = int(sum(donor.param_array(r).size
                                    for r in c.param_refs))
    total = sum(p.data.size for p in shared_model.params().values())
    slot_params = sum(shared_model.params()[f"layer{l}.{s}"].data.size
                      for l in range(shared_model.n_layers)
                      for kind in SLOT_KINDS for s in _SLOT_SUFFIXES[kind])
    residue_params = total - slot_params - sum(fixed_sizes.values())
    branches, tables, logits = {}, {}, {}
    for l in range(shared_model.n_layers):
        for kind in SLOT_KINDS:
            cluster_id = f"layer{l}.{kind}"
            for bits in candidates:
                qm = uniform_models[bits]
                if cluster_id not in qm.tables:
                    raise IncompatibilityError(
                        f"{bits}-bit model has no grid for {cluster_id}")
                mats = {}
                for suffix in _SLOT_SUFFIXES[kind]:
                    arr = qm.param_array(f"layer{l}.{suffix}")
                    mats[suffix] = T.Tensor(arr.copy(), requires_grad=True)
                branches[(l, kind, bits)] = mats
                tables[(l, kind, bits)] = qm.tables[cluster_id]
            logits[(l, kind)] = T.Tensor(
                np.zeros(len(candidates), dtype=np.float64), requires_grad=True)
    return Supernet(shared_model, candidates, branches, tables, logits,
                    fixed=fixed, fixed_sizes=fixed_sizes,
                    residue_params=residue_params)


# -- search -----------------------------------------------------------------------


@dataclass
class NasLogRow:
    iteration: int
    train_loss: float
    heldout_loss: float
    penalty: float


@dataclass
class NasLog:
    rows: list = field(default_factory=list)

    HEADER = "iteration,train_loss,heldout_loss,penalty"

    def lines(self) -> list:
        out = [self.HEADER]
        for r in self.rows:
            out.append(f"{r.iteration},{r.train_loss:.10g},"
                       f"{r.heldout_loss:.10g},{r.penalty:.10g}")
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def _step(loss: T.Tensor, params: list, lr: float, clip_norm: float,
          trainable: list) -> float:
    if not np.isfinite(loss.item()):
        raise TrainingDivergedError("non-finite search loss")
    for p in trainable:
        p.grad = None
    loss.backward()
    T.sgd_step(params, lr, clip_norm)
    return float(loss.item())


def search(net: Supernet, corpus, opts: SearchOptions | None = None):
    """Alternate architecture and weight updates; returns (weights, log).

    Architecture logits train on the held-out half of the corpus, branch
    and shared weights on the training half; branches re-project to their
    grids after each epoch unless frozen.
    """
    opts = opts or SearchOptions()
    toks = np.asarray(corpus, dtype=np.int64)
    if toks.size < 4 * opts.window:
        raise DegenerateInputError(
            "corpus too small to split for architecture search")
    half = toks.size // 2
    train, held = toks[:half], toks[half:]
    arch = net.arch_params()
    weights = net.weight_params()
    trainable = weights + arch
    log = NasLog()
    for epoch in range(opts.epochs):
        rng_t = np.random.default_rng([opts.seed, epoch, 0]) if opts.shuffle else None
        rng_h = np.random.default_rng([opts.seed, epoch, 1]) if opts.shuffle else None
        train_windows = corpus_windows(train, opts.window, rng_t)
        held_windows = corpus_windows(held, opts.window, rng_h)
        lr = opts.lr_weights * opts.lr_decay ** epoch
        train_losses, held_losses, penalty_value = [], [], 0.0
        for i in range(max(len(train_windows), len(held_windows))):
            if not opts.freeze_weights and train_windows:
                w = train_windows[i % len(train_windows)]
                train_losses.append(
                    _step(net.mean_nll(w), weights, lr, opts.clip_norm, trainable))
            h = held_windows[i % len(held_windows)]
            objective = net.mean_nll(h)
            pen = net.penalty_node(opts.beta)
            if pen is not None:
                objective = T.add(objective, pen)
                penalty_value = float(pen.item())
            held_losses.append(
                _step(objective, arch, opts.lr_arch, opts.clip_norm, trainable))
        if not opts.freeze_weights and opts.project_every > 0 \
                and (epoch + 1) % opts.project_every == 0:
            net.project()
        log.rows.append(NasLogRow(
            epoch,
            float(np.mean(train_losses)) if train_losses else 0.0,
            float(np.mean(held_losses)), penalty_value))
    return net.selection_weights(opts.beta), log


class PrecisionSearch(BaseEstimator):
    """Estimator facade: fit(token stream) learns selection weights."""

    def __init__(self, uniform_models=None, epochs: int = 10,
                 lr_weights: float = 0.1, lr_arch: float = 1.0,
                 beta: float = 0.01, window: int = 32, seed: int = 0,
                 freeze_weights: bool = False):
        self.uniform_models = uniform_models
        self.epochs = epochs
        self.lr_weights = lr_weights
        self.lr_arch = lr_arch
        self.beta = beta
        self.window = window
        self.seed = seed
        self.freeze_weights = freeze_weights

    def fit(self, X, y=None):
        if not self.uniform_models:
            raise ConfigError("PrecisionSearch needs uniform-precision models")
        self.supernet_ = build_supernet(self.uniform_models)
        opts = SearchOptions(
            epochs=self.epochs, lr_weights=self.lr_weights,
            lr_arch=self.lr_arch, beta=self.beta, window=self.window,
            seed=self.seed, freeze_weights=self.freeze_weights)
        self.weights_, self.log_ = search(self.supernet_, X, opts)
        self.assignment_ = extract_1best(self.weights_)
        return self

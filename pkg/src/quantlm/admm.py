"""Quantized training by ADMM splitting.

The continuous weights W follow SGD on the augmented objective
f(W) + (rho/2) * sum ||W - Q + lambda||^2, the discrete copy Q is the
per-cluster grid projection of W + lambda with a freshly fitted scale,
and the duals accumulate lambda += W - Q. One iteration is a full epoch
of weight updates followed by a projection and a dual step; training
stops when the normalized primal residual ||W - Q|| / sqrt(count) drops
below tolerance.

Duals are kept in float64. Q is stored at the weights' own precision,
and the dual update subtracts those exact values, so the identity
lambda' - lambda == W - Q holds bit-for-bit.

Clusters assigned 32 bits are exempt from the penalty, the projection,
and the duals; with nothing quantized the loop degenerates to the plain
SGD trainer (same operations in the same order, bit-identical results).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, TrainingDivergedError
from .model import sequence_mean_nll
from .quant import (
    FULL_PRECISION_BITS,
    QuantizedModel,
    default_clusters,
    dequantize,
    quantize_cluster,
    validate_clusters,
)


@dataclass
class TrainOptions:
    """Plain SGD schedule over non-overlapping corpus windows."""

    epochs: int = 10
    lr: float = 0.5
    lr_decay: float = 1.0        # per-epoch geometric factor
    window: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    shuffle: bool = True


@dataclass
class AdmmOptions(TrainOptions):
    rho: float = 1e-3
    rho_growth: float = 1.0       # optional geometric schedule, e.g. 1.05
    project_every: int = 1        # epochs between projections
    tol: float = 1e-3             # normalized primal residual


@dataclass
class LogRow:
    iteration: int
    loss: float
    residual: float
    mean_alpha: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    converged: bool = True
    best_iteration: int = -1

    HEADER = "iteration,loss,primal_residual,mean_alpha"

    def lines(self) -> list:
        out = [self.HEADER]
        for r in self.rows:
            out.append(f"{r.iteration},{r.loss:.10g},{r.residual:.10g},{r.mean_alpha:.10g}")
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    @property
    def losses(self) -> list:
        return [r.loss for r in self.rows]

    @property
    def residuals(self) -> list:
        return [r.residual for r in self.rows]


class AdmmState:
    """Consensus variables (Q, lambda, tables) alongside the live weights."""

    def __init__(self, params: dict, clusters, bit_map: dict, rho: float = 1e-3,
                 init_project: bool = True):
        if rho < 0 or not np.isfinite(rho):
            raise ConfigError(f"penalty coefficient must be >= 0, got {rho}")
        missing = [c.id for c in clusters if c.id not in bit_map]
        if missing:
            raise ConfigError(f"bit map lacks entries for clusters: {missing}")
        validate_clusters(clusters, params)
        self.params = params
        self.clusters = [c for c in clusters
                         if int(bit_map[c.id]) != FULL_PRECISION_BITS]
        self.bit_map = {c.id: int(bit_map[c.id]) for c in self.clusters}
        self.rho = float(rho)
        self.lam = {}
        for c in self.clusters:
            for ref in c.param_refs:
                self.lam[ref] = np.zeros(params[ref].data.shape, dtype=np.float64)
        self.q = {}
        self.levels = {}
        self.tables = {}
        self.iteration = 0
        if init_project and self.clusters:
            admm_project(self)

    @property
    def active(self) -> bool:
        return bool(self.clusters)

    def mean_alpha(self) -> float:
        if not self.tables:
            return 0.0
        return float(np.mean([t.alpha for t in self.tables.values()]))

    def snapshot(self) -> dict:
        return {
            "weights": {n: p.data.copy() for n, p in self.params.items()},
            "q": {n: a.copy() for n, a in self.q.items()},
            "levels": {n: a.copy() for n, a in self.levels.items()},
            "tables": dict(self.tables),
        }


def admm_project(state: AdmmState) -> None:
    """Refit each cluster's table to W + lambda and snap Q onto the grid."""
    for c in state.clusters:
        arrays = {
            ref: state.params[ref].data.astype(np.float64) + state.lam[ref]
            for ref in c.param_refs
        }
        prev = state.tables.get(c.id)
        extra = (prev.alpha,) if prev is not None else ()
        result = quantize_cluster(arrays, state.bit_map[c.id], extra_starts=extra)
        state.tables[c.id] = result.table
        for ref in c.param_refs:
            state.levels[ref] = result.levels[ref]
            state.q[ref] = dequantize(result.levels[ref], result.table.alpha,
                                      state.params[ref].data.dtype)


def admm_dual_update(state: AdmmState) -> None:
    """lambda += W - Q, exactly (all three live in float64 here)."""
    for ref in state.lam:
        state.lam[ref] += (state.params[ref].data.astype(np.float64)
                           - state.q[ref].astype(np.float64))


def primal_residual(state: AdmmState, normalized: bool = False) -> float:
    total = 0.0
    count = 0
    for ref in state.q:
        d = state.params[ref].data.astype(np.float64) - state.q[ref].astype(np.float64)
        total += float((d * d).sum())
        count += d.size
    r = float(np.sqrt(total))
    if normalized and count:
        r /= float(np.sqrt(count))
    return r


def penalty_term(state: AdmmState):
    """(rho/2) * sum ||W - (Q - lambda)||^2 as a graph node, or None."""
    if state.rho == 0.0 or not state.q:
        return None
    total = None
    for ref in state.q:
        p = state.params[ref]
        target = T.Tensor(
            (state.q[ref].astype(np.float64) - state.lam[ref]).astype(p.data.dtype))
        diff = T.sub(p, target)
        term = T.tsum(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 0.5 * state.rho)


def admm_w_update(state: AdmmState, loss_fn, batches, lr: float,
                  clip_norm: float = 5.0) -> list:
    """One SGD pass over ``batches`` on the augmented loss; returns f values."""
    params = list(state.params.values())
    losses = []
    for batch in batches:
        for p in params:
            p.grad = None
        f = loss_fn(batch)
        pen = penalty_term(state)
        aug = T.add(f, pen) if pen is not None else f
        if not np.isfinite(aug.item()):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {state.iteration}")
        aug.backward()
        T.sgd_step(params, lr, clip_norm)
        losses.append(float(f.item()))
    state.iteration += 1
    return losses


def corpus_windows(corpus, window: int, rng=None) -> list:
    """Non-overlapping windows with at least one predicted position."""
    toks = np.asarray(corpus, dtype=np.int64)
    if window < 2:
        raise ConfigError("window must cover at least two tokens")
    out = [toks[i:i + window] for i in range(0, toks.size, window)]
    out = [w for w in out if w.size >= 2]
    if rng is not None:
        order = rng.permutation(len(out))
        out = [out[i] for i in order]
    return out


def _run_training(model, corpus, state: AdmmState, opts: AdmmOptions) -> TrainLog:
    def loss_fn(window):
        return sequence_mean_nll(model, window)

    log = TrainLog(converged=not state.active)
    best = None
    best_resid = np.inf
    for epoch in range(opts.epochs):
        rng = np.random.default_rng([opts.seed, epoch]) if opts.shuffle else None
        windows = corpus_windows(corpus, opts.window, rng)
        epoch_lr = opts.lr * opts.lr_decay ** epoch
        losses = admm_w_update(state, loss_fn, windows, epoch_lr, opts.clip_norm)
        if state.active and opts.project_every > 0 and (epoch + 1) % opts.project_every == 0:
            admm_project(state)
            admm_dual_update(state)
        resid = primal_residual(state, normalized=True) if state.active else 0.0
        log.rows.append(LogRow(epoch, float(np.mean(losses)), resid, state.mean_alpha()))
        if state.active and resid < best_resid:
            best_resid = resid
            best = state.snapshot()
            log.best_iteration = epoch
        if state.active and resid < opts.tol:
            log.converged = True
            break
        state.rho *= opts.rho_growth
    else:
        if state.active:
            log.converged = False
    if state.active and best is not None and not log.converged:
        # roll back to the iterate with the smallest residual
        for name, arr in best["weights"].items():
            state.params[name].data = arr
        state.q = best["q"]
        state.levels = best["levels"]
        state.tables = best["tables"]
    return log


def train_baseline(model, corpus, opts: TrainOptions | None = None) -> TrainLog:
    """Plain full-precision SGD; the model is updated in place."""
    opts = opts or TrainOptions()
    admm_opts = opts if isinstance(opts, AdmmOptions) else AdmmOptions(
        epochs=opts.epochs, lr=opts.lr, lr_decay=opts.lr_decay,
        window=opts.window, clip_norm=opts.clip_norm, seed=opts.seed,
        shuffle=opts.shuffle)
    state = AdmmState(model.params(), [], {}, rho=0.0, init_project=False)
    return _run_training(model, corpus, state, admm_opts)


def train_admm(model, corpus, bit_map: dict, opts: AdmmOptions | None = None,
               clusters=None):
    """ADMM-train a model under a per-cluster bit map.

    Returns (QuantizedModel, TrainLog). The model's weights are the
    continuous iterates and are modified in place; the returned quantized
    model holds the projected grid weights plus the trained residue.
    """
    opts = opts or AdmmOptions()
    if clusters is None:
        clusters = default_clusters(model)
    state = AdmmState(model.params(), clusters, bit_map, rho=opts.rho)
    log = _run_training(model, corpus, state, opts)
    qm = _quantized_from_state(model, clusters, bit_map, state)
    return qm, log


def _quantized_from_state(model, clusters, bit_map, state: AdmmState) -> QuantizedModel:
    assignment = {c.id: int(bit_map[c.id]) for c in clusters}
    residue = {
        name: np.array(p.data, copy=True)
        for name, p in model.params().items()
        if name not in state.levels
    }
    return QuantizedModel(model.meta(), list(clusters), assignment,
                          dict(state.tables),
                          {n: a.copy() for n, a in state.levels.items()},
                          residue)

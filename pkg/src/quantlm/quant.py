"""Symmetric low-bit quantization over named weight clusters.

A quantization table is a scaled signed integer grid: {-a, +a} for 1-bit,
{0, +/-a, ..., +/-a*(2^(n-1)-1)} for n >= 2 bits. Every scalar in a cluster
shares one scale a, fitted by alternating nearest-level assignment with the
closed-form least-squares scale update. Size accounting charges n bits per
quantized scalar, one 32-bit scale per cluster, and 32 bits per residue
scalar (biases and normalization parameters are never quantized).

Level indices are the signed integers themselves; dequantization is a
single multiply, so round trips are exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_weight_array
from .exceptions import ConfigError, DegenerateInputError, DegenerateScaleError

SUPPORTED_BITS = (1, 2, 4, 8)
MAX_BITS = 8
FULL_PRECISION_BITS = 32
SCALE_BYTES = 4
BYTES_PER_FLOAT = 4


@dataclass(frozen=True)
class QuantTable:
    """A symmetric signed grid: n_bits plus one positive scale."""

    n_bits: int
    alpha: float

    def __post_init__(self):
        if not (isinstance(self.n_bits, (int, np.integer))
                and 1 <= self.n_bits <= MAX_BITS):
            raise ConfigError(f"unsupported bit width {self.n_bits}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"scale must be positive and finite, got {self.alpha}")

    @property
    def max_level(self) -> int:
        return 1 if self.n_bits == 1 else 2 ** (self.n_bits - 1) - 1

    def integer_levels(self) -> np.ndarray:
        m = self.max_level
        if self.n_bits == 1:
            return np.array([-1, 1], dtype=np.int64)
        return np.arange(-m, m + 1, dtype=np.int64)

    def grid(self) -> np.ndarray:
        return self.alpha * self.integer_levels().astype(np.float64)


def _nearest_levels(theta: np.ndarray, alpha: float, m: int) -> np.ndarray:
    """Nearest grid level per scalar; ties to smaller magnitude, then positive."""
    t = theta / alpha
    with np.errstate(invalid="ignore"):
        q0 = np.sign(t) * np.ceil(np.abs(t) - 0.5)
    q0 = np.clip(np.nan_to_num(q0), -m, m)
    best_q = np.clip(q0 - 1.0, -m, m)
    best_d = np.abs(theta - alpha * best_q)
    for delta in (0.0, 1.0):
        q = np.clip(q0 + delta, -m, m)
        d = np.abs(theta - alpha * q)
        better = (d < best_d) | (
            (d == best_d)
            & ((np.abs(q) < np.abs(best_q))
               | ((np.abs(q) == np.abs(best_q)) & (q > best_q)))
        )
        best_q = np.where(better, q, best_q)
        best_d = np.where(better, d, best_d)
    return best_q


def quantize_array(theta, table: QuantTable) -> tuple[np.ndarray, np.ndarray]:
    """(integer levels, real grid values) of the nearest grid point each.

    Values are exact float64 products alpha * level.
    """
    th = np.asarray(theta, dtype=np.float64)
    if table.n_bits == 1:
        levels = np.where(th >= 0, 1, -1).astype(np.int16)
    else:
        levels = _nearest_levels(th, table.alpha, table.max_level).astype(np.int16)
    return levels, table.alpha * levels.astype(np.float64)


def quantize_value(theta: float, table: QuantTable) -> tuple[int, float]:
    """Scalar counterpart of quantize_array: same grid, same tie rules."""
    th = float(theta)
    alpha = table.alpha
    if table.n_bits == 1:
        level = 1 if th >= 0 else -1
        return level, alpha * level
    m = float(table.max_level)
    t = th / alpha
    q0 = math.copysign(float(math.ceil(abs(t) - 0.5)), t)
    q0 = min(max(q0, -m), m)
    best_q = min(max(q0 - 1.0, -m), m)
    best_d = abs(th - alpha * best_q)
    for delta in (0.0, 1.0):
        q = min(max(q0 + delta, -m), m)
        d = abs(th - alpha * q)
        if d < best_d or (d == best_d and (abs(q) < abs(best_q)
                          or (abs(q) == abs(best_q) and q > best_q))):
            best_q, best_d = q, d
    return int(best_q), alpha * best_q


def dequantize(levels, alpha: float, dtype=np.float32) -> np.ndarray:
    return (float(alpha) * np.asarray(levels, dtype=np.float64)).astype(dtype)


def scale_objective(weights, table: QuantTable) -> float:
    """Sum of squared errors of nearest-grid quantization under the table."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    _, values = quantize_array(w, table)
    return float(((w - values) ** 2).sum())


# -- scale fitting -------------------------------------------------------------
#
# For a symmetric grid the optimal assignment depends only on |w|, so the
# alternation runs on sorted magnitudes with prefix sums: each iteration
# cuts the sorted array at the level boundaries alpha*(k - 0.5) and reads
# segment sums in O(max_level * log n).


def _magnitude_sums(w: np.ndarray):
    aw = np.sort(np.abs(w))
    prefix = np.concatenate([[0.0], np.cumsum(aw)])
    sw2 = float(w @ w)
    return aw, prefix, sw2


def _cut(aw: np.ndarray, prefix: np.ndarray, alpha: float, m: int):
    """Sum |w|*level and level^2 counts under nearest assignment at alpha."""
    bounds = alpha * (np.arange(1, m + 1, dtype=np.float64) - 0.5)
    cuts = np.searchsorted(aw, bounds, side="right")
    idx = np.concatenate([[0], cuts, [aw.size]])
    ks = np.arange(0, m + 1, dtype=np.float64)
    seg_sums = prefix[idx[1:]] - prefix[idx[:-1]]
    seg_counts = np.diff(idx).astype(np.float64)
    a = float((ks * seg_sums).sum())
    b = float((ks * ks * seg_counts).sum())
    return a, b


def _piecewise_optimum(aw: np.ndarray, m: int) -> float:
    """Globally optimal scale via the piecewise-quadratic structure.

    As alpha grows, the nearest level of a magnitude drops from k to k-1
    exactly at alpha = |w| / (k - 0.5). Between consecutive breakpoints the
    squared error is an upward parabola in alpha, so checking every piece
    (its vertex plus its endpoints) covers all candidate minimizers. Costs
    O(n * m * log(n * m)) time and memory, hence only used for clusters
    where that product is modest.
    """
    nz = aw[aw > 0.0]
    ks = np.arange(1, m + 1, dtype=np.float64)
    edges = (nz[:, None] / (ks - 0.5)).reshape(-1)
    order = np.argsort(edges, kind="stable")
    edges = edges[order]
    a0 = m * float(nz.sum())
    b0 = float(m * m * nz.size)
    # a, b after each level-drop event, i.e. on the piece to its right
    a = a0 - np.cumsum(np.repeat(nz, m)[order])
    b = b0 - np.cumsum(np.tile(2.0 * ks - 1.0, nz.size)[order])
    hi = np.concatenate([edges[1:], [np.inf]])
    with np.errstate(divide="ignore", invalid="ignore"):
        v = a / b
    inside = (b > 0.0) & (v >= edges) & (v <= hi)
    # costs carry a constant -sw2 offset, irrelevant for the argmin
    cand_alpha = [v[inside], edges]
    cand_cost = [-(a[inside] ** 2) / b[inside], edges * edges * b - 2.0 * edges * a]
    if a0 / b0 <= edges[0]:
        cand_alpha.append(np.array([a0 / b0]))
        cand_cost.append(np.array([-(a0 * a0) / b0]))
    alphas = np.concatenate(cand_alpha)
    costs = np.concatenate(cand_cost)
    best = np.lexsort((alphas, costs))[0]
    return float(alphas[best])


def _alternate(aw, prefix, sw2, m, alpha0, max_iter, tol):
    """Alternating assignment / closed-form scale from one start.

    Returns (alpha, objective, per-iteration objective trace).
    """
    alpha = float(alpha0)
    trace = []
    for _ in range(max_iter):
        a, b = _cut(aw, prefix, alpha, m)
        if b == 0.0:
            trace.append(sw2)
            break
        new = a / b
        trace.append(sw2 - 2.0 * new * a + new * new * b)
        if abs(new - alpha) < tol:
            alpha = new
            break
        alpha = new
    a, b = _cut(aw, prefix, alpha, m)
    obj = sw2 - 2.0 * alpha * a + alpha * alpha * b
    return alpha, obj, trace


def fit_scale_trace(weights, n_bits: int, alpha0: float,
                    max_iter: int = 50, tol: float = 1e-9) -> list:
    """Objective after each alternation iteration from a single start."""
    w = check_weight_array(weights).reshape(-1)
    m = QuantTable(n_bits, 1.0).max_level
    aw, prefix, sw2 = _magnitude_sums(w)
    _, _, trace = _alternate(aw, prefix, sw2, m, alpha0, max_iter, tol)
    return trace


def fit_scale(weights, n_bits: int, *, n_starts: int = 64,
              extra_starts=(), max_iter: int = 50, tol: float = 1e-9,
              exact_limit: int = 1 << 22) -> QuantTable:
    """Least-squares scale for one cluster at a given bit width.

    While n_weights * max_level stays below exact_limit the exact
    piecewise-quadratic optimum is found directly; it is polished by the
    same alternation that also runs from a log-spaced sweep of candidate
    scales (plus the binary-grid optimum mean|w| and any extra_starts),
    and the best local minimum wins. The 1-bit case is closed form.
    """
    w = check_weight_array(weights).reshape(-1)
    amax = float(np.abs(w).max())
    if amax == 0.0:
        raise DegenerateScaleError("cannot fit a scale to an all-zero cluster")
    amean = float(np.abs(w).mean())
    if n_bits == 1:
        return QuantTable(1, amean)

    m = QuantTable(n_bits, 1.0).max_level
    starts = list(np.geomspace(amax / (4 * m), 2 * amax, n_starts))
    starts.append(amean)
    starts.extend(float(s) for s in extra_starts if np.isfinite(s) and s > 0)
    aw, prefix, sw2 = _magnitude_sums(w)
    if aw.size * m <= exact_limit:
        starts.append(_piecewise_optimum(aw, m))

    best = None
    for alpha0 in sorted(set(starts)):
        alpha, obj, _ = _alternate(aw, prefix, sw2, m, alpha0, max_iter, tol)
        if alpha <= 0 or not np.isfinite(alpha):
            continue
        if best is None or obj < best[0] - 0.0 or (obj == best[0] and alpha < best[1]):
            best = (obj, alpha)
    if best is None:
        raise DegenerateScaleError("no usable scale found for cluster")
    return QuantTable(n_bits, best[1])


# -- clusters ------------------------------------------------------------------

ATTN_SUFFIXES = ("Q", "K", "V", "Wh")
FFN_SUFFIXES = ("W1", "W2")


@dataclass(frozen=True)
class LayerCluster:
    """A named group of weight matrices sharing one quantization table."""

    id: str
    param_refs: tuple

    def __post_init__(self):
        object.__setattr__(self, "param_refs", tuple(self.param_refs))
        if not self.param_refs:
            raise ConfigError(f"cluster {self.id} has no parameters")


def default_clusters(model, quantize_embeddings: bool = True) -> list:
    """Sub-layer clusters: attention and feed-forward per layer, plus
    embedding tables and the output projection when they are quantized."""
    clusters = []
    if quantize_embeddings:
        clusters.append(LayerCluster("embed.tok", ("embed.tok",)))
        clusters.append(LayerCluster("embed.pos", ("embed.pos",)))
    for i in range(model.n_layers):
        clusters.append(LayerCluster(
            f"layer{i}.attn", tuple(f"layer{i}.{s}" for s in ATTN_SUFFIXES)))
        clusters.append(LayerCluster(
            f"layer{i}.ffn", tuple(f"layer{i}.{s}" for s in FFN_SUFFIXES)))
    if not model.tied:
        clusters.append(LayerCluster("out.proj", ("out.proj",)))
    return clusters


def validate_clusters(clusters, param_names) -> None:
    """Clusters must reference existing parameters, each at most once."""
    seen = {}
    names = set(param_names)
    for c in clusters:
        for ref in c.param_refs:
            if ref not in names:
                raise ConfigError(f"cluster {c.id} references unknown parameter {ref}")
            if ref in seen:
                raise ConfigError(
                    f"parameter {ref} appears in clusters {seen[ref]} and {c.id}")
            seen[ref] = c.id


def cluster_sizes(clusters, shapes: dict) -> dict:
    return {
        c.id: int(sum(np.prod(shapes[r]) for r in c.param_refs))
        for c in clusters
    }


@dataclass
class ClusterQuant:
    """Result of quantizing one cluster: table, per-tensor levels, error."""

    table: QuantTable
    levels: dict
    perturbation: float


def quantize_cluster(arrays: dict, n_bits: int, **fit_kw) -> ClusterQuant:
    """Fit a table over all tensors of a cluster, then quantize each.

    ``arrays`` maps parameter name to array. The reported perturbation is
    sum ||Q(W) - W||^2 over the cluster, accumulated in float64.
    """
    flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1)
                           for a in arrays.values()])
    table = fit_scale(flat, n_bits, **fit_kw)
    levels = {}
    perturbation = 0.0
    for name, arr in arrays.items():
        lv, values = quantize_array(np.asarray(arr, dtype=np.float64), table)
        levels[name] = lv.reshape(np.asarray(arr).shape)
        perturbation += float(
            ((np.asarray(arr, dtype=np.float64) - values) ** 2).sum())
    return ClusterQuant(table, levels, perturbation)


def perturbation_by_bits(arrays: dict, candidates=SUPPORTED_BITS, **fit_kw) -> dict:
    """Quantize one cluster at every candidate width, coarse to fine.

    Each fit seeds the next wider grid with the previous scale; the
    candidate grids nest, so the squared error never increases with more
    bits.
    """
    out = {}
    chain = []
    for bits in sorted(candidates):
        result = quantize_cluster(arrays, bits, extra_starts=tuple(chain), **fit_kw)
        chain.append(result.table.alpha)
        out[bits] = result
    return out


# -- whole-model bookkeeping -----------------------------------------------------


@dataclass
class QuantizedModel:
    """A model stored as per-cluster tables, integer levels, and residue."""

    meta: dict
    clusters: list
    assignment: dict          # cluster id -> bit width (32 passes through)
    tables: dict              # cluster id -> QuantTable, quantized clusters only
    levels: dict              # parameter name -> integer level array
    residue: dict             # parameter name -> full-precision array
    perturbations: dict = field(default_factory=dict)

    def cluster_of(self) -> dict:
        return {ref: c.id for c in self.clusters for ref in c.param_refs}

    def param_array(self, name: str, dtype=np.float32) -> np.ndarray:
        if name in self.levels:
            cid = self.cluster_of()[name]
            return dequantize(self.levels[name], self.tables[cid].alpha, dtype)
        return self.residue[name].astype(dtype)

    def to_model(self):
        from .model import from_param_arrays
        names = list(self.levels) + list(self.residue)
        arrays = {n: self.param_array(n) for n in names}
        return from_param_arrays(self.meta, arrays)

    def size_mb(self) -> float:
        bits = 0.0
        for c in self.clusters:
            if c.id not in self.tables:
                continue
            count = sum(self.levels[r].size for r in c.param_refs)
            bits += count * self.tables[c.id].n_bits
        payload = bits / 8.0 + SCALE_BYTES * len(self.tables)
        payload += BYTES_PER_FLOAT * sum(a.size for a in self.residue.values())
        return payload / 1e6

    def average_bits(self) -> float:
        """Scalar-weighted mean bit width over clustered parameters."""
        total = 0.0
        count = 0
        for c in self.clusters:
            n = sum(self.levels[r].size if r in self.levels else self.residue[r].size
                    for r in c.param_refs)
            total += self.assignment[c.id] * n
            count += n
        if count == 0:
            raise DegenerateInputError("no clustered parameters")
        return total / count


def quantize_model(model, clusters, assignment: dict, **fit_kw) -> QuantizedModel:
    """Quantize a trained model under a per-cluster bit assignment.

    Clusters assigned 32 bits stay in the residue at full precision, as do
    all parameters outside any cluster (biases, normalization, and the
    embeddings when they are not clustered).
    """
    params = {name: t.data for name, t in model.params().items()}
    validate_clusters(clusters, params)
    missing = [c.id for c in clusters if c.id not in assignment]
    if missing:
        raise ConfigError(f"no bit assignment for clusters: {missing}")

    tables = {}
    levels = {}
    perturbations = {}
    clustered = set()
    for c in clusters:
        clustered.update(c.param_refs)
        bits = int(assignment[c.id])
        if bits == FULL_PRECISION_BITS:
            continue
        arrays = {r: params[r] for r in c.param_refs}
        result = quantize_cluster(arrays, bits, **fit_kw)
        tables[c.id] = result.table
        levels.update(result.levels)
        perturbations[c.id] = result.perturbation

    residue = {name: np.array(arr, copy=True) for name, arr in params.items()
               if name not in levels}
    assignment = {c.id: int(assignment[c.id]) for c in clusters}
    return QuantizedModel(model.meta(), list(clusters), assignment,
                          tables, levels, residue, perturbations)


def assignment_bookkeeping(assignment: dict, sizes: dict,
                           residue_params: int = 0) -> tuple[float, float, float]:
    """(average bits, stored MB, compression ratio) for a bit assignment.

    Accounting matches QuantizedModel.size_mb: packed levels plus one
    32-bit scale per quantized cluster plus 32-bit residue scalars.
    """
    clustered = sum(sizes[c] for c in assignment)
    if clustered == 0:
        raise DegenerateInputError("assignment covers no parameters")
    weighted = sum(sizes[c] * assignment[c] for c in assignment)
    payload = weighted / 8.0
    payload += SCALE_BYTES * sum(1 for c in assignment
                                 if assignment[c] != FULL_PRECISION_BITS)
    payload += BYTES_PER_FLOAT * residue_params
    full = BYTES_PER_FLOAT * (clustered + residue_params)
    return weighted / clustered, payload / 1e6, full / payload


def full_model_size_mb(model) -> float:
    total = sum(p.data.size for p in model.param_list())
    return total * BYTES_PER_FLOAT / 1e6


def compression_ratio(full_mb: float, quant_mb: float) -> float:
    if full_mb <= 0 or quant_mb <= 0:
        raise DegenerateInputError("sizes must be positive")
    return full_mb / quant_mb


# -- level packing ---------------------------------------------------------------


def _to_unsigned(levels: np.ndarray, n_bits: int) -> np.ndarray:
    lv = np.asarray(levels, dtype=np.int64)
    if n_bits == 1:
        if not np.isin(lv, (-1, 1)).all():
            raise ConfigError("binary levels must be -1 or +1")
        return ((lv + 1) // 2).astype(np.uint8)
    m = 2 ** (n_bits - 1) - 1
    if lv.min() < -m or lv.max() > m:
        raise ConfigError(f"levels exceed range +/-{m} for {n_bits}-bit grid")
    return (lv + m).astype(np.uint8)


def pack_levels(levels, n_bits: int) -> bytes:
    """Pack integer levels as an n_bits-wide little-endian bitstream."""
    if not 1 <= n_bits <= MAX_BITS:
        raise ConfigError(f"unsupported bit width {n_bits}")
    u = _to_unsigned(np.asarray(levels).reshape(-1), n_bits)
    bits = ((u[:, None] >> np.arange(n_bits)) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_levels(data: bytes, n_bits: int, count: int) -> np.ndarray:
    if not 1 <= n_bits <= MAX_BITS:
        raise ConfigError(f"unsupported bit width {n_bits}")
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if bits.size < count * n_bits:
        raise ConfigError("packed payload shorter than the declared count")
    u = bits[:count * n_bits].reshape(count, n_bits).astype(np.int64)
    u = (u << np.arange(n_bits)).sum(axis=1)
    if n_bits == 1:
        return (2 * u - 1).astype(np.int16)
    return (u - (2 ** (n_bits - 1) - 1)).astype(np.int16)


# -- estimator facade --------------------------------------------------------------


class ClusterQuantizer(BaseEstimator, TransformerMixin):
    """Fit a shared quantization grid to weights, then snap arrays onto it.

    fit() learns the scale from any array of weights; transform() maps
    arrays of the same kind to their nearest grid values, preserving shape
    and dtype.
    """

    def __init__(self, n_bits: int = 8, n_starts: int = 64,
                 max_iter: int = 50, tol: float = 1e-9):
        self.n_bits = n_bits
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        w = check_weight_array(X)
        self.table_ = fit_scale(
            w, self.n_bits, n_starts=self.n_starts,
            max_iter=self.max_iter, tol=self.tol,
        )
        self.objective_ = scale_objective(w, self.table_)
        self.n_weights_ = w.size
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "table_"):
            raise ConfigError("ClusterQuantizer.transform called before fit")
        arr = np.asarray(X)
        _, values = quantize_array(check_weight_array(X), self.table_)
        return values.reshape(arr.shape).astype(
            arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64)

    def quantize_levels(self, X) -> np.ndarray:
        if not hasattr(self, "table_"):
            raise ConfigError("ClusterQuantizer.quantize_levels called before fit")
        arr = np.asarray(X)
        levels, _ = quantize_array(check_weight_array(X), self.table_)
        return levels.reshape(arr.shape)

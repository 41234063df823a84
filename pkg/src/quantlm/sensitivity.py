"""Curvature-aware sensitivity scores and bit-width allocation.

A cluster's score is the average loss-curvature over its weights
(Hutchinson trace estimate of the Hessian block, divided by the cluster
size) times the squared error its quantization grid inflicts. Allocation
picks per-cluster bit widths minimizing the summed score under a
parameter-weighted average bit budget.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import tensor as T
from ._validation import check_token_stream
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    InfeasibleBudgetError,
    NumericalError,
)
from .quant import (
    SUPPORTED_BITS,
    assignment_bookkeeping,
    default_clusters,
    perturbation_by_bits,
)

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"

# keeps the vectorized exhaustive search within one small numpy block
_EXHAUSTIVE_MAX_CLUSTERS = 12
_CHUNK = 1 << 18


# -- Hessian-vector products ---------------------------------------------------


def _probe_norm(v: dict) -> float:
    total = 0.0
    for arr in v.values():
        a = np.asarray(arr, dtype=np.float64)
        total += float((a * a).sum())
    return float(np.sqrt(total))


def hvp(loss_fn, params: dict, v: dict, eps_scale: float = 1e-3) -> dict:
    """Hessian-vector product by central differences of gradients.

    ``v`` maps a subset of parameter names to direction arrays; entries for
    the remaining coordinates are implicitly zero. Returns the product
    restricted to the same names, in float64.
    """
    refs = list(v)
    if not refs:
        raise DegenerateInputError("empty direction")
    norm = _probe_norm(v)
    if norm == 0.0:
        raise DegenerateInputError("zero direction vector")
    eps = eps_scale / norm
    base = {r: params[r].data.copy() for r in refs}
    tensors = [params[r] for r in refs]
    try:
        shifted = []
        for sign in (1.0, -1.0):
            for r in refs:
                moved = base[r].astype(np.float64) + (sign * eps) * np.asarray(v[r])
                params[r].data = moved.astype(base[r].dtype)
            shifted.append(T.gradient(loss_fn(), tensors))
    finally:
        for r in refs:
            params[r].data = base[r]
    out = {}
    for i, r in enumerate(refs):
        g = (shifted[0][i].astype(np.float64)
             - shifted[1][i].astype(np.float64)) / (2.0 * eps)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite curvature for {r}")
        out[r] = g
    return out


def _draw_probe(rng, shapes: dict, kind: str) -> dict:
    if kind == GAUSSIAN:
        return {r: rng.standard_normal(s) for r, s in shapes.items()}
    if kind == RADEMACHER:
        return {r: rng.integers(0, 2, size=s).astype(np.float64) * 2.0 - 1.0
                for r, s in shapes.items()}
    raise ConfigError(f"unknown probe kind {kind!r}")


def hutchinson_trace(loss_fn, params: dict, refs, m: int = 16, seed=0,
                     probe: str = GAUSSIAN) -> tuple:
    """(trace estimate, standard error) for the Hessian block over ``refs``.

    Each sample draws a probe restricted to the block, so off-block
    coordinates never move. Samples are keyed by index: the reduction
    order is fixed regardless of how they are scheduled.
    """
    if m < 1:
        raise ConfigError(f"sample count must be >= 1, got {m}")
    refs = list(refs)
    shapes = {r: params[r].data.shape for r in refs}
    key = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    estimates = np.empty(m, dtype=np.float64)
    for i in range(m):
        rng = np.random.default_rng([*key, i])
        z = _draw_probe(rng, shapes, probe)
        hz = hvp(loss_fn, params, z)
        estimates[i] = float(sum((z[r] * hz[r]).sum() for r in refs))
    trace = float(estimates.mean())
    stderr = float(estimates.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return trace, stderr


def cluster_sensitivity(trace: float, perturbation: float, size: int,
                        average_trace: bool = True) -> float:
    """Sensitivity score: (average) curvature times squared grid error."""
    if perturbation < 0:
        raise DegenerateInputError(f"negative perturbation {perturbation}")
    if size < 1:
        raise DegenerateInputError(f"cluster size must be >= 1, got {size}")
    t = trace / size if average_trace else trace
    return float(t * perturbation)


# -- report --------------------------------------------------------------------


@dataclass
class SensitivityReport:
    """Per-cluster curvature traces and per-bit-width scores."""

    m: int
    clusters: list                 # cluster ids, canonical order
    sizes: dict                    # id -> parameter count
    traces: dict                   # id -> trace estimate
    stderrs: dict                  # id -> standard error
    perturbations: dict            # (id, n_bits) -> squared grid error
    omegas: dict                   # (id, n_bits) -> sensitivity score
    candidates: tuple = SUPPORTED_BITS
    average_trace: bool = True
    residue_params: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.m}")
        self.candidates = tuple(int(b) for b in self.candidates)
        for cid in self.clusters:
            for bits in self.candidates:
                key = (cid, bits)
                if key not in self.perturbations or key not in self.omegas:
                    raise ConfigError(f"report lacks entry for {key}")
                if self.perturbations[key] < 0:
                    raise ConfigError(f"negative perturbation at {key}")
                want = cluster_sensitivity(
                    self.traces[cid], self.perturbations[key],
                    self.sizes[cid], self.average_trace)
                if self.omegas[key] != want:
                    raise ConfigError(
                        f"stored score at {key} does not equal its factors")

    HEADER = "cluster,n_bits,size,trace,std_error,perturbation,omega"

    def to_text(self) -> str:
        lines = [
            f"# m={self.m} average_trace={int(self.average_trace)}"
            f" residue_params={self.residue_params}",
            self.HEADER,
        ]
        for cid in self.clusters:
            for bits in self.candidates:
                key = (cid, bits)
                lines.append(
                    f"{cid},{bits},{self.sizes[cid]},"
                    f"{float(self.traces[cid])!r},"
                    f"{float(self.stderrs[cid])!r},"
                    f"{float(self.perturbations[key])!r},"
                    f"{float(self.omegas[key])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SensitivityReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 3 or not lines[0].startswith("#"):
            raise ConfigError("malformed sensitivity report")
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        if lines[1] != cls.HEADER:
            raise ConfigError("unexpected sensitivity report header")
        clusters, sizes, traces, stderrs = [], {}, {}, {}
        perturbations, omegas, bit_set = {}, {}, set()
        for ln in lines[2:]:
            parts = ln.split(",")
            if len(parts) != 7:
                raise ConfigError(f"malformed report record: {ln!r}")
            cid, bits = parts[0], int(parts[1])
            if cid not in sizes:
                clusters.append(cid)
                sizes[cid] = int(parts[2])
                traces[cid] = float(parts[3])
                stderrs[cid] = float(parts[4])
            bit_set.add(bits)
            perturbations[(cid, bits)] = float(parts[5])
            omegas[(cid, bits)] = float(parts[6])
        return cls(
            m=int(meta["m"]), clusters=clusters, sizes=sizes, traces=traces,
            stderrs=stderrs, perturbations=perturbations, omegas=omegas,
            candidates=tuple(sorted(bit_set)),
            average_trace=bool(int(meta.get("average_trace", "1"))),
            residue_params=int(meta.get("residue_params", "0")))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "SensitivityReport":
        with open(path) as fh:
            return cls.from_text(fh.read())


def probe_loss_fn(model, tokens, window: int | None = None,
                  max_tokens: int = 2048):
    """Mean next-token NLL over a fixed probe batch, as a closure.

    The batch is the leading ``max_tokens`` tokens split into
    non-overlapping windows; the mean weights every predicted position
    equally.
    """
    from .model import forward_sequence

    toks = check_token_stream(tokens)[:max_tokens]
    size = window or model.max_len
    if size < 2:
        raise ConfigError("probe window must cover at least two tokens")
    windows = [toks[i:i + size] for i in range(0, toks.size, size)]
    windows = [w for w in windows if w.size >= 2]
    if not windows:
        raise DegenerateInputError("probe batch has no predicted positions")
    n_pred = sum(w.size - 1 for w in windows)

    def loss_fn():
        total = None
        for w in windows:
            s = T.tsum(forward_sequence(model, w))
            total = s if total is None else T.add(total, s)
        return T.scale(total, 1.0 / n_pred)

    return loss_fn


def model_sensitivity_report(model, probe_tokens, clusters=None, m: int = 16,
                             seed: int = 0, candidates=SUPPORTED_BITS,
                             average_trace: bool = True, probe: str = GAUSSIAN,
                             window: int | None = None,
                             max_probe_tokens: int = 2048) -> SensitivityReport:
    """Score every cluster of a trained model against each bit width."""
    if clusters is None:
        clusters = default_clusters(model)
    params = model.params()
    loss_fn = probe_loss_fn(model, probe_tokens, window, max_probe_tokens)
    candidates = tuple(sorted(int(b) for b in candidates))

    ids, sizes, traces, stderrs = [], {}, {}, {}
    perturbations, omegas = {}, {}
    for ci, c in enumerate(clusters):
        ids.append(c.id)
        arrays = {r: params[r].data.astype(np.float64) for r in c.param_refs}
        sizes[c.id] = int(sum(a.size for a in arrays.values()))
        tr, se = hutchinson_trace(loss_fn, params, c.param_refs, m=m,
                                  seed=(seed, ci), probe=probe)
        traces[c.id], stderrs[c.id] = tr, se
        for bits, result in perturbation_by_bits(arrays, candidates).items():
            perturbations[(c.id, bits)] = result.perturbation
            omegas[(c.id, bits)] = cluster_sensitivity(
                tr, result.perturbation, sizes[c.id], average_trace)
    clustered = sum(sizes.values())
    total = sum(p.data.size for p in params.values())
    return SensitivityReport(
        m=m, clusters=ids, sizes=sizes, traces=traces, stderrs=stderrs,
        perturbations=perturbations, omegas=omegas, candidates=candidates,
        average_trace=average_trace, residue_params=total - clustered)


# -- allocation ------------------------------------------------------------------


@dataclass
class PrecisionAssignment:
    """A chosen bit width per cluster plus its bookkeeping."""

    assignment: dict
    average_bits: float
    total_omega: float
    size_mb: float
    compression_ratio: float
    budget: float = field(default=0.0)

    def __post_init__(self):
        if self.budget and self.average_bits > self.budget + 1e-9:
            raise ConfigError("assignment exceeds its budget")

    HEADER = "cluster,n_bits"

    def to_text(self) -> str:
        lines = [
            f"# average_bits={float(self.average_bits)!r}"
            f" total_omega={float(self.total_omega)!r}"
            f" size_mb={float(self.size_mb)!r}"
            f" compression_ratio={float(self.compression_ratio)!r}"
            f" budget={float(self.budget)!r}",
            self.HEADER,
        ]
        for cid in sorted(self.assignment):
            lines.append(f"{cid},{self.assignment[cid]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PrecisionAssignment":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 3 or not lines[0].startswith("#") \
                or lines[1] != cls.HEADER:
            raise ConfigError("malformed precision-assignment text")
        try:
            meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
            assignment = {}
            for ln in lines[2:]:
                cid, bits = ln.rsplit(",", 1)
                assignment[cid] = int(bits)
            return cls(assignment=assignment,
                       average_bits=float(meta["average_bits"]),
                       total_omega=float(meta["total_omega"]),
                       size_mb=float(meta["size_mb"]),
                       compression_ratio=float(meta["compression_ratio"]),
                       budget=float(meta["budget"]))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"malformed precision-assignment text: {e}") from e

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "PrecisionAssignment":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _assignment_from_bits(report: SensitivityReport, bits_vec,
                          budget: float) -> PrecisionAssignment:
    ids = report.clusters
    assignment = {cid: int(b) for cid, b in zip(ids, bits_vec)}
    omega = float(sum(report.omegas[(c, assignment[c])] for c in ids))
    avg, size_mb, ratio = assignment_bookkeeping(
        assignment, report.sizes, report.residue_params)
    return PrecisionAssignment(
        assignment=assignment, average_bits=float(avg), total_omega=omega,
        size_mb=size_mb, compression_ratio=ratio, budget=float(budget))


def _allocate_exhaustive(report: SensitivityReport, budget: float):
    ids = report.clusters
    n, cands = len(ids), report.candidates
    k = len(cands)
    sizes = np.array([report.sizes[c] for c in ids], dtype=np.float64)
    total = sizes.sum()
    omega = np.array([[report.omegas[(c, b)] for b in cands] for c in ids])
    bits = np.array(cands, dtype=np.float64)
    place = k ** np.arange(n, dtype=np.int64)          # digit j = cluster j
    lex_place = k ** np.arange(n - 1, -1, -1, dtype=np.int64)

    best = None
    for start in range(0, k ** n, _CHUNK):
        codes = np.arange(start, min(start + _CHUNK, k ** n), dtype=np.int64)
        digits = (codes[:, None] // place) % k
        avg = (bits[digits] * sizes).sum(axis=1) / total
        ok = avg <= budget + 1e-12
        if not ok.any():
            continue
        digits, avg = digits[ok], avg[ok]
        om = omega[np.arange(n), digits].sum(axis=1)
        lex = (digits * lex_place).sum(axis=1)
        order = np.lexsort((lex, avg, om))
        top = order[0]
        cand = (float(om[top]), float(avg[top]), int(lex[top]),
                digits[top].copy())
        if best is None or cand[:3] < best[:3]:
            best = cand
    if best is None:
        raise InfeasibleBudgetError(
            f"no bit assignment fits an average of {budget}")
    return [cands[d] for d in best[3]]


def _allocate_dp(report: SensitivityReport, budget: float, grid_points: int):
    """Knapsack over a quantized budget axis; costs round up, so any
    returned assignment is genuinely feasible."""
    ids = report.clusters
    cands = report.candidates
    sizes = [report.sizes[c] for c in ids]
    total = sum(sizes)
    span = total * max(cands)
    step = max(span / grid_points, 1e-12)
    limit = int(np.floor(budget * total / step + 1e-9))

    # dp: units used -> (omega, exact cost, lex bits tuple)
    dp = {0: (0.0, 0.0, ())}
    for c, size in zip(ids, sizes):
        nxt = {}
        for used, (om, cost, bits_vec) in dp.items():
            for b in cands:
                u = used + int(np.ceil(size * b / step - 1e-9))
                if u > limit:
                    continue
                cand = (om + report.omegas[(c, b)], cost + size * b,
                        bits_vec + (b,))
                if u not in nxt or cand < nxt[u]:
                    nxt[u] = cand
        dp = nxt
        if not dp:
            raise InfeasibleBudgetError(
                f"no bit assignment fits an average of {budget}")
    best = min(dp.values())
    return list(best[2])


def allocate_bits(report: SensitivityReport, budget: float,
                  method: str = "auto",
                  grid_points: int = 4096) -> PrecisionAssignment:
    """Minimize total sensitivity under an average-bit-width cap.

    Exact enumeration for small cluster counts; a dynamic program over a
    quantized budget grid beyond that. Ties prefer the smaller average
    width, then the lexicographically smaller bit vector in cluster order.
    """
    if budget < 1:
        raise InfeasibleBudgetError(f"average bit budget must be >= 1, got {budget}")
    if not report.clusters:
        raise DegenerateInputError("report covers no clusters")
    if budget < min(report.candidates):
        raise InfeasibleBudgetError(
            f"budget {budget} below the narrowest candidate width "
            f"{min(report.candidates)}")
    if method == "auto":
        method = ("exhaustive" if len(report.clusters) <= _EXHAUSTIVE_MAX_CLUSTERS
                  else "dp")
    if method == "exhaustive":
        bits_vec = _allocate_exhaustive(report, budget)
    elif method == "dp":
        bits_vec = _allocate_dp(report, budget, grid_points)
    else:
        raise ConfigError(f"unknown allocation method {method!r}")
    return _assignment_from_bits(report, bits_vec, budget)


# -- estimators ------------------------------------------------------------------


class HessianSensitivity(BaseEstimator):
    """Estimator facade: fit(token stream) -> report_ for a fixed model."""

    def __init__(self, model=None, m: int = 16, seed: int = 0,
                 probe: str = GAUSSIAN, average_trace: bool = True,
                 window: int | None = None, max_probe_tokens: int = 2048):
        self.model = model
        self.m = m
        self.seed = seed
        self.probe = probe
        self.average_trace = average_trace
        self.window = window
        self.max_probe_tokens = max_probe_tokens

    def fit(self, X, y=None):
        if self.model is None:
            raise ConfigError("HessianSensitivity needs a model")
        self.report_ = model_sensitivity_report(
            self.model, X, m=self.m, seed=self.seed, probe=self.probe,
            average_trace=self.average_trace, window=self.window,
            max_probe_tokens=self.max_probe_tokens)
        return self


class MinSenAllocator(BaseEstimator):
    """Estimator facade: fit(SensitivityReport) -> assignment_."""

    def __init__(self, budget: float = 2.0, method: str = "auto",
                 grid_points: int = 4096):
        self.budget = budget
        self.method = method
        self.grid_points = grid_points

    def fit(self, X, y=None):
        self.assignment_ = allocate_bits(X, self.budget, method=self.method,
                                         grid_points=self.grid_points)
        return self

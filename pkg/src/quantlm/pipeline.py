"""End-to-end experiment driver.

Five stages: full-precision baseline, uniform-precision alternating
quantized training at each candidate bit width, a manually specified
mixed-precision map, curvature-guided allocation, and differentiable
precision search. Each stage persists its checkpoints and artifacts in
the working directory before the next starts, so a failed run keeps
everything already completed; failures carry a stage tag in their
message. Every stage draws its randomness from the config seed, so a
rerun reproduces the same report dump byte for byte (timing excluded).
"""

import time
from pathlib import Path

import numpy as np

from .admm import AdmmOptions, TrainOptions, corpus_windows, train_admm, train_baseline
from .checkpoint import (
    checkpoint_kind,
    load_model,
    load_quantized,
    save_model,
    save_quantized,
)
from .config import ExperimentConfig
from .corpus import Corpus, ingest_corpus, load_desk_corpus
from .exceptions import ConfigError, DataError, QuantLMError
from .model import TransformerLM, forward_sequence
from .nas import SearchOptions, build_supernet, extract_1best, search
from .quant import default_clusters, full_model_size_mb
from .report import ReportRow, dump_rows, render_table
from .sensitivity import allocate_bits, model_sensitivity_report

STAGES = ("baseline", "uniform", "manual", "minsen", "nas")


def resolve_corpus(config: ExperimentConfig) -> Corpus:
    paths = (config.train_path, config.valid_path, config.test_path)
    if any(paths) and not all(paths):
        raise ConfigError("set all three split paths, or none for the bundled corpus")
    if all(paths):
        return ingest_corpus(*paths, mode=config.mode)
    return load_desk_corpus(mode=config.mode)


def perplexity(model, tokens, window: int) -> float:
    """exp(token-weighted mean NLL) over non-overlapping windows."""
    total, count = 0.0, 0
    for w in corpus_windows(np.asarray(tokens, dtype=np.int64), window):
        nll = forward_sequence(model, w).data
        total += float(nll.sum(dtype=np.float64))
        count += nll.size
    if count == 0:
        raise DataError("split too short to evaluate")
    return float(np.exp(total / count))


def evaluate_model(model, tokens, window: int) -> tuple:
    started = time.perf_counter()
    ppl = perplexity(model, tokens, window)
    return ppl, time.perf_counter() - started


def evaluate(checkpoint_path, tokens, window: int) -> tuple:
    """(perplexity, seconds) for a stored model; timing excludes the load."""
    if checkpoint_kind(checkpoint_path) == "model":
        model = load_model(checkpoint_path)
    else:
        model = load_quantized(checkpoint_path).to_model()
    return evaluate_model(model, tokens, window)


def train_options(config: ExperimentConfig) -> TrainOptions:
    return TrainOptions(epochs=config.epochs, lr=config.lr,
                        lr_decay=config.lr_decay, window=config.window,
                        clip_norm=config.clip_norm, seed=config.seed)


def admm_options(config: ExperimentConfig) -> AdmmOptions:
    return AdmmOptions(epochs=config.admm_epochs, lr=config.lr,
                       lr_decay=config.lr_decay, window=config.window,
                       clip_norm=config.clip_norm, seed=config.seed,
                       rho=config.rho, rho_growth=config.rho_growth)


def build_model(config: ExperimentConfig, vocab_size: int) -> TransformerLM:
    return TransformerLM.init_random(
        vocab_size, d_model=config.d_model, d_ff=config.d_ff,
        n_heads=config.n_heads, n_layers=config.n_layers,
        max_len=config.max_len, seed=config.seed, tied=config.tie_embeddings)


class Pipeline:
    """Stage orchestration around one config, corpus, and working directory."""

    def __init__(self, config: ExperimentConfig, corpus: Corpus | None = None,
                 timing: bool = True):
        self.config = config
        self.corpus = corpus if corpus is not None else resolve_corpus(config)
        self.timing = timing
        self.workdir = Path(config.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.rows = []
        self._baseline = None
        self._uniform = {}

    # -- plumbing --------------------------------------------------------------

    def _run_stage(self, name: str, fn):
        try:
            return fn()
        except QuantLMError as e:
            msg = e.args[0] if e.args else e.__class__.__name__
            e.args = (f"[stage {name}] {msg}",) + e.args[1:]
            raise

    def _row(self, method: str, bits: float, checkpoint, size_mb: float,
             ratio: float) -> ReportRow:
        ppl, seconds = evaluate(checkpoint, self.corpus.test, self.config.window)
        return ReportRow(model=self.config.label, method=method,
                         bits=float(bits), ppl=ppl, size_mb=size_mb,
                         ratio=ratio, eval_seconds=seconds if self.timing else 0.0)

    def _baseline_model(self) -> TransformerLM:
        if self._baseline is None:
            path = self.workdir / "baseline.ckpt"
            if not path.exists():
                raise ConfigError("run the baseline stage first")
            self._baseline = load_model(path)
        return self._baseline

    def _clusters(self, model):
        return default_clusters(model, self.config.quantize_embeddings)

    def _full_mb(self) -> float:
        return full_model_size_mb(self._baseline_model())

    def _quantized_row(self, method: str, bit_map: dict, stem: str) -> tuple:
        base = self._baseline_model()
        model = base.copy()
        clusters = self._clusters(model)
        qm, log = train_admm(model, self.corpus.train, bit_map,
                             admm_options(self.config), clusters)
        path = self.workdir / f"{stem}.ckpt"
        save_quantized(path, qm)
        log.to_csv(self.workdir / f"{stem}_log.csv")
        size = qm.size_mb()
        row = self._row(method, qm.average_bits(), path, size,
                        self._full_mb() / size)
        return qm, row

    # -- stages ----------------------------------------------------------------

    def stage_baseline(self):
        model = build_model(self.config, self.corpus.vocab_size)
        train_baseline(model, self.corpus.train, train_options(self.config))
        path = self.workdir / "baseline.ckpt"
        save_model(path, model)
        self._baseline = model
        self.rows.append(self._row("none", 32.0, path,
                                   full_model_size_mb(model), 1.0))

    def stage_uniform(self):
        for bits in self.config.candidates:
            clusters = self._clusters(self._baseline_model())
            bit_map = {c.id: bits for c in clusters}
            qm, row = self._quantized_row("uniform", bit_map, f"uniform{bits}")
            self._uniform[bits] = qm
            self.rows.append(row)

    def stage_manual(self, required: bool = False):
        if not self.config.manual_bits:
            if required:
                raise ConfigError("the manual stage needs a manual_bits map")
            return
        clusters = self._clusters(self._baseline_model())
        missing = [c.id for c in clusters if c.id not in self.config.manual_bits]
        if missing:
            raise ConfigError(f"manual_bits lacks clusters: {missing}")
        bit_map = {c.id: self.config.manual_bits[c.id] for c in clusters}
        _, row = self._quantized_row("admm-manual", bit_map, "manual")
        self.rows.append(row)

    def stage_minsen(self):
        cfg = self.config
        base = self._baseline_model()
        probe = self.corpus.train[:cfg.max_probe_tokens]
        report = model_sensitivity_report(
            base, probe, clusters=self._clusters(base), m=cfg.probes,
            seed=cfg.seed, candidates=cfg.candidates, window=cfg.window,
            max_probe_tokens=cfg.max_probe_tokens)
        report.save(self.workdir / "sensitivity.txt")
        assignment = allocate_bits(report, cfg.budget)
        assignment.save(self.workdir / "assignment_minsen.txt")
        _, row = self._quantized_row("minsen", assignment.assignment, "minsen")
        self.rows.append(row)

    def stage_nas(self):
        cfg = self.config
        donors = {}
        for bits in cfg.candidates:
            if bits in self._uniform:
                donors[bits] = self._uniform[bits]
                continue
            path = self.workdir / f"uniform{bits}.ckpt"
            if not path.exists():
                raise ConfigError(f"run the uniform stage first ({path.name} missing)")
            donors[bits] = load_quantized(path)
        net = build_supernet(donors)
        opts = SearchOptions(epochs=cfg.nas_epochs, lr_weights=cfg.lr,
                             lr_arch=cfg.lr_arch, lr_decay=cfg.lr_decay,
                             beta=cfg.beta, window=cfg.window,
                             clip_norm=cfg.clip_norm, seed=cfg.seed)
        weights, log = search(net, self.corpus.train, opts)
        weights.save(self.workdir / "selection_weights.txt")
        log.to_csv(self.workdir / "nas_log.csv")
        extracted = extract_1best(weights)
        extracted.save(self.workdir / "assignment_nas.txt")
        _, row = self._quantized_row("nas", extracted.assignment, "nas")
        self.rows.append(row)

    # -- driver ----------------------------------------------------------------

    def run(self, stages=None) -> list:
        explicit = stages is not None
        stages = tuple(stages) if explicit else STAGES
        for name in stages:
            if name not in STAGES:
                raise ConfigError(f"unknown pipeline stage {name!r}")
        for name in stages:
            if name == "manual":
                self._run_stage(name, lambda: self.stage_manual(required=explicit))
            else:
                self._run_stage(name, getattr(self, f"stage_{name}"))
        (self.workdir / "report.csv").write_text(dump_rows(self.rows),
                                                 encoding="utf-8")
        (self.workdir / "report.txt").write_text(render_table(self.rows),
                                                 encoding="utf-8")
        return self.rows


def run_pipeline(config: ExperimentConfig, stages=None, corpus=None,
                 timing: bool = True) -> list:
    """Execute the requested stages (default: all) and return report rows."""
    return Pipeline(config, corpus=corpus, timing=timing).run(stages)

"""Command-line interface.

Every subcommand accepts --config <path> and --seed; --seed overrides
the config file. Exit codes: 0 success, 1 usage or configuration error,
2 data or checkpoint error, 3 training diverged, 4 infeasible budget.
"""

import argparse
import sys
from dataclasses import replace

from .admm import train_admm, train_baseline
from .checkpoint import load_model, save_model, save_quantized
from .config import ExperimentConfig, load_config
from .corpus import Corpus, ingest_corpus
from .exceptions import (
    ConfigError,
    InfeasibleBudgetError,
    QuantLMError,
    TrainingDivergedError,
)
from .nas import SearchOptions, SelectionWeights, build_supernet, extract_1best, search
from .pipeline import (
    admm_options,
    build_model,
    evaluate,
    resolve_corpus,
    run_pipeline,
    train_options,
)
from .quant import default_clusters
from .report import load_rows, render_table
from .sensitivity import SensitivityReport, allocate_bits, model_sensitivity_report


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # raise instead of sys.exit(2)
        raise _UsageError(message)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "workdir", None):
        cfg = replace(cfg, workdir=args.workdir)
    return cfg


def _corpus(args, cfg) -> Corpus:
    if getattr(args, "corpus", None):
        return Corpus.load(args.corpus)
    return resolve_corpus(cfg)


def _parse_bits_map(raw: str) -> dict:
    try:
        return {k.strip(): int(v) for k, v in
                (item.split("=", 1) for item in raw.split(","))}
    except ValueError as e:
        raise ConfigError(f"cannot parse bit map {raw!r}: {e}") from e


def cmd_ingest(args) -> int:
    corpus = ingest_corpus(args.train, args.valid, args.test, mode=args.mode)
    corpus.save(args.out)
    print(f"wrote {args.out}: vocab {corpus.vocab_size}, "
          f"train {corpus.train.size}, valid {corpus.valid.size}, "
          f"test {corpus.test.size} tokens")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg)
    model = build_model(cfg, corpus.vocab_size)
    log = train_baseline(model, corpus.train, train_options(cfg))
    save_model(args.out, model)
    print(f"wrote {args.out}: {cfg.epochs} epochs, "
          f"final loss {log.losses[-1]:.4f}")
    return 0


def cmd_quantize_admm(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg)
    model = load_model(args.checkpoint)
    clusters = default_clusters(model, cfg.quantize_embeddings)
    if args.bits is not None:
        bit_map = {c.id: args.bits for c in clusters}
    elif args.bits_map:
        bit_map = _parse_bits_map(args.bits_map)
        missing = [c.id for c in clusters if c.id not in bit_map]
        if missing:
            raise ConfigError(f"bit map lacks clusters: {missing}")
    else:
        raise ConfigError("give --bits or --bits-map")
    qm, log = train_admm(model, corpus.train, bit_map, admm_options(cfg),
                         clusters)
    save_quantized(args.out, qm)
    if args.log:
        log.to_csv(args.log)
    state = "converged" if log.converged else "did not converge"
    print(f"wrote {args.out}: {state}, final residual "
          f"{log.residuals[-1]:.3e}, {qm.average_bits():.2f} avg bits")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg)
    model = load_model(args.checkpoint)
    m = args.probes if args.probes is not None else cfg.probes
    report = model_sensitivity_report(
        model, corpus.train[:cfg.max_probe_tokens],
        clusters=default_clusters(model, cfg.quantize_embeddings), m=m,
        seed=cfg.seed, candidates=cfg.candidates, window=cfg.window,
        max_probe_tokens=cfg.max_probe_tokens)
    report.save(args.out)
    print(f"wrote {args.out}: {len(report.clusters)} clusters x "
          f"{len(report.candidates)} bit widths, {m} probes each")
    return 0


def cmd_allocate(args) -> int:
    cfg = _config(args)
    report = SensitivityReport.load(args.report)
    budget = args.budget if args.budget is not None else cfg.budget
    assignment = allocate_bits(report, budget)
    assignment.save(args.out)
    print(f"wrote {args.out}: {assignment.average_bits:.2f} avg bits "
          f"(budget {budget}), total sensitivity {assignment.total_omega:.4g}")
    return 0


def _uniform_bits(qm) -> int:
    slot_bits = {qm.assignment[c.id] for c in qm.clusters
                 if c.id in qm.tables
                 and c.id.rsplit(".", 1)[-1] in ("attn", "ffn")}
    if len(slot_bits) != 1:
        raise ConfigError(
            f"donor is not uniform over sub-layers (bits {sorted(slot_bits)})")
    return slot_bits.pop()


def cmd_nas_search(args) -> int:
    from .checkpoint import load_quantized

    cfg = _config(args)
    corpus = _corpus(args, cfg)
    donors = {}
    for path in args.checkpoints:
        qm = load_quantized(path)
        bits = _uniform_bits(qm)
        if bits in donors:
            raise ConfigError(f"two donors share bit width {bits}")
        donors[bits] = qm
    net = build_supernet(donors)
    opts = SearchOptions(epochs=cfg.nas_epochs, lr_weights=cfg.lr,
                         lr_arch=cfg.lr_arch, lr_decay=cfg.lr_decay,
                         beta=cfg.beta, window=cfg.window,
                         clip_norm=cfg.clip_norm, seed=cfg.seed)
    weights, log = search(net, corpus.train, opts)
    weights.save(args.out)
    if args.log:
        log.to_csv(args.log)
    print(f"wrote {args.out}: {len(weights.slots)} slots over "
          f"candidates {list(weights.candidates)}")
    return 0


def cmd_extract(args) -> int:
    weights = SelectionWeights.load(args.weights)
    assignment = extract_1best(weights)
    assignment.save(args.out)
    print(f"wrote {args.out}: {assignment.average_bits:.2f} avg bits")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg)
    window = args.window if args.window is not None else cfg.window
    ppl, seconds = evaluate(args.checkpoint, corpus.split(args.split), window)
    print(f"PPL {ppl:.2f}  split {args.split}  eval time {seconds:.2f}s")
    return 0


def cmd_report(args) -> int:
    print(render_table(load_rows(args.rows)), end="")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    stages = [s.strip() for s in args.stages.split(",")] if args.stages else None
    rows = run_pipeline(cfg, stages=stages, timing=not args.no_timing)
    print(render_table(rows), end="")
    return 0


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override the config seed")

    parser = _Parser(prog="quantlm",
                     description="Train, quantize, and evaluate small "
                                 "transformer language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="tokenize three split files into a corpus archive")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mode", choices=("word", "char"), default="char")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common],
                       help="train the full-precision baseline")
    p.add_argument("--corpus", help="corpus archive from ingest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize-admm", parents=[common],
                       help="alternating quantized retraining from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--bits", type=int)
    p.add_argument("--bits-map", help="cluster=bits,... per-cluster widths")
    p.add_argument("--log", help="write the training log CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize_admm)

    p = sub.add_parser("sensitivity", parents=[common],
                       help="curvature-based cluster sensitivity report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--probes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("allocate", parents=[common],
                       help="pick per-cluster bit widths under a budget")
    p.add_argument("--report", required=True)
    p.add_argument("--budget", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("nas-search", parents=[common],
                       help="differentiable precision search over donors")
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="uniform-precision quantized checkpoints")
    p.add_argument("--corpus")
    p.add_argument("--log", help="write the search log CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nas_search)

    p = sub.add_parser("extract", parents=[common],
                       help="keep each sub-layer's strongest candidate")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common],
                       help="perplexity and timing for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("train", "valid", "test"),
                   default="test")
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common],
                       help="render a report dump as an aligned table")
    p.add_argument("--rows", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run the end-to-end experiment")
    p.add_argument("--stages", help="comma-separated subset of: "
                                    "baseline,uniform,manual,minsen,nas")
    p.add_argument("--workdir", help="override the config working directory")
    p.add_argument("--no-timing", action="store_true",
                   help="report 0.00 eval seconds for reproducible dumps")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except InfeasibleBudgetError as e:
        print(f"infeasible budget: {e}", file=sys.stderr)
        return 4
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except QuantLMError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

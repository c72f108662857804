"""Command-line entry point.

Exit codes: 0 ok, 1 usage or invalid configuration, 2 data error, 3 numeric
failure. Logs go to stderr; output files never contain timestamps.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .graph import MODES
from .layout import Layout, LayoutError, load_layouts, parse_layout, save_layouts
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .numerics import DimensionError, NumericError
from .retrieval import (
    MissingJudgment,
    RankedList,
    attention_dump,
    dump_ranked_lists,
    iou_judge,
    iou_rank,
    load_ranked_lists,
    overlap_at_k,
    precision_at_k,
    rank,
    read_judgments,
    top1_lists,
    triplet_accuracy,
)
from .synth import PROFILES, synth_generate
from .training import (
    NEGATIVE_RULES,
    OPTIMIZERS,
    TrainConfig,
    build_graphs,
    format_loss_log,
    mine_triplets,
    read_triplets,
    train,
    write_triplets,
)
from .transfer import attention_match, label_accuracy, matching_json, pixel_overlap_match, render_svg

log = logging.getLogger("layoutsim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration

# command-line flag -> TrainConfig field, for the options shared by several subcommands
_TRAIN_FLAGS = {
    "margin": float,
    "positive_threshold": float,
    "gap": float,
    "negative_rule": str,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "optimizer": str,
    "resolution": int,
    "iou_mode": str,
    "graph_mode": str,
    "adjacency_eps": float,
    "hidden": int,
    "graph_dim": int,
    "rounds": int,
}


def read_config_file(path: str | Path) -> dict:
    """JSON, or TOML when the file name ends in .toml."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            doc = tomllib.loads(text)
        else:
            doc = json.loads(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a table/object at top level")
    return doc.get("train", doc) if isinstance(doc.get("train"), dict) else doc


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the config file, then explicit command-line flags; validated."""
    values = {}
    if args.config:
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        doc = read_config_file(args.config)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for flag, name in (("no_edges", "use_edges"), ("no_positions", "use_positions"), ("no_semantics", "use_semantics"), ("no_state_norm", "state_norm")):
        if getattr(args, flag, False):
            values[name] = False
    values["seed"] = args.seed
    values["threads"] = args.threads
    try:
        cfg = TrainConfig(**values)
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# helpers


def _load(path: str) -> list[Layout]:
    layouts = load_layouts(path)
    if not layouts:
        raise LayoutError(f"no layouts found in {path}")
    ids = [l.id for l in layouts]
    if len(set(ids)) != len(ids):
        raise LayoutError(f"duplicate layout ids in {path}")
    return layouts


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        _write_file(path, text)


def _write_file(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _resolve(ref: str, pool: dict[str, Layout]) -> Layout:
    """A layout id from the loaded data, or a path to a single-layout JSON file."""
    if ref in pool:
        return pool[ref]
    p = Path(ref)
    if p.is_file():
        return parse_layout(p.read_text(encoding="utf-8"))
    raise LayoutError(f"unknown layout {ref!r} (not an id in the data and not a file)")


def _params(args, categories: int):
    return load_checkpoint(args.checkpoint, expected_categories=categories)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.n < 1 or args.cluster_size < 1 or args.jitter < 0:
        raise UsageError("--n and --cluster-size must be >= 1 and --jitter >= 0")
    layouts = synth_generate(args.n, seed=args.seed, profile=args.profile, cluster_size=args.cluster_size, jitter=args.jitter)
    save_layouts(layouts, args.out)
    log.info("wrote %d %s layouts to %s", len(layouts), args.profile, args.out)
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = build_config(args)
    layouts = _load(args.data)
    triplets = mine_triplets(layouts, cfg, max_per_anchor=args.max_per_anchor)
    write_triplets(triplets, args.out)
    log.info("mined %d triplets from %d layouts", len(triplets), len(layouts))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    layouts = _load(args.data)
    triplets = read_triplets(args.triplets)
    if args.limit:
        triplets = triplets[: args.limit]
    params = _params(args, layouts[0].categories) if args.checkpoint else None
    result = train(layouts, triplets, cfg, params=params)
    save_checkpoint(result.params, args.out)
    if args.loss_log:
        _write_file(args.loss_log, format_loss_log(result.log))
    last = result.log[-1] if result.log else None
    if last is not None:
        log.info("final epoch %d: loss %.6g, triplet accuracy %.4f", last.epoch, last.mean_loss, last.triplet_accuracy)
    return EXIT_OK


def _queries(args, corpus: list[Layout]) -> list[Layout]:
    pool = {l.id: l for l in corpus}
    if args.all:
        return list(corpus)
    if not args.query:
        raise UsageError("rank needs --query (repeatable) or --all")
    return [_resolve(q, pool) for q in args.query]


def _rank_all(args, queries: list[Layout], corpus: list[Layout]) -> list[RankedList]:
    if args.scorer == "iou":
        return [iou_rank(q, corpus, args.resolution or 64, k=args.k, mode=args.iou_mode or "micro") for q in queries]
    if not args.checkpoint:
        raise UsageError("the model scorer needs --checkpoint")
    cfg = build_config(args)
    params = _params(args, corpus[0].categories)
    cache = build_graphs(corpus, cfg)
    return [
        rank(q, corpus, params, k=args.k, threads=args.threads, graph_mode=cfg.graph_mode, adjacency_eps=cfg.adjacency_eps, graph_cache=cache)
        for q in queries
    ]


def cmd_rank(args) -> int:
    corpus = _load(args.corpus)
    lists = _rank_all(args, _queries(args, corpus), corpus)
    _write(args.out, dump_ranked_lists(lists))
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    corpus = _load(args.corpus)
    cfg = build_config(args)
    params = _params(args, corpus[0].categories)
    query = _resolve(args.query, {l.id: l for l in corpus})
    if args.ranked:
        lists = {rl.query_id: rl for rl in load_ranked_lists(args.ranked)}
        if query.id not in lists:
            raise LayoutError(f"ranked-list file has no entry for query {query.id!r}")
        ranked = RankedList(query.id, lists[query.id].entries[: args.k])
    else:
        ranked = rank(query, corpus, params, k=args.k, threads=args.threads, graph_mode=cfg.graph_mode, adjacency_eps=cfg.adjacency_eps)
    docs = attention_dump(query, ranked, corpus, params, cfg.graph_mode, cfg.adjacency_eps)
    _write(args.out, json.dumps(docs, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics: dict[str, float] = {}
    if args.ranked:
        lists = {rl.query_id: rl.ids for rl in load_ranked_lists(args.ranked)}
        queries = sorted(lists)
        if args.judgments:
            judgments = read_judgments(args.judgments)
        elif args.data:
            judgments = iou_judge(lists, {l.id: l for l in _load(args.data)}, threshold=args.relevance_iou)
        else:
            judgments = None
        if judgments is not None:
            metrics[f"P@{args.k}"] = precision_at_k(queries, lists, judgments, args.k)
        t1 = top1_lists(lists)
        ov_queries = sorted(t1)
        if ov_queries:
            metrics[f"Ov@{args.k}"] = overlap_at_k(ov_queries, lists, t1, args.k, mode=args.overlap_mode)
        else:
            log.warning("no query's top-1 result has its own ranked list; Overlap@k skipped")
    if args.triplets:
        if not (args.checkpoint and args.data):
            raise UsageError("triplet accuracy needs --checkpoint and --data")
        cfg = build_config(args)
        layouts = _load(args.data)
        params = _params(args, layouts[0].categories)
        metrics["accuracy"] = triplet_accuracy(read_triplets(args.triplets), params, build_graphs(layouts, cfg))
    if not metrics:
        raise UsageError("nothing to evaluate: give --ranked (with --judgments or --data) and/or --triplets")
    text = "".join(f"{name}\t{value!r}\n" for name, value in metrics.items())
    sys.stdout.write(text)
    if args.out:
        _write_file(args.out, json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_transfer(args) -> int:
    pool = {l.id: l for l in _load(args.data)} if args.data else {}
    source = _resolve(args.source, pool)
    target = _resolve(args.target, pool)
    cfg = build_config(args)
    params = _params(args, source.categories)
    att = attention_match(source, target, params, round_index=args.round, graph_mode=cfg.graph_mode, adjacency_eps=cfg.adjacency_eps)
    pix = pixel_overlap_match(source, target, cfg.resolution)
    _write(args.out, matching_json([att, pix], source, target) + "\n")
    if args.svg:
        _write_file(args.svg, render_svg(source, target, att))
    if args.svg_pixel:
        _write_file(args.svg_pixel, render_svg(source, target, pix))
    if args.report_accuracy:
        for m in (att, pix):
            sys.stderr.write(f"{m.method} label accuracy {label_accuracy(m, source, target):.4f}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(threads_default: int) -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="root seed; every random stream derives from it")
    p.add_argument("--threads", type=int, default=threads_default, help="worker threads (output does not depend on it)")
    p.add_argument("--config", help="JSON or TOML file with training/model settings")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    return p


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training settings (override --config)")
    g.add_argument("--margin", type=float)
    g.add_argument("--positive-threshold", type=float)
    g.add_argument("--gap", type=float)
    g.add_argument("--negative-rule", choices=NEGATIVE_RULES)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--optimizer", choices=OPTIMIZERS)
    g.add_argument("--resolution", type=int)
    g.add_argument("--iou-mode", choices=("micro", "macro"))
    g.add_argument("--graph-mode", choices=MODES)
    g.add_argument("--adjacency-eps", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--graph-dim", type=int)
    g.add_argument("--rounds", type=int)
    g.add_argument("--no-edges", action="store_true")
    g.add_argument("--no-positions", action="store_true")
    g.add_argument("--no-semantics", action="store_true")
    g.add_argument("--no-state-norm", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = _common(os.cpu_count() or 1)
    parser = _Parser(prog="layoutsim", description="Layout similarity with a graph matching network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset (JSON lines)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--profile", choices=PROFILES, default="floorplan")
    p.add_argument("--cluster-size", type=int, default=3)
    p.add_argument("--jitter", type=float, default=0.04)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine", parents=[common], help="mine IoU weak-label triplets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-anchor", type=int, default=5)
    _model_flags(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", parents=[common], help="train on a triplet file, write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="CSV: epoch,mean_loss,triplet_accuracy")
    p.add_argument("--checkpoint", help="start from these weights instead of a fresh init")
    p.add_argument("--limit", type=int, help="use only the first N triplets")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", parents=[common], help="rank a corpus against queries")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", action="append", help="layout id in the corpus, or a layout JSON file")
    p.add_argument("--all", action="store_true", help="use every corpus layout as a query")
    p.add_argument("--scorer", choices=("model", "iou"), default="model")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="ranked lists JSON (default stdout)")
    _model_flags(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", parents=[common], help="Precision@k, Overlap@k and triplet accuracy")
    p.add_argument("--ranked", help="ranked lists JSON from `rank`")
    p.add_argument("--judgments", help="TSV query_id, result_id, 0|1")
    p.add_argument("--data", help="layouts; used for scripted IoU judgments and for triplet accuracy")
    p.add_argument("--relevance-iou", type=float, default=0.6)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--overlap-mode", choices=("positional", "set"), default="positional")
    p.add_argument("--triplets")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="also write the metrics as JSON")
    _model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", parents=[common], help="transfer element labels (attention and pixel overlap)")
    p.add_argument("--source", required=True, help="layout id in --data, or a layout JSON file")
    p.add_argument("--target", required=True)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--round", type=int, default=-1, help="which propagation round's attention to use")
    p.add_argument("--out", help="matching JSON (default stdout)")
    p.add_argument("--svg", help="side-by-side render of the attention transfer")
    p.add_argument("--svg-pixel", help="side-by-side render of the pixel-overlap transfer")
    p.add_argument("--report-accuracy", action="store_true", help="print label accuracy against the target's own labels")
    _model_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("dump-attn", parents=[common], help="per-round attention for a query's top-k results")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ranked", help="reuse ranked lists instead of re-ranking")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    _model_flags(p)
    p.set_defaults(func=cmd_dump_attn)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version exit 0, usage errors exit 1
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        sys.stderr.write("layoutsim: error: a subcommand is required\n")
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.threads < 1:
        sys.stderr.write("layoutsim: error: --threads must be >= 1\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"layoutsim: error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"layoutsim: numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except (LayoutError, CheckpointError, DimensionError, MissingJudgment, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"layoutsim: data error: {msg}\n")
        return EXIT_DATA


def main() -> None:
    sys.exit(run())

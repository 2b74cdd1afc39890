"""Command-line interface wiring corpus generation, pre-training, and evaluation.

Subcommands: generate, pretrain, embed, evaluate, ablate. Every command
writes a manifest.json capturing the resolved configuration, seed, sha256
hashes of its inputs, the produced files, and timestamps, so a run can be
reproduced from the manifest alone.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, unusable corpora, rejected checkpoints), 3 numeric failure during
training. Unknown flags are usage errors. The environment variables
SPANSEQ_OUT_ROOT (base directory for relative output paths) and
SPANSEQ_THREADS (default for --threads) are honored.
"""

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .autodiff import NumericError, ShapeError
from .checkpoint import CheckpointError, file_sha256
from .corpus import GeneratorConfig, generate, ingest, write_events, write_labels
from .evaluate import (
    ABLATION_COLUMNS,
    ablate,
    default_grid,
    embed,
    evaluation_report,
    render_table,
    write_report,
)
from .plots import plot_ablation, plot_roc, plot_training
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EVALUATION_COLUMNS = ("features", "model", "auc")
NMI_COLUMNS = ("features", "nmi_mean", "nmi_std")


class UsageError(Exception):
    """Flag values that parse but do not form a valid configuration."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; this artifact reserves 2
    # for data errors, so usage problems must leave with 1 instead
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    """Everything needed to reproduce one command invocation."""

    command: str
    argv: list
    config: dict
    seed: int
    inputs: dict
    outputs: list
    started: str
    finished: str
    version: str


def _utc_now():
    return datetime.now(tz=timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path, command, argv, config, seed, inputs, outputs, started):
    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        seed=seed,
        inputs={str(p): file_sha256(p) for p in inputs},
        outputs=[str(p) for p in outputs],
        started=started,
        finished=_utc_now(),
        version=__version__,
    )
    path = Path(path)
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _resolve_out(path_text):
    path = Path(path_text)
    root = os.environ.get("SPANSEQ_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _corpus_paths(corpus_arg):
    p = Path(corpus_arg)
    if p.is_dir():
        return p / "events.tsv", p / "labels.tsv"
    return p, p.parent / "labels.tsv"


def _load_corpus(corpus_arg):
    events_path, labels_path = _corpus_paths(corpus_arg)
    if not events_path.exists():
        raise FileNotFoundError(f"event log not found: {events_path}")
    if not labels_path.exists():
        raise FileNotFoundError(f"label file not found: {labels_path}")
    corpus, stats = ingest(events_path, labels_path, strict=True)
    return corpus, (events_path, labels_path)


def _train_config(args, with_span=True):
    kwargs = dict(
        batch_size=args.batch_size,
        total_steps=args.steps,
        peak_lr=args.peak_lr,
        warmup_proportion=args.warmup,
        weight_decay=args.weight_decay,
        clip_norm=args.clip_norm,
        mask_ratio=args.mask_ratio,
        seed=args.seed,
        dtype=args.dtype,
    )
    if with_span:
        kwargs.update(
            span_size=args.span_size,
            stride=args.stride,
            use_coarse=not args.no_coarse,
            use_fine=not args.no_fine,
            use_domain=not args.no_domain,
        )
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_train_flags(sub, with_span=True):
    sub.add_argument("--steps", type=int, default=2000, help="optimizer steps (default 2000)")
    sub.add_argument("--batch-size", type=int, default=32)
    sub.add_argument("--peak-lr", type=float, default=1e-4)
    sub.add_argument("--warmup", type=float, default=0.1, help="warmup fraction of steps")
    sub.add_argument("--weight-decay", type=float, default=0.01)
    sub.add_argument("--clip-norm", type=float, default=1.0)
    sub.add_argument("--mask-ratio", type=float, default=0.15)
    sub.add_argument("--seed", type=int, default=7)
    sub.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    if with_span:
        sub.add_argument("--span-size", type=int, default=360, help="span length in minutes")
        sub.add_argument("--stride", type=int, default=340, help="window stride in minutes")
        sub.add_argument("--no-coarse", action="store_true", help="disable the month-view matching task")
        sub.add_argument("--no-fine", action="store_true", help="disable the masked-span task")
        sub.add_argument("--no-domain", action="store_true", help="disable the failure-count task")


def build_parser():
    parser = _Parser(prog="spanseq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (default: SPANSEQ_THREADS or library default)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic labeled event log")
    g.add_argument("--sellers", type=int, default=500)
    g.add_argument("--months", type=int, default=2)
    g.add_argument("--abnormal", type=float, default=0.05, help="abnormal-seller fraction")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pre-train the span encoder on an event log")
    p.add_argument("--corpus", required=True, help="corpus directory (events.tsv + labels.tsv)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("embed", help="write one embedding row per seller")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--month", type=int, default=1, help="month view to encode (default 1)")
    e.add_argument("--out", required=True, help="output file (tab-separated)")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("evaluate", help="score embeddings against the hand-crafted baseline")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--month", type=int, default=1)
    v.add_argument("--split-seed", type=int, default=0)
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--json", action="store_true", help="print a machine-readable report")
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="retrain under reduced configs and compare")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--month", type=int, default=1)
    a.add_argument("--split-seed", type=int, default=0)
    a.add_argument("--only", default=None,
                   help="comma-separated grid entries to run (default: all)")
    a.add_argument("--json", action="store_true")
    _add_train_flags(a, with_span=False)
    a.set_defaults(func=cmd_ablate)
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    try:
        config = GeneratorConfig(
            sellers=args.sellers, months=args.months,
            abnormal_fraction=args.abnormal, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    started = _utc_now()
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(config)
    events_path = out / "events.tsv"
    labels_path = out / "labels.tsv"
    write_events(corpus, events_path)
    write_labels(corpus, labels_path)
    manifest = _write_manifest(
        out / "manifest.json", "generate", args._argv, asdict(config), args.seed,
        inputs=(), outputs=[events_path, labels_path], started=started,
    )
    n_events = sum(len(v) for v in corpus.events.values())
    print(f"wrote {len(corpus.sellers)} sellers, {n_events} events to {out}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_pretrain(args):
    config = _train_config(args)
    started = _utc_now()
    corpus, input_paths = _load_corpus(args.corpus)
    out = _resolve_out(args.out)

    def hook(step, parts):
        sys.stderr.write(f"step {step + 1}/{config.total_steps} loss {parts['total']:.4f}\n")

    result = train(corpus, config, out, progress=hook)
    curves = plot_training(result.metrics_path, out / "training.png")
    outputs = [result.checkpoint_path, result.metrics_path, curves, *result.checkpoint_paths]
    manifest = _write_manifest(
        out / "manifest.json", "pretrain", args._argv,
        {"train": asdict(config), "encoder": asdict(config.encoder_config())},
        config.seed, inputs=input_paths, outputs=outputs, started=started,
    )
    print(f"trained {result.steps} steps over {result.n_sellers} sellers "
          f"({result.epochs} epochs); final loss {result.final_parts['total']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"figure: {curves}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_embed(args):
    started = _utc_now()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    corpus, input_paths = _load_corpus(args.corpus)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = embed(ckpt_path, corpus, args.month)
    table.save(out)
    manifest = _write_manifest(
        out.parent / (out.stem + ".manifest.json"), "embed", args._argv,
        {"checkpoint": str(ckpt_path), "month": args.month}, 0,
        inputs=(ckpt_path, *input_paths), outputs=[out], started=started,
    )
    flagged = f" ({len(table.cls_only)} sellers with an empty month)" if table.cls_only else ""
    print(f"wrote {len(table.seller_ids)} embeddings of dim {table.vectors.shape[1]} to {out}{flagged}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_evaluate(args):
    started = _utc_now()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    corpus, input_paths = _load_corpus(args.corpus)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = embed(ckpt_path, corpus, args.month)
    report = evaluation_report(corpus, table, split_seed=args.split_seed)

    tsv, txt = write_report(report.rows, EVALUATION_COLUMNS, out, stem="report")
    nmi_rows = [
        {"features": "embedding", "nmi_mean": report.nmi_embedding.mean, "nmi_std": report.nmi_embedding.std},
        {"features": "baseline", "nmi_mean": report.nmi_baseline.mean, "nmi_std": report.nmi_baseline.std},
    ]
    nmi_tsv, nmi_txt = write_report(nmi_rows, NMI_COLUMNS, out, stem="nmi")
    labels = report.labels
    roc = plot_roc(
        {
            f"{features} {kind}": (fit.test_scores, labels[fit.test_idx])
            for (features, kind), fit in sorted(report.fits.items())
        },
        out / "roc.png",
    )
    outputs = [tsv, txt, nmi_tsv, nmi_txt, roc]
    manifest = _write_manifest(
        out / "manifest.json", "evaluate", args._argv,
        {"checkpoint": str(ckpt_path), "month": args.month, "split_seed": args.split_seed},
        args.split_seed, inputs=(ckpt_path, *input_paths), outputs=outputs, started=started,
    )
    if args.json:
        print(json.dumps({
            "rows": report.rows,
            "nmi": {
                "embedding": {"mean": report.nmi_embedding.mean, "std": report.nmi_embedding.std,
                              "scores": list(report.nmi_embedding.scores)},
                "baseline": {"mean": report.nmi_baseline.mean, "std": report.nmi_baseline.std,
                             "scores": list(report.nmi_baseline.scores)},
            },
            "month": args.month,
            "split_seed": args.split_seed,
            "outputs": [str(p) for p in outputs],
        }, indent=2, sort_keys=True))
    else:
        print(render_table(report.rows, EVALUATION_COLUMNS), end="")
        print()
        print(render_table(nmi_rows, NMI_COLUMNS), end="")
        print(f"\nfigure: {roc}")
        print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_ablate(args):
    base = _train_config(args, with_span=False)
    started = _utc_now()
    corpus, input_paths = _load_corpus(args.corpus)
    out = _resolve_out(args.out)
    grid = default_grid(base)
    if args.only:
        wanted = [w.strip() for w in args.only.split(",") if w.strip()]
        known = {e.name for e in grid}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise UsageError(
                f"unknown grid entries {unknown}; valid names: {sorted(known)}"
            )
        grid = tuple(e for e in grid if e.name in wanted)

    def hook(name, step, parts):
        sys.stderr.write(f"[{name}] step {step + 1}/{base.total_steps} loss {parts['total']:.4f}\n")

    rows = ablate(corpus, grid, out, month=args.month, split_seed=args.split_seed, progress=hook)
    figure = plot_ablation(rows, out / "ablation.png")
    outputs = [out / "ablation.tsv", out / "ablation.txt", figure]
    manifest = _write_manifest(
        out / "manifest.json", "ablate", args._argv,
        {"train": asdict(base), "grid": [e.name for e in grid],
         "month": args.month, "split_seed": args.split_seed},
        base.seed, inputs=input_paths, outputs=outputs, started=started,
    )
    if args.json:
        print(json.dumps({"rows": rows, "outputs": [str(p) for p in outputs]},
                         indent=2, sort_keys=True))
    else:
        print(render_table(rows, ABLATION_COLUMNS), end="")
        print(f"\nfigure: {figure}")
        print(f"manifest: {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _thread_limit(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SPANSEQ_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SPANSEQ_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = argv
        limit = _thread_limit(args)
        if limit is not None:
            if limit < 1:
                raise UsageError(f"--threads must be >= 1, got {limit}")
            from threadpoolctl import threadpool_limits

            context = threadpool_limits(limits=limit)
        else:
            context = nullcontext()
        with context:
            return args.func(args)
    except SystemExit as exc:  # argparse help/usage paths
        return int(exc.code or 0)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except (CheckpointError, ShapeError, ValueError, IndexError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point binding the pipelines together.

One binary, subcommand style. Every subcommand accepts --config FILE with
flat key=value lines whose keys match the long flag names; explicit flags
win over the file. The accepted configuration is echoed back as a sorted,
re-parseable key=value listing at run start.

Exit codes: 0 success, 1 numeric failure (training divergence), 2 usage or
data errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import downstream as D
from . import evaluator as E
from . import genome_io as G
from . import tokenizer as T
from . import trainer as TR
from .errors import GenelmError, TrainingDivergedError
from .model import ModelConfig

PROG = "genelm"


class _Fmt(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=100)


def _echo_config(args: argparse.Namespace) -> None:
    skip = {"func", "config"}
    for key in sorted(vars(args)):
        if key in skip:
            continue
        print(f"{key.replace('_', '-')}={getattr(args, key)}")


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse once to find --config, turn its key=value lines into new
    defaults on the chosen subparser, then parse again so explicit flags
    win."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    overrides = {}
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                parser.error(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            overrides[key.strip().replace("-", "_")] = value.strip()
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in overrides.items():
        action = known.get(key)
        if action is None:
            parser.error(f"{path}: unknown configuration key {key!r}")
        defaults[key] = action.type(value) if action.type else value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _parse_synthetic(spec_parts: list[str], seed: int) -> G.FastaRecord:
    spec = {"markov_order": "0", "sharpness": "0", "seed": str(seed)}
    for part in spec_parts:
        if "=" not in part:
            raise GenelmError(f"--synthetic takes key=value pairs, got {part!r}")
        key, value = part.split("=", 1)
        spec[key.replace("-", "_")] = value
    if "length" not in spec:
        raise GenelmError("--synthetic needs length=<bp>")
    return G.generate_synthetic_genome(
        seed=int(spec["seed"]), length=int(spec["length"]),
        markov_order=int(spec["markov_order"]), sharpness=float(spec["sharpness"]))


def _load_records(args) -> list[G.FastaRecord]:
    if (args.fasta is None) == (args.synthetic is None):
        raise GenelmError("choose exactly one input: --fasta or --synthetic")
    if args.fasta:
        return G.parse_fasta(args.fasta)
    return [_parse_synthetic(args.synthetic, args.seed)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    records = _load_records(args)
    windows = G.extract_windows(records, args.window_len, args.max_ambiguous_fraction)
    if args.eval_holdout:
        train, evalset = G.split_by_source(windows, args.eval_holdout.split(","))
    else:
        train, evalset = G.split_train_eval(windows, args.eval_fraction, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    T.write_shard(os.path.join(args.out_dir, "train.tokens"),
                  T.encode_windows(train.windows))
    T.write_shard(os.path.join(args.out_dir, "eval.tokens"),
                  T.encode_windows(evalset.windows))
    stats = windows.source_stats
    lines = [
        f"window_len={windows.window_len}",
        f"total_bp_read={stats.total_bp_read}",
        f"windows_kept={stats.windows_kept}",
        f"windows_dropped_ambiguous={stats.windows_dropped_ambiguous}",
        f"train_windows={len(train)}",
        f"eval_windows={len(evalset)}",
        f"seed={args.seed}",
    ]
    with open(os.path.join(args.out_dir, "stats.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def _model_config(args) -> ModelConfig:
    return ModelConfig(hidden=args.hidden, n_layers=args.n_layers,
                       n_heads=args.n_heads, ffn_dim=args.ffn_dim,
                       max_seq_len=args.context_len, rope_base=args.rope_base)


def _train_config(args) -> TR.TrainConfig:
    return TR.TrainConfig(batch_size=args.batch_size, lr_peak=args.lr_peak,
                          lr_min=args.lr_min, warmup_iters=args.warmup_iters,
                          total_iters=args.total_iters, seed=args.seed,
                          weight_decay=args.weight_decay)


def cmd_train(args) -> int:
    data = T.read_shard(args.shards)
    cfg = _model_config(args)
    tcfg = _train_config(args)
    start = TR.load_checkpoint(args.init_from) if args.init_from else None
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt, rows = TR.train_stage(
        cfg, tcfg, data, start=start, data_seed=args.seed,
        init_seed=args.seed, log_path=os.path.join(args.out_dir, "metrics.jsonl"))
    TR.save_checkpoint(ckpt, os.path.join(args.out_dir, "checkpoint.bin"))
    print(f"final_loss={rows[-1]['loss']:.6f} final_ppl={rows[-1]['ppl']:.6f}")
    return 0


def cmd_extend(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    data = T.read_shard(args.shards)
    ext_cfg = TR.TrainConfig(batch_size=args.batch_size, lr_peak=args.lr_peak,
                             lr_min=args.lr_min, warmup_iters=args.warmup_iters,
                             total_iters=args.total_iters, seed=args.seed,
                             weight_decay=args.weight_decay)
    os.makedirs(args.out_dir, exist_ok=True)
    new_base = args.new_rope_base
    out, rows = TR.extend_context(
        ckpt, args.new_context_len, new_base, ext_cfg, data,
        log_path=os.path.join(args.out_dir, "metrics.jsonl"))
    TR.save_checkpoint(out, os.path.join(args.out_dir, "checkpoint.bin"))
    tail = f"final_loss={rows[-1]['loss']:.6f}" if rows else "(no steps)"
    print(f"rope_base={out.model_config.rope_base:g} {tail}")
    return 0


def cmd_eval_ppl(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    data = T.read_shard(args.shards)
    seqs = [data[i] for i in range(min(len(data), args.max_sequences or len(data)))]
    nll_sum, n_scored, correct = E.corpus_stats(model, seqs)
    mean_nll = nll_sum / n_scored
    ppl = math.exp(mean_nll)
    acc = correct / n_scored
    print(f"ppl={ppl:.6f} mean_nll={mean_nll:.6f} recon_acc={acc:.6f} "
          f"n_sequences={len(seqs)}")
    if args.out:
        report = E.PerplexityReport([E.ReportRow(
            model_id=os.path.basename(args.checkpoint), eval_length=data.shape[1],
            ppl=ppl, recon_acc=acc, n_sequences=len(seqs),
            n_scored_tokens=n_scored, mean_nll=mean_nll)])
        report.write_jsonl(args.out)
    return 0


def cmd_sweep(args) -> int:
    models = []
    for path in args.checkpoints:
        ckpt = TR.load_checkpoint(path)
        models.append((os.path.splitext(os.path.basename(path))[0],
                       ckpt.build_model()))
    records = _load_records(args)
    lengths = [int(x) for x in args.lengths.split(",")]
    report = E.length_sweep(models, records, lengths,
                            max_sequences=args.max_sequences)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "sweep.csv")
    report.write_csv(csv_path)
    report.write_jsonl(os.path.join(args.out_dir, "sweep.jsonl"))
    with open(csv_path, encoding="ascii") as f:
        print(f.read(), end="")
    return 0


def cmd_embed(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    ds = D.load_labeled_dataset(args.dataset)
    X = D.embed_dataset(model, ds.sequences, pooling=args.pooling,
                        layer=args.layer)
    np.save(args.out, X)
    print(f"embeddings={X.shape[0]}x{X.shape[1]} pooling={args.pooling} out={args.out}")
    return 0


def cmd_probe(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    train_ds = D.load_labeled_dataset(args.train_dataset)
    test_ds = D.load_labeled_dataset(args.test_dataset)
    Xtr = D.embed_dataset(model, train_ds.sequences, pooling=args.pooling)
    Xte = D.embed_dataset(model, test_ds.sequences, pooling=args.pooling)
    record = D.train_probe(Xtr, train_ds.targets, Xte, test_ds.targets,
                           n_classes=train_ds.n_classes, seed=args.seed)
    record["task"] = train_ds.task_kind
    D.write_metrics(record, args.out)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    train_ds = D.load_labeled_dataset(args.train_dataset)
    test_ds = D.load_labeled_dataset(args.test_dataset)
    steps_per_epoch = max(1, -(-len(train_ds) // args.batch_size))
    cfg = TR.finetune_config(args.epochs * steps_per_epoch,
                             batch_size=args.batch_size, lr=args.lr,
                             schedule=args.schedule, seed=args.seed)
    result = D.finetune_classify(ckpt, train_ds, test_ds, mode=args.mode,
                                 config=cfg, head_seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    D.write_metrics(result.metrics, os.path.join(args.out_dir, "metrics.json"))
    out_ckpt = TR.Checkpoint(
        model_config=ckpt.model_config, train_config=cfg,
        params={**result.backbone, "classifier.w": result.head_w,
                "classifier.b": result.head_b},
        moments=None, step=cfg.total_iters, stage=ckpt.stage,
        data_seed=ckpt.data_seed)
    TR.save_checkpoint(out_ckpt, os.path.join(args.out_dir, "finetuned.bin"))
    print(json.dumps(result.metrics, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="flat key=value file; explicit flags win")
    p.add_argument("--seed", type=int, default=0, help="master seed")


def _add_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fasta", default=None, help="FASTA path (.gz ok)")
    p.add_argument("--synthetic", nargs="*", default=None, metavar="KEY=VALUE",
                   help="synthetic genome spec: length=N [markov_order=K] "
                        "[sharpness=S] [seed=N]")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", type=int, default=128, help="model width")
    p.add_argument("--n-layers", type=int, default=4, help="decoder blocks")
    p.add_argument("--n-heads", type=int, default=4, help="attention heads")
    p.add_argument("--ffn-dim", type=int, default=352, help="feed-forward width")
    p.add_argument("--context-len", type=int, default=512, help="training context")
    p.add_argument("--rope-base", type=float, default=10000.0,
                   help="rotary base frequency")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=8, help="sequences per step")
    p.add_argument("--lr-peak", type=float, default=4.8e-4, help="post-warmup rate")
    p.add_argument("--lr-min", type=float, default=4.8e-5, help="end-of-decay rate")
    p.add_argument("--warmup-iters", type=int, default=50, help="linear warmup steps")
    p.add_argument("--total-iters", type=int, default=1000, help="total steps")
    p.add_argument("--weight-decay", type=float, default=0.1,
                   help="decoupled weight decay")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG, formatter_class=_Fmt,
        description="Nucleotide language model pipeline: prepare data, train, "
                    "extend context, evaluate, embed, probe, finetune.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", formatter_class=_Fmt,
                       help="window a genome and write train/eval token shards")
    _add_common(p)
    _add_input(p)
    p.add_argument("--window-len", type=int, default=512, help="window size in bp")
    p.add_argument("--max-ambiguous-fraction", type=float, default=0.1,
                   help="drop windows above this non-ACGT fraction")
    p.add_argument("--eval-fraction", type=float, default=0.01,
                   help="fraction of windows held out for eval")
    p.add_argument("--eval-holdout", default=None,
                   help="comma-separated record headers held out for eval "
                        "(source-level split instead of window-level)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", formatter_class=_Fmt,
                       help="pretrain from scratch or resume from a checkpoint")
    _add_common(p)
    p.add_argument("--shards", required=True, help="train token shard")
    p.add_argument("--init-from", default=None, help="checkpoint to resume")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extend", formatter_class=_Fmt,
                       help="continue pretraining at a longer context")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--shards", required=True,
                   help="token shard windowed at >= the new context length")
    p.add_argument("--new-context-len", type=int, required=True,
                   help="context length after extension")
    p.add_argument("--new-rope-base", type=float, default=None,
                   help="rotary base for the stage (default: scale the "
                        "previous base by the squared length ratio)")
    p.add_argument("--batch-size", type=int, default=4, help="sequences per step")
    p.add_argument("--lr-peak", type=float, default=1e-4, help="post-warmup rate")
    p.add_argument("--lr-min", type=float, default=4e-5, help="end-of-decay rate")
    p.add_argument("--warmup-iters", type=int, default=20, help="linear warmup steps")
    p.add_argument("--total-iters", type=int, default=200, help="total steps")
    p.add_argument("--weight-decay", type=float, default=0.1,
                   help="decoupled weight decay")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("eval-ppl", formatter_class=_Fmt,
                       help="perplexity and reconstruction accuracy on a shard")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--shards", required=True, help="token shard file")
    p.add_argument("--max-sequences", type=int, default=None,
                   help="cap on sequences scored per cell")
    p.add_argument("--out", default=None, help="JSONL report path")
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("sweep", formatter_class=_Fmt,
                       help="perplexity across checkpoints and eval lengths")
    _add_common(p)
    _add_input(p)
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="checkpoint files to compare")
    p.add_argument("--lengths", required=True, help="comma-separated, e.g. 64,128")
    p.add_argument("--max-sequences", type=int, default=None,
                   help="cap on sequences scored per cell")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("embed", formatter_class=_Fmt,
                       help="write pooled embeddings for a labeled dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--dataset", required=True, help="labeled TSV file")
    p.add_argument("--pooling", choices=("max", "mean"), default="max",
                   help="token-axis pooling for embeddings")
    p.add_argument("--layer", type=int, default=None,
                   help="pool this block's output instead of the final norm")
    p.add_argument("--out", required=True, help=".npy output path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", formatter_class=_Fmt,
                       help="linear probe on frozen embeddings")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--train-dataset", required=True, help="labeled TSV, train split")
    p.add_argument("--test-dataset", required=True, help="labeled TSV, test split")
    p.add_argument("--pooling", choices=("max", "mean"), default="max",
                   help="token-axis pooling for embeddings")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", formatter_class=_Fmt,
                       help="finetune a classifier head (optionally the backbone)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--train-dataset", required=True, help="labeled TSV, train split")
    p.add_argument("--test-dataset", required=True, help="labeled TSV, test split")
    p.add_argument("--mode", choices=("all_layers", "head_only"),
                   default="all_layers", help="which parameters train")
    p.add_argument("--epochs", type=int, default=2, help="passes over the train split")
    p.add_argument("--batch-size", type=int, default=8, help="sequences per step")
    p.add_argument("--lr", type=float, default=1e-4, help="peak learning rate")
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear",
                   help="decay shape after warmup")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_finetune)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except OSError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    _echo_config(args)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"{PROG}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (GenelmError, ValueError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: synth -> train -> caption -> eval.

One executable with subcommands; every flag is long-form. Hyperparameters
for ``train`` and ``gradcheck`` may also come from a flat ``key = value``
config file, with explicit flags taking precedence over the file. Exit
codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from capgen.checkpoint import load_checkpoint
from capgen.data import load_captions, load_embeddings, synth_dataset
from capgen.decode import greedy_caption
from capgen.errors import CapgenError, FileFormatError, IntegrityError
from capgen.evaluate import evaluate
from capgen.model import ModelConfig
from capgen.text import corpus_stats, load_vocabulary, normalize_and_tokenize
from capgen.train import (
    TrainConfig,
    default_vocab_path,
    grad_check,
    gradcheck_probe,
    train,
    write_training_report,
)

GRADCHECK_THRESHOLD = 1e-4

# reference dimensions for the self-contained gradient check
TINY_GRADCHECK = dict(d_img=5, vocab_size=12, d_embed=6, hidden=4, n=4, bidirectional=True)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_CONFIG_KEYS = {
    "d_img": int,
    "vocab_size": int,
    "d_embed": int,
    "hidden": int,
    "n": int,
    "bidirectional": _parse_bool,
    "precision": int,
    "learning_rate": float,
    "epochs": int,
    "batch_size": int,
    "shuffle_seed": int,
    "log_every": int,
    "clip_norm": float,
    "eps": float,
}


def load_config_file(path: str) -> dict[str, object]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise FileFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise FileFormatError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](raw)
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
    return values


def _setting(args: argparse.Namespace, file_values: dict[str, object], key: str, default):
    flag_value = getattr(args, key, None)
    if flag_value is not None:
        return flag_value
    if key in file_values:
        return file_values[key]
    return default


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d-embed", type=int, help="shared embedding width (default 512)")
    parser.add_argument("--hidden", type=int, help="LSTM hidden size per direction (default 256)")
    parser.add_argument("--n", type=int, help="maximum caption length in tokens (default 10)")
    parser.add_argument(
        "--bidirectional",
        type=_parse_bool,
        metavar="BOOL",
        help="run both directions in each LSTM layer (default true)",
    )
    parser.add_argument("--precision", type=int, choices=(32, 64), help="float width (default 64)")


def cmd_synth(args: argparse.Namespace) -> int:
    embeddings_path, captions_path = synth_dataset(
        args.out_dir, args.images, args.dim, args.vocab, args.max_caption_len, args.seed
    )
    print(f"wrote {embeddings_path}")
    print(f"wrote {captions_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    model_config = ModelConfig(
        d_embed=_setting(args, file_values, "d_embed", 512),
        hidden=_setting(args, file_values, "hidden", 256),
        bidirectional=_setting(args, file_values, "bidirectional", True),
        n=_setting(args, file_values, "n", 10),
        precision=_setting(args, file_values, "precision", 64),
    )
    train_config = TrainConfig(
        learning_rate=_setting(args, file_values, "learning_rate", 0.1),
        epochs=_setting(args, file_values, "epochs", 50),
        batch_size=_setting(args, file_values, "batch_size", 16),
        shuffle_seed=_setting(args, file_values, "shuffle_seed", 0),
        log_every=_setting(args, file_values, "log_every", 10),
        clip_norm=_setting(args, file_values, "clip_norm", None),
    )
    report = train(
        args.captions,
        args.embeddings,
        model_config,
        train_config,
        args.checkpoint_out,
        vocab_out=args.vocab_out,
    )
    vocab_path = args.vocab_out if args.vocab_out else default_vocab_path(args.checkpoint_out)
    print(f"wrote {args.checkpoint_out}")
    print(f"wrote {vocab_path}")
    if args.report_out:
        write_training_report(report, args.report_out)
        print(f"wrote {args.report_out}")
        if not args.no_figures and report.records:
            from capgen.plots import save_loss_curve

            figure_path = f"{args.report_out}.png"
            save_loss_curve(report, figure_path)
            print(f"wrote {figure_path}")
    if report.final_mean_loss is None:
        print(f"trained 0 epochs ({report.samples_per_epoch} samples/epoch)")
    else:
        print(
            f"trained {len(report.records)} epochs "
            f"({report.samples_per_epoch} samples/epoch), "
            f"final mean loss {report.final_mean_loss:.6f}"
        )
    return 0


def cmd_caption(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocabulary(args.vocab if args.vocab else default_vocab_path(args.checkpoint))
    embeddings = load_embeddings(args.embeddings)
    ids = [part for part in args.ids.split(",") if part]
    if not ids:
        raise IntegrityError("no image ids given")
    lines = []
    for image_id in ids:
        if image_id not in embeddings:
            raise IntegrityError(f"image id {image_id!r} not present in embeddings file")
        caption = greedy_caption(params, vocab, embeddings[image_id])
        lines.append(f"{image_id}\t{caption.text}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(
        args.checkpoint,
        args.captions,
        args.embeddings,
        out_report=args.out,
        vocab_path=args.vocab,
    )
    print(f"wrote {args.out}")
    if not args.no_figures:
        from capgen.plots import save_bleu_histogram

        figure_path = f"{args.out}.png"
        save_bleu_histogram(report, figure_path)
        print(f"wrote {figure_path}")
    print(f"corpus_bleu {report.corpus.pooled.score:.6f}")
    print(f"mean_sentence_bleu_x100 {report.corpus.mean_sentence_x100:.4f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    precision = _setting(args, file_values, "precision", 64)
    if precision != 64:
        parser.error("gradient checking is only meaningful in 64-bit precision; use --precision 64")
    config = ModelConfig(
        d_img=_setting(args, file_values, "d_img", TINY_GRADCHECK["d_img"]),
        vocab_size=_setting(args, file_values, "vocab_size", TINY_GRADCHECK["vocab_size"]),
        d_embed=_setting(args, file_values, "d_embed", TINY_GRADCHECK["d_embed"]),
        hidden=_setting(args, file_values, "hidden", TINY_GRADCHECK["hidden"]),
        bidirectional=_setting(args, file_values, "bidirectional", TINY_GRADCHECK["bidirectional"]),
        n=_setting(args, file_values, "n", TINY_GRADCHECK["n"]),
        precision=64,
    )
    eps = _setting(args, file_values, "eps", 1e-5)
    params, sample = gradcheck_probe(config, args.seed)
    result = grad_check(params, sample, eps=eps, tamper=args.tamper)
    print(
        f"max relative error {result.max_rel_error:.3e} "
        f"({result.checked} of {result.total} components, worst {result.worst_tensor})"
    )
    if result.max_rel_error >= GRADCHECK_THRESHOLD:
        print(f"FAIL: exceeds threshold {GRADCHECK_THRESHOLD:.0e}", file=sys.stderr)
        return 1
    print(f"OK: below threshold {GRADCHECK_THRESHOLD:.0e}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    pairs = load_captions(args.captions)
    stats = corpus_stats([normalize_and_tokenize(text) for _, text in pairs])
    print(f"captions\t{len(pairs)}")
    print(f"unique_tokens\t{stats.unique_tokens}")
    print(f"total_tokens\t{stats.total_tokens}")
    print("length\tcount")
    for length in sorted(stats.length_histogram):
        print(f"{length}\t{stats.length_histogram[length]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capgen",
        description="Desk-scale image captioning: train, caption and evaluate "
        "an LSTM generator over precomputed image embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embeddings + captions dataset")
    p.add_argument("--out-dir", required=True, help="directory for the generated files")
    p.add_argument("--images", type=int, default=16, help="number of images (default 16)")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension (default 16)")
    p.add_argument("--vocab", type=int, default=20, help="synthetic token alphabet size (default 20)")
    p.add_argument(
        "--max-caption-len", type=int, default=10, help="longest generated caption (default 10)"
    )
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a captioning model end to end")
    p.add_argument("--captions", required=True, help="caption TSV file")
    p.add_argument("--embeddings", required=True, help="CEMB embeddings file")
    p.add_argument("--config", help="flat key = value config file (flags override it)")
    p.add_argument("--checkpoint-out", required=True, help="checkpoint output path")
    p.add_argument("--report-out", help="JSONL training report output path")
    p.add_argument("--vocab-out", help="vocabulary output path (default <checkpoint>.vocab)")
    _add_model_flags(p)
    p.add_argument("--learning-rate", type=float, help="SGD step size (default 0.1)")
    p.add_argument("--epochs", type=int, help="training epochs (default 50)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 16)")
    p.add_argument("--shuffle-seed", type=int, help="seed for init and shuffling (default 0)")
    p.add_argument("--log-every", type=int, help="epochs between log lines, 0 silences (default 10)")
    p.add_argument("--clip-norm", type=float, help="max global gradient norm (off by default)")
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="greedy-decode captions for chosen image ids")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--embeddings", required=True, help="CEMB embeddings file")
    p.add_argument("--ids", required=True, help="comma-separated image ids")
    p.add_argument("--out", help="output TSV path (default: stdout)")
    p.add_argument("--vocab", help="vocabulary file (default <checkpoint>.vocab)")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score generated captions against references with BLEU")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--captions", required=True, help="reference caption TSV file")
    p.add_argument("--embeddings", required=True, help="CEMB embeddings file")
    p.add_argument("--out", required=True, help="JSON report output path")
    p.add_argument("--vocab", help="vocabulary file (default <checkpoint>.vocab)")
    p.add_argument("--no-figures", action="store_true", help="skip the BLEU histogram figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "gradcheck", help="verify analytic gradients against finite differences"
    )
    p.add_argument("--config", help="flat key = value config file overriding the tiny model")
    p.add_argument("--seed", type=int, default=0, help="seed for params and probe sample")
    p.add_argument("--eps", type=float, help="finite-difference step (default 1e-5)")
    p.add_argument("--precision", type=int, choices=(32, 64), help="must be 64")
    p.add_argument("--tamper", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck, needs_parser=True)

    p = sub.add_parser("stats", help="print corpus statistics for a captions file")
    p.add_argument("--captions", required=True, help="caption TSV file")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "needs_parser", False):
            return args.func(args, parser)
        return args.func(args)
    except (CapgenError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

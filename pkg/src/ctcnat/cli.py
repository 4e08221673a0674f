"""Command-line surface: train, translate, evaluate, bench, average, synth.

Training is configured by a flat key=value text file (one key per line,
``#`` comments allowed); every key is listed in DEFAULTS and unknown keys
are rejected by name. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import bench as bench_mod
from .data import (
    SentencePair,
    Vocabulary,
    build_vocab,
    gen_synthetic,
    load_parallel,
    synthetic_vocab,
)
from .decoding import DecodeOptions, ar_beam_decode, ar_greedy_decode, ctc_beam_search, greedy_ctc_decode
from .evaluation import corpus_bleu, sentence_bleu
from .model import ConfigError, ModelConfig, decode_parallel, encode, split_states
from .training import (
    Checkpoint,
    TrainConfig,
    average_checkpoints,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log_csv,
)


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """Every key accepted in a training config file."""

    variant: str = "encoder-decoder"
    d_model: int = 64
    ff_dim: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    k: int = 3
    max_len: int = 128
    dropout: float = 0.1
    vocab_mode: str = "word"
    min_freq: int = 1
    lr: float = 3e-3
    warmup: int = 200
    batch_size: int = 16
    max_steps: int = 1000
    valid_interval: int = 200
    keep_top: int = 5
    seed: int = 0
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    checkpoint_dir: str = "checkpoints"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; unknown keys and bad values are usage errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None
    return RunConfig(**values)


def serialize_config(config: RunConfig) -> str:
    """Canonical text form; parse(serialize(c)) == c."""
    return "".join(f"{f.name}={getattr(config, f.name)}\n" for f in fields(RunConfig))


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise UsageError(f"config file not found: {config_path}")
    run = parse_config(config_path.read_text(encoding="utf-8"))
    for key in ("train_src", "train_tgt", "valid_src", "valid_tgt"):
        if not getattr(run, key):
            raise UsageError(f"config key {key!r} is required for training")
        if not Path(getattr(run, key)).is_file():
            raise UsageError(f"config key {key!r}: file not found: {getattr(run, key)}")

    lines = _read_lines(run.train_src) + _read_lines(run.train_tgt)
    vocab = build_vocab(lines, mode=run.vocab_mode, min_freq=run.min_freq)
    try:
        model_config = ModelConfig(
            vocab_size=vocab.vocab_size, d_model=run.d_model, ff_dim=run.ff_dim,
            heads=run.heads, enc_layers=run.enc_layers, dec_layers=run.dec_layers,
            k=run.k, variant=run.variant, max_len=run.max_len, dropout_rate=run.dropout)
        train_config = TrainConfig(
            learning_rate=run.lr, warmup=run.warmup, batch_size=run.batch_size,
            max_steps=run.max_steps, validation_interval=run.valid_interval,
            checkpoint_dir=run.checkpoint_dir, seed=run.seed, keep_top=run.keep_top)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc

    train_pairs = load_parallel(run.train_src, run.train_tgt, vocab, max_len=run.max_len)
    valid_pairs = load_parallel(run.valid_src, run.valid_tgt, vocab, max_len=run.max_len)
    final, log = train(model_config, train_pairs, valid_pairs, train_config, vocab)

    ckpt_dir = Path(run.checkpoint_dir)
    vocab.save(ckpt_dir / "vocab.txt")
    write_log_csv(log, ckpt_dir / "log.csv")
    (ckpt_dir / "run.cfg").write_text(serialize_config(run), encoding="utf-8")
    print(f"finished {final.step} steps, final validation BLEU {final.valid_score:.2f}")
    print(f"checkpoints and log in {ckpt_dir}")
    return 0


def _load_vocab_for_model(model_path: str, vocab_arg: str | None, mode: str) -> Vocabulary:
    path = Path(vocab_arg) if vocab_arg else Path(model_path).parent / "vocab.txt"
    if not path.is_file():
        raise UsageError(f"vocabulary file not found: {path} (pass --vocab)")
    return Vocabulary.load(path, mode=mode)


def _translate_one(ckpt: Checkpoint, ids, mode: str, beam: int, max_steps: int | None):
    config, params = ckpt.config, ckpt.params
    if config.is_autoregressive:
        steps = max_steps if max_steps is not None else min(2 * len(ids) + 8, config.max_len - 1)
        if mode == "beam":
            return ar_beam_decode(config, params, ids, DecodeOptions(beam_width=beam), steps)
        return ar_greedy_decode(config, params, ids, steps)
    enc = encode(config, params, ids)
    log_probs = decode_parallel(config, params, split_states(params, enc, config.k), enc)
    if mode == "beam":
        return ctc_beam_search(log_probs, DecodeOptions(beam_width=beam))[0].prefix
    return greedy_ctc_decode(log_probs)


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.model)
    vocab = _load_vocab_for_model(args.model, args.vocab, args.vocab_mode)
    out_lines = []
    for line in _read_lines(args.input):
        ids = vocab.encode_line(line)
        if not ids:
            out_lines.append("")
            continue
        hyp = _translate_one(ckpt, ids, args.mode, args.beam, args.max_steps)
        out_lines.append(vocab.detokenize(vocab.decode_ids(hyp)))
    with open(args.output, "w", encoding="utf-8") as f:
        for line in out_lines:
            f.write(line + "\n")
    return 0


def cmd_evaluate(args) -> int:
    hyps = [line.split() for line in _read_lines(args.hyp)]
    refs = [line.split() for line in _read_lines(args.ref)]
    score = corpus_bleu(hyps, refs)
    print(f"corpus_bleu = {score:.4f}")
    if args.report:
        if not args.src:
            raise UsageError("--report needs --src for source lengths")
        srcs = [line.split() for line in _read_lines(args.src)]
        with open(args.report, "w", encoding="utf-8") as f:
            f.write("sentence_id,src_len,out_len,null_count,sent_bleu\n")
            for i, (hyp, ref, src) in enumerate(zip(hyps, refs, srcs)):
                f.write(f"{i},{len(src)},{len(hyp)},0,{sentence_bleu(hyp, ref):.4f}\n")
            f.write(f"corpus_bleu,{score:.4f}\n")
    return 0


def cmd_bench(args) -> int:
    if not args.ar_model and not args.nar_model:
        raise UsageError("pass --ar-model and/or --nar-model")
    ar = nar = None
    vocab = None
    if args.ar_model:
        ckpt = load_checkpoint(args.ar_model)
        ar = (ckpt.config, ckpt.params)
        vocab = _load_vocab_for_model(args.ar_model, args.vocab, args.vocab_mode)
    if args.nar_model:
        ckpt = load_checkpoint(args.nar_model)
        nar = (ckpt.config, ckpt.params)
        vocab = _load_vocab_for_model(args.nar_model, args.vocab, args.vocab_mode)
    if args.modes:
        modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    else:
        modes = tuple(m for m in bench_mod.MODES
                      if (m.startswith("AR") and ar) or (m.startswith("NAR") and nar))
    pairs = []
    for line in _read_lines(args.input):
        ids = vocab.encode_line(line)
        if ids:
            pairs.append(SentencePair(ids, ids, line, line))
    records, summary = bench_mod.bench_decode(
        pairs, modes=modes, ar_model=ar, nar_model=nar, reps=args.reps,
        beam=DecodeOptions(beam_width=args.beam), ar_max_steps=args.ar_max_steps,
        parallel_sentences=args.parallel)
    if args.out:
        Path(args.out).write_text(bench_mod.records_to_csv(records), encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_average(args) -> int:
    checkpoints = [load_checkpoint(p) for p in args.checkpoints]
    params = average_checkpoints(checkpoints)
    step = max(c.step for c in checkpoints)
    score = sum(c.valid_score for c in checkpoints) / len(checkpoints)
    save_checkpoint(Checkpoint(checkpoints[0].config, params, step, score), args.output)
    print(f"averaged {len(checkpoints)} checkpoints into {args.output}")
    return 0


def cmd_synth(args) -> int:
    pairs = gen_synthetic(args.task, args.vocab_size, args.n,
                          (args.min_len, args.max_len), args.seed)
    with open(args.src, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(p.source_text + "\n")
    with open(args.tgt, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(p.target_text + "\n")
    if args.vocab_out:
        synthetic_vocab(args.vocab_size).save(args.vocab_out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctcnat",
                                     description="CTC-based parallel sequence transduction toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True, help="path to the key=value config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode an input file line by line")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: vocab.txt beside the model)")
    p.add_argument("--vocab-mode", choices=("word", "char"), default="word")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of hypothesis vs reference files")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", default=None)
    p.add_argument("--report", default=None, help="write a per-sentence CSV report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="per-sentence decoding latency")
    p.add_argument("--input", required=True, help="source sentences, one per line")
    p.add_argument("--ar-model", default=None)
    p.add_argument("--nar-model", default=None)
    p.add_argument("--modes", default=None, help="comma-separated subset of " + ",".join(bench_mod.MODES))
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--ar-max-steps", type=int, default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--vocab-mode", choices=("word", "char"), default="word")
    p.add_argument("--parallel", action="store_true", help="decode sentences on a thread pool")
    p.add_argument("--out", default=None, help="write the timing CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("average", help="elementwise-average checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("synth", help="generate a synthetic parallel corpus")
    p.add_argument("--task", choices=("copy", "reverse", "duplicate-each-token"), required=True)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--vocab-out", default=None)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Adam training loop, validation, checkpointing, and weight averaging.

Parallel-labeling variants train on the lattice loss over the split-state
frame labeling; the autoregressive baseline trains on teacher-forced
per-token cross-entropy. Batch loss is the mean over sentences of the raw
per-sentence negative log-likelihood. Validation score is greedy-decode
corpus BLEU, and the keep_top best-scoring checkpoints are retained on
disk; averaging their parameters elementwise gives the final model.

Checkpoint files: magic ``CTCNAT01`` (the trailing two bytes are the
format version), then little-endian throughout: a block of length-prefixed
UTF-8 ``key=value`` lines covering the model config plus step and
validation score, then per-parameter records of length-prefixed name, rank,
dims as unsigned 32-bit, and values as raw 64-bit floats. Round trips are
bit-exact.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import ctc_loss, min_frames
from .data import EOS_ID, Batch, SentencePair, Vocabulary, VocabularyError, batch_pairs
from .decoding import ar_greedy_decode, greedy_ctc_decode
from .evaluation import corpus_bleu
from .model import (
    ConfigError,
    ModelConfig,
    ModelParams,
    decode_autoregressive_full,
    decode_parallel,
    encode,
    init_params,
    parameter_shapes,
    split_states,
)
from .tensor import GradTape, Tensor, accumulate_grad, add, custom_op, scale, sum_all, take_per_row

_log = logging.getLogger(__name__)

MAGIC = b"CTCNAT"
FORMAT_VERSION = "01"


class CheckpointError(ValueError):
    """Checkpoint contents disagree with the expected model."""


class FormatError(ValueError):
    """Unreadable checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; learning rate ramps linearly over ``warmup``
    steps then decays as 1/sqrt(step)."""

    learning_rate: float = 3e-3
    warmup: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 16
    max_steps: int = 1000
    validation_interval: int = 200
    checkpoint_dir: str = "checkpoints"
    seed: int = 0
    keep_top: int = 5

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {self.warmup}")
        if self.keep_top < 1:
            raise ConfigError(f"keep_top must be >= 1, got {self.keep_top}")
        if self.batch_size < 1 or self.max_steps < 1 or self.validation_interval < 1:
            raise ConfigError("batch_size, max_steps and validation_interval must be >= 1")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    step: int
    valid_score: float
    version: str = FORMAT_VERSION


@dataclass(frozen=True)
class LogRow:
    step: int
    train_loss: float
    valid_bleu: float | None


def lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Standard Adam with bias correction over a named parameter set."""

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ctc_loss_op(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Lattice loss as a taped scalar; backward injects the DP gradient."""
    value, grad = ctc_loss(log_probs.data, labels)

    def rule(g: np.ndarray) -> None:
        accumulate_grad(log_probs, float(np.ravel(g)[0]) * grad)

    return custom_op(np.float64(value), (log_probs,), rule, check_finite=False)


def sentence_loss(config: ModelConfig, params: ModelParams, source_ids, target_ids,
                  *, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Raw negative log-likelihood of one sentence pair."""
    enc = encode(config, params, source_ids, dropout_rng=dropout_rng)
    if config.is_autoregressive:
        targets = list(target_ids)
        if any(t < 1 for t in targets):
            raise VocabularyError("autoregressive targets must not contain the blank id")
        rows = decode_autoregressive_full(config, params, enc, targets, dropout_rng=dropout_rng)
        cols = [t - 1 for t in targets + [EOS_ID]]  # output column j scores id j+1
        return scale(sum_all(take_per_row(rows, cols)), -1.0)
    split = split_states(params, enc, config.k)
    log_probs = decode_parallel(config, params, split, enc, dropout_rng=dropout_rng)
    return ctc_loss_op(log_probs, target_ids)


def batch_loss(config: ModelConfig, params: ModelParams, batch: Batch,
               *, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Mean per-sentence loss; padding is stripped via the stored lengths
    and never touches the forward pass."""
    n = len(batch.source_lengths)
    total = sentence_loss(config, params, batch.source_row(0), batch.target_row(0),
                          dropout_rng=dropout_rng)
    for i in range(1, n):
        total = add(total, sentence_loss(config, params, batch.source_row(i), batch.target_row(i),
                                         dropout_rng=dropout_rng))
    return scale(total, 1.0 / n)


def feasible_pairs(config: ModelConfig, pairs: Sequence[SentencePair]) -> tuple[list[SentencePair], int]:
    """Drop pairs whose target cannot fit in k * T_x frames (label count plus
    repeat separators); returns (kept, skipped_count)."""
    if config.is_autoregressive:
        return list(pairs), 0
    kept = [p for p in pairs if config.k * len(p.source_ids) >= min_frames(p.target_ids)]
    return kept, len(pairs) - len(kept)


def greedy_translate(config: ModelConfig, params: ModelParams, source_ids,
                     max_steps: int | None = None) -> tuple[int, ...]:
    """Greedy decode for either model family; the shared validation path."""
    if config.is_autoregressive:
        steps = max_steps if max_steps is not None else min(2 * len(list(source_ids)) + 8, config.max_len - 1)
        return ar_greedy_decode(config, params, source_ids, steps)
    enc = encode(config, params, source_ids)
    log_probs = decode_parallel(config, params, split_states(params, enc, config.k), enc)
    return greedy_ctc_decode(log_probs)


def validation_bleu(config: ModelConfig, params: ModelParams, vocab: Vocabulary,
                    pairs: Sequence[SentencePair]) -> float:
    hyps = [vocab.decode_ids(greedy_translate(config, params, p.source_ids)) for p in pairs]
    refs = [vocab.decode_ids(p.target_ids) for p in pairs]
    return corpus_bleu(hyps, refs)


class _Retention:
    """Keeps at most keep_top checkpoint files, the best scores seen.

    The victim is evicted before the new file is written so the directory
    never holds more than keep_top checkpoints.
    """

    def __init__(self, directory: Path, keep_top: int):
        self.directory = directory
        self.keep_top = keep_top
        self.entries: list[tuple[float, int, Path]] = []

    def add(self, ckpt: "Checkpoint") -> Path | None:
        if len(self.entries) >= self.keep_top:
            worst = min(self.entries, key=lambda e: (e[0], e[1]))
            if (ckpt.valid_score, ckpt.step) <= (worst[0], worst[1]):
                return None
            self.entries.remove(worst)
            worst[2].unlink(missing_ok=True)
        path = self.directory / f"ckpt-{ckpt.step:06d}.bin"
        save_checkpoint(ckpt, path)
        self.entries.append((ckpt.valid_score, ckpt.step, path))
        return path

    def paths(self) -> list[Path]:
        return [e[2] for e in self.entries]


def train(model_config: ModelConfig, train_pairs: Sequence[SentencePair],
          valid_pairs: Sequence[SentencePair], train_config: TrainConfig,
          vocab: Vocabulary) -> tuple[Checkpoint, list[LogRow]]:
    """Run the full optimization loop; returns the final checkpoint and the
    (step, train loss, validation BLEU) log."""
    if not train_pairs or not valid_pairs:
        raise ConfigError("training and validation corpora must be non-empty")
    usable, skipped = feasible_pairs(model_config, train_pairs)
    if not usable:
        raise ConfigError(
            f"all {len(train_pairs)} training pairs are infeasible for k={model_config.k}; "
            "increase the split factor k")

    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, rng)
    optimizer = Adam(params, train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps)
    ckpt_dir = Path(train_config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    retention = _Retention(ckpt_dir, train_config.keep_top)
    dropout_rng = rng if model_config.dropout_rate > 0.0 else None

    if skipped:
        _log.info("skipped %d infeasible pairs (target needs more than k*T_x frames)", skipped)

    log: list[LogRow] = []
    order: list[int] = []
    cursor = 0
    last_bleu = math.nan
    for step in range(1, train_config.max_steps + 1):
        chunk: list[SentencePair] = []
        while len(chunk) < min(train_config.batch_size, len(usable)):
            if cursor >= len(order):
                order = list(rng.permutation(len(usable)))
                cursor = 0
            chunk.append(usable[order[cursor]])
            cursor += 1
        batch = batch_pairs(chunk)
        with GradTape() as tape:
            loss = batch_loss(model_config, params, batch, dropout_rng=dropout_rng)
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step(lr_at(step, train_config.learning_rate, train_config.warmup))

        bleu = None
        if step % train_config.validation_interval == 0 or step == train_config.max_steps:
            bleu = validation_bleu(model_config, params, vocab, valid_pairs)
            last_bleu = bleu
            retention.add(Checkpoint(model_config, _copy_params(params), step, bleu))
        log.append(LogRow(step, loss.item(), bleu))

    final = Checkpoint(model_config, params, train_config.max_steps, last_bleu)
    return final, log


def _copy_params(params: ModelParams) -> ModelParams:
    return {name: Tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}


def write_log_csv(log: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,train_loss,valid_bleu\n")
        for row in log:
            bleu = "" if row.valid_bleu is None else f"{row.valid_bleu:.4f}"
            f.write(f"{row.step},{row.train_loss:.6f},{bleu}\n")


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> ModelParams:
    """Elementwise arithmetic mean of every named parameter.

    Computed as first + mean(others - first), accumulated in the given list
    order; identical checkpoints therefore average to themselves bit-exactly.
    """
    if not checkpoints:
        raise CheckpointError("no checkpoints to average")
    first = checkpoints[0].config
    for ckpt in checkpoints[1:]:
        if ckpt.config != first:
            raise CheckpointError(f"config mismatch: {ckpt.config} vs {first}")
    out: ModelParams = {}
    for name in checkpoints[0].params:
        base = checkpoints[0].params[name].data
        acc = np.zeros_like(base)
        for ckpt in checkpoints[1:]:
            acc += ckpt.params[name].data - base
        out[name] = Tensor(base + acc / len(checkpoints), requires_grad=True)
    return out


_CONFIG_FIELDS = ("variant", "vocab_size", "d_model", "ff_dim", "heads",
                  "enc_layers", "dec_layers", "k", "max_len", "dropout_rate")
_INT_FIELDS = {"vocab_size", "d_model", "ff_dim", "heads", "enc_layers", "dec_layers", "k", "max_len"}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    lines = [f"{name}={getattr(ckpt.config, name)!r}" if name == "dropout_rate"
             else f"{name}={getattr(ckpt.config, name)}" for name in _CONFIG_FIELDS]
    lines.append(f"step={ckpt.step}")
    lines.append(f"valid_score={ckpt.valid_score!r}")
    with open(path, "wb") as f:
        f.write(MAGIC + ckpt.version.encode("ascii"))
        f.write(struct.pack("<I", len(lines)))
        for line in lines:
            raw = line.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        names = sorted(ckpt.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = ckpt.params[name].data
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated checkpoint: needed {n} bytes at offset {self.offset}")
        out = self.blob[self.offset: self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read and validate a checkpoint; never returns a partial model."""
    with open(path, "rb") as f:
        reader = _Reader(f.read())
    header = reader.take(8)
    if header[:6] != MAGIC:
        raise FormatError(f"bad magic {header[:6]!r} at offset 0")
    version = header[6:].decode("ascii", errors="replace")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r}")

    fields: dict[str, str] = {}
    for _ in range(reader.u32()):
        line = reader.take(reader.u32()).decode("utf-8")
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r} before offset {reader.offset}")
        fields[key] = value
    try:
        kwargs = {name: (int(fields[name]) if name in _INT_FIELDS else fields[name])
                  for name in _CONFIG_FIELDS if name != "dropout_rate"}
        kwargs["dropout_rate"] = float(fields["dropout_rate"])
        config = ModelConfig(**kwargs)
        step = int(fields["step"])
        valid_score = float(fields["valid_score"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad config block: {exc}") from exc

    params: ModelParams = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        params[name] = Tensor(values.copy(), requires_grad=True)
    if reader.offset != len(reader.blob):
        raise FormatError(f"{len(reader.blob) - reader.offset} trailing bytes at offset {reader.offset}")

    expected_shapes = parameter_shapes(config)
    if set(params) != set(expected_shapes):
        missing = sorted(set(expected_shapes) - set(params))
        extra = sorted(set(params) - set(expected_shapes))
        raise CheckpointError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, shape in expected_shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected_config}")
    return Checkpoint(config=config, params=params, step=step, valid_score=valid_score, version=version)

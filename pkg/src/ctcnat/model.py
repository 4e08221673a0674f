"""Transformer blocks and the four model variants.

Three parallel-labeling variants share one encoder: a deep encoder that
labels the split states directly, an encoder-decoder whose decoder runs
unmasked self-attention plus encoder attention over the split states, and
the same with sinusoidal positions added to the decoder input. The fourth
variant is a conventional autoregressive baseline whose decoder self-
attention is causally masked.

State splitting projects each encoder state to k model-width vectors,
s[c*k + b] = (h[c] @ W + bias)[b*d : (b+1)*d], so the frame sequence is k
times longer than the source and the labeler can emit targets longer than
the source.

Blocks are pre-norm (norm before each sublayer, final norm after the
stack), which is the stabler choice at desk scale. Forward passes are pure
given immutable params; dropout only runs when a generator is supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import EOS_ID, VocabularyError
from .tensor import (
    ShapeError,
    Tensor,
    add,
    dropout,
    embed,
    layer_norm,
    log_softmax,
    matmul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

VARIANTS = ("deep-encoder", "encoder-decoder", "encoder-decoder-posenc", "autoregressive-baseline")
NAR_VARIANTS = VARIANTS[:3]

MASK_OFF = -1e9  # large enough that exp underflows to exactly 0.0 in float64


class ConfigError(ValueError):
    """Model configuration violates its invariants."""


class LengthError(ValueError):
    """Sequence longer than the configured maximum (or empty)."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    vocab_size counts the non-blank ids (pad, eos, unk and real tokens);
    the parallel labeler adds one blank column, so it emits vocab_size + 1
    log-probabilities per frame. The autoregressive head emits vocab_size
    columns for ids 1..vocab_size.
    """

    vocab_size: int
    d_model: int = 64
    ff_dim: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    k: int = 3
    variant: str = "encoder-decoder"
    max_len: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.k < 1:
            raise ConfigError(f"split factor k must be >= 1, got {self.k}")
        if self.variant == "deep-encoder" and self.dec_layers != 0:
            raise ConfigError("deep-encoder variant requires dec_layers=0")
        if self.enc_layers < 1 or self.dec_layers < 0 or self.max_len < 1:
            raise ConfigError("enc_layers >= 1, dec_layers >= 0 and max_len >= 1 required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def is_autoregressive(self) -> bool:
        return self.variant == "autoregressive-baseline"


ModelParams = dict[str, Tensor]


@dataclass
class EncoderStates:
    """Final encoder states, one row per source position."""

    states: Tensor

    @property
    def source_length(self) -> int:
        return self.states.shape[0]


@dataclass
class SplitStates:
    """Decoder input states, exactly k rows per source position."""

    states: Tensor


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = (d, d)
    for name in ("bq", "bk", "bv", "bo"):
        out[f"{prefix}.{name}"] = (d,)
    return out


def _block_shapes(prefix: str, d: int, ff: int, cross: bool) -> dict[str, tuple[int, ...]]:
    out = {}
    out.update(_attn_shapes(f"{prefix}.self_attn", d))
    out[f"{prefix}.ln1.gain"] = (d,)
    out[f"{prefix}.ln1.bias"] = (d,)
    if cross:
        out.update(_attn_shapes(f"{prefix}.src_attn", d))
        out[f"{prefix}.ln2.gain"] = (d,)
        out[f"{prefix}.ln2.bias"] = (d,)
    ln_ff = "ln3" if cross else "ln2"
    out[f"{prefix}.{ln_ff}.gain"] = (d,)
    out[f"{prefix}.{ln_ff}.bias"] = (d,)
    out[f"{prefix}.ff.w1"] = (d, ff)
    out[f"{prefix}.ff.b1"] = (ff,)
    out[f"{prefix}.ff.w2"] = (ff, d)
    out[f"{prefix}.ff.b2"] = (d,)
    return out


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The exact named-parameter contract implied by a config."""
    d, ff, v = config.d_model, config.ff_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"src_embed": (v + 1, d)}
    for i in range(config.enc_layers):
        shapes.update(_block_shapes(f"enc.{i}", d, ff, cross=False))
    shapes["enc.ln_out.gain"] = (d,)
    shapes["enc.ln_out.bias"] = (d,)
    if config.is_autoregressive:
        shapes["tgt_embed"] = (v + 1, d)
        for i in range(config.dec_layers):
            shapes.update(_block_shapes(f"dec.{i}", d, ff, cross=True))
        shapes["dec.ln_out.gain"] = (d,)
        shapes["dec.ln_out.bias"] = (d,)
        shapes["out.w"] = (d, v)
        shapes["out.b"] = (v,)
    else:
        shapes["split.w"] = (d, config.k * d)
        shapes["split.b"] = (config.k * d,)
        if config.variant != "deep-encoder":
            for i in range(config.dec_layers):
                shapes.update(_block_shapes(f"dec.{i}", d, ff, cross=True))
            shapes["dec.ln_out.gain"] = (d,)
            shapes["dec.ln_out.bias"] = (d,)
        shapes["out.w"] = (d, v + 1)
        shapes["out.b"] = (v + 1,)
    return shapes


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    """Xavier-uniform weights, unit gains, zero biases; deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("embed"):
            values = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=shape)
        elif name.endswith(".gain"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return params


@lru_cache(maxsize=32)
def sinusoid_table(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table; even columns sine, odd columns cosine."""
    pos = np.arange(length)[:, None]
    dim = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * dim / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=256)
def _causal_mask(n: int) -> np.ndarray:
    mask = np.triu(np.full((n, n), MASK_OFF), k=1)
    mask.setflags(write=False)
    return mask


def _mha(params: ModelParams, prefix: str, x_q: Tensor, x_kv: Tensor, heads: int,
         mask: np.ndarray | None = None) -> Tensor:
    t_q, d = x_q.shape
    t_kv = x_kv.shape[0]
    dh = d // heads
    q = add(matmul(x_q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = add(matmul(x_kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = add(matmul(x_kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    qh = transpose(reshape(q, (t_q, heads, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (t_kv, heads, dh)), (1, 0, 2))
    vh = transpose(reshape(v, (t_kv, heads, dh)), (1, 0, 2))
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    ctx = matmul(softmax(scores, axis=-1), vh)
    merged = reshape(transpose(ctx, (1, 0, 2)), (t_q, d))
    return add(matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ff(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hidden = relu(add(matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return add(matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _maybe_drop(x: Tensor, config: ModelConfig, rng: np.random.Generator | None) -> Tensor:
    if rng is None or config.dropout_rate <= 0.0:
        return x
    return dropout(x, config.dropout_rate, rng)


def _block(params: ModelParams, prefix: str, x: Tensor, config: ModelConfig,
           enc_states: Tensor | None = None, mask: np.ndarray | None = None,
           rng: np.random.Generator | None = None) -> Tensor:
    normed = _ln(params, f"{prefix}.ln1", x)
    x = add(x, _maybe_drop(_mha(params, f"{prefix}.self_attn", normed, normed, config.heads, mask),
                           config, rng))
    if enc_states is not None:
        normed = _ln(params, f"{prefix}.ln2", x)
        x = add(x, _maybe_drop(_mha(params, f"{prefix}.src_attn", normed, enc_states, config.heads),
                               config, rng))
        ln_ff = f"{prefix}.ln3"
    else:
        ln_ff = f"{prefix}.ln2"
    return add(x, _maybe_drop(_ff(params, f"{prefix}.ff", _ln(params, ln_ff, x)), config, rng))


def _check_ids(ids, config: ModelConfig) -> list[int]:
    out = [int(i) for i in ids]
    for i in out:
        if not 0 <= i <= config.vocab_size:
            raise VocabularyError(f"token id {i} outside 0..{config.vocab_size}")
    return out


def encode(config: ModelConfig, params: ModelParams, source_ids,
           *, dropout_rng: np.random.Generator | None = None, posenc: bool = True) -> EncoderStates:
    """Run the shared encoder stack over a source id sequence.

    ``posenc=False`` drops the position table, which makes the encoder
    permutation-equivariant; used by diagnostics and tests.
    """
    ids = _check_ids(source_ids, config)
    if not ids:
        raise LengthError("empty source sequence")
    if len(ids) > config.max_len:
        raise LengthError(f"source length {len(ids)} exceeds max_len {config.max_len}")
    x = scale(embed(params["src_embed"], ids), math.sqrt(config.d_model))
    if posenc:
        x = add(x, Tensor(sinusoid_table(config.max_len, config.d_model)[: len(ids)]))
    x = _maybe_drop(x, config, dropout_rng)
    for i in range(config.enc_layers):
        x = _block(params, f"enc.{i}", x, config, rng=dropout_rng)
    return EncoderStates(states=_ln(params, "enc.ln_out", x))


def split_states(params: ModelParams, enc: EncoderStates, k: int) -> SplitStates:
    """Project each encoder state to k consecutive decoder-input states."""
    t_x, d = enc.states.shape
    w = params["split.w"]
    if w.shape != (d, k * d):
        raise ShapeError(f"split projection has shape {w.shape}, need {(d, k * d)}")
    projected = add(matmul(enc.states, w), params["split.b"])
    return SplitStates(states=reshape(projected, (k * t_x, d)))


def decode_parallel(config: ModelConfig, params: ModelParams, split: SplitStates,
                    enc: EncoderStates, *, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Per-frame log-probabilities over vocabulary plus blank, all frames at once.

    The decoder self-attention carries no temporal mask; every frame sees
    every other frame.
    """
    if config.is_autoregressive:
        raise ConfigError("decode_parallel requires a parallel-labeling variant")
    x = split.states
    if config.variant == "deep-encoder":
        logits = add(matmul(x, params["out.w"]), params["out.b"])
        return log_softmax(logits, axis=-1)
    if config.variant == "encoder-decoder-posenc":
        table = sinusoid_table(config.k * config.max_len, config.d_model)
        x = add(x, Tensor(table[: x.shape[0]]))
    x = _maybe_drop(x, config, dropout_rng)
    for i in range(config.dec_layers):
        x = _block(params, f"dec.{i}", x, config, enc_states=enc.states, rng=dropout_rng)
    x = _ln(params, "dec.ln_out", x)
    logits = add(matmul(x, params["out.w"]), params["out.b"])
    return log_softmax(logits, axis=-1)


def decode_autoregressive_full(config: ModelConfig, params: ModelParams, enc: EncoderStates,
                               target_ids, *, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced pass: row t is the next-token log-distribution after
    consuming ``target_ids[:t]`` (row 0 conditions only on start-of-sequence).

    Output columns are the vocab_size non-blank ids; column j scores id j+1.
    """
    if not config.is_autoregressive:
        raise ConfigError("decode_autoregressive_full requires the autoregressive-baseline variant")
    tgt = _check_ids(target_ids, config)
    ids = [EOS_ID] + tgt  # EOS doubles as the start-of-sequence marker
    if len(ids) > config.max_len:
        raise LengthError(f"decoder input length {len(ids)} exceeds max_len {config.max_len}")
    x = scale(embed(params["tgt_embed"], ids), math.sqrt(config.d_model))
    x = add(x, Tensor(sinusoid_table(config.max_len, config.d_model)[: len(ids)]))
    x = _maybe_drop(x, config, dropout_rng)
    mask = _causal_mask(len(ids))
    for i in range(config.dec_layers):
        x = _block(params, f"dec.{i}", x, config, enc_states=enc.states, mask=mask, rng=dropout_rng)
    x = _ln(params, "dec.ln_out", x)
    logits = add(matmul(x, params["out.w"]), params["out.b"])
    return log_softmax(logits, axis=-1)


def decode_autoregressive_step(config: ModelConfig, params: ModelParams, enc: EncoderStates,
                               prefix_ids) -> Tensor:
    """Next-token log-distribution after a decoded prefix (inference only)."""
    full = decode_autoregressive_full(config, params, enc, prefix_ids)
    return Tensor(full.data[-1])

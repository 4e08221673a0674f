"""Per-sentence decoding-latency measurement, CPU wall clock.

Each sentence is decoded end to end (encoder included) in each requested
mode; the recorded value is the median over at least three repetitions of
a monotonic-clock timing, after one untimed warm-up pass per mode. The
timed region runs single-threaded so the two decoder families compare
algorithmic work; ``parallel_sentences`` optionally decodes the corpus on a
thread pool to demonstrate wall-clock parallelization, at the cost of
noisier per-sentence numbers.
"""

from __future__ import annotations

import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .data import SentencePair
from .decoding import DecodeOptions, ar_beam_decode, ar_greedy_decode, ctc_beam_search, greedy_ctc_decode
from .model import ConfigError, ModelConfig, ModelParams, decode_parallel, encode, split_states

MODES = ("AR-greedy", "AR-beam", "NAR-greedy", "NAR-beam")


@dataclass(frozen=True)
class TimingRecord:
    sentence_id: int
    src_len: int
    out_len: int
    mode: str
    ms: float
    repetitions: int


def _nar_pipeline(config: ModelConfig, params: ModelParams, source_ids, beam: DecodeOptions | None):
    enc = encode(config, params, source_ids)
    log_probs = decode_parallel(config, params, split_states(params, enc, config.k), enc)
    if beam is None:
        return greedy_ctc_decode(log_probs)
    return ctc_beam_search(log_probs, beam)[0].prefix


def _make_runner(mode: str, ar_model, nar_model, beam: DecodeOptions,
                 ar_max_steps: int | None) -> Callable[[SentencePair], tuple]:
    if mode.startswith("AR"):
        if ar_model is None:
            raise ConfigError(f"mode {mode} requested but no autoregressive model given")
        config, params = ar_model
        if not config.is_autoregressive:
            raise ConfigError(f"mode {mode} needs an autoregressive-baseline model, got {config.variant}")
        if mode == "AR-greedy":
            return lambda p: ar_greedy_decode(config, params, p.source_ids,
                                              ar_max_steps or len(p.source_ids))
        return lambda p: ar_beam_decode(config, params, p.source_ids, beam,
                                        ar_max_steps or len(p.source_ids))
    if nar_model is None:
        raise ConfigError(f"mode {mode} requested but no parallel-labeling model given")
    config, params = nar_model
    if config.is_autoregressive:
        raise ConfigError(f"mode {mode} needs a parallel-labeling model, got {config.variant}")
    if mode == "NAR-greedy":
        return lambda p: _nar_pipeline(config, params, p.source_ids, None)
    return lambda p: _nar_pipeline(config, params, p.source_ids, beam)


def _time_one(runner: Callable, pair: SentencePair, reps: int) -> tuple[float, tuple]:
    times = []
    out = ()
    for _ in range(reps):
        start = time.perf_counter()
        out = runner(pair)
        times.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(times), out


def bench_decode(pairs: Sequence[SentencePair], modes: Sequence[str] = MODES,
                 ar_model: tuple[ModelConfig, ModelParams] | None = None,
                 nar_model: tuple[ModelConfig, ModelParams] | None = None,
                 reps: int = 3, beam: DecodeOptions | None = None,
                 ar_max_steps: int | None = None,
                 parallel_sentences: bool = False) -> tuple[list[TimingRecord], str]:
    """Time every sentence in every mode; returns records plus a summary.

    When ``ar_max_steps`` is None the autoregressive budget is the source
    length, which keeps output lengths comparable across sentences.
    """
    if reps < 3:
        raise ConfigError(f"reps must be >= 3, got {reps}")
    if not pairs:
        raise ConfigError("empty benchmark corpus")
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; pick from {MODES}")
    beam = beam or DecodeOptions()
    records: list[TimingRecord] = []
    for mode in modes:
        runner = _make_runner(mode, ar_model, nar_model, beam, ar_max_steps)
        runner(pairs[0])  # warm-up, untimed
        if parallel_sentences:
            with ThreadPoolExecutor() as pool:
                timed = list(pool.map(lambda p: _time_one(runner, p, reps), pairs))
        else:
            timed = [_time_one(runner, p, reps) for p in pairs]
        for i, (ms, out) in enumerate(timed):
            records.append(TimingRecord(sentence_id=i, src_len=len(pairs[i].source_ids),
                                        out_len=len(out), mode=mode, ms=ms, repetitions=reps))
    return records, summarize(records)


def records_to_csv(records: Sequence[TimingRecord]) -> str:
    buf = io.StringIO()
    buf.write("sentence_id,src_len,out_len,mode,ms\n")
    for rec in records:
        buf.write(f"{rec.sentence_id},{rec.src_len},{rec.out_len},{rec.mode},{rec.ms:.4f}\n")
    return buf.getvalue()


def summarize(records: Sequence[TimingRecord]) -> str:
    by_mode: dict[str, list[float]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec.ms)
    lines = ["decoding time per sentence (ms, median of repetitions)"]
    means = {}
    for mode in MODES:
        if mode in by_mode:
            means[mode] = statistics.fmean(by_mode[mode])
            lines.append(f"  {mode:<11} mean {means[mode]:9.3f} over {len(by_mode[mode])} sentences")
    if "AR-greedy" in means and "NAR-greedy" in means and means["NAR-greedy"] > 0:
        lines.append(f"  AR-greedy / NAR-greedy ratio: {means['AR-greedy'] / means['NAR-greedy']:.2f}")
    if "AR-beam" in means and "NAR-beam" in means and means["NAR-beam"] > 0:
        lines.append(f"  AR-beam / NAR-beam ratio: {means['AR-beam'] / means['NAR-beam']:.2f}")
    return "\n".join(lines) + "\n"

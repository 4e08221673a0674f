"""CTC collapse, lattice loss with analytic gradient, and brute-force oracles.

The loss marginalizes over every frame labeling whose collapse (merge
adjacent repeats, then delete blanks) equals the target. It is computed in
the log domain over the blank-extended label sequence b, y1, b, y2, ..., b
with the usual forward (prefix) and backward (suffix) tables; the gradient
falls out of the state occupancies alpha * beta.

A note on alignment counting: the number of frame sequences of length T
that collapse to a given target is larger than the binomial count of blank
placements C(T, T_y), because a label may also occupy several consecutive
frames. For T=3 and target (a, b) there are 5 alignments (aab, abb, a.b,
.ab, ab.), not C(3,2)=3. ``count_alignments`` reports the true count.

Everything here is pure and safe to call from any number of threads.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import BLANK_ID, VocabularyError
from .tensor import NEG_INF, log_sum_exp

LabelSequence = tuple[int, ...]

ORACLE_MAX_T = 10
ORACLE_MAX_V = 4


class InputError(ValueError):
    """Malformed probability table."""


class BoundError(ValueError):
    """Instance too large for exhaustive enumeration."""


def collapse(frame_ids: Iterable[int]) -> LabelSequence:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for f in frame_ids:
        f = int(f)
        if f != prev:
            if f != BLANK_ID:
                out.append(f)
            prev = f
    return tuple(out)


def min_frames(labels: Sequence[int]) -> int:
    """Shortest frame count that can emit ``labels``: one frame per label
    plus one separating blank per adjacent repeat."""
    repeats = sum(1 for i in range(1, len(labels)) if labels[i] == labels[i - 1])
    return len(labels) + repeats


@dataclass
class CtcLattice:
    """Forward/backward log-probability tables over the extended labels.

    Both tables include the emission at their own time step, so the path
    mass through state s at time t is alpha[t,s] + beta[t,s] - emit[t,s].
    """

    alpha: np.ndarray
    beta: np.ndarray
    extended_labels: tuple[int, ...]
    log_likelihood: float


def _as_log_probs(log_probs) -> np.ndarray:
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise InputError(f"log_probs must be a (T, V+1) table with T >= 1, got shape {lp.shape}")
    row_lse = np.array([log_sum_exp(row) for row in lp])
    if np.any(np.abs(row_lse) > 1e-6):
        worst = int(np.abs(row_lse).argmax())
        raise InputError(f"row {worst} is not a normalized log-distribution (lse={row_lse[worst]:.3g})")
    return lp


def _check_labels(labels: Sequence[int], num_cols: int) -> LabelSequence:
    labs = tuple(int(y) for y in labels)
    for y in labs:
        if y == BLANK_ID:
            raise VocabularyError("labels must not contain the blank id")
        if not 0 < y < num_cols:
            raise VocabularyError(f"label id {y} outside columns 1..{num_cols - 1}")
    return labs


def _extended(labels: LabelSequence) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    allowed = np.zeros(ext.size, dtype=bool)
    if ext.size > 2:
        allowed[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    return allowed


def ctc_lattice(log_probs, labels: Sequence[int]) -> CtcLattice:
    """Fill both DP tables; assumes a structurally feasible instance."""
    lp = _as_log_probs(log_probs)
    labs = _check_labels(labels, lp.shape[1])
    T = lp.shape[0]
    ext = _extended(labs)
    S = ext.size
    emit = lp[:, ext]
    skip = _skip_allowed(ext)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        m = prev.copy()
        m[1:] = np.logaddexp(m[1:], prev[:-1])
        if S > 2:
            m[2:] = np.where(skip[2:], np.logaddexp(m[2:], prev[:-2]), m[2:])
        alpha[t] = m + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        m = nxt.copy()
        m[:-1] = np.logaddexp(m[:-1], nxt[1:])
        if S > 2:
            m[:-2] = np.where(skip[2:], np.logaddexp(m[:-2], nxt[2:]), m[:-2])
        beta[t] = m + emit[t]

    ll = float(alpha[T - 1, S - 1]) if S == 1 else float(np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    return CtcLattice(alpha=alpha, beta=beta, extended_labels=tuple(int(x) for x in ext), log_likelihood=ll)


def ctc_loss(log_probs, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` plus its gradient w.r.t. the
    log-probability table.

    Infeasible targets (too few frames for the labels and their repeat
    separators) yield (+inf, zero gradient) rather than an exception, since
    training batches may legitimately contain them.
    """
    lp = _as_log_probs(log_probs)
    labs = _check_labels(labels, lp.shape[1])
    T = lp.shape[0]
    if T < min_frames(labs):
        return math.inf, np.zeros_like(lp)
    lattice = ctc_lattice(lp, labs)
    ll = lattice.log_likelihood
    if ll == NEG_INF:
        return math.inf, np.zeros_like(lp)

    ext = np.asarray(lattice.extended_labels)
    emit = lp[:, ext]
    gamma = lattice.alpha + lattice.beta - emit
    # -inf entries of alpha/beta mark unreachable states; keep them at zero
    # occupancy even when emit itself is -inf (which would produce NaN).
    dead = np.isneginf(lattice.alpha) | np.isneginf(lattice.beta)
    gamma = np.where(dead, NEG_INF, gamma)
    occ = np.exp(gamma - ll)

    grad = np.zeros_like(lp)
    for s in range(ext.size):
        grad[:, ext[s]] -= occ[:, s]
    return -ll, grad


def count_alignments(T: int, labels: Sequence[int]) -> int:
    """Number of length-T frame sequences whose collapse equals ``labels``.

    Uniform-weight version of the same lattice recursion; exact integers.
    """
    if T < 0:
        raise InputError(f"T must be >= 0, got {T}")
    labs = tuple(int(y) for y in labels)
    if any(y == BLANK_ID for y in labs):
        raise VocabularyError("labels must not contain the blank id")
    if T == 0:
        return 1 if not labs else 0
    if T < min_frames(labs):
        return 0
    ext = _extended(labs)
    S = ext.size
    skip = _skip_allowed(ext)
    ways = [0] * S
    ways[0] = 1
    if S > 1:
        ways[1] = 1
    for _ in range(1, T):
        nxt = [0] * S
        for s in range(S):
            w = ways[s]
            if s >= 1:
                w += ways[s - 1]
            if s >= 2 and skip[s]:
                w += ways[s - 2]
            nxt[s] = w
        ways = nxt
    return ways[S - 1] + (ways[S - 2] if S > 1 else 0)


def ctc_oracle_loss(log_probs, labels: Sequence[int]) -> float:
    """Reference loss by brute-force path enumeration; only for tiny tables."""
    lp = _as_log_probs(log_probs)
    labs = _check_labels(labels, lp.shape[1])
    T, C = lp.shape
    if T > ORACLE_MAX_T or C - 1 > ORACLE_MAX_V:
        raise BoundError(f"instance (T={T}, V={C - 1}) exceeds enumeration bound "
                         f"(T<={ORACLE_MAX_T}, V<={ORACLE_MAX_V})")
    probs = np.exp(lp)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) != labs:
            continue
        p = 1.0
        for t, c in enumerate(path):
            p *= probs[t, c]
        total += p
    if total <= 0.0:
        return math.inf
    return -math.log(total)

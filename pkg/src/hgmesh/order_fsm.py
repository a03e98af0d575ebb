"""Incremental validity machine for canonically ordered mesh sequences.

A face is three vertices, each emitted as (y, z, x). Reading a vertex as the
base-Q integer ``(y * Q + z) * Q + x``, a face is valid iff its vertices are
strictly increasing and the face, as a triple, is lexicographically greater than
the previous face. At every slot the admissible coordinate tokens form a single
interval ``[lb, ub]``: ``lb`` comes from the tie chains with the previous vertex
and previous face, ``ub`` from the room the remaining vertices need. Both are
computed with one-token lookahead so the machine never walks into a dead end.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .sequencer import GROUP, SequenceError, VocabSpec, coordinate_span

IN_FACE = "in-face"
IN_EOS = "in-E-suffix"
DONE = "done"


class OrderViolation(ValueError):
    def __init__(self, position: int, token: int, lb: int, ub: int | None = None, reason: str = ""):
        self.position, self.token, self.lb, self.ub = position, token, lb, ub
        msg = f"token {token} rejected at coordinate position {position} (valid coords [{lb}, {ub}])"
        super().__init__(msg + (f": {reason}" if reason else ""))


class DegenerateDistribution(ValueError):
    pass


class ValidSet(NamedTuple):
    lb: int
    ub: int
    eos: bool

    @property
    def num_coords(self) -> int:
        return max(0, self.ub - self.lb + 1)

    def contains(self, token: int, vocab: VocabSpec) -> bool:
        if token == vocab.E:
            return self.eos
        return self.lb <= token <= self.ub


@dataclass(frozen=True)
class DecoderState:
    quant_level: int
    phase: str = IN_FACE
    faces_emitted: int = 0
    current: tuple[int, ...] = ()
    prev_face: tuple[int, ...] | None = None
    eos_emitted: int = 0

    @property
    def pos_in_face(self) -> int:
        return len(self.current)

    @property
    def position(self) -> int:
        """Index of the next token within the coordinate stream."""
        return self.faces_emitted * GROUP + len(self.current) + self.eos_emitted

    @property
    def prefix_tied_to_prev_face(self) -> bool:
        if self.prev_face is None:
            return False
        return self.current == self.prev_face[: len(self.current)]

    @property
    def vertex_tied_to_prev_vertex(self) -> bool:
        k, m = divmod(len(self.current), 3)
        if k == 0:
            return False
        return self.current[3 * k:3 * k + m] == self.current[3 * k - 3:3 * k - 3 + m]


def new_state(vocab: VocabSpec) -> DecoderState:
    return DecoderState(vocab.quant_level)


def _vertex_values(tokens, q):
    return [(tokens[i] * q + tokens[i + 1]) * q + tokens[i + 2] for i in range(0, len(tokens) - 2, 3)]


def _feasible(prefix: tuple[int, ...], prev: tuple[int, ...] | None, q: int) -> bool:
    """Whether some completion of this face prefix yields a valid face."""
    n_total = q ** 3
    k, m = divmod(len(prefix) - 1, 3)
    m += 1  # tokens of vertex k present
    done = _vertex_values(prefix[:3 * k], q)
    head = 0
    for t in prefix[3 * k:]:
        head = head * q + t
    span = q ** (3 - m)
    lo = head * span
    hi = lo + span - 1
    room = n_total - 1 - (2 - k)
    n_max = min(hi, room)
    if n_max < lo:
        return False
    if k > 0 and n_max <= done[-1]:
        return False
    if prev is None:
        return True
    pv = _vertex_values(prev, q)
    if tuple(done) != tuple(pv[:k]):
        return tuple(done) > tuple(pv[:k])
    best = (n_max,) + tuple(n_total - 1 - (2 - j) for j in range(k + 1, 3))
    return best > tuple(pv[k:])


def valid_set(state: DecoderState) -> ValidSet:
    q = state.quant_level
    if state.phase == DONE:
        raise SequenceError("valid_set called on a finished sequence")
    if state.phase == IN_EOS:
        return ValidSet(q, q - 1, True)
    prefix, prev = state.current, state.prev_face
    eos = state.pos_in_face == 0 and state.faces_emitted >= 1
    # ub: last token whose vertex range still leaves room for the later vertices
    k = len(prefix) // 3
    room = q ** 3 - 1 - (2 - k)
    head = 0
    for t in prefix[3 * k:]:
        head = head * q + t
    span = q ** (3 - (len(prefix) - 3 * k) - 1)
    ub = min(q - 1, (room // span) - head * q)
    if ub < 0 or not _feasible(prefix + (ub,), prev, q):
        return ValidSet(q, q - 1, eos)
    lo_t, hi_t = 0, ub  # feasibility is monotone on [0, ub]
    while lo_t < hi_t:
        mid = (lo_t + hi_t) // 2
        if _feasible(prefix + (mid,), prev, q):
            hi_t = mid
        else:
            lo_t = mid + 1
    return ValidSet(lo_t, ub, eos)


def advance(state: DecoderState, token: int, vocab: VocabSpec | None = None) -> DecoderState:
    vocab = vocab or VocabSpec(state.quant_level)
    token = int(token)
    vs = valid_set(state)
    if not vs.contains(token, vocab):
        reason = "E only allowed at the start of a face after the first face" if token == vocab.E else ""
        raise OrderViolation(state.position, token, vs.lb, vs.ub, reason)
    if state.phase == IN_EOS or token == vocab.E:
        n = state.eos_emitted + 1
        return replace(state, phase=DONE if n == GROUP else IN_EOS, eos_emitted=n)
    cur = state.current + (token,)
    if len(cur) == GROUP:
        return replace(state, current=(), prev_face=cur, faces_emitted=state.faces_emitted + 1)
    return replace(state, current=cur)


def token_mask(state: DecoderState, vocab: VocabSpec) -> np.ndarray:
    vs = valid_set(state)
    mask = np.zeros(vocab.size, dtype=bool)
    if vs.ub >= vs.lb:
        mask[vs.lb:vs.ub + 1] = True
    mask[vocab.E] = vs.eos
    return mask


def masked_sample(logits, state: DecoderState, temperature: float, rng) -> int:
    """Sample from ``logits`` restricted to the valid set.

    ``temperature == 0`` picks the highest-scoring valid token. ``rng`` may be a
    seed or a ``numpy.random.Generator``.
    """
    vocab = VocabSpec(state.quant_level)
    z = np.asarray(logits.detach().cpu().numpy() if hasattr(logits, "detach") else logits, dtype=np.float64)
    if z.shape != (vocab.size,):
        raise ValueError(f"expected {vocab.size} logits, got shape {z.shape}")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    mask = token_mask(state, vocab)
    z = np.where(mask, z, -np.inf)
    if not np.isfinite(z).any():
        raise DegenerateDistribution(f"no valid token with finite logit at position {state.position}")
    if temperature == 0:
        return int(np.argmax(z))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    z = z / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, vocab.size - 1)
    # cumsum rounding can land on a masked tail entry
    while not mask[idx]:
        idx -= 1
    return idx


def replay(tokens, quant_level: int) -> DecoderState:
    """Run a full framed sequence through the machine; raises OrderViolation on failure."""
    vocab = VocabSpec(quant_level)
    tokens = np.asarray(tokens, dtype=np.int64)
    start, stop = coordinate_span(tokens, vocab)
    state = new_state(vocab)
    for tok in tokens[start:stop + GROUP]:
        state = advance(state, int(tok), vocab)
    return state


def invalid_counts(tokens, quant_level: int) -> np.ndarray:
    """Invalid categories pruned before each coordinate token of one sequence."""
    vocab = VocabSpec(quant_level)
    tokens = np.asarray(tokens, dtype=np.int64)
    start, stop = coordinate_span(tokens, vocab)
    state = new_state(vocab)
    counts = np.empty(stop - start, dtype=np.int64)
    for i, tok in enumerate(tokens[start:stop]):
        vs = valid_set(state)
        counts[i] = vs.lb + (quant_level - 1 - vs.ub) + (0 if vs.eos else 1) + 2
        if not vs.contains(int(tok), vocab):
            raise OrderViolation(i, int(tok), vs.lb, vs.ub)
        state = advance(state, int(tok), vocab)
    return counts


@dataclass
class PruningStats:
    quant_level: int
    mean_fraction: float
    per_slot: np.ndarray  # mean fraction by position within the face (9 bins)
    positions: int


def invalid_fraction(sequences, quant_level: int) -> PruningStats:
    vocab = VocabSpec(quant_level)
    sums = np.zeros(GROUP)
    counts = np.zeros(GROUP)
    for seq in sequences:
        c = invalid_counts(seq, quant_level)
        slot = np.arange(len(c)) % GROUP
        np.add.at(sums, slot, c / vocab.size)
        np.add.at(counts, slot, 1)
    total = counts.sum()
    if total == 0:
        raise ValueError("no coordinate positions in the dataset")
    return PruningStats(quant_level, float(sums.sum() / total), sums / np.maximum(counts, 1), int(total))

"""Order-enforced autoregressive sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .hourglass import HourglassLM
from .mesh_io import QuantizedMesh
from .order_fsm import DONE, advance, masked_sample, new_state
from .sequencer import GROUP, decode

HALT_EOS = "eos"
HALT_FACE_LIMIT = "face_limit"


@dataclass
class GenerationResult:
    tokens: np.ndarray
    halt_reason: str
    faces: int

    def mesh(self, quant_level: int) -> QuantizedMesh:
        return decode(self.tokens, quant_level)


class _Recompute:
    """Drop-in for the rolling cache that reruns the whole prefix every step."""

    def __init__(self, model: HourglassLM, cond, window):
        self.model, self.cond, self.window = model, cond, window
        self.tokens: list[int] = []
        self.pad = model.cfg.vocab.P

    def step(self, token: int, position: int) -> torch.Tensor:
        self.tokens.append(int(token))
        n = len(self.tokens)
        padded = self.tokens + [self.pad] * (-n % GROUP)  # trailing pads cannot reach position n-1
        with torch.no_grad():
            logits = self.model(torch.tensor([padded]), cond=self.cond, window=self.window)
        return logits[0, n - 1]


def generate(model: HourglassLM, cond, face_count: int, seed=0, temperature: float = 1.0,
             use_cache: bool = True, window: int | None = None, max_faces: int | None = None,
             ) -> GenerationResult:
    """Sample one sequence, starting from the S group.

    Generation stops when the model opens the E group or once ``max_faces``
    faces exist (default twice ``face_count``); in the latter case the E group
    is appended and the halt reason records it.
    """
    if face_count < 1:
        raise ValueError("face count must be >= 1")
    limit = 2 * face_count if max_faces is None else max_faces
    vocab = model.cfg.vocab
    rng = np.random.default_rng(seed)
    if use_cache:
        cache = model.new_cache(cond, window)
        step = lambda tok, pos: model.decode_step(cache, tok, pos)  # noqa: E731
    else:
        step = _Recompute(model, cond, window).step

    tokens = [vocab.S] * GROUP
    logits = None
    for pos, tok in enumerate(tokens):
        logits = step(tok, pos)
    state = new_state(vocab)
    halt = HALT_EOS
    while True:
        tok = masked_sample(logits, state, temperature, rng)
        state = advance(state, tok, vocab)
        tokens.append(tok)
        if tok == vocab.E:
            break
        if state.pos_in_face == 0 and state.faces_emitted >= limit:
            halt = HALT_FACE_LIMIT
            tokens.append(vocab.E)
            state = advance(state, vocab.E, vocab)
            break
        logits = step(tok, len(tokens) - 1)
    while state.phase != DONE:
        tokens.append(vocab.E)
        state = advance(state, vocab.E, vocab)
    return GenerationResult(np.asarray(tokens, dtype=np.int64), halt, state.faces_emitted)

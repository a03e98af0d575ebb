"""Hourglass decoder over mesh token sequences.

Three resolutions: coordinates, vertices (1/3) and faces (1/9). Each transition
pools three consecutive embeddings with a linear map; the way back expands one
embedding into three with a linear map and shifts the result right by two
positions before the residual add, so a pooled group only reaches outputs at or
after its last member. Blocks at the outer levels are split evenly into a stack
before shortening and a stack after upsampling; the innermost level holds all of
its blocks. Every ``cross_attention_interval``-th block, counted in execution
order through the whole network, attends to the conditioning set instead of the
sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .conditioning import ConditioningEncoder
from .layers import CrossAttention, SelfAttention, SwiGLU, init_linear, rms_norm
from .sequencer import GROUP, VocabSpec

SHORTEN = 3
UNLIMITED = 0  # pass as ``window`` for full causal attention


class ModelError(ValueError):
    pass


@dataclass
class HourglassConfig:
    quant_level: int = 128
    depths: tuple[int, ...] = (2, 2, 2)
    channels: int = 128
    head_channels: int = 32
    ffn_hidden: int = 352
    rope_theta: float = 1e6
    cross_attention_interval: int = 4
    window: int = 1152
    shortening: tuple[int, int] = (3, 3)
    conditioning: bool = True
    num_latents: int = 64
    encoder_depth: int = 2

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.shortening = tuple(self.shortening)
        if len(self.depths) not in (1, 3) or min(self.depths) < 0:
            raise ModelError(f"depths must be (plain,) or (d0, d1, d2) with d >= 0, got {self.depths}")
        if self.shortening != (3, 3):
            raise ModelError("shortening factors are fixed at (3, 3)")
        if self.window <= 0 or self.window % GROUP:
            raise ModelError(f"window must be a positive multiple of 9, got {self.window}")
        if self.channels % self.head_channels:
            raise ModelError("channels must be divisible by head_channels")
        if self.head_channels % 2:
            raise ModelError("head_channels must be even for rotary encoding")
        if self.cross_attention_interval < 1:
            raise ModelError("cross_attention_interval must be >= 1")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.quant_level)

    @property
    def plain(self) -> bool:
        return len(self.depths) == 1

    @property
    def label(self) -> str:
        if self.plain:
            return f"Plain-{self.depths[0]}"
        return "HG-" + "-".join(str(d) for d in self.depths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["shortening"] = list(self.shortening)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HourglassConfig":
        return cls(**d)


def level_window(window: int | None, level: int) -> int | None:
    if window is None:
        return None
    return max(1, window // SHORTEN ** level)


class Block(nn.Module):
    """Pre-norm residual block: (self- or cross-) attention, then SwiGLU."""

    def __init__(self, cfg: HourglassConfig, cross: bool):
        super().__init__()
        c = cfg.channels
        self.cross = cross
        self.norm_attn = rms_norm(c)
        self.attn = CrossAttention(c, cfg.head_channels) if cross else SelfAttention(c, cfg.head_channels, cfg.rope_theta)
        self.norm_ffn = rms_norm(c)
        self.ffn = SwiGLU(c, cfg.ffn_hidden)

    def forward(self, x, positions, window, cond):
        h = self.norm_attn(x)
        if self.cross:
            x = x + self.attn(h, context=cond)
        else:
            x = x + self.attn(h, positions, window)
        return x + self.ffn(self.norm_ffn(x))

    def step(self, x, position: int, slot):
        """Single-token update against a ring buffer (self) or cached context K/V (cross)."""
        h = self.norm_attn(x)
        if self.cross:
            x = x + self.attn(h, kv=slot)
        else:
            attn = self.attn
            pos = torch.tensor([[position]])
            q, k, v = attn.project(h, pos)
            slot.append(k, v, position)
            keys, vals = slot.view()
            w = (torch.matmul(q, keys.transpose(-1, -2)) * attn.head_dim ** -0.5).softmax(dim=-1)
            x = x + attn.to_out(rearrange(torch.matmul(w, vals), "b h n d -> b n (h d)"))
        return x + self.ffn(self.norm_ffn(x))


class RingKV:
    """Fixed-capacity key/value ring buffer for one attention layer."""

    def __init__(self, capacity: int, heads: int, head_dim: int, dtype, batch: int = 1):
        self.capacity = capacity
        self.k = torch.zeros(batch, heads, capacity, head_dim, dtype=dtype)
        self.v = torch.zeros(batch, heads, capacity, head_dim, dtype=dtype)
        self.positions = np.full(capacity, -1, dtype=np.int64)
        self.count = 0
        self.last_position = -1

    @property
    def occupancy(self) -> int:
        return min(self.count, self.capacity)

    def append(self, k, v, position: int):
        if position <= self.last_position:
            raise ModelError(f"positions must increase: got {position} after {self.last_position}")
        i = self.count % self.capacity
        self.k[:, :, i] = k[:, :, 0]
        self.v[:, :, i] = v[:, :, 0]
        self.positions[i] = position
        self.count += 1
        self.last_position = position

    def view(self):
        n = self.occupancy
        return self.k[:, :, :n], self.v[:, :, :n]


@dataclass
class RollingCache:
    window: int | None
    slots: dict = field(default_factory=dict)  # id(block) -> RingKV or context (k, v)
    groups: dict = field(default_factory=dict)  # level -> pending pre-shortening embeddings
    upsampled: dict = field(default_factory=dict)  # level -> (1, 3, c) expansion of the last group
    next_position: int = 0
    peak_occupancy: int = 0

    def rings(self):
        return [s for s in self.slots.values() if isinstance(s, RingKV)]


class LossOutput(NamedTuple):
    mean: torch.Tensor
    per_token: torch.Tensor  # (B, L-1) NLL of predicting token t+1 at position t; 0 where masked
    mask: torch.Tensor

    @property
    def perplexity(self) -> float:
        return float(torch.exp(self.mean))


class HourglassLM(nn.Module):
    def __init__(self, cfg: HourglassConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.embed = nn.Embedding(cfg.vocab.size, c)
        nn.init.normal_(self.embed.weight, 0.0, 1.0)

        depths = cfg.depths
        self.top = 0 if cfg.plain else max([l for l in range(3) if depths[l] > 0], default=0)
        pre_n, post_n = [], []
        for level in range(self.top + 1):
            d = depths[level]
            pre_n.append(d // 2 if level < self.top else d)
            post_n.append(d - d // 2 if level < self.top else 0)
        # execution order decides which blocks become cross-attention blocks
        order = [("pre", l) for l in range(self.top + 1)] + [("post", l) for l in reversed(range(self.top))]
        counter = 0
        built = {}
        for kind, level in order:
            n = pre_n[level] if kind == "pre" else post_n[level]
            blocks = []
            for _ in range(n):
                counter += 1
                cross = cfg.conditioning and counter % cfg.cross_attention_interval == 0
                blocks.append(Block(cfg, cross))
            built[kind, level] = nn.ModuleList(blocks)
        self.pre = nn.ModuleList([built["pre", l] for l in range(self.top + 1)])
        self.post = nn.ModuleList([built["post", l] for l in range(self.top)])
        self.shorten = nn.ModuleList(
            [init_linear(nn.Linear(SHORTEN * c, c), (SHORTEN * c) ** -0.5) for _ in range(self.top)])
        self.upsample = nn.ModuleList(
            [init_linear(nn.Linear(c, SHORTEN * c), c ** -0.5) for _ in range(self.top)])
        self.encoder = (
            ConditioningEncoder(c, cfg.head_channels, cfg.ffn_hidden, cfg.num_latents, cfg.encoder_depth)
            if cfg.conditioning else None
        )
        self.norm_out = rms_norm(c)
        self.head = init_linear(nn.Linear(c, cfg.vocab.size), c ** -0.5)

    # ------------------------------------------------------------------ info

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def blocks(self):
        for stack in list(self.pre) + list(self.post):
            yield from stack

    def num_cross_blocks(self) -> int:
        return sum(1 for b in self.blocks() if b.cross)

    def units_per_level(self, length: int) -> list[int]:
        return [length // SHORTEN ** l for l in range(self.top + 1)]

    # ----------------------------------------------------------- conditioning

    def condition(self, features, face_count, quad_ratio) -> torch.Tensor:
        if self.encoder is None:
            raise ModelError("model was built without conditioning")
        return self.encoder(features.to(self.dtype), face_count, quad_ratio)

    def _check_cond(self, cond, batch):
        if self.encoder is None:
            return None
        if cond is None:
            raise ModelError("conditioned model needs a conditioning bundle")
        if cond.ndim == 2:
            cond = cond[None]
        if cond.shape[-1] != self.cfg.channels or cond.shape[0] not in (1, batch):
            raise ModelError(f"conditioning shape {tuple(cond.shape)} does not match batch {batch} x {self.cfg.channels}")
        return cond.expand(batch, -1, -1)

    # ----------------------------------------------------------------- forward

    def forward(self, tokens, positions=None, cond=None, window: int | None = None, return_units=False):
        """Logits (B, L, V) for a face-aligned segment.

        ``positions`` are absolute token positions (default 0..L-1).
        ``window`` overrides the config window; ``UNLIMITED`` disables it.
        """
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, L = tokens.shape
        if L % GROUP:
            raise ModelError(f"segment length {L} is not a multiple of 9")
        if positions is None:
            positions = torch.arange(L)[None].expand(B, L)
        elif positions.ndim == 1:
            positions = positions[None].expand(B, L)
        if torch.any(positions[:, 0] % GROUP != 0):
            raise ModelError("segments must start on a face boundary")
        cond = self._check_cond(cond, B)
        win = self.cfg.window if window is None else (None if window == UNLIMITED else window)
        units = []
        x = self._level(0, self.embed(tokens), positions, cond, win, units)
        logits = self.head(self.norm_out(x))
        return (logits, units) if return_units else logits

    def _level(self, level, x, positions, cond, window, units):
        units.append(x.shape[1])
        w = level_window(window, level)
        for blk in self.pre[level]:
            x = blk(x, positions, w, cond)
        if level < self.top:
            B, L, c = x.shape
            u = self.shorten[level](rearrange(x, "b (n s) d -> b n (s d)", s=SHORTEN))
            y = self._level(level + 1, u, positions[:, ::SHORTEN] // SHORTEN, cond, window, units)
            e = rearrange(self.upsample[level](y), "b n (s d) -> b (n s) d", s=SHORTEN)
            x = x + F.pad(e, (0, 0, SHORTEN - 1, 0))[:, :L]
            for blk in self.post[level]:
                x = blk(x, positions, w, cond)
        return x

    # ---------------------------------------------------------------- decoding

    def new_cache(self, cond=None, window: int | None = None) -> RollingCache:
        """Empty rolling cache; ring capacities are the per-level windows."""
        win = self.cfg.window if window is None else window
        cache = RollingCache(window=win)
        cond = self._check_cond(cond, 1)
        for level in range(self.top + 1):
            cap = level_window(win, level)
            for stack in [self.pre[level]] + ([self.post[level]] if level < self.top else []):
                for blk in stack:
                    if blk.cross:
                        with torch.no_grad():
                            cache.slots[id(blk)] = blk.attn.context_kv(cond)
                    else:
                        cache.slots[id(blk)] = RingKV(cap, blk.attn.heads, blk.attn.head_dim, self.dtype)
            cache.groups[level] = []
            cache.upsampled[level] = None
        return cache

    @torch.no_grad()
    def decode_step(self, cache: RollingCache, token: int, position: int) -> torch.Tensor:
        """Logits (V,) after feeding ``token`` at ``position``; updates ``cache`` in place."""
        if position != cache.next_position:
            raise ModelError(f"expected position {cache.next_position}, got {position}")
        x = self.embed(torch.tensor([[int(token)]]))
        x = self._step_level(0, x, position, cache)
        cache.next_position = position + 1
        cache.peak_occupancy = max([cache.peak_occupancy] + [r.occupancy for r in cache.rings()])
        return self.head(self.norm_out(x))[0, 0]

    def _step_level(self, level, x, p, cache):
        for blk in self.pre[level]:
            x = blk.step(x, p, cache.slots[id(blk)])
        if level < self.top:
            buf = cache.groups[level]
            buf.append(x)
            if p % SHORTEN == SHORTEN - 1:
                u = self.shorten[level](torch.cat(buf, dim=-1))
                buf.clear()
                y = self._step_level(level + 1, u, p // SHORTEN, cache)
                cache.upsampled[level] = rearrange(self.upsample[level](y), "b n (s d) -> b (n s) d", s=SHORTEN)
            up = cache.upsampled[level]
            if up is not None:
                k = (p - (SHORTEN - 1)) % SHORTEN
                x = x + up[:, k:k + 1]
            for blk in self.post[level]:
                x = blk.step(x, p, cache.slots[id(blk)])
        return x


def init_model(cfg: HourglassConfig, seed: int, dtype=torch.float32) -> HourglassLM:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HourglassLM(cfg)
    return model.to(dtype)


def sequence_loss(logits, tokens, pad_token: int) -> LossOutput:
    """Next-token cross-entropy, ignoring padding targets."""
    if tokens.ndim == 1:
        tokens, logits = tokens[None], logits[None]
    targets = tokens[:, 1:]
    mask = targets != pad_token
    if not mask.any():
        raise ModelError("every target position is padding")
    nll = F.cross_entropy(logits[:, :-1].transpose(1, 2), targets, reduction="none")
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    return LossOutput(nll.sum() / mask.sum(), nll, mask)

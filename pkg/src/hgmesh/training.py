"""Dataset preparation, truncated-segment batching and the optimizer loop."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .hourglass import HourglassLM, sequence_loss
from .mesh_io import RawMesh, prepare, triangulate, normalize
from .pointcloud import PointCloud, augment, conditioning_cloud
from .sequencer import GROUP, encode

METRIC_FIELDS = ("step", "loss", "ppl", "lr", "tokens_per_s")


class TrainingError(RuntimeError):
    pass


@dataclass
class Example:
    tokens: np.ndarray
    cloud: PointCloud | None = None
    face_count: int = 1
    quad_ratio: float = 0.0


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    segment: int = 1152
    lr: float = 1e-3
    min_lr: float = 1e-4
    warmup: int = 100
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.95)
    clip: float = 1.0
    seed: int = 0
    augment: bool = True
    log_every: int = 10

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.segment <= 0 or self.segment % GROUP:
            raise TrainingError("segment length must be a positive multiple of 9")
        if self.batch_size < 1 or self.steps < 0:
            raise TrainingError("batch_size must be >= 1 and steps >= 0")


def make_example(mesh: RawMesh, quant_level: int, num_points: int | None, seed) -> Example:
    qm = prepare(mesh, quant_level)
    cloud = None
    if num_points:
        tri, _ = triangulate(mesh)
        cloud = conditioning_cloud(normalize(tri), num_points, seed)
    return Example(encode(qm), cloud, qm.num_faces, mesh.quad_ratio)


def cosine_schedule(step: int, cfg: TrainConfig) -> float:
    """Multiplier on ``cfg.lr``: linear warm-up, then cosine down to ``min_lr``."""
    if cfg.warmup and step < cfg.warmup:
        return (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    t = min(1.0, (step - cfg.warmup) / span)
    floor = cfg.min_lr / cfg.lr if cfg.lr > 0 else 0.0
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * t))


def make_optimizer(model: HourglassLM, cfg: TrainConfig):
    decay = [p for n, p in model.named_parameters() if p.ndim >= 2]
    keep = [p for n, p in model.named_parameters() if p.ndim < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": keep, "weight_decay": 0.0}],
        lr=cfg.lr, betas=cfg.betas)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_schedule(s, cfg))
    return opt, sched


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, C)
    positions: torch.Tensor  # (B, C)
    features: torch.Tensor | None = None  # (B, n, 6)
    face_count: torch.Tensor | None = None
    quad_ratio: torch.Tensor | None = None


def sample_batch(examples: list[Example], cfg: TrainConfig, pad_token: int, rng: np.random.Generator,
                 with_cond: bool) -> Batch:
    C = cfg.segment
    toks = np.full((cfg.batch_size, C), pad_token, dtype=np.int64)
    pos = np.empty((cfg.batch_size, C), dtype=np.int64)
    feats, fcs, qrs = [], [], []
    for b in range(cfg.batch_size):
        ex = examples[rng.integers(len(examples))]
        n = len(ex.tokens)
        starts = max(0, n - C) // GROUP + 1
        off = int(rng.integers(starts)) * GROUP
        seg = ex.tokens[off:off + C]
        toks[b, :len(seg)] = seg
        pos[b] = off + np.arange(C)
        if with_cond:
            cloud = augment(ex.cloud, seed=rng) if cfg.augment else ex.cloud
            feats.append(cloud.features())
            fcs.append(ex.face_count)
            qrs.append(ex.quad_ratio)
    batch = Batch(torch.from_numpy(toks), torch.from_numpy(pos))
    if with_cond:
        batch.features = torch.from_numpy(np.stack(feats))
        batch.face_count = torch.tensor(fcs)
        batch.quad_ratio = torch.tensor(qrs, dtype=torch.float64)
    return batch


def batch_loss(model: HourglassLM, batch: Batch):
    cond = None
    if model.encoder is not None:
        cond = model.condition(batch.features, batch.face_count, batch.quad_ratio)
    logits = model(batch.tokens, batch.positions, cond=cond)
    return sequence_loss(logits, batch.tokens, model.cfg.vocab.P)


def train_step(model: HourglassLM, opt, sched, batch: Batch, clip: float = 1.0) -> dict:
    model.train()
    opt.zero_grad(set_to_none=True)
    out = batch_loss(model, batch)
    if not torch.isfinite(out.mean):
        raise TrainingError(
            f"non-finite loss {out.mean.item()} at lr {sched.get_last_lr()[0]:.3e}; "
            f"{int(out.mask.sum())} target tokens, largest |parameter| "
            f"{max(p.abs().max().item() for p in model.parameters()):.3g}")
    out.mean.backward()
    gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    lr = sched.get_last_lr()[0]
    opt.step()
    sched.step()
    loss = out.mean.item()
    return {"loss": loss, "ppl": math.exp(loss), "lr": lr, "grad_norm": float(gnorm),
            "tokens": int(out.mask.sum())}


def train(model: HourglassLM, examples: list[Example], cfg: TrainConfig,
          metrics_path: str | os.PathLike | None = None, progress=None) -> list[dict]:
    """Run ``cfg.steps`` optimizer steps; returns the logged metric rows."""
    if not examples:
        raise TrainingError("empty training set")
    with_cond = model.encoder is not None
    if with_cond and any(ex.cloud is None for ex in examples):
        raise TrainingError("conditioned model needs a point cloud for every example")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    rows = []
    fh = writer = None
    if metrics_path:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    try:
        t0, seen = time.perf_counter(), 0
        for step in range(cfg.steps):
            batch = sample_batch(examples, cfg, model.cfg.vocab.P, rng, with_cond)
            m = train_step(model, opt, sched, batch, cfg.clip)
            seen += m["tokens"]
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                dt = time.perf_counter() - t0
                row = {"step": step + 1, "loss": m["loss"], "ppl": m["ppl"], "lr": m["lr"],
                       "tokens_per_s": seen / dt if dt > 0 else 0.0}
                rows.append(row)
                if writer:
                    writer.writerow([row[k] for k in METRIC_FIELDS])
                    fh.flush()
                if progress:
                    progress(row)
                t0, seen = time.perf_counter(), 0
    finally:
        if fh:
            fh.close()
    model.eval()
    return rows


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


# ------------------------------------------------------------------- grad check

ROLES = ("embedding", "attention", "ffn", "shortening", "upsampling", "cross_attention",
         "encoder", "norm", "head")


def parameter_role(name: str, model: HourglassLM) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("embed."):
        return "embedding"
    if name.startswith("head."):
        return "head"
    if name.startswith("shorten."):
        return "shortening"
    if name.startswith("upsample."):
        return "upsampling"
    if "norm" in name.split(".")[-2]:
        return "norm"
    block = model.get_submodule(".".join(name.split(".")[:3]))
    if ".attn." in name:
        return "cross_attention" if block.cross else "attention"
    return "ffn"


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    roles: dict  # role -> number of scalars checked
    worst: tuple  # (name, index, analytic, numeric)


def grad_check(model: HourglassLM, batch: Batch, per_role: int = 25, h: float = 1e-5,
               floor: float = 1e-6, seed: int = 0, roles=None) -> GradCheckReport:
    """Central differences against autograd on random scalars from every parameter role.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    vanishing gradients from turning rounding noise into large ratios.
    ``roles`` restricts the check to a subset of ``ROLES``.
    """
    if model.dtype != torch.float64:
        raise TrainingError("gradient check needs a float64 model")
    model.eval()
    named = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    batch_loss(model, batch).mean.backward()
    by_role: dict[str, list[str]] = {}
    for name in named:
        role = parameter_role(name, model)
        if roles is None or role in roles:
            by_role.setdefault(role, []).append(name)
    if not by_role:
        raise TrainingError(f"no parameters in roles {roles}")
    rng = np.random.default_rng(seed)
    worst, max_rel, counts, checked = None, 0.0, {}, 0
    with torch.no_grad():
        for role, names in sorted(by_role.items()):
            sizes = np.array([named[n].numel() for n in names], dtype=np.float64)
            for _ in range(per_role):
                name = names[rng.choice(len(names), p=sizes / sizes.sum())]
                p = named[name]
                flat = p.view(-1)
                i = int(rng.integers(flat.numel()))
                a = float(p.grad.view(-1)[i])
                old = float(flat[i])
                flat[i] = old + h
                f_plus = float(batch_loss(model, batch).mean)
                flat[i] = old - h
                f_minus = float(batch_loss(model, batch).mean)
                flat[i] = old
                n = (f_plus - f_minus) / (2 * h)
                rel = abs(a - n) / max(abs(a), abs(n), floor)
                if worst is None or rel > max_rel:
                    max_rel, worst = rel, (name, i, a, n)
                counts[role] = counts.get(role, 0) + 1
                checked += 1
    model.zero_grad(set_to_none=True)
    return GradCheckReport(max_rel, checked, counts, worst)

"""Figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return os.fspath(path)


def plot_profile(profile, path, title="Loss by position within face"):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(len(profile)), profile, color=["C0"] * 3 + ["C1"] * 3 + ["C2"] * 3)
    ax.set_xticks(range(9), ["y1", "z1", "x1", "y2", "z2", "x2", "y3", "z3", "x3"])
    ax.set_ylabel("mean NLL (nats)")
    ax.set_title(title)
    return _save(fig, path)


def plot_extrapolation(per_swa, per_full, chunk, path, smooth=90):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    k = np.ones(smooth) / smooth
    for y, label in ((per_full, "unlimited context"), (per_swa, f"sliding window {chunk}")):
        y = np.nan_to_num(np.asarray(y), nan=np.nanmean(y))
        ax.plot(np.convolve(y, k, mode="valid"), label=label)
    ax.axvline(chunk, color="grey", ls="--", lw=1)
    ax.set_xlabel("token position")
    ax.set_ylabel("NLL (moving average)")
    ax.legend()
    return _save(fig, path)


def plot_throughput(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for cached in (True, False):
        sel = [r for r in rows if r["rolling_cache"] == cached]
        if sel:
            ax.plot([r["length"] for r in sel], [r["tokens_per_s"] for r in sel], "o-",
                    label="rolling cache" if cached else "full recompute")
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel("tokens / s")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def plot_costs(reports, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    labels = [r["label"] for r in reports]
    axes[0].bar(labels, [r["total_flops"] for r in reports])
    axes[0].set_ylabel("forward FLOPs")
    axes[1].bar(labels, [r["kv_bytes"] / 2 ** 20 for r in reports], color="C1")
    axes[1].set_ylabel("KV cache (MiB)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def plot_training(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["step"] for r in rows], [r["loss"] for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    return _save(fig, path)


def plot_chamfer(values, floors, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter(floors, values, s=12)
    hi = max(max(values, default=0), max(floors, default=0)) * 1.05 or 1.0
    ax.plot([0, hi / 3], [0, hi], "k--", lw=1, label="3x floor")
    ax.set_xlabel("quantization floor")
    ax.set_ylabel("reconstruction Chamfer")
    ax.legend()
    return _save(fig, path)

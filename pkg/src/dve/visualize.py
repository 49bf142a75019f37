"""Qualitative figures: embedding projections and matched point pairs."""

from __future__ import annotations

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import as_values
from .coords import norm_to_pixel
from .embedder import embed
from .evalkit import nn_match


def embedding_to_rgb(emb) -> np.ndarray:
    """Project descriptor channels to 3 principal components, scaled to [0,1]."""
    v = as_values(emb).detach().numpy()
    c, h, w = v.shape
    flat = v.reshape(c, -1).T
    flat = flat - flat.mean(axis=0, keepdims=True)
    if c >= 3:
        _, _, vt = np.linalg.svd(flat, full_matrices=False)
        proj = flat @ vt[:3].T
    else:
        proj = np.tile(flat[:, :1], (1, 3))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    proj = (proj - lo) / np.maximum(hi - lo, 1e-9)
    return proj.reshape(h, w, 3)


def render_match_figure(model, img_a: np.ndarray, img_b: np.ndarray,
                        queries: np.ndarray, out_path: str) -> None:
    """Side-by-side pair with matched points and descriptor projections."""
    ta = torch.from_numpy(img_a.transpose(2, 0, 1).copy())
    tb = torch.from_numpy(img_b.transpose(2, 0, 1).copy())
    ea = as_values(embed(model, ta))
    eb = as_values(embed(model, tb))
    matched, _ = nn_match(ea, eb, queries)
    size = img_a.shape[0]
    qa = norm_to_pixel(queries, size)
    qb = norm_to_pixel(matched, size)

    fig, axes = plt.subplots(2, 2, figsize=(7, 7))
    cmap = plt.get_cmap("tab10")
    axes[0, 0].imshow(np.clip(img_a, 0, 1))
    axes[0, 1].imshow(np.clip(img_b, 0, 1))
    for k in range(len(queries)):
        color = cmap(k % 10)
        axes[0, 0].plot(qa[k, 0], qa[k, 1], "o", color=color, ms=6, mec="white", mew=0.5)
        axes[0, 1].plot(qb[k, 0], qb[k, 1], "o", color=color, ms=6, mec="white", mew=0.5)
    axes[0, 0].set_title("source + queries")
    axes[0, 1].set_title("target + matches")
    axes[1, 0].imshow(embedding_to_rgb(ea))
    axes[1, 0].set_title("source descriptors (pca)")
    axes[1, 1].imshow(embedding_to_rgb(eb))
    axes[1, 1].set_title("target descriptors (pca)")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)

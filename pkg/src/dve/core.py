"""Dense matching distributions, the correspondence loss, and vector exchange.

Given per-pixel embedding maps for two images, matching is a row softmax
over raw inner products: p(v|u) = softmax_v <src_u, tgt_v>. The loss is
the probability-weighted Euclidean distance, in normalized coordinates,
between each target cell and the ground-truth correspondence of the
source cell, averaged over valid source cells.

Vector exchange replaces each source vector by its reconstruction from a
pool of auxiliary maps before matching, which removes instance-specific
content from the descriptor while preserving correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .coords import cell_center_grid
from .errors import NumericalError, ShapeError, UnusablePairError
from .warps import WarpField


@dataclass
class EmbeddingMap:
    """Dense per-pixel descriptors, values shaped (C, H, W)."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError("embedding values must be (C, H, W)")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class AuxiliarySet:
    """Pool of auxiliary embedding maps used for exchange."""

    maps: list

    def __post_init__(self):
        if len(self.maps) == 0:
            raise ShapeError("auxiliary set must contain at least one map")
        chans = {as_values(m).shape[0] for m in self.maps}
        if len(chans) != 1:
            raise ShapeError(f"auxiliary maps disagree on channels: {sorted(chans)}")

    @property
    def size(self) -> int:
        return len(self.maps)

    def flat_pool(self) -> torch.Tensor:
        """All pool pixels stacked, shaped (P, C)."""
        cols = [as_values(m).reshape(as_values(m).shape[0], -1) for m in self.maps]
        return torch.cat(cols, dim=1).transpose(0, 1)


@dataclass
class MatchDistribution:
    """Row-stochastic matrix of match probabilities, source rows x target cols."""

    probs: torch.Tensor
    source_shape: tuple[int, int] | None = None
    target_shape: tuple[int, int] | None = None

    @property
    def source_pixels(self) -> int:
        return self.probs.shape[0]

    @property
    def target_pixels(self) -> int:
        return self.probs.shape[1]


def as_values(m) -> torch.Tensor:
    if isinstance(m, EmbeddingMap):
        return m.values
    if isinstance(m, torch.Tensor):
        return m
    raise ShapeError(f"expected EmbeddingMap or tensor, got {type(m).__name__}")


def _flat(m) -> torch.Tensor:
    v = as_values(m)
    if v.ndim != 3:
        raise ShapeError("embedding values must be (C, H, W)")
    return v.reshape(v.shape[0], -1).transpose(0, 1)


def similarity_grid(src, tgt) -> torch.Tensor:
    """Raw inner products between all source and target pixels, (S, T)."""
    a = _flat(src)
    b = _flat(tgt)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"channel mismatch: source C={a.shape[1]}, target C={b.shape[1]}"
        )
    return a @ b.transpose(0, 1)


def match_distribution(
    sim: torch.Tensor,
    source_shape: tuple[int, int] | None = None,
    target_shape: tuple[int, int] | None = None,
) -> MatchDistribution:
    """Row softmax of a similarity matrix (max-subtracted, numerically safe)."""
    if sim.ndim != 2:
        raise ShapeError("similarity matrix must be 2-d")
    finite = torch.isfinite(sim)
    if not bool(finite.all()):
        bad = torch.nonzero(~finite.all(dim=1)).flatten()[:8].tolist()
        raise NumericalError(f"non-finite similarities in rows {bad}")
    return MatchDistribution(torch.softmax(sim, dim=1), source_shape, target_shape)


def _target_centers(gt: WarpField, dtype, device) -> torch.Tensor:
    centers = cell_center_grid(gt.grid_height, gt.grid_width, factor=2)
    return torch.as_tensor(centers.reshape(-1, 2), dtype=dtype, device=device)


def correspondence_loss(dist, gt: WarpField) -> torch.Tensor:
    """Expected distance between matched cells and ground-truth targets.

    dist rows index the cells of gt's grid (the source image at embedding
    resolution); columns index the same grid in the target image. Returns
    the mean over valid source cells of sum_v ||v - g(u)|| p(v|u).
    """
    probs = dist.probs if isinstance(dist, MatchDistribution) else dist
    n = gt.grid_height * gt.grid_width
    if probs.shape[0] != n or probs.shape[1] != n:
        raise ShapeError(
            f"distribution {tuple(probs.shape)} does not match gt grid "
            f"{gt.grid_height}x{gt.grid_width}"
        )
    valid = torch.as_tensor(gt.valid_mask.reshape(-1), device=probs.device)
    if not bool(valid.any()):
        raise UnusablePairError("every source cell is masked invalid")
    targets = torch.as_tensor(
        gt.coords.reshape(-1, 2), dtype=probs.dtype, device=probs.device
    )[valid]
    centers = _target_centers(gt, probs.dtype, probs.device)
    # (S_valid, T) Euclidean distances in normalized coordinates
    dmat = torch.cdist(targets, centers)
    return (probs[valid] * dmat).sum(dim=1).mean()


def dve_reconstruct(src, aux, row_block: int | None = None):
    """Replace each source vector by its match-weighted average over the pool.

    The reconstruction for source pixel u is sum_w pool_w * p(w|u) with
    p(w|u) the row softmax of raw inner products against every pixel of
    every auxiliary map. row_block bounds how many source rows are
    processed at once to cap the size of the similarity block.
    """
    if not isinstance(aux, AuxiliarySet):
        aux = AuxiliarySet(list(aux))
    v = as_values(src)
    c, h, w = v.shape
    pool = aux.flat_pool()
    if pool.shape[1] != c:
        raise ShapeError(f"pool C={pool.shape[1]} differs from source C={c}")
    flat = v.reshape(c, -1).transpose(0, 1)
    step = flat.shape[0] if not row_block else max(1, int(row_block))
    chunks = []
    for start in range(0, flat.shape[0], step):
        block = flat[start : start + step]
        sim = block @ pool.transpose(0, 1)
        if not bool(torch.isfinite(sim).all()):
            raise NumericalError("non-finite similarities against auxiliary pool")
        chunks.append(torch.softmax(sim, dim=1) @ pool)
    recon = torch.cat(chunks, dim=0).transpose(0, 1).reshape(c, h, w)
    return EmbeddingMap(recon) if isinstance(src, EmbeddingMap) else recon


def dve_loss(src, tgt, aux, gt: WarpField, row_block: int | None = None) -> torch.Tensor:
    """Correspondence loss with the source map exchanged through the pool."""
    recon = dve_reconstruct(src, aux, row_block=row_block)
    sim = similarity_grid(recon, tgt)
    tv = as_values(tgt)
    dist = match_distribution(sim, target_shape=(tv.shape[1], tv.shape[2]))
    return correspondence_loss(dist, gt)


def nn_match_grid(dist: MatchDistribution) -> torch.Tensor:
    """Argmax target cell per source row; ties resolve to the lowest index."""
    return torch.argmax(dist.probs, dim=1)


def cell_centers_tensor(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized centers of an embedding grid, as an (H*W, 2) tensor."""
    centers = cell_center_grid(height, width, factor=2).reshape(-1, 2)
    return torch.as_tensor(centers, dtype=dtype)

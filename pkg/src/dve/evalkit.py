"""Evaluation: nearest-neighbour matching and landmark regression probes.

Matching quality is measured by transporting annotated points from a
source image to a target through descriptor nearest neighbours, either
across a synthetic warp of the same image (same_identity) or between two
different identities (different_identity). Errors are reported in pixels
of the preprocessed network-input frame.

Landmark regression freezes the trunk and fits a small probe: 50 1x1
filters, a spatial softargmax per filter map, and one affine map from
the 100 coordinates to the K target landmarks.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .coords import cell_center_grid, norm_to_cell_index
from .core import as_values
from .embedder import embed
from .errors import ConfigurationError, DataError
from .warps import WarpConfig, apply_warp, invert_warp, sample_warp, warp_points

log = logging.getLogger(__name__)


def _sample_map(emb: torch.Tensor, pts: np.ndarray) -> torch.Tensor:
    """Bilinear descriptor lookup at normalized points, (Q, C)."""
    c, h, w = emb.shape
    col = np.clip(norm_to_cell_index(pts[:, 0], w), 0, w - 1)
    row = np.clip(norm_to_cell_index(pts[:, 1], h), 0, h - 1)
    x0 = np.floor(col).astype(np.int64)
    y0 = np.floor(row).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = torch.as_tensor(col - x0, dtype=emb.dtype)[:, None]
    fy = torch.as_tensor(row - y0, dtype=emb.dtype)[:, None]
    flat = emb.reshape(c, -1).transpose(0, 1)
    v00 = flat[y0 * w + x0]
    v01 = flat[y0 * w + x1]
    v10 = flat[y1 * w + x0]
    v11 = flat[y1 * w + x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def nn_match(src_emb, tgt_emb, queries: np.ndarray, normalize: bool = True):
    """Match query points of the source into target grid cells.

    Descriptors are sampled bilinearly at the queries; each is assigned
    the target cell with the largest inner product (cosine similarity
    when normalize is set). Ties resolve to the lowest row-major cell.
    Returns (cell centers (Q, 2) normalized, flat cell indices (Q,)).
    """
    src = as_values(src_emb).detach()
    tgt = as_values(tgt_emb).detach()
    queries = np.asarray(queries, np.float64)
    vecs = _sample_map(src, queries)
    flat = tgt.reshape(tgt.shape[0], -1).transpose(0, 1)
    if normalize:
        vecs = _unit(vecs)
        flat = _unit(flat)
    sims = (vecs @ flat.transpose(0, 1)).numpy()
    idx = sims.argmax(axis=1)  # numpy argmax: first maximum wins
    centers = cell_center_grid(tgt.shape[1], tgt.shape[2]).reshape(-1, 2)
    return centers[idx], idx


@dataclass
class MatchReport:
    protocol: str
    frame_size: int
    errors: list = field(default_factory=list)  # one mean pixel error per pair
    skipped: int = 0
    normalize: bool = True

    @property
    def n_pairs(self) -> int:
        return len(self.errors)

    @property
    def mean_error(self):
        """Mean pixel error, or None when no pair produced a measurement."""
        if not self.errors:
            return None
        return float(np.mean(self.errors))

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "frame_size": self.frame_size,
            "n_pairs": self.n_pairs,
            "skipped": self.skipped,
            "normalize": self.normalize,
            "mean_error_px": self.mean_error,
            "median_error_px": float(np.median(self.errors)) if self.errors else None,
        }


def save_match_report(report: MatchReport, out_dir: str, name: str = "match") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}_errors.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["pair_index", "error_px"])
        for i, e in enumerate(report.errors):
            wr.writerow([i, f"{e:.6f}"])
    summary_path = os.path.join(out_dir, f"{name}_summary.json")
    with open(summary_path, "w") as f:
        json.dump(report.summary(), f, indent=1, sort_keys=True)
    return {"csv": csv_path, "summary": summary_path}


def _embed_cache(model, dataset):
    cache: dict = {}

    def get(i: int):
        if i not in cache:
            cache[i] = as_values(embed(model, dataset.image_tensor(i)))
        return cache[i]

    return get


def matching_benchmark(model, dataset, n_pairs: int, protocol: str,
                       rng: np.random.Generator | None = None,
                       warp_cfg: WarpConfig | None = None,
                       normalize: bool = True) -> MatchReport:
    """Transport annotated points through descriptor matching.

    same_identity pairs an image with a random synthetic warp of itself;
    ground truth is the warped annotation. different_identity pairs two
    images of different identities; ground truth is the target's own
    annotation. Per-pair error is the mean pixel distance over the valid
    annotated points; pairs with none are skipped.
    """
    if protocol not in ("same_identity", "different_identity"):
        raise ConfigurationError(f"unknown matching protocol '{protocol}'")
    rng = rng or np.random.default_rng(0)
    size = dataset.input_size
    report = MatchReport(protocol, size, normalize=normalize)
    if n_pairs == 0:
        return report
    if len(dataset) == 0:
        raise DataError("empty dataset")
    half = (size - 1) / 2.0  # normalized -> pixel distance factor
    cached = _embed_cache(model, dataset)

    for _ in range(n_pairs):
        if protocol == "same_identity":
            i = int(rng.integers(len(dataset)))
            pts, vis = dataset.landmarks(i)
            img = dataset.image(i)
            wcfg = warp_cfg or WarpConfig(grid_height=size, grid_width=size)
            w = sample_warp(wcfg, rng)
            warped = apply_warp(img, w)
            gt, gt_ok = warp_points(invert_warp(w), pts.astype(np.float64))
            keep = vis & gt_ok
            if not keep.any():
                report.skipped += 1
                continue
            src = cached(i)
            tgt = as_values(embed(model, torch.from_numpy(warped.transpose(2, 0, 1).copy())))
            matched, _ = nn_match(src, tgt, pts[keep], normalize=normalize)
            err = np.linalg.norm(matched - gt[keep], axis=1) * half
        else:
            i = int(rng.integers(len(dataset)))
            j = int(rng.integers(len(dataset)))
            tries = 0
            while dataset.identity_id(j) == dataset.identity_id(i) and tries < 100:
                j = int(rng.integers(len(dataset)))
                tries += 1
            if dataset.identity_id(j) == dataset.identity_id(i):
                report.skipped += 1
                continue
            pts_i, vis_i = dataset.landmarks(i)
            pts_j, vis_j = dataset.landmarks(j)
            keep = vis_i & vis_j
            if not keep.any():
                report.skipped += 1
                continue
            matched, _ = nn_match(cached(i), cached(j), pts_i[keep], normalize=normalize)
            err = np.linalg.norm(matched - pts_j[keep].astype(np.float64), axis=1) * half
        report.errors.append(float(err.mean()))
    return report


def softargmax(heatmap, temperature: float = 0.5) -> torch.Tensor:
    """Probability-weighted mean of cell centers; differentiable.

    The heatmap is flattened, divided by the temperature, and passed
    through a softmax; lower temperatures sharpen the distribution.
    """
    if temperature <= 0:
        raise ConfigurationError("softargmax temperature must be positive")
    h = heatmap if isinstance(heatmap, torch.Tensor) else torch.as_tensor(heatmap)
    if h.ndim != 2:
        raise ConfigurationError("softargmax expects a single (H, W) heatmap")
    probs = torch.softmax(h.reshape(-1) / temperature, dim=0)
    centers = torch.as_tensor(
        cell_center_grid(h.shape[0], h.shape[1]).reshape(-1, 2), dtype=probs.dtype
    )
    return probs @ centers


def _softargmax_batch(heat: torch.Tensor, temperature: float) -> torch.Tensor:
    n, f, hh, ww = heat.shape
    probs = torch.softmax(heat.reshape(n, f, -1) / temperature, dim=2)
    centers = torch.as_tensor(
        cell_center_grid(hh, ww).reshape(-1, 2), dtype=probs.dtype
    )
    return probs @ centers


class RegressionHead(nn.Module):
    """Frozen-trunk landmark probe: 1x1 filters, softargmax, affine map."""

    def __init__(self, channels: int, n_landmarks: int, temperature: float = 0.5,
                 n_filters: int = 50):
        super().__init__()
        self.filters = nn.Conv2d(channels, n_filters, 1, bias=False)
        self.softargmax_temperature = temperature
        self.linear_map = nn.Linear(2 * n_filters, 2 * n_landmarks)
        self.n_landmarks = n_landmarks

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        heat = self.filters(emb)
        pts = _softargmax_batch(heat, self.softargmax_temperature)
        out = self.linear_map(pts.flatten(1))
        return out.reshape(-1, self.n_landmarks, 2)


@dataclass
class HeadConfig:
    epochs: int = 120
    lr: float = 5e-3
    batch_size: int = 32
    temperature: float = 0.5
    n_filters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("bad head training settings")
        if self.temperature <= 0:
            raise ConfigurationError("softargmax temperature must be positive")


def _precompute_embeddings(model, dataset, indices) -> torch.Tensor:
    maps = []
    for i in indices:
        maps.append(as_values(embed(model, dataset.image_tensor(i))))
    return torch.stack(maps)


def train_regressor(model, dataset, head_cfg: HeadConfig | None = None,
                    indices: list | None = None) -> RegressionHead:
    """Fit the landmark probe on frozen embeddings.

    The trunk never enters the optimizer and embeddings are precomputed
    under no_grad, so backbone weights cannot move. Fully deterministic
    for a fixed head seed and annotation subset.
    """
    head_cfg = head_cfg or HeadConfig()
    indices = list(range(len(dataset))) if indices is None else list(indices)
    if not indices:
        raise DataError("no annotated images to fit the probe on")
    emb = _precompute_embeddings(model, dataset, indices)
    pts, vis = zip(*(dataset.landmarks(i) for i in indices))
    targets = torch.as_tensor(np.stack(pts), dtype=torch.float32)
    visible = torch.as_tensor(np.stack(vis))
    k = targets.shape[1]

    with torch.random.fork_rng():
        torch.manual_seed(head_cfg.seed)
        head = RegressionHead(emb.shape[1], k, head_cfg.temperature, head_cfg.n_filters)
        opt = torch.optim.Adam(head.parameters(), lr=head_cfg.lr)
        order_rng = np.random.default_rng(head_cfg.seed)
        n = emb.shape[0]
        for _ in range(head_cfg.epochs):
            order = order_rng.permutation(n)
            for start in range(0, n, head_cfg.batch_size):
                sel = order[start : start + head_cfg.batch_size]
                pred = head(emb[sel])
                mask = visible[sel].unsqueeze(-1)
                diff = (pred - targets[sel]) * mask
                denom = mask.sum().clamp_min(1)
                loss = (diff ** 2).sum() / denom
                opt.zero_grad()
                loss.backward()
                opt.step()
    head.eval()
    return head


def iod_error(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray | None,
              left_idx: int, right_idx: int) -> float:
    """Mean landmark distance as a percentage of the gt normalizing pair."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError("prediction/ground-truth shape mismatch")
    iod = np.linalg.norm(gt[left_idx] - gt[right_idx])
    if iod <= 1e-9:
        raise DataError("normalizing landmark pair coincides; distance undefined")
    if visible is None:
        visible = np.ones(len(gt), dtype=bool)
    if not visible.any():
        raise DataError("no visible landmarks to score")
    dist = np.linalg.norm(pred[visible] - gt[visible], axis=1)
    return float(dist.mean() / iod * 100.0)


def regression_benchmark(model, head: RegressionHead, dataset,
                         eye_indices: tuple = (0, 1)) -> dict:
    """Per-image IOD-normalized errors of the probe on a dataset split."""
    errors = []
    with torch.no_grad():
        for i in range(len(dataset)):
            emb = as_values(embed(model, dataset.image_tensor(i)))
            pred = head(emb[None])[0].numpy()
            pts, vis = dataset.landmarks(i)
            errors.append(iod_error(pred, pts, vis, *eye_indices))
    return {
        "per_image": errors,
        "mean_iod_pct": float(np.mean(errors)),
        "median_iod_pct": float(np.median(errors)),
        "eye_indices": list(eye_indices),
    }


def limited_annotation_study(model, train_dataset, test_dataset,
                             counts=(1, 5, 10, 20, "all"), n_seeds: int = 3,
                             head_cfg: HeadConfig | None = None,
                             out_dir: str | None = None,
                             eye_indices: tuple = (0, 1)) -> dict:
    """Probe quality as a function of annotation count.

    Each (count, seed) draws a different annotated subset with the seed;
    the head seed stays fixed so only annotation sampling varies. With
    count "all" every seed uses the full set, so the spread is zero. The
    sampled id lists are persisted when out_dir is given.
    """
    head_cfg = head_cfg or HeadConfig()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    for count in counts:
        for seed in range(n_seeds):
            if count == "all":
                indices = list(range(len(train_dataset)))
            else:
                if count > len(train_dataset):
                    raise DataError(
                        f"annotation count {count} exceeds dataset size {len(train_dataset)}"
                    )
                sel_rng = np.random.default_rng(seed)
                indices = sorted(sel_rng.choice(len(train_dataset), size=count, replace=False).tolist())
            if out_dir:
                name = f"annotations_count-{count}_seed-{seed}.txt"
                with open(os.path.join(out_dir, name), "w") as f:
                    for i in indices:
                        ident = getattr(train_dataset, "identifier", lambda k: str(k))(i)
                        f.write(f"{ident}\n")
            head = train_regressor(model, train_dataset, head_cfg, indices=indices)
            result = regression_benchmark(model, head, test_dataset, eye_indices)
            rows.append({
                "count": count,
                "seed": seed,
                "n_train": len(indices),
                "mean_iod_pct": result["mean_iod_pct"],
            })
            log.info("limited annotation: count=%s seed=%d -> %.3f%%",
                     count, seed, result["mean_iod_pct"])
    aggregates = {}
    for count in counts:
        vals = [r["mean_iod_pct"] for r in rows if r["count"] == count]
        aggregates[str(count)] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "n_seeds": len(vals),
        }
    out = {"rows": rows, "aggregates": aggregates}
    if out_dir:
        with open(os.path.join(out_dir, "limited_annotation.csv"), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["count", "seed", "n_train", "mean_iod_pct"])
            for r in rows:
                wr.writerow([r["count"], r["seed"], r["n_train"], f"{r['mean_iod_pct']:.6f}"])
        with open(os.path.join(out_dir, "limited_annotation_summary.json"), "w") as f:
            json.dump(aggregates, f, indent=1, sort_keys=True)
    return out

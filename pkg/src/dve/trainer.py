"""Siamese training of dense embedders with warp, flow, or identity pairing.

Every optimization step draws a batch of (source, target) image pairs
with ground-truth correspondence at embedding resolution plus a shared
pool of auxiliary images. All images go through the network in one
forward pass; each pair contributes either the plain correspondence loss
or, with exchange enabled, the loss computed after reconstructing the
source map from its sampled auxiliary maps.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .core import (
    AuxiliarySet,
    correspondence_loss,
    dve_loss,
    match_distribution,
    similarity_grid,
)
from .embedder import DenseEmbedder, EmbedderSpec, build_embedder, embed_batch, save_checkpoint
from .errors import ConfigurationError, NumericalError, UnusablePairError
from .warps import WarpConfig, WarpField, apply_warp, downsample_warp, identity_warp_field, sample_warp

log = logging.getLogger(__name__)

PAIR_SOURCES = ("auto", "warp", "flow")


@dataclass
class TrainConfig:
    pairs_per_batch: int = 16
    aux_pool_size: int = 16
    aux_per_pair: int = 5
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"
    use_dve: bool = True
    identity_warp: bool = False
    embed_dim: int = 64
    seed: int = 0
    arch: str = "smallnet"
    input_size: int | None = None
    pair_source: str = "auto"
    steps_per_epoch: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    row_block: int | None = None
    warp: WarpConfig = field(default_factory=WarpConfig)

    def __post_init__(self):
        if self.pairs_per_batch < 1:
            raise ConfigurationError("pairs_per_batch must be >= 1")
        if self.use_dve and self.aux_pool_size < 1:
            raise ConfigurationError("exchange needs aux_pool_size >= 1")
        if self.aux_per_pair > self.aux_pool_size:
            raise ConfigurationError("aux_per_pair must be <= aux_pool_size")
        if self.use_dve and self.aux_per_pair < 1:
            raise ConfigurationError("exchange needs aux_per_pair >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer '{self.optimizer}'")
        if self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be >= 1")
        if self.pair_source not in PAIR_SOURCES:
            raise ConfigurationError(
                f"pair_source must be one of {PAIR_SOURCES}, got '{self.pair_source}'"
            )

    def embedder_spec(self) -> EmbedderSpec:
        return EmbedderSpec(self.arch, self.embed_dim, self.input_size)


@dataclass
class PairBatch:
    sources: torch.Tensor  # (P, 3, S, S)
    targets: torch.Tensor  # (P, 3, S, S)
    fields: list  # P WarpFields at embedding resolution
    pool: torch.Tensor  # (A, 3, S, S)
    aux_indices: np.ndarray  # (P, aux_per_pair)


def _resolve_pair_source(cfg: TrainConfig, dataset) -> str:
    if cfg.pair_source != "auto":
        if cfg.pair_source == "flow" and not getattr(dataset, "has_flow", False):
            raise ConfigurationError("pair_source=flow but dataset provides no flow")
        return cfg.pair_source
    return "flow" if getattr(dataset, "has_flow", False) else "warp"


def _warp_cfg_for(cfg: TrainConfig, size: int) -> WarpConfig:
    w = cfg.warp
    return WarpConfig(
        control_grid=w.control_grid,
        max_control_displacement=w.max_control_displacement,
        rotation_range=w.rotation_range,
        scale_range=w.scale_range,
        translation_range=w.translation_range,
        grid_height=size,
        grid_width=size,
    )


def _identity_gt(dataset, i: int, size: int) -> WarpField:
    fg = None
    if hasattr(dataset, "foreground_mask"):
        fg = dataset.foreground_mask(i)
    full = identity_warp_field(size, size)
    if fg is not None:
        full = WarpField(full.coords, fg)
    return downsample_warp(full, 2)


def assemble_batch(dataset, cfg: TrainConfig, rng: np.random.Generator) -> PairBatch:
    """Draw pair images, their gt fields at embedding resolution, and a pool."""
    size = dataset.input_size
    mode = _resolve_pair_source(cfg, dataset)
    wcfg = _warp_cfg_for(cfg, size)
    sources, targets, fields = [], [], []
    for _ in range(cfg.pairs_per_batch):
        if cfg.identity_warp:
            i = int(rng.integers(len(dataset)))
            img = dataset.image_tensor(i)
            sources.append(img)
            targets.append(img)
            fields.append(_identity_gt(dataset, i, size))
        elif mode == "flow":
            i, j, fl = dataset.sample_flow_pair(rng)
            sources.append(dataset.image_tensor(i))
            targets.append(dataset.image_tensor(j))
            fields.append(downsample_warp(fl, 2))
        else:
            i = int(rng.integers(len(dataset)))
            img = dataset.image_tensor(i)
            w = sample_warp(wcfg, rng)
            warped = apply_warp(img.permute(1, 2, 0).numpy(), w)
            sources.append(torch.from_numpy(warped.transpose(2, 0, 1).copy()))
            targets.append(img)
            fields.append(downsample_warp(w, 2))
    pool = []
    for _ in range(cfg.aux_pool_size):
        i = int(rng.integers(len(dataset)))
        img = dataset.image_tensor(i)
        if mode == "warp" and not cfg.identity_warp:
            # auxiliary images see the same warp family as the pairs
            w = sample_warp(wcfg, rng)
            img = torch.from_numpy(
                apply_warp(img.permute(1, 2, 0).numpy(), w).transpose(2, 0, 1).copy()
            )
        pool.append(img)
    aux_idx = np.stack([
        rng.choice(cfg.aux_pool_size, size=cfg.aux_per_pair, replace=False)
        for _ in range(cfg.pairs_per_batch)
    ]) if cfg.aux_pool_size else np.zeros((cfg.pairs_per_batch, 0), np.int64)
    return PairBatch(
        torch.stack(sources), torch.stack(targets), fields,
        torch.stack(pool) if pool else torch.zeros(0, 3, size, size),
        aux_idx,
    )


def pair_loss(src_emb, tgt_emb, gt: WarpField, aux_maps=None,
              row_block: int | None = None) -> torch.Tensor:
    """Loss for one pair; exchanges the source map when aux_maps is given."""
    if aux_maps:
        return dve_loss(src_emb, tgt_emb, AuxiliarySet(list(aux_maps)), gt,
                        row_block=row_block)
    dist = match_distribution(similarity_grid(src_emb, tgt_emb))
    return correspondence_loss(dist, gt)


@dataclass
class TrainResult:
    model: DenseEmbedder
    checkpoint_path: str
    loss_curve: list
    log_path: str


def _dataset_id(dataset) -> str:
    did = getattr(dataset, "dataset_id", None)
    if did:
        return did
    return type(dataset).__name__


def train(dataset, cfg: TrainConfig, out_dir: str, init_model: DenseEmbedder | None = None,
          resume: str | None = None, provenance: list | None = None) -> TrainResult:
    """Optimize an embedder on a dataset; writes checkpoints and a JSONL log.

    resume points at a checkpoint written by this function and continues
    from the epoch after it, restoring optimizer and sampler state.
    """
    os.makedirs(out_dir, exist_ok=True)
    if cfg.input_size is None:
        cfg.input_size = dataset.input_size
    if cfg.input_size != dataset.input_size:
        raise ConfigurationError(
            f"config input_size {cfg.input_size} != dataset frame {dataset.input_size}"
        )
    torch.manual_seed(cfg.seed)
    data_rng = np.random.default_rng(cfg.seed)
    model = init_model if init_model is not None else build_embedder(cfg.embedder_spec(), cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
    )
    start_epoch = 0
    loss_curve: list = []
    if resume:
        blob = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(blob["state_dict"])
        extra = blob.get("extra", {})
        if "optimizer" in extra:
            opt.load_state_dict(extra["optimizer"])
        start_epoch = int(extra.get("epoch", -1)) + 1
        loss_curve = list(extra.get("loss_curve", []))
        if "torch_rng" in extra:
            torch.set_rng_state(extra["torch_rng"])
        if "data_rng" in extra:
            data_rng.bit_generator.state = extra["data_rng"]

    steps = cfg.steps_per_epoch or max(1, len(dataset) // cfg.pairs_per_batch)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    log_f = open(log_path, "a")
    t0 = time.time()
    model.train()
    n_pairs = cfg.pairs_per_batch
    global_step = start_epoch * steps
    last_path = os.path.join(out_dir, "final.pt")

    def save_state(epoch: int, path: str):
        meta = {
            "train_epochs": epoch + 1,
            "dataset_id": _dataset_id(dataset),
            "provenance": list(provenance or []),
        }
        extra = {
            "optimizer": opt.state_dict(),
            "epoch": epoch,
            "loss_curve": loss_curve,
            "torch_rng": torch.get_rng_state(),
            "data_rng": data_rng.bit_generator.state,
            "train_config": asdict(cfg),
        }
        save_checkpoint(model, path, meta=meta, extra=extra)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            epoch_losses = []
            for _ in range(steps):
                batch = assemble_batch(dataset, cfg, data_rng)
                images = torch.cat([batch.sources, batch.targets, batch.pool])
                emb = embed_batch(model, images)
                src_emb = emb[:n_pairs]
                tgt_emb = emb[n_pairs : 2 * n_pairs]
                pool_emb = emb[2 * n_pairs :]
                losses = []
                for p in range(n_pairs):
                    aux = None
                    if cfg.use_dve:
                        aux = [pool_emb[k] for k in batch.aux_indices[p]]
                    try:
                        losses.append(
                            pair_loss(src_emb[p], tgt_emb[p], batch.fields[p],
                                      aux_maps=aux, row_block=cfg.row_block)
                        )
                    except UnusablePairError:
                        log.warning("skipping pair %d of step %d: no valid pixels",
                                    p, global_step)
                if not losses:
                    raise NumericalError(
                        f"step {global_step}: every pair in the batch was unusable"
                    )
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss {loss.item()} at epoch {epoch} step {global_step}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(float(loss.detach()))
                log_f.write(json.dumps({
                    "epoch": epoch, "step": global_step,
                    "loss": float(loss.detach()), "wall_time": round(time.time() - t0, 3),
                }) + "\n")
                log_f.flush()
                global_step += 1
            loss_curve.append(float(np.mean(epoch_losses)))
            save_state(epoch, os.path.join(out_dir, f"epoch_{epoch:03d}.pt"))
    finally:
        log_f.close()
    final_epoch = cfg.epochs - 1 if cfg.epochs else start_epoch - 1
    save_state(max(final_epoch, -1), last_path)
    return TrainResult(model, last_path, loss_curve, log_path)


def finetune_unsupervised(checkpoint: str, dataset, cfg: TrainConfig, out_dir: str) -> TrainResult:
    """Continue self-supervised training from saved weights on new data.

    The provenance chain in the checkpoint metadata grows by one entry;
    with epochs == 0 the weights pass through unchanged.
    """
    from .embedder import load_checkpoint

    model, meta = load_checkpoint(checkpoint)
    cfg.arch = meta["arch"]
    cfg.embed_dim = meta["C"]
    cfg.input_size = meta["input_size"]
    provenance = list(meta.get("provenance", []))
    provenance.append({
        "checkpoint": os.path.abspath(checkpoint),
        "dataset_id": meta.get("dataset_id", "unspecified"),
        "train_epochs": meta.get("train_epochs", 0),
    })
    if cfg.epochs == 0:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "final.pt")
        save_checkpoint(model, path, meta={
            "train_epochs": meta.get("train_epochs", 0),
            "dataset_id": _dataset_id(dataset),
            "provenance": provenance,
        })
        return TrainResult(model, path, [], "")
    return train(dataset, cfg, out_dir, init_model=model, provenance=provenance)

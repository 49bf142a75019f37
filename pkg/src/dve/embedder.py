"""Dense embedding networks producing per-pixel descriptors at half resolution.

Three trunks are available. smallnet is a dilated 7-layer CNN (feature
widths 20, 48, 64, 80, 256, 256 before the final projection, dilations
2, 4, 2 on the middle layers, one 2x2 max pool after the first layer).
smallnet_plus adds stride-2 pools after each of the first three layers
and upsamples back before the projection so the output contract (exactly
half the input resolution) holds for every trunk. hourglass is a single
stacked-hourglass block with preactivation residual units at width 256.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NumericalError, ShapeError

ARCHITECTURES = ("smallnet", "smallnet_plus", "hourglass")
_DEFAULT_INPUT = {"smallnet": 70, "smallnet_plus": 64, "hourglass": 96}


@dataclass
class EmbedderSpec:
    arch: str = "smallnet"
    out_dim: int = 64
    input_size: int | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown arch '{self.arch}', expected one of {ARCHITECTURES}"
            )
        if self.out_dim < 1:
            raise ConfigurationError("out_dim must be >= 1")
        if self.input_size is None:
            self.input_size = _DEFAULT_INPUT[self.arch]
        if self.input_size % 2:
            raise ConfigurationError("input_size must be divisible by 2")


def _conv_bn(cin, cout, k, dilation=1):
    pad = dilation * (k - 1) // 2
    return [
        nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class SmallNet(nn.Module):
    def __init__(self, out_dim: int):
        super().__init__()
        layers = []
        layers += _conv_bn(3, 20, 5)
        layers += [nn.MaxPool2d(2, stride=2)]
        layers += _conv_bn(20, 48, 3, dilation=2)
        layers += _conv_bn(48, 64, 3, dilation=4)
        layers += _conv_bn(64, 80, 3, dilation=2)
        layers += _conv_bn(80, 256, 3)
        layers += _conv_bn(256, 256, 3)
        layers += [nn.Conv2d(256, out_dim, 1)]
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class SmallNetPlus(nn.Module):
    """Faster trunk: extra stride-2 pools, upsampled back to half resolution."""

    def __init__(self, out_dim: int):
        super().__init__()
        trunk = []
        trunk += _conv_bn(3, 20, 5)
        trunk += [nn.MaxPool2d(2, stride=2)]
        trunk += _conv_bn(20, 48, 3, dilation=2)
        trunk += [nn.MaxPool2d(2, stride=2)]
        trunk += _conv_bn(48, 64, 3, dilation=4)
        trunk += [nn.MaxPool2d(2, stride=2)]
        trunk += _conv_bn(64, 80, 3, dilation=2)
        trunk += _conv_bn(80, 256, 3)
        trunk += _conv_bn(256, 256, 3)
        self.trunk = nn.Sequential(*trunk)
        self.project = nn.Conv2d(256, out_dim, 1)

    def forward(self, x):
        h = self.trunk(x)
        h = nn.functional.interpolate(
            h, scale_factor=4, mode="bilinear", align_corners=False
        )
        return self.project(h)


class PreactResidual(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = cout // 2
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False) if cin != cout else None
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        h = self.conv1(self.relu(self.bn1(x)))
        h = self.conv2(self.relu(self.bn2(h)))
        h = self.conv3(self.relu(self.bn3(h)))
        return h + (x if self.skip is None else self.skip(x))


class HourglassBlock(nn.Module):
    def __init__(self, depth: int, width: int):
        super().__init__()
        self.depth = depth
        self.pool = nn.MaxPool2d(2, stride=2)
        self.down = PreactResidual(width, width)
        self.skip = PreactResidual(width, width)
        self.inner = (
            HourglassBlock(depth - 1, width) if depth > 1 else PreactResidual(width, width)
        )
        self.up = PreactResidual(width, width)

    def forward(self, x):
        skip = self.skip(x)
        h = self.down(self.pool(x))
        h = self.inner(h)
        h = self.up(h)
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        return h + skip


class Hourglass(nn.Module):
    """Single-stack hourglass with preactivation residual units, width 256."""

    def __init__(self, out_dim: int, width: int = 256, depth: int = 4):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            PreactResidual(64, 128),
            PreactResidual(128, width),
        )
        self.hourglass = HourglassBlock(depth, width)
        self.head = nn.Sequential(
            PreactResidual(width, width),
            nn.Conv2d(width, width, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_dim, 1),
        )

    def forward(self, x):
        return self.head(self.hourglass(self.stem(x)))


class DenseEmbedder(nn.Module):
    """Wrapper tying a trunk to its spec so sizes can be validated."""

    def __init__(self, spec: EmbedderSpec):
        super().__init__()
        self.spec = spec
        if spec.arch == "smallnet":
            self.net = SmallNet(spec.out_dim)
        elif spec.arch == "smallnet_plus":
            self.net = SmallNetPlus(spec.out_dim)
        else:
            self.net = Hourglass(spec.out_dim)

    def forward(self, x):
        return self.net(x)


def build_embedder(spec: EmbedderSpec, seed: int = 0) -> DenseEmbedder:
    """Construct a trunk with weights drawn deterministically from seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DenseEmbedder(spec)
    return model


def embed_batch(model: DenseEmbedder, images: torch.Tensor) -> torch.Tensor:
    """Forward a batch, keeping the current train/eval mode and the graph.

    images: (N, 3, H, W) with H = W = spec.input_size. Returns descriptors
    (N, C, H/2, W/2); raises if any activation is non-finite.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError("images must be (N, 3, H, W)")
    size = model.spec.input_size
    if images.shape[2] != size or images.shape[3] != size:
        raise ShapeError(
            f"expected {size}x{size} inputs for arch {model.spec.arch}, "
            f"got {images.shape[2]}x{images.shape[3]}"
        )
    out = model(images)
    expect = (images.shape[0], model.spec.out_dim, size // 2, size // 2)
    if tuple(out.shape) != expect:
        raise ShapeError(f"embedding shape {tuple(out.shape)}, expected {expect}")
    if not bool(torch.isfinite(out).all()):
        raise NumericalError("non-finite activations in embedding output")
    return out


def embed(model: DenseEmbedder, images: torch.Tensor):
    """Inference-mode embeddings as a list of EmbeddingMap.

    Switches to eval mode (batch norm uses running statistics, so output
    does not depend on batch composition) and restores the mode after.
    """
    from .core import EmbeddingMap

    single = images.ndim == 3
    if single:
        images = images[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = embed_batch(model, images)
    finally:
        if was_training:
            model.train()
    maps = [EmbeddingMap(out[i]) for i in range(out.shape[0])]
    return maps[0] if single else maps


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def state_fingerprint(model: nn.Module) -> str:
    """sha256 over all parameters and buffers; changes iff weights change."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: DenseEmbedder, path: str, meta: dict | None = None,
                    extra: dict | None = None) -> None:
    """Persist weights plus a metadata block naming architecture and data."""
    meta = dict(meta or {})
    meta.setdefault("arch", model.spec.arch)
    meta.setdefault("C", model.spec.out_dim)
    meta.setdefault("input_size", model.spec.input_size)
    meta.setdefault("train_epochs", 0)
    meta.setdefault("dataset_id", "unspecified")
    meta.setdefault("provenance", [])
    blob = {"state_dict": model.state_dict(), "meta": meta}
    if extra:
        blob["extra"] = extra
    torch.save(blob, path)


def load_checkpoint(path: str, with_extra: bool = False):
    """Rebuild the model a checkpoint was saved from; returns (model, meta)."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    meta = blob["meta"]
    spec = EmbedderSpec(meta["arch"], meta["C"], meta["input_size"])
    model = DenseEmbedder(spec)
    model.load_state_dict(blob["state_dict"])
    if with_extra:
        return model, meta, blob.get("extra", {})
    return model, meta

"""Annotated face datasets: CSV landmark files over an image directory.

Expected layout under <root>/<name>/: annotations/<split>.csv with header
path,x1,y1,...,xK,yK[,identity] (pixel coordinates in the original
image), and image paths relative to <root>/<name>/. Preprocessing
depends on the source: CelebA-derived images lose the top 30 and bottom
10 rows first; 300-W images are cropped to a context-padded square
around the landmarks so the landmark box spans the central 52 percent.
Everything is then resized and center-cropped to the network input size
(70 comes from a 100-pixel resize, 96 from 136; other sizes keep the
same 10:7 context ratio). Landmarks are carried through the same affine
chain and stored in normalized coordinates of the final frame.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..coords import pixel_to_norm
from ..errors import DataError

log = logging.getLogger(__name__)

_RESIZE_FOR_INPUT = {70: 100, 96: 136}
_CELEBA_ROW_CROP = (30, 208)  # of the 218-row frame
_W300_BOX_FRACTION = 0.52


@dataclass
class AnnotatedImage:
    """One annotation row: image path, landmarks in original pixels."""

    path: str
    landmarks: np.ndarray  # (K, 2) float64, original pixel coords
    identity: str


def resize_size_for(input_size: int) -> int:
    return _RESIZE_FOR_INPUT.get(input_size, int(round(input_size * 10.0 / 7.0)))


@dataclass
class _AffineChain:
    """p_final = (p_orig - crop0) * scale - cc0, per axis."""

    crop0: tuple
    scale: tuple
    cc0: float

    def forward(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, np.float64).copy()
        out[:, 0] = (out[:, 0] - self.crop0[0]) * self.scale[0] - self.cc0
        out[:, 1] = (out[:, 1] - self.crop0[1]) * self.scale[1] - self.cc0
        return out

    def backward(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, np.float64).copy()
        out[:, 0] = (out[:, 0] + self.cc0) / self.scale[0] + self.crop0[0]
        out[:, 1] = (out[:, 1] + self.cc0) / self.scale[1] + self.crop0[1]
        return out


class FaceDataset:
    """One split. Images are read lazily; landmarks are preloaded."""

    def __init__(self, name: str, root: str, split: str, records: list,
                 input_size: int):
        self.name = name
        self.root = root
        self.split = split
        self.records = records
        self.input_size = input_size
        self.has_flow = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dataset_id(self) -> str:
        return f"{self.name}:{self.split}:n={len(self.records)}"

    def identifier(self, i: int) -> str:
        return os.path.splitext(os.path.basename(self.records[i].path))[0]

    @property
    def identifiers(self) -> set:
        return {self.identifier(i) for i in range(len(self))}

    def identity_id(self, i: int) -> str:
        return self.records[i].identity

    def _chain(self, i: int, orig_w: int, orig_h: int):
        rec = self.records[i]
        cx0, cy0 = 0.0, 0.0
        crop_w, crop_h = float(orig_w), float(orig_h)
        if self.name in ("celeba", "mafl"):
            top, bottom = _CELEBA_ROW_CROP
            cy0 = float(top)
            crop_h = float(min(bottom, orig_h) - top)
        elif self.name in ("300w", "w300"):
            lm = rec.landmarks
            bx0, bx1 = lm[:, 0].min(), lm[:, 0].max()
            by0, by1 = lm[:, 1].min(), lm[:, 1].max()
            width = bx1 - bx0
            cx = (bx0 + bx1) / 2.0
            cy = (by0 + by1) / 2.0
            side = width / _W300_BOX_FRACTION
            cx0, cy0 = cx - side / 2.0, cy - side / 2.0
            crop_w = crop_h = side
        rs = resize_size_for(self.input_size)
        sx, sy = rs / crop_w, rs / crop_h
        cc0 = (rs - self.input_size) / 2.0
        return _AffineChain((cx0, cy0), (sx, sy), cc0), (crop_w, crop_h)

    def _load_raw(self, i: int) -> Image.Image:
        path = os.path.join(self.root, self.records[i].path)
        if not os.path.isfile(path):
            raise DataError(f"missing image file: {path}")
        return Image.open(path).convert("RGB")

    def image(self, i: int) -> np.ndarray:
        """(S, S, 3) float32 in [0, 1] after the full preprocessing chain."""
        img = self._load_raw(i)
        chain, (crop_w, crop_h) = self._chain(i, img.width, img.height)
        cx0, cy0 = chain.crop0
        # integer-aligned crop box; out-of-image regions pad with black
        box = (int(round(cx0)), int(round(cy0)),
               int(round(cx0 + crop_w)), int(round(cy0 + crop_h)))
        img = img.crop(box)
        rs = resize_size_for(self.input_size)
        img = img.resize((rs, rs), Image.BILINEAR)
        cc0 = int(round(chain.cc0))
        s = self.input_size
        img = img.crop((cc0, cc0, cc0 + s, cc0 + s))
        return np.asarray(img, np.float32) / 255.0

    def image_tensor(self, i: int):
        import torch

        return torch.from_numpy(self.image(i).transpose(2, 0, 1).copy())

    def landmarks(self, i: int):
        """Normalized landmarks of the final frame plus visibility flags."""
        rec = self.records[i]
        img = self._load_raw(i)
        chain, _ = self._chain(i, img.width, img.height)
        px = chain.forward(rec.landmarks)
        pts = pixel_to_norm(px, self.input_size).astype(np.float32)
        vis = np.all(np.abs(pts) <= 1.0, axis=1)
        return pts, vis

    def landmark_chain(self, i: int):
        """The affine pixel transform used for this record (for round trips)."""
        img = self._load_raw(i)
        chain, _ = self._chain(i, img.width, img.height)
        return chain

    def subset(self, keep: list) -> "FaceDataset":
        return FaceDataset(
            self.name, self.root, self.split, [self.records[k] for k in keep],
            self.input_size,
        )


@dataclass
class FaceBundle:
    name: str
    splits: dict

    @property
    def train(self) -> FaceDataset:
        return self.splits["train"]

    @property
    def test(self) -> FaceDataset:
        return self.splits["test"]

    @property
    def val(self) -> FaceDataset:
        return self.splits["val"]


def _parse_csv(path: str) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty annotation file") from None
        if not header or header[0] != "path":
            raise DataError(f"{path}: first column must be 'path'")
        has_identity = header[-1] == "identity"
        coord_cols = header[1 : len(header) - (1 if has_identity else 0)]
        if len(coord_cols) < 2 or len(coord_cols) % 2:
            raise DataError(f"{path}: expected x/y column pairs, got {coord_cols}")
        k = len(coord_cols) // 2
        records = []
        for rownum, row in enumerate(reader, start=2):
            expect = 1 + 2 * k + (1 if has_identity else 0)
            if len(row) != expect:
                raise DataError(f"{path}:{rownum}: expected {expect} fields, got {len(row)}")
            try:
                vals = np.array([float(v) for v in row[1 : 1 + 2 * k]]).reshape(k, 2)
            except ValueError as e:
                raise DataError(f"{path}:{rownum}: bad coordinate ({e})") from None
            ident = row[-1] if has_identity else os.path.splitext(os.path.basename(row[0]))[0]
            records.append(AnnotatedImage(row[0], vals, ident))
    return records


def load_face_dataset(name: str, root: str, input_size: int = 70) -> FaceBundle:
    """Load every split with an annotation file under <root>/<name>/."""
    base = os.path.join(root, name)
    ann_dir = os.path.join(base, "annotations")
    if not os.path.isdir(ann_dir):
        raise DataError(f"no annotations directory at {ann_dir}")
    splits = {}
    for split in ("train", "val", "test"):
        path = os.path.join(ann_dir, f"{split}.csv")
        if os.path.isfile(path):
            splits[split] = FaceDataset(name, base, split, _parse_csv(path), input_size)
    if not splits:
        raise DataError(f"no split csv files found in {ann_dir}")
    return FaceBundle(name, splits)


def exclude_overlap(train: FaceDataset, test: FaceDataset) -> FaceDataset:
    """Drop training rows whose canonical filename id appears in test."""
    test_ids = test.identifiers
    keep = [i for i in range(len(train)) if train.identifier(i) not in test_ids]
    removed = len(train) - len(keep)
    if removed:
        log.info("excluded %d training images overlapping the test split", removed)
    return train.subset(keep)

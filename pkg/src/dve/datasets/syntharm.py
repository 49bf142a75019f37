"""Procedural articulated-arm scenes with exact correspondence supervision.

Each instance is a 3-segment arm anchored at a fixed base: rigid colored
capsules plus round joint blobs at the two inner joints and the end
effector. Segment lengths, thicknesses and colors vary per instance.
Frames of one instance form a smooth motion sequence: the first pose is
sampled freely, later poses take small random joint steps, so consecutive
frames (the flow-supervision pairs) show small motion while poses across
the dataset vary widely. Because every element moves rigidly, the flow
between two frames of one instance is closed form, and the background
(exactly the zero-flow region) is known per pixel. Keypoints are the
three segment midpoints.
"""

from __future__ import annotations

import colorsys
import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

from ..coords import identity_grid, norm_to_pixel
from ..errors import ConfigurationError, DataError
from ..warps import WarpField, save_warp_field

_BASE = np.array([0.0, 0.45])
_BG_COLOR = np.array([0.05, 0.06, 0.08], dtype=np.float32)
_N_SEGMENTS = 3
_POSE_BOX = 0.93


@dataclass
class ArmSceneSpec:
    """Sizing knobs for a generated arm dataset (split is by instance)."""

    n_instances: int = 310
    frames_per_instance: int = 8
    image_size: int = 64
    seed: int = 0
    train_fraction: float = 0.85

    def __post_init__(self):
        if self.n_instances < 1 or self.frames_per_instance < 1:
            raise ConfigurationError("instance and frame counts must be >= 1")
        if self.image_size < 32:
            raise ConfigurationError("image_size must be >= 32")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigurationError("train_fraction must be in (0, 1)")


def _sample_instance(rng: np.random.Generator) -> dict:
    lengths = np.array([
        rng.uniform(0.40, 0.52),
        rng.uniform(0.32, 0.42),
        rng.uniform(0.24, 0.34),
    ])
    radii = np.array([
        rng.uniform(0.065, 0.085),
        rng.uniform(0.055, 0.075),
        rng.uniform(0.045, 0.065),
    ])
    seg_colors = [_random_color(rng) for _ in range(_N_SEGMENTS)]
    blob_colors = [_random_color(rng) for _ in range(_N_SEGMENTS)]
    return {
        "lengths": lengths.tolist(),
        "radii": radii.tolist(),
        "seg_colors": [c.tolist() for c in seg_colors],
        "blob_colors": [c.tolist() for c in blob_colors],
    }


def _random_color(rng: np.random.Generator) -> np.ndarray:
    # saturated random hue; color is the instance-specific cue
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.7, 1.0)
    v = rng.uniform(0.75, 1.0)
    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


def _sample_pose(rng: np.random.Generator, lengths: np.ndarray) -> np.ndarray:
    """Joint angles keeping the whole arm inside the frame."""
    rmax = 0.09
    for _ in range(200):
        angles = np.array([
            -np.pi / 2 + rng.uniform(-1.1, 1.1),
            rng.uniform(-1.5, 1.5),
            rng.uniform(-1.5, 1.5),
        ])
        joints = _chain_joints(angles, lengths)
        if np.all(np.abs(joints) + rmax <= _POSE_BOX):
            return angles
    raise DataError("pose sampling failed to stay inside the frame")


def _step_pose(rng: np.random.Generator, lengths: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """One small joint-space step from the previous pose, kept inside the frame."""
    rmax = 0.09
    for _ in range(200):
        angles = prev + rng.uniform(-0.04, 0.04, size=_N_SEGMENTS)
        joints = _chain_joints(angles, lengths)
        if np.all(np.abs(joints) + rmax <= _POSE_BOX):
            return angles
    raise DataError("pose stepping failed to stay inside the frame")


def _chain_joints(angles: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """(4, 2) base plus the three joint/end points, normalized coords."""
    pts = [_BASE.copy()]
    cum = 0.0
    for k in range(_N_SEGMENTS):
        cum += angles[k]
        step = lengths[k] * np.array([np.cos(cum), np.sin(cum)])
        pts.append(pts[-1] + step)
    return np.stack(pts)


def _cum_angles(angles: np.ndarray) -> np.ndarray:
    return np.cumsum(angles)


def _segment_distance(grid: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every grid point to the segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    rel = grid - a
    if denom < 1e-12:
        return np.linalg.norm(rel, axis=-1)
    t = np.clip((rel @ ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(grid - proj, axis=-1)


def _render_frame(inst: dict, angles: np.ndarray, size: int):
    """Returns (image (S,S,3) float32, element id map (S,S) uint8)."""
    grid = identity_grid(size, size)
    img = np.broadcast_to(_BG_COLOR, (size, size, 3)).astype(np.float32).copy()
    ids = np.zeros((size, size), dtype=np.uint8)
    joints = _chain_joints(angles, np.asarray(inst["lengths"]))
    aa = 2.0 / size

    def paint(dist, radius, color, elem_id):
        nonlocal img, ids
        alpha = np.clip((radius - dist) / aa + 0.5, 0.0, 1.0).astype(np.float32)
        img = img * (1 - alpha[..., None]) + np.asarray(color, np.float32) * alpha[..., None]
        ids[alpha > 0.5] = elem_id

    for k in range(_N_SEGMENTS):
        d = _segment_distance(grid, joints[k], joints[k + 1])
        paint(d, inst["radii"][k], inst["seg_colors"][k], k + 1)
    for k in range(_N_SEGMENTS):
        d = np.linalg.norm(grid - joints[k + 1], axis=-1)
        paint(d, inst["radii"][k] * 1.35, inst["blob_colors"][k], k + 4)
    return img, ids


def _keypoints(angles: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    joints = _chain_joints(angles, lengths)
    return (joints[:-1] + joints[1:]) / 2.0


class ArmDataset:
    """One split of generated frames, flow pairs available within instances."""

    def __init__(self, spec: ArmSceneSpec, instances, records, images, id_maps,
                 split: str = "train"):
        self.spec = spec
        self.instances = instances
        self.records = records  # per frame: dict(instance, frame, angles)
        self.images = images  # (N, S, S, 3) float32
        self.id_maps = id_maps  # (N, S, S) uint8
        self.split = split
        self._by_instance = {}
        for idx, r in enumerate(records):
            self._by_instance.setdefault(r["instance"], []).append(idx)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def input_size(self) -> int:
        return self.spec.image_size

    @property
    def has_flow(self) -> bool:
        return True

    @property
    def dataset_id(self) -> str:
        s = self.spec
        return (f"synthetic_arm:seed={s.seed}:inst={s.n_instances}"
                f"x{s.frames_per_instance}:size={s.image_size}:{self.split}")

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def image_tensor(self, i: int):
        import torch

        return torch.from_numpy(self.images[i].transpose(2, 0, 1).copy())

    def foreground_mask(self, i: int) -> np.ndarray:
        return self.id_maps[i] > 0

    def identity_id(self, i: int) -> int:
        return int(self.records[i]["instance"])

    def landmarks(self, i: int):
        r = self.records[i]
        inst = self.instances[r["instance"]]
        pts = _keypoints(np.asarray(r["angles"]), np.asarray(inst["lengths"]))
        return pts.astype(np.float32), np.ones(_N_SEGMENTS, dtype=bool)

    def flow(self, i: int, j: int) -> WarpField:
        """Exact correspondence field mapping pixels of frame i into frame j."""
        ri, rj = self.records[i], self.records[j]
        if ri["instance"] != rj["instance"]:
            raise DataError("flow is only defined between frames of one instance")
        inst = self.instances[ri["instance"]]
        lengths = np.asarray(inst["lengths"])
        ja = _chain_joints(np.asarray(ri["angles"]), lengths)
        jb = _chain_joints(np.asarray(rj["angles"]), lengths)
        ca = _cum_angles(np.asarray(ri["angles"]))
        cb = _cum_angles(np.asarray(rj["angles"]))
        size = self.spec.image_size
        grid = identity_grid(size, size)
        coords = grid.copy()
        ids = self.id_maps[i]
        for k in range(_N_SEGMENTS):
            dtheta = cb[k] - ca[k]
            rot = np.array([
                [np.cos(dtheta), -np.sin(dtheta)],
                [np.sin(dtheta), np.cos(dtheta)],
            ])
            sel = (ids == k + 1) | (ids == k + 4)
            rel = grid[sel] - ja[k]
            coords[sel] = rel @ rot.T + jb[k]
        fg = ids > 0
        return WarpField(coords.astype(np.float32), fg)

    def frame_indices(self, instance: int) -> list:
        return list(self._by_instance[instance])

    def sample_flow_pair(self, rng: np.random.Generator):
        """Random (i, j, flow i->j) over consecutive frames of one instance.

        Consecutive frames are where the motion field is small and dense,
        the same regime as real video flow; either temporal direction is
        drawn with equal probability.
        """
        inst = list(self._by_instance)[rng.integers(len(self._by_instance))]
        idxs = self._by_instance[inst]
        if len(idxs) < 2:
            raise DataError(f"instance {inst} has fewer than 2 frames")
        a = int(rng.integers(len(idxs) - 1))
        i, j = idxs[a], idxs[a + 1]
        if rng.integers(2):
            i, j = j, i
        return i, j, self.flow(i, j)


@dataclass
class ArmBundle:
    spec: ArmSceneSpec
    train: ArmDataset
    test: ArmDataset


def generate_arm_dataset(spec: ArmSceneSpec) -> ArmBundle:
    """Deterministic generation: one rng stream seeded by spec.seed."""
    rng = np.random.default_rng(spec.seed)
    instances = [_sample_instance(rng) for _ in range(spec.n_instances)]
    all_records = []
    for ii, inst in enumerate(instances):
        lengths = np.asarray(inst["lengths"])
        angles = None
        for ff in range(spec.frames_per_instance):
            angles = _sample_pose(rng, lengths) if angles is None \
                else _step_pose(rng, lengths, angles)
            all_records.append({"instance": ii, "frame": ff, "angles": angles.tolist()})
    n_train_inst = max(1, min(spec.n_instances - 1, round(spec.train_fraction * spec.n_instances))) \
        if spec.n_instances > 1 else 1
    splits = {"train": [], "test": []}
    for r in all_records:
        splits["train" if r["instance"] < n_train_inst else "test"].append(r)
    if spec.n_instances == 1:
        splits["test"] = splits["train"]

    def build(records, split):
        imgs = np.zeros((len(records), spec.image_size, spec.image_size, 3), np.float32)
        ids = np.zeros((len(records), spec.image_size, spec.image_size), np.uint8)
        for n, r in enumerate(records):
            imgs[n], ids[n] = _render_frame(
                instances[r["instance"]], np.asarray(r["angles"]), spec.image_size
            )
        return ArmDataset(spec, instances, records, imgs, ids, split)

    return ArmBundle(spec, build(splits["train"], "train"), build(splits["test"], "test"))


def save_arm_dataset(bundle: ArmBundle, root: str) -> None:
    """Images as PNGs, annotations as CSVs, poses in a JSON manifest, and
    consecutive-frame flow fields in the binary record format."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "annotations"), exist_ok=True)
    os.makedirs(os.path.join(root, "flows"), exist_ok=True)
    size = bundle.spec.image_size
    manifest = {
        "kind": "synthetic_arm",
        "spec": asdict(bundle.spec),
        "instances": bundle.train.instances,
        "records": {},
    }
    for split in ("train", "test"):
        ds: ArmDataset = getattr(bundle, split)
        rows = []
        manifest["records"][split] = ds.records
        for i in range(len(ds)):
            r = ds.records[i]
            name = f"i{r['instance']:04d}_f{r['frame']:02d}.png"
            arr = np.clip(ds.images[i] * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(root, "images", name))
            pts, _ = ds.landmarks(i)
            px = norm_to_pixel(pts, size)
            row = [os.path.join("images", name)]
            for k in range(_N_SEGMENTS):
                row += [f"{px[k, 0]:.4f}", f"{px[k, 1]:.4f}"]
            row.append(str(r["instance"]))
            rows.append(row)
        header = ["path"]
        for k in range(1, _N_SEGMENTS + 1):
            header += [f"x{k}", f"y{k}"]
        header.append("identity")
        with open(os.path.join(root, "annotations", f"{split}.csv"), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(header)
            wr.writerows(rows)
        for inst, idxs in ds._by_instance.items():
            for a, b in zip(idxs[:-1], idxs[1:]):
                ra, rb = ds.records[a], ds.records[b]
                path = os.path.join(
                    root, "flows", f"i{inst:04d}_f{ra['frame']:02d}_f{rb['frame']:02d}.wfld"
                )
                save_warp_field(ds.flow(a, b), path)
    with open(os.path.join(root, "meta.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_arm_dataset(root: str) -> ArmBundle:
    meta_path = os.path.join(root, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"no manifest at {meta_path}")
    with open(meta_path) as f:
        manifest = json.load(f)
    if manifest.get("kind") != "synthetic_arm":
        raise DataError(f"{meta_path}: not an arm dataset manifest")
    spec = ArmSceneSpec(**manifest["spec"])
    instances = manifest["instances"]

    def build(records, split):
        n = len(records)
        imgs = np.zeros((n, spec.image_size, spec.image_size, 3), np.float32)
        ids = np.zeros((n, spec.image_size, spec.image_size), np.uint8)
        for k, r in enumerate(records):
            name = f"i{r['instance']:04d}_f{r['frame']:02d}.png"
            path = os.path.join(root, "images", name)
            if not os.path.isfile(path):
                raise DataError(f"missing image {path}")
            imgs[k] = np.asarray(Image.open(path), np.float32) / 255.0
            # id maps are re-rendered from the manifest poses (exact)
            _, ids[k] = _render_frame(instances[r["instance"]], np.asarray(r["angles"]), spec.image_size)
        return ArmDataset(spec, instances, records, imgs, ids, split)

    return ArmBundle(
        spec,
        build(manifest["records"]["train"], "train"),
        build(manifest["records"]["test"], "test"),
    )

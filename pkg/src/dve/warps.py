"""Random smooth warps: thin-plate splines composed with a similarity transform.

A warp field stores, for every pixel u of its own grid, the normalized
coordinates g(u) of the corresponding point in the other image, plus a
validity mask. Applying a field to an image resamples the image at g(u),
so for x' = apply_warp(x, w) the field w maps pixels of x' to locations
in x; that orientation is exactly the ground-truth correspondence used
by the training loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .coords import identity_grid, cell_center_grid
from .errors import ConfigurationError, DataError, ShapeError

_MAGIC = b"WFLD"
_VERSION = 1


@dataclass
class WarpConfig:
    """Sampling ranges for random warps.

    Displacements and translations are in normalized units (the image
    spans [-1, 1] in each axis). rotation_range is in radians; rotation,
    scale and translation are sampled uniformly within their ranges and
    composed into a similarity transform, which is then followed by a
    thin-plate-spline displacement field interpolating random offsets at
    the control points.
    """

    control_grid: tuple[int, int] = (3, 3)
    max_control_displacement: float = 0.1
    rotation_range: float = 0.2
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_range: float = 0.1
    grid_height: int = 70
    grid_width: int = 70

    def __post_init__(self):
        if self.control_grid[0] < 2 or self.control_grid[1] < 2:
            raise ConfigurationError("control_grid dims must each be >= 2")
        if not (0.0 <= self.max_control_displacement <= 0.5):
            raise ConfigurationError("max_control_displacement must be in [0, 0.5]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ConfigurationError("scale_range must satisfy 0 < lo <= hi")
        if self.rotation_range < 0 or self.translation_range < 0:
            raise ConfigurationError("ranges must be non-negative")
        if self.grid_height < 2 or self.grid_width < 2:
            raise ConfigurationError("grid dims must be >= 2")

    @classmethod
    def identity(cls, grid_height: int = 70, grid_width: int = 70) -> "WarpConfig":
        return cls(
            max_control_displacement=0.0,
            rotation_range=0.0,
            scale_range=(1.0, 1.0),
            translation_range=0.0,
            grid_height=grid_height,
            grid_width=grid_width,
        )


@dataclass
class WarpField:
    """Dense correspondence field over a pixel grid.

    coords: (H, W, 2) float32, normalized (x, y) target locations.
    valid_mask: (H, W) bool; False wherever coords leave [-1, 1] or the
    pixel has no defined correspondence (e.g. background in flow data).
    """

    coords: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise ShapeError("coords must be (H, W, 2)")
        in_domain = np.all(np.abs(self.coords) <= 1.0, axis=-1)
        if self.valid_mask is None:
            self.valid_mask = in_domain
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.coords.shape[:2]:
                raise ShapeError("valid_mask must be (H, W)")
            self.valid_mask = self.valid_mask & in_domain

    @property
    def grid_height(self) -> int:
        return self.coords.shape[0]

    @property
    def grid_width(self) -> int:
        return self.coords.shape[1]


def identity_warp_field(height: int, width: int) -> WarpField:
    return WarpField(identity_grid(height, width).astype(np.float32))


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    # phi(r) = r^2 log r, with phi(0) = 0
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def _fit_tps(controls: np.ndarray, displacements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve for kernel weights and affine terms interpolating the displacements."""
    n = controls.shape[0]
    d = np.linalg.norm(controls[:, None, :] - controls[None, :, :], axis=-1)
    k = _tps_kernel(d)
    p = np.concatenate([np.ones((n, 1)), controls], axis=1)
    sys = np.zeros((n + 3, n + 3))
    sys[:n, :n] = k
    sys[:n, n:] = p
    sys[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = displacements
    sol = np.linalg.solve(sys, rhs)
    return sol[:n], sol[n:]


def _eval_tps(pts: np.ndarray, controls: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(pts[:, None, :] - controls[None, :, :], axis=-1)
    k = _tps_kernel(d)
    p = np.concatenate([np.ones((pts.shape[0], 1)), pts], axis=1)
    return k @ w + p @ a


def control_point_grid(rows: int, cols: int) -> np.ndarray:
    """(rows*cols, 2) control points on a uniform grid over [-1, 1]^2."""
    xs = np.linspace(-1.0, 1.0, cols)
    ys = np.linspace(-1.0, 1.0, rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def sample_warp(cfg: WarpConfig, rng: np.random.Generator) -> WarpField:
    """Draw a random warp field: g(u) = T(A u) with T the TPS interpolant.

    A is the similarity transform, T(p) = p + D(p) where D interpolates
    the sampled control-point displacements. With all ranges zero the
    returned field is the identity grid exactly.
    """
    h, w = cfg.grid_height, cfg.grid_width
    base = identity_grid(h, w).reshape(-1, 2)

    theta = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    trans = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = base @ (scale * rot).T + trans

    controls = control_point_grid(*cfg.control_grid)
    disp = rng.uniform(
        -cfg.max_control_displacement, cfg.max_control_displacement, size=controls.shape
    )
    if cfg.max_control_displacement > 0:
        tw, ta = _fit_tps(controls, disp)
        pts = pts + _eval_tps(pts, controls, tw, ta)

    return WarpField(pts.reshape(h, w, 2).astype(np.float32))


def _bilinear_gather(values: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample (H, W, D) values at fractional pixel positions, clamped at edges."""
    hh, ww = values.shape[:2]
    px = np.clip(px, 0.0, ww - 1.0)
    py = np.clip(py, 0.0, hh - 1.0)
    # snap float32 round-off so sampling a stored grid at its own pixel
    # centers is exact (identity warps reproduce the image bit-for-bit)
    rx, ry = np.rint(px), np.rint(py)
    px = np.where(np.abs(px - rx) < 1e-4, rx, px)
    py = np.where(np.abs(py - ry) < 1e-4, ry, py)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def apply_warp(image: np.ndarray, w: WarpField, fill: float = 0.0) -> np.ndarray:
    """Resample image at the field's coordinates; invalid pixels get fill."""
    image = np.asarray(image)
    if image.ndim == 2:
        out = apply_warp(image[..., None], w, fill)
        return out[..., 0]
    if image.ndim != 3:
        raise ShapeError("image must be (H, W) or (H, W, C)")
    if image.shape[:2] != (w.grid_height, w.grid_width):
        raise ShapeError(
            f"field grid {w.grid_height}x{w.grid_width} does not match "
            f"image {image.shape[0]}x{image.shape[1]}"
        )
    hh, ww = image.shape[:2]
    px = (w.coords[..., 0].astype(np.float64) + 1.0) * (ww - 1) / 2.0
    py = (w.coords[..., 1].astype(np.float64) + 1.0) * (hh - 1) / 2.0
    out = _bilinear_gather(image.astype(np.float64), px, py)
    out[~w.valid_mask] = fill
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def warp_points(w: WarpField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the field at arbitrary normalized points.

    Returns (coords (N, 2) float64, valid (N,) bool). Points outside the
    field's own domain are clamped and flagged invalid; interpolated
    coordinates landing outside [-1, 1] are flagged too, as are points
    whose bilinear support is mostly masked.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError("pts must be (N, 2)")
    hh, ww = w.grid_height, w.grid_width
    in_domain = np.all(np.abs(pts) <= 1.0, axis=1)
    px = (pts[:, 0] + 1.0) * (ww - 1) / 2.0
    py = (pts[:, 1] + 1.0) * (hh - 1) / 2.0
    out = _bilinear_gather(w.coords.astype(np.float64), px, py)
    mask_frac = _bilinear_gather(
        w.valid_mask.astype(np.float64)[..., None], px, py
    )[..., 0]
    valid = in_domain & (mask_frac > 0.5) & np.all(np.abs(out) <= 1.0, axis=1)
    return out, valid


def downsample_warp(w: WarpField, factor: int) -> WarpField:
    """Subsample the field at coarse cell centers (receptive-field centers)."""
    if factor < 1:
        raise ConfigurationError("factor must be >= 1")
    if factor == 1:
        return replace(w)
    hh, ww = w.grid_height, w.grid_width
    if hh % factor or ww % factor:
        raise ShapeError(f"grid {hh}x{ww} not divisible by factor {factor}")
    centers = cell_center_grid(hh // factor, ww // factor, factor).reshape(-1, 2)
    coords, valid = warp_points(w, centers)
    shape = (hh // factor, ww // factor)
    return WarpField(
        coords.reshape(*shape, 2).astype(np.float32), valid.reshape(shape)
    )


def invert_warp(w: WarpField, n_iters: int = 30, tol: float = 1e-4) -> WarpField:
    """Numerically invert the field by fixed-point iteration.

    Solves g(q) = p for each pixel p of the grid; works for the moderate
    smooth warps produced here (displacement gradients well below 1).
    """
    hh, ww = w.grid_height, w.grid_width
    p = identity_grid(hh, ww).reshape(-1, 2)
    q = p.copy()
    for _ in range(n_iters):
        g_q, _ = warp_points(w, q)
        resid = g_q - p
        q = q - resid
        if np.max(np.abs(resid)) < tol:
            break
    g_q, src_valid = warp_points(w, q)
    converged = np.linalg.norm(g_q - p, axis=1) < 10 * tol
    valid = converged & src_valid & np.all(np.abs(q) <= 1.0, axis=1)
    return WarpField(q.reshape(hh, ww, 2).astype(np.float32), valid.reshape(hh, ww))


def save_warp_field(w: WarpField, path: str) -> None:
    """Write header (magic, version, dims) + two float32 planes + uint8 mask."""
    header = _MAGIC + struct.pack("<HHII", _VERSION, 0, w.grid_height, w.grid_width)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(w.coords[..., 0], dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(w.coords[..., 1], dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(w.valid_mask, dtype=np.uint8).tobytes())


def load_warp_field(path: str) -> WarpField:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a warp field record")
    version, _, hh, ww = struct.unpack("<HHII", raw[4:16])
    if version != _VERSION:
        raise DataError(f"{path}: unsupported record version {version}")
    plane = hh * ww * 4
    need = 16 + 2 * plane + hh * ww
    if len(raw) != need:
        raise DataError(f"{path}: truncated record ({len(raw)} of {need} bytes)")
    cx = np.frombuffer(raw, dtype="<f4", count=hh * ww, offset=16).reshape(hh, ww)
    cy = np.frombuffer(raw, dtype="<f4", count=hh * ww, offset=16 + plane).reshape(hh, ww)
    mask = np.frombuffer(raw, dtype=np.uint8, count=hh * ww, offset=16 + 2 * plane)
    coords = np.stack([cx, cy], axis=-1)
    return WarpField(coords.copy(), mask.reshape(hh, ww).astype(bool).copy())

import os

import numpy as np
import pytest
from scipy.interpolate import RBFInterpolator

from dve.coords import cell_center_grid, identity_grid
from dve.errors import ConfigurationError, DataError, ShapeError
from dve.warps import (
    WarpConfig,
    WarpField,
    apply_warp,
    control_point_grid,
    downsample_warp,
    identity_warp_field,
    invert_warp,
    load_warp_field,
    sample_warp,
    save_warp_field,
    warp_points,
)


def replay_draws(cfg: WarpConfig, seed: int):
    """Re-draw the random warp parameters with the sampler's rng schedule."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    trans = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2)
    n = cfg.control_grid[0] * cfg.control_grid[1]
    disp = rng.uniform(
        -cfg.max_control_displacement, cfg.max_control_displacement, size=(n, 2)
    )
    return theta, scale, trans, disp


def test_identity_config_gives_identity_grid():
    cfg = WarpConfig.identity(grid_height=12, grid_width=9)
    w = sample_warp(cfg, np.random.default_rng(0))
    assert np.array_equal(w.coords, identity_grid(12, 9).astype(np.float32))
    assert w.valid_mask.all()


def test_identity_field_helper_matches_sampler():
    w1 = identity_warp_field(8, 8)
    w2 = sample_warp(WarpConfig.identity(8, 8), np.random.default_rng(3))
    assert np.array_equal(w1.coords, w2.coords)


def test_translation_only_field_is_constant_offset():
    cfg = WarpConfig(
        max_control_displacement=0.0,
        rotation_range=0.0,
        scale_range=(1.0, 1.0),
        translation_range=0.2,
        grid_height=16,
        grid_width=16,
    )
    seed = 11
    w = sample_warp(cfg, np.random.default_rng(seed))
    _, _, trans, _ = replay_draws(cfg, seed)
    expect = identity_grid(16, 16) + trans
    assert np.max(np.abs(w.coords - expect)) < 1e-6


def test_rotation_scale_field_matches_replayed_similarity():
    cfg = WarpConfig(
        max_control_displacement=0.0,
        rotation_range=0.3,
        scale_range=(0.9, 1.1),
        translation_range=0.1,
        grid_height=20,
        grid_width=15,
    )
    seed = 5
    w = sample_warp(cfg, np.random.default_rng(seed))
    theta, scale, trans, _ = replay_draws(cfg, seed)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    base = identity_grid(20, 15).reshape(-1, 2)
    expect = (base @ (scale * rot).T + trans).reshape(20, 15, 2)
    assert np.max(np.abs(w.coords - expect)) < 1e-6


def test_tps_interpolates_control_displacements_exactly():
    # 65x65 grid puts the 3x3 control points on pixel centers, so the
    # stored field can be read back at them without interpolation error
    cfg = WarpConfig(
        control_grid=(3, 3),
        max_control_displacement=0.1,
        rotation_range=0.0,
        scale_range=(1.0, 1.0),
        translation_range=0.0,
        grid_height=65,
        grid_width=65,
    )
    seed = 7
    w = sample_warp(cfg, np.random.default_rng(seed))
    _, _, _, disp = replay_draws(cfg, seed)
    controls = control_point_grid(3, 3)
    got, valid = warp_points(w, controls)
    expect = controls + disp
    inside = np.all(np.abs(expect) <= 1.0, axis=1)
    assert np.max(np.abs(got[inside] - expect[inside])) < 1e-6
    assert valid[inside].all()


def test_tps_displacement_matches_scipy_thin_plate_oracle():
    cfg = WarpConfig(
        control_grid=(4, 4),
        max_control_displacement=0.12,
        rotation_range=0.0,
        scale_range=(1.0, 1.0),
        translation_range=0.0,
        grid_height=33,
        grid_width=33,
    )
    seed = 19
    w = sample_warp(cfg, np.random.default_rng(seed))
    _, _, _, disp = replay_draws(cfg, seed)
    controls = control_point_grid(4, 4)
    oracle = RBFInterpolator(controls, disp, kernel="thin_plate_spline", degree=1)
    base = identity_grid(33, 33).reshape(-1, 2)
    expect = base + oracle(base)
    got = w.coords.reshape(-1, 2)
    keep = np.all(np.abs(expect) <= 1.0, axis=1)
    assert np.max(np.abs(got[keep] - expect[keep])) < 1e-5


def test_sampled_warp_is_smooth():
    cfg = WarpConfig(grid_height=48, grid_width=48)
    for seed in range(5):
        w = sample_warp(cfg, np.random.default_rng(seed))
        dx = np.diff(w.coords, axis=1)
        dy = np.diff(w.coords, axis=0)
        # neighboring pixels are 2/(n-1) apart; a smooth moderate warp
        # cannot stretch that spacing by more than ~3x
        step = 2.0 / 47
        assert np.max(np.linalg.norm(dx, axis=-1)) < 3 * step
        assert np.max(np.linalg.norm(dy, axis=-1)) < 3 * step


def test_out_of_domain_coords_are_masked():
    coords = identity_grid(6, 6)
    coords[:, -1, 0] = 1.05
    w = WarpField(coords)
    assert not w.valid_mask[:, -1].any()
    assert w.valid_mask[:, :-1].all()
    got, valid = warp_points(w, np.array([[0.95, 0.0]]))
    assert not valid[0]


def test_warp_field_shape_validation():
    with pytest.raises(ShapeError):
        WarpField(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        WarpField(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        WarpField(np.zeros((4, 4, 2)), valid_mask=np.ones((3, 4), dtype=bool))


def test_warp_config_validation():
    with pytest.raises(ConfigurationError):
        WarpConfig(control_grid=(1, 3))
    with pytest.raises(ConfigurationError):
        WarpConfig(max_control_displacement=0.9)
    with pytest.raises(ConfigurationError):
        WarpConfig(scale_range=(0.0, 1.0))
    with pytest.raises(ConfigurationError):
        WarpConfig(rotation_range=-0.1)
    with pytest.raises(ConfigurationError):
        WarpConfig(grid_height=1)


def test_apply_identity_warp_is_exact():
    rng = np.random.default_rng(2)
    img = rng.random((17, 13, 3)).astype(np.float32)
    out = apply_warp(img, identity_warp_field(17, 13))
    assert np.array_equal(out, img)


def test_apply_warp_integer_shift_matches_roll():
    rng = np.random.default_rng(4)
    img = rng.random((16, 16)).astype(np.float32)
    # shift sampling locations one pixel right: out[y, x] = img[y, x+1]
    step = 2.0 / 15
    coords = identity_grid(16, 16)
    coords[..., 0] += step
    w = WarpField(coords)
    out = apply_warp(img, w, fill=-1.0)
    expect = np.roll(img, -1, axis=1)
    assert np.allclose(out[:, :-1], expect[:, :-1], atol=1e-6)
    assert np.all(out[:, -1] == -1.0)  # sampled past the right edge


def test_apply_warp_is_linear_in_the_image():
    rng = np.random.default_rng(5)
    img = rng.random((20, 20, 2))
    w = sample_warp(WarpConfig(grid_height=20, grid_width=20), rng)
    a, b = 2.5, -0.75
    lhs = apply_warp(a * img + b * np.ones_like(img), w)
    rhs = a * apply_warp(img, w) + b * apply_warp(np.ones_like(img), w)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_apply_warp_shape_errors():
    w = identity_warp_field(8, 8)
    with pytest.raises(ShapeError):
        apply_warp(np.zeros((9, 8)), w)
    with pytest.raises(ShapeError):
        apply_warp(np.zeros((8, 8, 1, 1)), w)


def test_warp_points_interpolates_between_pixels():
    # linear field: g(p) = 0.5 p, interpolation of a linear map is exact
    coords = identity_grid(9, 9) * 0.5
    w = WarpField(coords)
    pts = np.random.default_rng(6).uniform(-0.9, 0.9, size=(40, 2))
    got, valid = warp_points(w, pts)
    assert valid.all()
    assert np.max(np.abs(got - 0.5 * pts)) < 1e-6


def test_warp_points_rejects_bad_shape():
    with pytest.raises(ShapeError):
        warp_points(identity_warp_field(4, 4), np.zeros((3,)))


def test_downsample_identity_gives_cell_centers():
    w = downsample_warp(identity_warp_field(64, 64), 2)
    expect = cell_center_grid(32, 32, 2)
    assert w.coords.shape == (32, 32, 2)
    assert np.max(np.abs(w.coords - expect)) < 1e-6
    assert w.valid_mask.all()


def test_downsample_translation_keeps_offset():
    coords = identity_grid(32, 32)
    coords[..., 1] += 0.11
    w = downsample_warp(WarpField(coords), 4)
    expect = cell_center_grid(8, 8, 4)
    assert np.max(np.abs(w.coords[..., 0] - expect[..., 0])) < 1e-6
    assert np.max(np.abs(w.coords[..., 1] - expect[..., 1] - 0.11)) < 1e-6


def test_downsample_validation():
    with pytest.raises(ShapeError):
        downsample_warp(identity_warp_field(10, 10), 4)
    with pytest.raises(ConfigurationError):
        downsample_warp(identity_warp_field(10, 10), 0)
    w = identity_warp_field(10, 10)
    same = downsample_warp(w, 1)
    assert np.array_equal(same.coords, w.coords)


def test_invert_identity_is_identity():
    inv = invert_warp(identity_warp_field(12, 12))
    assert np.max(np.abs(inv.coords - identity_grid(12, 12))) < 1e-5


def test_invert_translation_negates_offset():
    coords = identity_grid(24, 24)
    coords[..., 0] += 0.15
    inv = invert_warp(WarpField(coords))
    interior = inv.valid_mask
    err = np.abs(inv.coords[..., 0] + 0.15 - identity_grid(24, 24)[..., 0])
    assert interior.sum() > 0.5 * interior.size
    assert np.max(err[interior]) < 1e-4


def test_invert_roundtrip_on_random_warps():
    cfg = WarpConfig(grid_height=40, grid_width=40)
    for seed in (0, 1, 2):
        w = sample_warp(cfg, np.random.default_rng(seed))
        inv = invert_warp(w)
        pts = identity_grid(40, 40).reshape(-1, 2)
        fwd, _ = warp_points(w, inv.coords.reshape(-1, 2))
        ok = inv.valid_mask.reshape(-1)
        assert ok.sum() > 0.5 * ok.size
        err = np.linalg.norm(fwd[ok] - pts[ok], axis=1)
        assert np.max(err) < 1e-2


def test_save_load_roundtrip(tmp_path):
    w = sample_warp(WarpConfig(grid_height=14, grid_width=18), np.random.default_rng(8))
    path = os.path.join(tmp_path, "field.wfld")
    save_warp_field(w, path)
    back = load_warp_field(path)
    assert np.array_equal(back.coords, w.coords)
    assert np.array_equal(back.valid_mask, w.valid_mask)


def test_load_rejects_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "junk.wfld")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError):
        load_warp_field(path)


def test_load_rejects_truncated_record(tmp_path):
    w = identity_warp_field(6, 6)
    path = os.path.join(tmp_path, "short.wfld")
    save_warp_field(w, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:-5])
    with pytest.raises(DataError):
        load_warp_field(path)


def test_load_rejects_unknown_version(tmp_path):
    w = identity_warp_field(4, 4)
    path = os.path.join(tmp_path, "v9.wfld")
    save_warp_field(w, path)
    raw = bytearray(open(path, "rb").read())
    raw[4] = 9
    with open(path, "wb") as f:
        f.write(bytes(raw))
    with pytest.raises(DataError):
        load_warp_field(path)

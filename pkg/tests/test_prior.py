import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from priorlane.autodiff import Tensor, check_gradients
from priorlane.errors import ConfigError, FormatError, UsageError
from priorlane.prior import (
    GridMap, LocalPrior, Pose, area_resize, crop_local, crop_window, embed_knowledge,
    embed_patches, load_gridmap, load_pgm, normalize_angle, patchify, save_gridmap,
    simulate_coarse_pose,
)


def random_map(seed=0, h=60, w=50, res=0.1):
    rng = np.random.default_rng(seed)
    return GridMap(rng.integers(0, 256, size=(h, w, 1), dtype=np.uint8), res, (0.0, 0.0))


def oracle_window(grid, pose, n):
    """Per-cell nearest-neighbour lookup written out longhand."""
    out = np.zeros((n, n, grid.channels), dtype=np.uint8)
    c = n // 2
    for i in range(n):
        for j in range(n):
            f = (c - i) * grid.resolution
            r = (j - c) * grid.resolution
            x = pose.x + f * math.cos(pose.heading) + r * math.sin(pose.heading)
            y = pose.y + f * math.sin(pose.heading) - r * math.cos(pose.heading)
            col = int(round((x - grid.origin[0]) / grid.resolution))
            row = int(round((y - grid.origin[1]) / grid.resolution))
            if 0 <= row < grid.height and 0 <= col < grid.width:
                out[i, j] = grid.cells[row, col]
    return out


# -- crop ---------------------------------------------------------------------------

def test_window_cells_for_twenty_metres():
    g = GridMap(np.ones((400, 400, 1), dtype=np.uint8), 0.1)
    p = crop_local(g, Pose(20.0, 20.0, 0.0), 20.0)
    assert p.window_cells == 200
    assert p.cells.shape == (200, 200, 1)
    assert p.cells.dtype == np.float32


@given(st.floats(1.0, 29.0), st.floats(1.0, 29.0), st.floats(-math.pi, math.pi))
@settings(max_examples=20, deadline=None)
def test_all_ones_map_gives_all_ones_crop_inside(x, y, h):
    g = GridMap(np.ones((300, 300, 1), dtype=np.uint8), 0.1)
    p = crop_local(g, Pose(x, y, h), 1.0, size=10)
    # windows that stay inside the map are all ones
    if 0.8 <= x <= 29.1 and 0.8 <= y <= 29.1:
        assert np.all(p.cells == 1.0)


def test_quarter_turn_matches_flipped_axis_aligned_window():
    g = random_map(1)
    r0, c0, n = 30, 25, 20
    pose = Pose(c0 * g.resolution, r0 * g.resolution, math.pi / 2)
    win = crop_window(g, pose, n * g.resolution)
    c = n // 2
    # heading +y: forward maps to increasing rows, right to increasing columns
    expected = np.array([[g.cells[r0 + c - i, c0 + j - c, 0] for j in range(n)] for i in range(n)])
    np.testing.assert_array_equal(win[:, :, 0], expected)
    np.testing.assert_array_equal(win, oracle_window(g, pose, n))
    # heading 0 is the transposed layout of the same neighbourhood
    win0 = crop_window(g, Pose(pose.x, pose.y, 0.0), n * g.resolution)
    expected0 = np.array([[g.cells[r0 - (j - c), c0 + c - i, 0] for j in range(n)] for i in range(n)])
    np.testing.assert_array_equal(win0[:, :, 0], expected0)


@pytest.mark.parametrize("heading", [0.3, -2.0, 2.9])
def test_crop_matches_longhand_oracle(heading):
    g = random_map(2)
    pose = Pose(2.43, 3.01, heading)
    np.testing.assert_array_equal(crop_window(g, pose, 1.6), oracle_window(g, pose, 16))


@pytest.mark.parametrize("heading", [0.0, math.pi / 2, math.pi, -math.pi / 2])
@pytest.mark.parametrize("k", [1, 3])
def test_translation_along_heading_shifts_window(heading, k):
    cells = np.zeros((80, 80, 1), dtype=np.uint8)
    cells[40, 40] = 1
    g = GridMap(cells, 0.1)
    base = Pose(4.0, 4.0, heading)
    moved = Pose(base.x + k * 0.1 * math.cos(heading), base.y + k * 0.1 * math.sin(heading), heading)
    w0 = crop_window(g, base, 2.0)
    wk = crop_window(g, moved, 2.0)
    assert w0.sum() == 1 and wk.sum() == 1
    i0 = np.argwhere(w0[:, :, 0])[0]
    ik = np.argwhere(wk[:, :, 0])[0]
    assert ik[0] - i0[0] == k and ik[1] == i0[1]
    np.testing.assert_array_equal(wk[k:], w0[:-k])


def test_pose_outside_map_gives_zero_crop_and_warning(caplog):
    g = GridMap(np.ones((10, 10, 1), dtype=np.uint8), 0.1)
    with caplog.at_level(logging.WARNING):
        p = crop_local(g, Pose(100.0, 100.0, 0.0), 20.0)
    assert p.outside_map
    assert not p.cells.any()
    assert "outside" in caplog.text


def test_crop_cells_outside_map_read_zero():
    g = GridMap(np.ones((10, 10, 1), dtype=np.uint8), 1.0)
    p = crop_local(g, Pose(0.0, 0.0, 0.0), 10.0, size=10)
    assert not p.outside_map
    assert 0.0 < p.cells.mean() < 1.0


def test_nonpositive_range_is_usage_error():
    g = GridMap(np.ones((10, 10, 1), dtype=np.uint8), 1.0)
    with pytest.raises(UsageError):
        crop_local(g, Pose(5, 5, 0), 0.0)


def test_area_resize_halving_equals_block_mean():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(40, 40, 2))
    block = a.reshape(20, 2, 20, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(area_resize(a, 20), block, atol=1e-12)


def test_area_resize_preserves_mean_for_non_integer_ratio():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(30, 30, 1))
    np.testing.assert_allclose(area_resize(a, 200).mean(), a.mean(), atol=1e-12)


@pytest.mark.parametrize("range_m", [5.0, 10.0, 20.0, 40.0])
def test_token_count_independent_of_range(range_m):
    g = GridMap(np.ones((600, 600, 1), dtype=np.uint8), 0.1)
    p = crop_local(g, Pose(30.0, 30.0, 0.4), range_m)
    proj = Tensor(np.ones((100, 8)))
    assert embed_knowledge(p, proj, 10).tokens.shape == (400, 8)


# -- coarse pose ------------------------------------------------------------------------

def test_zero_noise_keeps_pose():
    p = Pose(1.0, 2.0, 0.5)
    assert simulate_coarse_pose(p, 0.0, 0.0, 9) == p


def test_coarse_pose_deterministic_per_seed():
    p = Pose(1.0, 2.0, 0.5)
    assert simulate_coarse_pose(p, 0.3, 1.0, 42) == simulate_coarse_pose(p, 0.3, 1.0, 42)
    assert simulate_coarse_pose(p, 0.3, 1.0, 42) != simulate_coarse_pose(p, 0.3, 1.0, 43)


def test_coarse_pose_noise_is_uniform():
    p = Pose(0.0, 0.0, 0.0)
    draws = np.array([simulate_coarse_pose(p, 0.5, 2.0, s).as_array() for s in range(10_000)])
    for col, bound in ((0, 2.0), (1, 2.0), (2, 0.5)):
        assert np.all(np.abs(draws[:, col]) <= bound)
        res = stats.kstest(draws[:, col], stats.uniform(loc=-bound, scale=2 * bound).cdf)
        assert res.pvalue > 1e-3


def test_negative_noise_bound_rejected():
    with pytest.raises(UsageError):
        simulate_coarse_pose(Pose(0, 0, 0), -0.1, 0.0, 0)


@given(st.floats(-50.0, 50.0))
def test_heading_normalized(h):
    a = Pose(0.0, 0.0, h).heading
    assert -math.pi < a <= math.pi
    assert math.isclose(math.cos(a), math.cos(h), abs_tol=1e-9)
    assert math.isclose(math.sin(a), math.sin(h), abs_tol=1e-9)


def test_normalize_angle_boundaries():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi


# -- embedding ---------------------------------------------------------------------------

def test_default_embedding_shape():
    prior = LocalPrior(np.random.default_rng(0).uniform(size=(200, 200, 1)).astype(np.float32), 20.0, Pose(0, 0, 0))
    emb = embed_knowledge(prior, Tensor(np.zeros((100, 64))), 10)
    assert emb.tokens.shape == (400, 64)
    assert emb.grid == 20 and emb.patch_size == 10 and emb.embed_dim == 64


def test_zero_projection_gives_zero_tokens():
    cells = np.random.default_rng(1).uniform(size=(40, 40, 1))
    emb = embed_patches(cells, Tensor(np.zeros((100, 5))), 10)
    assert not emb.tokens.data.any()


def test_patchify_row_major_layout():
    cells = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    rows = patchify(cells, 2)
    np.testing.assert_array_equal(rows[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(rows[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(rows[2], [8, 9, 12, 13])


def test_indivisible_patch_is_config_error():
    with pytest.raises(ConfigError):
        patchify(np.zeros((200, 200, 1)), 7)


def test_patch_permutation_permutes_tokens():
    rng = np.random.default_rng(5)
    cells = rng.uniform(size=(40, 40, 2))
    proj = Tensor(rng.normal(size=(200, 6)))
    g, p = 4, 10
    blocks = cells.reshape(g, p, g, p, 2).transpose(0, 2, 1, 3, 4).reshape(g * g, p, p, 2)
    perm = rng.permutation(g * g)
    shuffled = blocks[perm].reshape(g, g, p, p, 2).transpose(0, 2, 1, 3, 4).reshape(40, 40, 2)
    a = embed_patches(cells, proj, p).tokens.data
    b = embed_patches(shuffled, proj, p).tokens.data
    np.testing.assert_array_equal(b, a[perm])


def test_projection_gradcheck():
    rng = np.random.default_rng(6)
    cells = rng.uniform(size=(2, 20, 20, 1))
    proj = Tensor(rng.normal(size=(100, 4)), requires_grad=True)
    target = rng.normal(size=(2, 4, 4))

    def loss():
        t = embed_patches(cells, proj, 10).tokens
        return ((t - Tensor(target)) ** 2).mean()
    assert max(check_gradients(loss, [proj]).values()) < 1e-5


# -- files ---------------------------------------------------------------------------------

def test_gridmap_round_trip(tmp_path):
    g = GridMap(np.random.default_rng(7).integers(0, 2, size=(13, 17, 2), dtype=np.uint8), 0.25, (-3.5, 8.0))
    save_gridmap(tmp_path / "m.plgm", g)
    h = load_gridmap(tmp_path / "m.plgm")
    np.testing.assert_array_equal(h.cells, g.cells)
    assert h.resolution == 0.25 and h.origin == (-3.5, 8.0)


def test_gridmap_bad_magic_and_truncation(tmp_path):
    g = GridMap(np.ones((4, 4, 1), dtype=np.uint8), 1.0)
    path = tmp_path / "m.plgm"
    save_gridmap(path, g)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_gridmap(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_gridmap(path)


def test_pgm_import(tmp_path):
    img = np.array([[0, 200, 255], [10, 128, 90]], dtype=np.uint8)
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n# comment\n3 2\n255\n" + img.tobytes())
    g = load_pgm(path, 0.5)
    np.testing.assert_array_equal(g.cells[:, :, 0], img)
    t = load_pgm(path, 0.5, threshold=128)
    np.testing.assert_array_equal(t.cells[:, :, 0], [[0, 1, 1], [0, 1, 0]])
    path.write_bytes(b"P2\n3 2\n255\n0 1 2 3 4 5")
    with pytest.raises(FormatError):
        load_pgm(path, 0.5)


def test_gridmap_invariants():
    with pytest.raises(ConfigError):
        GridMap(np.ones((0, 3, 1), dtype=np.uint8), 1.0)
    with pytest.raises(ConfigError):
        GridMap(np.ones((2, 3, 1), dtype=np.uint8), 0.0)

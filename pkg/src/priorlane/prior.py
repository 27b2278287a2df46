"""BEV prior-knowledge maps: storage, pose-conditioned local crops, and
patch-token embedding.

Frames: a map cell ``(row, col)`` sits at world ``origin + (col, row) * resolution``.
A local crop is expressed in the vehicle frame with the heading pointing to
row 0 ("up") and the vehicle's right towards increasing columns.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, functional as F
from .errors import ConfigError, FormatError, UsageError

log = logging.getLogger(__name__)

CROP_SIZE = 200
GRIDMAP_MAGIC = b"PLGM"
GRIDMAP_VERSION = 1


def normalize_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass
class GridMap:
    cells: np.ndarray  # H x W x C, uint8
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim == 2:
            cells = cells[:, :, None]
        if cells.ndim != 3 or min(cells.shape) < 1:
            raise ConfigError(f"grid map cells must be H x W x C with positive extents, got {cells.shape}")
        if not self.resolution > 0:
            raise ConfigError(f"grid map resolution must be positive, got {self.resolution}")
        self.cells = np.ascontiguousarray(cells, dtype=np.uint8)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def channels(self) -> int:
        return self.cells.shape[2]

    def world_to_cell(self, x, y):
        col = np.rint((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.rint((np.asarray(y) - self.origin[1]) / self.resolution).astype(np.int64)
        return row, col

    def cell_to_world(self, row, col):
        return (self.origin[0] + np.asarray(col) * self.resolution,
                self.origin[1] + np.asarray(row) * self.resolution)

    def contains(self, x: float, y: float) -> bool:
        r, c = self.world_to_cell(x, y)
        return bool(0 <= r < self.height and 0 <= c < self.width)

    def lookup(self, x, y) -> np.ndarray:
        """Nearest-neighbour read; outside cells read 0. Returns (..., C)."""
        r, c = self.world_to_cell(x, y)
        inside = (r >= 0) & (r < self.height) & (c >= 0) & (c < self.width)
        out = self.cells[np.where(inside, r, 0), np.where(inside, c, 0)]
        return np.where(inside[..., None], out, 0).astype(np.uint8)


@dataclass
class LocalPrior:
    cells: np.ndarray  # S x S x C, float32 fractions of occupied source cells
    perception_range: float
    pose: Pose
    outside_map: bool = False
    window_cells: int = 0

    @property
    def size(self) -> int:
        return self.cells.shape[0]


@dataclass
class KnowledgeEmbedding:
    tokens: Tensor  # (B,) L x E_p
    patch_size: int
    grid: int = field(default=0)

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """Rows give the fraction of each output cell covered by each input cell."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges_out[:-1, None], edges_out[1:, None]
    k = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, k + 1) - np.maximum(lo, k), 0.0, None)
    return overlap / (hi - lo)


def area_resize(raster: np.ndarray, size: int) -> np.ndarray:
    """Area-average resample of an H x W x C raster to size x size."""
    h, w = raster.shape[:2]
    if h == size and w == size:
        return raster.astype(np.float64)
    ar = _area_weights(size, h)
    ac = _area_weights(size, w)
    return np.einsum("ih,hwc,jw->ijc", ar, raster.astype(np.float64), ac)


def crop_window_offsets(n: int, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward and rightward metric offsets of each crop cell (n x n)."""
    idx = np.arange(n)
    fwd = (n // 2 - idx) * resolution
    right = (idx - n // 2) * resolution
    return fwd[:, None] * np.ones((1, n)), np.ones((n, 1)) * right[None, :]


def crop_window(grid: GridMap, pose: Pose, range_m: float) -> np.ndarray:
    """Nearest-neighbour n x n x C window around ``pose`` in the vehicle frame."""
    if not range_m > 0:
        raise UsageError(f"perception range must be positive, got {range_m}")
    n = max(1, int(round(range_m / grid.resolution)))
    fwd, right = crop_window_offsets(n, grid.resolution)
    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    wx = pose.x + fwd * ch + right * sh
    wy = pose.y + fwd * sh - right * ch
    return grid.lookup(wx, wy)


def crop_local(grid: GridMap, pose: Pose, range_m: float, size: int = CROP_SIZE) -> LocalPrior:
    """Vehicle-centred crop of side ``range_m`` metres, resized to size x size."""
    if not range_m > 0:
        raise UsageError(f"perception range must be positive, got {range_m}")
    n = max(1, int(round(range_m / grid.resolution)))
    if not grid.contains(pose.x, pose.y):
        log.warning("pose (%.2f, %.2f) lies outside the grid map; prior is empty", pose.x, pose.y)
        cells = np.zeros((size, size, grid.channels), dtype=np.float32)
        return LocalPrior(cells, range_m, pose, outside_map=True, window_cells=n)
    window = crop_window(grid, pose, range_m)
    cells = area_resize(window, size).astype(np.float32)
    return LocalPrior(cells, range_m, pose, outside_map=False, window_cells=n)


def simulate_coarse_pose(pose: Pose, rot_noise_max: float, trans_noise_max: float, seed) -> Pose:
    """Uniform heading and x/y perturbation, deterministic per seed."""
    if rot_noise_max < 0 or trans_noise_max < 0:
        raise UsageError("noise bounds must be non-negative")
    rng = np.random.default_rng(seed)
    dh, dx, dy = rng.uniform(-1.0, 1.0, size=3)
    return Pose(pose.x + dx * trans_noise_max, pose.y + dy * trans_noise_max,
                pose.heading + dh * rot_noise_max)


def patchify(cells: np.ndarray, patch: int) -> np.ndarray:
    """(B,) S x S x C raster -> (B,) L x (P*P*C) rows, patches in row-major order.

    Within a patch, values are ordered (row, col, channel).
    """
    single = cells.ndim == 3
    arr = cells[None] if single else cells
    b, s, s2, c = arr.shape
    if s != s2 or s % patch:
        raise ConfigError(f"patch size {patch} does not divide crop size {s}x{s2}")
    g = s // patch
    out = arr.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, patch * patch * c)
    return out[0] if single else out


def embed_patches(cells: np.ndarray, projection: Tensor, patch: int) -> KnowledgeEmbedding:
    rows = patchify(np.asarray(cells, dtype=np.float64), patch)
    if projection.shape[0] != rows.shape[-1]:
        raise ConfigError(f"projection expects {projection.shape[0]} inputs, patches have {rows.shape[-1]}")
    tokens = F.linear(Tensor(rows), projection)
    return KnowledgeEmbedding(tokens, patch, cells.shape[-2] // patch)


def embed_knowledge(prior: LocalPrior, projection: Tensor, patch: int = 10) -> KnowledgeEmbedding:
    """Split the crop into P x P patches and project each to an E_p vector."""
    return embed_patches(prior.cells, projection, patch)


# -- file formats ---------------------------------------------------------------

def save_gridmap(path, grid: GridMap) -> None:
    h, w, c = grid.cells.shape
    header = GRIDMAP_MAGIC + struct.pack("<IIIIfdd", GRIDMAP_VERSION, h, w, c,
                                         grid.resolution, grid.origin[0], grid.origin[1])
    Path(path).write_bytes(header + grid.cells.tobytes())


def load_gridmap(path) -> GridMap:
    buf = Path(path).read_bytes()
    if buf[:4] != GRIDMAP_MAGIC:
        raise FormatError("not a grid map: bad magic")
    head = struct.calcsize("<IIIIfdd")
    if len(buf) < 4 + head:
        raise FormatError("truncated grid map header")
    version, h, w, c, res, ox, oy = struct.unpack_from("<IIIIfdd", buf, 4)
    if version != GRIDMAP_VERSION:
        raise FormatError(f"unsupported grid map version {version}")
    body = buf[4 + head:]
    if len(body) != h * w * c:
        raise FormatError(f"grid map body has {len(body)} bytes, expected {h * w * c}")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()
    return GridMap(cells, float(res), (ox, oy))


def load_pgm(path, resolution: float, origin=(0.0, 0.0), threshold: int | None = None) -> GridMap:
    """Import an 8-bit binary PGM (P5) as a single-channel map.

    With ``threshold`` set, pixels >= threshold become 1 and the rest 0.
    """
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM raster")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    if threshold is not None:
        img = (img >= threshold).astype(np.uint8)
    return GridMap(img[:, :, None].copy(), resolution, origin)

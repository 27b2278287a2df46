"""Deterministic synthetic lane scenes: BEV world, pinhole rendering, dataset files.

World geometry is described by a reference curve (the ego-lane centre) with
arc length ``s`` and signed lateral offset ``u`` (left positive). The vehicle
always drives in the rightmost lane; the road extends to the left by
``lane_count`` lanes. Lines, left to right: a solid yellow road edge, white
dividers, and a white right edge. Straight roads may carry a junction ahead,
announced by a stop line.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .prior import CROP_SIZE, GridMap, LocalPrior, Pose, crop_local, simulate_coarse_pose

LANE_WIDTH = 3.5
ROAD_MARGIN = 0.5
ZJLAB_CLASSES = ("background", "white", "yellow", "stop")
BACKGROUND, WHITE, YELLOW, STOP = 0, 1, 2, 3

WHITE_PAINT = np.array([0.85, 0.85, 0.85])
YELLOW_PAINT = np.array([1.0, 0.85, 0.70])  # same channel mean as white


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    lane_count: tuple = (1, 3)
    max_curvature: float = 1.0 / 60.0
    straight_probability: float = 0.5
    junction_probability: float = 0.3
    label_mode: str = "zjlab"           # or "instance"
    max_lanes: int = 4
    occluders: tuple = (0, 3)
    occluder_size: tuple = (12, 40)     # pixels, min/max side
    image_height: int = 64
    image_width: int = 128
    camera_height: float = 1.5
    camera_pitch_deg: float = 25.0
    camera_hfov_deg: float = 60.0
    supersample: int = 3
    line_width: float = 0.2
    stop_line_width: float = 0.45
    dash_probability: float = 0.5
    desaturate_probability: float = 0.5
    pixel_noise: float = 0.04
    lateral_jitter: float = 0.3
    yaw_jitter_deg: float = 3.0
    rot_noise_deg: float = 15.0
    trans_noise: float = 0.0
    perception_range: float = 20.0
    resolution: float = 0.1
    crop_size: int = CROP_SIZE

    def validate(self) -> None:
        lo, hi = self.lane_count
        if lo < 1 or hi < lo:
            raise ConfigError(f"lane_count range {self.lane_count} must satisfy 1 <= min <= max")
        if self.label_mode not in ("zjlab", "instance"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.max_lanes < hi + 1:
            raise ConfigError(f"max_lanes {self.max_lanes} cannot hold {hi + 1} lines")
        if self.image_height % 32 or self.image_width % 32:
            raise ConfigError("image extents must be divisible by 32")
        if self.perception_range <= 0 or self.resolution <= 0:
            raise ConfigError("perception range and resolution must be positive")
        if self.occluders[0] < 0 or self.occluders[1] < self.occluders[0]:
            raise ConfigError(f"bad occluder count range {self.occluders}")

    @property
    def num_classes(self) -> int:
        return len(ZJLAB_CLASSES) if self.label_mode == "zjlab" else self.max_lanes + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LaneLine:
    offset: float          # lateral offset u of the line centre
    kind: int              # WHITE or YELLOW
    dashed: bool
    dash_phase: float
    points: list = field(default_factory=list)  # world-frame polylines, one array per segment


@dataclass
class World:
    grid: GridMap
    lines: list
    curvature: float
    origin: np.ndarray     # world position of s = 0, u = 0
    heading: float         # road direction at s = 0
    lane_count: int
    junction: tuple | None  # (s_start, s_end) of the crossing road
    stop_line: np.ndarray | None  # 2 x 2 world endpoints

    # -- road coordinates ---------------------------------------------------------
    def road_coords(self, x, y):
        """Arc length s and lateral offset u (left positive) of world points."""
        px = np.asarray(x, dtype=np.float64) - self.origin[0]
        py = np.asarray(y, dtype=np.float64) - self.origin[1]
        tx, ty = math.cos(self.heading), math.sin(self.heading)
        if abs(self.curvature) < 1e-12:
            return px * tx + py * ty, -px * ty + py * tx
        k = self.curvature
        r = 1.0 / k  # signed radius, centre lies at +r along the left normal
        cx, cy = -ty * r, tx * r
        dx, dy = px - cx, py - cy
        rho = np.hypot(dx, dy)
        # angle swept from the start radius, positive along travel direction
        a0 = math.atan2(-cy, -cx)
        ang = np.arctan2(dy, dx) - a0
        ang = (ang + np.pi) % (2 * np.pi) - np.pi
        s = ang * r
        u = np.sign(k) * (abs(r) - rho)
        return s, u

    def road_point(self, s, u):
        s = np.asarray(s, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        tx, ty = math.cos(self.heading), math.sin(self.heading)
        if abs(self.curvature) < 1e-12:
            return (self.origin[0] + s * tx - u * ty, self.origin[1] + s * ty + u * tx)
        k = self.curvature
        phi = s * k
        # position on reference curve
        x0 = (np.sin(phi) * tx - (1 - np.cos(phi)) * ty) / k
        y0 = (np.sin(phi) * ty + (1 - np.cos(phi)) * tx) / k
        hx, hy = np.cos(self.heading + phi), np.sin(self.heading + phi)
        nx, ny = -hy, hx
        return (self.origin[0] + x0 + u * nx, self.origin[1] + y0 + u * ny)

    @property
    def road_left(self) -> float:
        return -LANE_WIDTH / 2 + LANE_WIDTH * self.lane_count

    @property
    def road_right(self) -> float:
        return -LANE_WIDTH / 2

    def freespace(self, s, u) -> np.ndarray:
        on_road = (u >= self.road_right - ROAD_MARGIN) & (u <= self.road_left + ROAD_MARGIN)
        if self.junction is not None:
            on_road |= (s >= self.junction[0]) & (s <= self.junction[1])
        return on_road

    def paint(self, s, u, line_width: float, stop_width: float):
        """Per-point paint class (zjlab ids) and line index (-1 = none)."""
        kind = np.zeros(np.shape(s), dtype=np.int64)
        index = np.full(np.shape(s), -1, dtype=np.int64)
        in_junction = np.zeros(np.shape(s), dtype=bool)
        if self.junction is not None:
            in_junction = (s >= self.junction[0]) & (s <= self.junction[1])
        for i, line in enumerate(self.lines):
            hit = np.abs(u - line.offset) <= line_width / 2
            if line.dashed:
                hit &= ((s + line.dash_phase) % 6.0) < 3.0
            hit &= ~in_junction
            kind[hit] = line.kind
            index[hit] = i
        if self.junction is not None:
            s0 = self.junction[0] - 0.3 - stop_width / 2
            hit = (np.abs(s - s0) <= stop_width / 2) & (u >= self.road_right) & (u <= self.road_left)
            kind[hit] = STOP
            index[hit] = -1
        return kind, index


def _line_layout(lane_count: int, rng: np.random.Generator, dash_probability: float) -> list[LaneLine]:
    offsets = [-LANE_WIDTH / 2 + LANE_WIDTH * k for k in range(lane_count, -1, -1)]  # left -> right
    lines = []
    for j, off in enumerate(offsets):
        kind = YELLOW if j == 0 else WHITE
        dashed = bool(rng.uniform() < dash_probability)
        lines.append(LaneLine(off, kind, dashed, float(rng.uniform(0.0, 6.0))))
    return lines


def generate_world(recipe: SceneRecipe, rng: np.random.Generator | None = None) -> World:
    """Road raster (1 = freespace) plus lane polylines in world coordinates."""
    recipe.validate()
    rng = rng if rng is not None else np.random.default_rng(recipe.seed)
    lane_count = int(rng.integers(recipe.lane_count[0], recipe.lane_count[1] + 1))
    straight = rng.uniform() < recipe.straight_probability
    curvature = 0.0 if straight else float(rng.uniform(-1.0, 1.0) * recipe.max_curvature)
    if not straight and abs(curvature) < 0.25 * recipe.max_curvature:
        curvature = math.copysign(0.25 * recipe.max_curvature, curvature if curvature else 1.0)
    junction = None
    if straight and rng.uniform() < recipe.junction_probability:
        start = float(rng.uniform(3.0, 8.0))
        junction = (start, start + float(rng.uniform(6.0, 9.0)))
    heading = float(rng.uniform(-math.pi, math.pi))
    origin = rng.uniform(-5.0, 5.0, size=2)
    lines = _line_layout(lane_count, rng, recipe.dash_probability)

    half = max(recipe.perception_range, 20.0) * 0.75 + 12.0
    res = recipe.resolution
    n = int(math.ceil(2 * half / res)) + 1
    grid_origin = (origin[0] - half, origin[1] - half)
    world = World(GridMap(np.zeros((n, n, 1), dtype=np.uint8), res, grid_origin), lines, curvature,
                  origin, heading, lane_count, junction, None)
    rows, cols = np.mgrid[0:n, 0:n]
    wx, wy = world.grid.cell_to_world(rows, cols)
    s, u = world.road_coords(wx, wy)
    world.grid.cells[:, :, 0] = world.freespace(s, u).astype(np.uint8)

    s_samples = np.arange(-half, half + 1e-9, 0.5)
    for line in lines:
        segments = [s_samples]
        if junction is not None:
            segments = [s_samples[s_samples < junction[0]], s_samples[s_samples > junction[1]]]
        for seg in segments:
            if len(seg) >= 2:
                x, y = world.road_point(seg, np.full(seg.shape, line.offset))
                line.points.append(np.stack([x, y], axis=1))
    if junction is not None:
        s0 = junction[0] - 0.3 - recipe.stop_line_width / 2
        x, y = world.road_point(np.array([s0, s0]), np.array([world.road_right, world.road_left]))
        world.stop_line = np.stack([x, y], axis=1)
    return world


# -- camera ---------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    height: float
    pitch: float
    focal: float
    cx: float
    cy: float
    image_height: int
    image_width: int

    @classmethod
    def from_recipe(cls, r: SceneRecipe) -> "Camera":
        f = (r.image_width / 2) / math.tan(math.radians(r.camera_hfov_deg) / 2)
        return cls(r.camera_height, math.radians(r.camera_pitch_deg), f,
                   (r.image_width - 1) / 2, (r.image_height - 1) / 2, r.image_height, r.image_width)

    def ground(self, v, u):
        """Vehicle-frame (forward, right) ground points seen through pixel (v, u);
        NaN where the ray misses the ground."""
        yc = (np.asarray(v, dtype=np.float64) - self.cy) / self.focal
        xc = (np.asarray(u, dtype=np.float64) - self.cx) / self.focal
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        down = sp + yc * cp
        fwd = cp - yc * sp
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(down > 1e-9, self.height / down, np.nan)
        return fwd * t, xc * t

    def project(self, forward, right):
        """Pixel (v, u) of vehicle-frame ground points in front of the camera."""
        f = np.asarray(forward, dtype=np.float64)
        r = np.asarray(right, dtype=np.float64)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        zc = f * cp + self.height * sp
        yc = -f * sp + self.height * cp
        with np.errstate(divide="ignore", invalid="ignore"):
            v = self.cy + self.focal * yc / zc
            u = self.cx + self.focal * r / zc
        return v, u


def vehicle_to_world(pose: Pose, forward, right):
    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    return pose.x + forward * ch + right * sh, pose.y + forward * sh - right * ch


# -- scenes ---------------------------------------------------------------------

@dataclass
class LaneScene:
    image: np.ndarray        # 3 x H x W float32 in [0, 1]
    label: np.ndarray        # H x W uint8 class ids
    existence: np.ndarray    # max_lanes bool
    pose: Pose
    coarse_pose: Pose
    prior: LocalPrior
    occluded: np.ndarray | None = None  # H x W bool, not serialised

    def same_as(self, other: "LaneScene") -> bool:
        return (self.image.tobytes() == other.image.tobytes()
                and self.label.tobytes() == other.label.tobytes()
                and self.existence.tobytes() == other.existence.tobytes()
                and self.pose == other.pose and self.coarse_pose == other.coarse_pose
                and self.prior.cells.tobytes() == other.prior.cells.tobytes()
                and self.prior.perception_range == other.prior.perception_range)


def sample_pose(world: World, recipe: SceneRecipe, rng: np.random.Generator) -> Pose:
    u = float(rng.uniform(-1.0, 1.0) * recipe.lateral_jitter)
    x, y = world.road_point(np.array(0.0), np.array(u))
    yaw = math.radians(recipe.yaw_jitter_deg) * float(rng.uniform(-1.0, 1.0))
    return Pose(float(x), float(y), world.heading + yaw)


def render_scene(world: World, pose: Pose, recipe: SceneRecipe, rng: np.random.Generator) -> LaneScene:
    """Pinhole rendering of the world from ``pose`` plus a prior crop at a noised pose."""
    if not world.grid.lookup(pose.x, pose.y)[0]:
        raise DataError("pose is off-road")
    cam = Camera.from_recipe(recipe)
    h, w, ss = recipe.image_height, recipe.image_width, recipe.supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    vv = (np.arange(h)[:, None, None, None] + sub[None, None, :, None])
    uu = (np.arange(w)[None, :, None, None] + sub[None, None, None, :])
    vv, uu = np.broadcast_arrays(vv, uu)
    fwd, right = cam.ground(vv, uu)
    wx, wy = vehicle_to_world(pose, fwd, right)
    s, u = world.road_coords(wx, wy)
    kind, index = world.paint(s, u, recipe.line_width, recipe.stop_line_width)

    # appearance
    road_tone = rng.uniform(0.25, 0.45)
    off_tone = road_tone + rng.uniform(-0.04, 0.04)
    road = world.freespace(s, u)
    base = np.where(road, road_tone, off_tone)[..., None] * np.ones(3)
    paint_strength = rng.uniform(0.6, 1.0)
    color = base.copy()
    for cls, paint in ((WHITE, WHITE_PAINT), (YELLOW, YELLOW_PAINT), (STOP, WHITE_PAINT)):
        m = kind == cls
        color[m] = (1 - paint_strength) * base[m] + paint_strength * paint
    img = color.mean(axis=(2, 3))  # H x W x 3 anti-aliased

    # labels: the majority painted class of each pixel's sub-samples
    counts = np.stack([(kind == c).sum(axis=(2, 3)) for c in range(4)], axis=-1)
    painted = counts[..., 1:].max(axis=-1)
    cls_map = np.where(painted * 2 >= ss * ss, counts[..., 1:].argmax(axis=-1) + 1, 0)
    n_lines = len(world.lines)
    line_counts = np.stack([(index == i).sum(axis=(2, 3)) for i in range(n_lines)], axis=-1)
    line_map = np.where(line_counts.max(axis=-1) * 2 >= ss * ss, line_counts.argmax(axis=-1), -1)
    line_map = np.where((cls_map == WHITE) | (cls_map == YELLOW), line_map, -1)

    existence = np.zeros(recipe.max_lanes, dtype=bool)
    for i in range(n_lines):
        existence[i] = bool((line_map == i).any())
    if recipe.label_mode == "zjlab":
        label = cls_map.astype(np.uint8)
    else:
        label = np.where(line_map >= 0, line_map + 1, 0).astype(np.uint8)

    # weather, occluders, noise: image only
    if rng.uniform() < recipe.desaturate_probability:
        gray = img.mean(axis=-1, keepdims=True)
        img = gray * np.ones(3)
    img = img * rng.uniform(0.75, 1.15)
    occluded = np.zeros((h, w), dtype=bool)
    n_occ = int(rng.integers(recipe.occluders[0], recipe.occluders[1] + 1))
    lo, hi = recipe.occluder_size
    for _ in range(n_occ):
        oh, ow = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        # rectangles may straddle the border so every pixel is equally likely to be covered
        top = int(rng.integers(1 - oh, h))
        left = int(rng.integers(1 - ow, w))
        box = (slice(max(top, 0), top + oh), slice(max(left, 0), left + ow))
        occluded[box] = True
        img[box] = rng.uniform(0.05, 0.6, size=3)
    img = img + rng.normal(0.0, recipe.pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)

    coarse = simulate_coarse_pose(pose, math.radians(recipe.rot_noise_deg), recipe.trans_noise,
                                  int(rng.integers(0, 2**31 - 1)))
    prior = crop_local(world.grid, coarse, recipe.perception_range, recipe.crop_size)
    return LaneScene(np.ascontiguousarray(img), label, existence, pose, coarse, prior, occluded)


def generate_scene(recipe: SceneRecipe, max_retries: int = 5) -> LaneScene:
    """World + pose + render for one recipe, retrying with derived seeds when the
    sampled pose is off-road."""
    recipe.validate()
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([recipe.seed, attempt])
        world = generate_world(recipe, rng)
        pose = sample_pose(world, recipe, rng)
        try:
            return render_scene(world, pose, recipe, rng)
        except DataError:
            continue
    raise DataError(f"could not place an on-road pose for seed {recipe.seed}")


def recipes_for(base: SceneRecipe, count: int, first_seed: int | None = None) -> list[SceneRecipe]:
    if count < 1:
        raise ConfigError("a dataset needs at least one scene")
    start = base.seed if first_seed is None else first_seed
    return [replace(base, seed=start + i) for i in range(count)]


def generate_dataset(recipes: list[SceneRecipe]) -> list[LaneScene]:
    if not recipes:
        raise ConfigError("a dataset needs at least one scene")
    return [generate_scene(r) for r in recipes]


# -- dataset files ----------------------------------------------------------------

DATASET_MAGIC = b"PLDS"
DATASET_VERSION = 1
_HEAD = "<IIII"  # version, count, num_classes, max_lanes


@dataclass
class Dataset:
    scenes: list
    num_classes: int
    max_lanes: int

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def batch(self, idx):
        items = [self.scenes[i] for i in idx]
        images = np.stack([s.image for s in items]).astype(np.float64)
        labels = np.stack([s.label for s in items]).astype(np.int64)
        exist = np.stack([s.existence for s in items]).astype(np.float64)
        priors = np.stack([s.prior.cells for s in items]).astype(np.float64)
        return images, labels, exist, priors


def _pack_scene(sc: LaneScene) -> bytes:
    c, h, w = sc.image.shape
    bits = 0
    for i, flag in enumerate(sc.existence):
        bits |= int(bool(flag)) << i
    pr = sc.prior
    s, _, pc = pr.cells.shape
    return b"".join([
        struct.pack("<III", c, h, w),
        np.ascontiguousarray(sc.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(sc.label, dtype=np.uint8).tobytes(),
        struct.pack("<II", len(sc.existence), bits),
        struct.pack("<6d", sc.pose.x, sc.pose.y, sc.pose.heading,
                    sc.coarse_pose.x, sc.coarse_pose.y, sc.coarse_pose.heading),
        struct.pack("<IIdBI", s, pc, pr.perception_range, int(pr.outside_map), pr.window_cells),
        np.ascontiguousarray(pr.cells, dtype="<f4").tobytes(),
    ])


def _unpack_scene(buf: bytes, pos: int) -> LaneScene:
    try:
        c, h, w = struct.unpack_from("<III", buf, pos)
        pos += 12
        n_img = c * h * w
        _need(buf, pos, 4 * n_img + h * w)
        image = np.frombuffer(buf, dtype="<f4", count=n_img, offset=pos).reshape(c, h, w).astype(np.float32)
        pos += 4 * n_img
        label = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w).copy()
        pos += h * w
        n_slots, bits = struct.unpack_from("<II", buf, pos)
        pos += 8
        existence = np.array([(bits >> i) & 1 for i in range(n_slots)], dtype=bool)
        p = struct.unpack_from("<6d", buf, pos)
        pos += 48
        s, pc, rng_m, outside, window = struct.unpack_from("<IIdBI", buf, pos)
        pos += struct.calcsize("<IIdBI")
        _need(buf, pos, 4 * s * s * pc)
        cells = np.frombuffer(buf, dtype="<f4", count=s * s * pc, offset=pos).reshape(s, s, pc).astype(np.float32)
    except struct.error as exc:
        raise FormatError("truncated dataset record") from exc
    coarse = Pose(p[3], p[4], p[5])
    prior = LocalPrior(cells, rng_m, coarse, bool(outside), window)
    return LaneScene(image, label, existence, Pose(p[0], p[1], p[2]), coarse, prior)


def _need(buf: bytes, pos: int, n: int) -> None:
    if pos + n > len(buf):
        raise FormatError("truncated dataset record")


def write_dataset(scenes, path, num_classes: int, max_lanes: int) -> None:
    records = [_pack_scene(s) for s in scenes]
    head = DATASET_MAGIC + struct.pack(_HEAD, DATASET_VERSION, len(records), num_classes, max_lanes)
    table_start = len(head)
    offset = table_start + 8 * len(records)
    offsets = []
    for rec in records:
        offsets.append(offset)
        offset += len(rec)
    table = struct.pack(f"<{len(records)}Q", *offsets)
    Path(path).write_bytes(head + table + b"".join(records))


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    try:
        version, count, num_classes, max_lanes = struct.unpack_from(_HEAD, buf, 4)
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        offsets = struct.unpack_from(f"<{count}Q", buf, 4 + struct.calcsize(_HEAD))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated dataset header") from exc
    scenes = []
    for off in offsets:
        if off >= len(buf):
            raise FormatError(f"{path}: truncated dataset (record offset past end of file)")
        scenes.append(_unpack_scene(buf, off))
    return Dataset(scenes, num_classes, max_lanes)


def class_histogram(scenes, num_classes: int) -> np.ndarray:
    hist = np.zeros(num_classes, dtype=np.int64)
    for sc in scenes:
        hist += np.bincount(sc.label.reshape(-1), minlength=num_classes)[:num_classes]
    return hist

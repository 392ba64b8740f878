"""Synthetic smart-factory scenes.

Layouts, vehicle and arm motion, top-down rasterized segmentation maps and
static point clouds.  Coordinates are meters with the origin at a floor
corner: ``x`` runs along the 60 m length, ``y`` along the 40 m width and
``z`` is height.  Grid rows follow ``y`` and columns follow ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import LayoutError, ParameterError, SimulationError
from .rng import derive_seed, substream

BACKGROUND = 0
VEHICLE = 1
ARM = 2
MACHINE_TOOL = 3
CONTROLLER = 4
BUCKET = 5
COLUMN = 6
CROSSBEAM = 7
CLASS_NAMES = (
    "background", "vehicle", "arm", "machine_tool",
    "controller", "bucket", "column", "crossbeam",
)
N_CLASSES = len(CLASS_NAMES)

DEFAULT_RESOLUTION = (720, 1080)
FRAME_INTERVAL_MS = 50.0
BS_POSITIONS = ((6.0, 30.0, 8.0), (30.0, 6.0, 8.0))


# --------------------------------------------------------------------------
# geometry primitives

@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]``."""
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, x, y, strict=False):
        if strict:
            return self.x0 < x < self.x1 and self.y0 < y < self.y1
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def contains_rect(self, other):
        return (other.x0 >= self.x0 and other.x1 <= self.x1
                and other.y0 >= self.y0 and other.y1 <= self.y1)

    def overlaps(self, other):
        return (self.x0 < other.x1 and other.x0 < self.x1
                and self.y0 < other.y1 and other.y0 < self.y1)

    def corners(self):
        return np.array([[self.x0, self.y0], [self.x1, self.y0],
                         [self.x1, self.y1], [self.x0, self.y1]])


@dataclass(frozen=True)
class TransportArea:
    """Rectangular ring: inside ``outer`` and not strictly inside ``inner``."""
    outer: Rect
    inner: Rect

    def contains(self, x, y):
        return self.outer.contains(x, y) and not self.inner.contains(x, y, strict=True)


@dataclass(frozen=True)
class Box:
    """Axis-aligned 3D box used for ray tracing and point sampling."""
    lo: tuple
    hi: tuple
    metal: bool = True
    key: tuple = ()

    def faces(self):
        """Yield ``(axis, coord, outward_sign, lo2, hi2)`` for the six faces.

        ``lo2``/``hi2`` are the bounds of the face in the two remaining axes
        (in increasing axis order).
        """
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            lo2 = tuple(self.lo[a] for a in others)
            hi2 = tuple(self.hi[a] for a in others)
            yield axis, self.lo[axis], -1.0, lo2, hi2
            yield axis, self.hi[axis], 1.0, lo2, hi2


@dataclass
class ObjectSpec:
    """One object on the factory floor.

    ``footprint`` is a counter-clockwise polygon in meters.  For dynamic
    objects it is the footprint at their nominal pose; the per-frame pose
    comes from a :class:`MotionState`.  ``anchor`` is the rotation pivot of
    an arm.
    """
    class_id: int
    instance_id: int
    footprint: np.ndarray
    height_m: float
    is_dynamic: bool = False
    motion_kind: str = "none"
    length_m: float = 0.0
    width_m: float = 0.0
    anchor: Optional[tuple] = None

    def __post_init__(self):
        self.footprint = np.asarray(self.footprint, dtype=float)
        if self.is_dynamic != (self.motion_kind != "none"):
            raise ParameterError("is_dynamic must match motion_kind")
        if not 0 < self.class_id < N_CLASSES:
            raise ParameterError(f"class_id {self.class_id} outside [1, {N_CLASSES - 1}]")

    @property
    def bounds(self):
        lo = self.footprint.min(axis=0)
        hi = self.footprint.max(axis=0)
        return Rect(lo[0], lo[1], hi[0], hi[1])

    def box(self, footprint=None):
        fp = self.footprint if footprint is None else footprint
        lo = fp.min(axis=0)
        hi = fp.max(axis=0)
        return Box((lo[0], lo[1], 0.0), (hi[0], hi[1], self.height_m),
                   metal=True, key=("object", self.instance_id))


@dataclass
class MotionState:
    position: tuple
    heading_deg: float = 0.0
    speed_mps: float = 0.0
    arm_angle_deg: float = 0.0


@dataclass(frozen=True)
class MotionConfig:
    heading_var: float = 7.5
    heading_bound_deg: float = 30.0
    speed_var: float = 0.02
    speed_bounds: tuple = (0.8, 1.2)
    arm_speed_range_dps: tuple = (0.0, 36.0)
    boundary_retries: int = 8


@dataclass(frozen=True)
class SceneConfig:
    """Sizes and counts used to build layouts and simulate paths."""
    length_m: float = 60.0
    width_m: float = 40.0
    height_m: float = 20.0
    work_area: Rect = Rect(10.0, 10.0, 50.0, 30.0)
    transport_area: TransportArea = TransportArea(
        Rect(2.5, 2.5, 57.5, 37.5), Rect(8.0, 8.0, 52.0, 32.0))
    n_vehicles: int = 2
    n_arms: int = 4
    n_controllers: int = 2
    n_buckets: int = 2
    tool_size: tuple = (6.0, 3.0)
    tool_height: float = 2.5
    arm_size: tuple = (3.0, 0.6)
    arm_height: float = 1.8
    controller_size: tuple = (1.5, 1.0)
    controller_height: float = 1.8
    bucket_size: tuple = (1.0, 1.0)
    bucket_height: float = 1.0
    vehicle_size: tuple = (3.0, 2.0)
    vehicle_height: float = 1.5
    antenna_height: float = 2.0
    column_size: float = 0.6
    column_x: tuple = (10.0, 30.0, 50.0)
    crossbeam_z: tuple = (16.0, 17.0)
    crossbeam_width: float = 0.5
    user_start: tuple = (40.0, 5.0)
    user_end: tuple = (21.25, 5.0)
    frame_band: tuple = (350, 400)
    max_attempts: int = 20
    placement_attempts: int = 2000
    bs_positions: tuple = BS_POSITIONS
    motion: MotionConfig = MotionConfig()


@dataclass
class FactoryLayout:
    length_m: float
    width_m: float
    height_m: float
    work_area: Rect
    transport_area: TransportArea
    crossbeam_mode: int
    static_objects: list
    bs_positions: list
    dynamic_objects: list = field(default_factory=list)
    columns: list = field(default_factory=list)
    crossbeams: list = field(default_factory=list)

    def __post_init__(self):
        if self.crossbeam_mode not in (1, 2, 3):
            raise ParameterError("crossbeam_mode must be 1, 2 or 3")

    @property
    def objects(self):
        """All floor objects (static, columns, dynamic) by instance id."""
        return {o.instance_id: o for o in
                [*self.static_objects, *self.columns, *self.dynamic_objects]}

    @property
    def user(self):
        for obj in self.dynamic_objects:
            if obj.motion_kind == "vehicle" and obj.anchor == "user":
                return obj
        return None

    def static_boxes(self):
        boxes = [o.box() for o in self.static_objects]
        boxes += [o.box() for o in self.columns]
        return boxes + list(self.crossbeams)

    def to_dict(self):
        def obj(o):
            return {
                "class_id": o.class_id, "instance_id": o.instance_id,
                "footprint": o.footprint.tolist(), "height_m": o.height_m,
                "is_dynamic": o.is_dynamic, "motion_kind": o.motion_kind,
                "length_m": o.length_m, "width_m": o.width_m,
                "anchor": list(o.anchor) if isinstance(o.anchor, tuple) else o.anchor,
            }
        return {
            "dims": [self.length_m, self.width_m, self.height_m],
            "work_area": [self.work_area.x0, self.work_area.y0,
                          self.work_area.x1, self.work_area.y1],
            "crossbeam_mode": self.crossbeam_mode,
            "bs_positions": [list(p) for p in self.bs_positions],
            "static_objects": [obj(o) for o in self.static_objects],
            "columns": [obj(o) for o in self.columns],
            "dynamic_objects": [obj(o) for o in self.dynamic_objects],
            "crossbeams": [[list(b.lo), list(b.hi)] for b in self.crossbeams],
        }


@dataclass
class SegMapFrame:
    class_grid: np.ndarray
    truth_instance_grid: np.ndarray
    frame_index: int = 0
    frame_interval_ms: float = FRAME_INTERVAL_MS

    @property
    def shape(self):
        return self.class_grid.shape


@dataclass
class PointCloud:
    points: np.ndarray

    def __len__(self):
        return len(self.points)


# --------------------------------------------------------------------------
# random motion

def sample_truncated_gaussian(mu, var, lo, hi, rng, size=None):
    """Draw from ``N(mu, var)`` restricted to ``(lo, hi]`` by inverse CDF.

    The tail case (bounds entirely above the mean) works on survival
    probabilities so that narrow windows far from ``mu`` keep precision.
    """
    if not lo < hi:
        raise ParameterError(f"need lo < hi, got ({lo}, {hi})")
    if not var > 0:
        raise ParameterError(f"variance must be positive, got {var}")
    sd = math.sqrt(var)
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    # u in (0, 1] so that u == 1 lands on hi and lo is never returned
    u = 1.0 - rng.random(size)
    if a > 0:
        sa, sb = ndtr(-a), ndtr(-b)
        x = mu - sd * ndtri(sa - u * (sa - sb))
    else:
        fa, fb = ndtr(a), ndtr(b)
        x = mu + sd * ndtri(fa + u * (fb - fa))
    x = np.clip(x, np.nextafter(lo, np.inf), hi)
    return float(x) if size is None else x


def _wrap_deg(angle):
    return (angle + 180.0) % 360.0 - 180.0


def step_vehicle(state, cfg, dt_s, rng, area=None, target=None):
    """Advance a vehicle by one frame.

    Heading and speed follow truncated-Gaussian random walks.  ``target``
    (a 2D point) steers the heading mean toward it, which is how the user
    vehicle travels between its start and end points.  Moves leaving
    ``area`` are retried with fresh headings, then the heading is reversed.
    """
    lo_v, hi_v = cfg.speed_bounds
    speed = sample_truncated_gaussian(state.speed_mps, cfg.speed_var, lo_v, hi_v, rng)
    bound = cfg.heading_bound_deg
    heading = state.heading_deg
    mu = heading
    if target is not None:
        bearing = math.degrees(math.atan2(target[1] - state.position[1],
                                          target[0] - state.position[0]))
        mu = heading + float(np.clip(_wrap_deg(bearing - heading), -bound, bound))
    x, y = state.position[0], state.position[1]
    step = speed * dt_s
    for _ in range(cfg.boundary_retries + 1):
        h = sample_truncated_gaussian(mu, cfg.heading_var, heading - bound, heading + bound, rng)
        nx = x + step * math.cos(math.radians(h))
        ny = y + step * math.sin(math.radians(h))
        if area is None or area.contains(nx, ny):
            return MotionState((nx, ny), _wrap_deg(h), speed, state.arm_angle_deg)
    h = heading + 180.0
    nx = x + step * math.cos(math.radians(h))
    ny = y + step * math.sin(math.radians(h))
    if not area.contains(nx, ny):
        nx, ny = x, y
    return MotionState((nx, ny), _wrap_deg(h), speed, state.arm_angle_deg)


def step_arm(state, cfg, dt_s, rng):
    """Rotate an arm by a rate drawn uniformly from the configured range."""
    lo, hi = cfg.arm_speed_range_dps
    rate = rng.uniform(lo, hi) if hi > lo else lo
    angle = (state.arm_angle_deg + rate * dt_s) % 360.0
    return replace(state, arm_angle_deg=angle)


# --------------------------------------------------------------------------
# layouts

def _rect_polygon(cx, cy, sx, sy):
    return Rect(cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2).corners()


def _quadrants(work):
    xm = 0.5 * (work.x0 + work.x1)
    ym = 0.5 * (work.y0 + work.y1)
    # numbering: 1, 2 on the far (high-y) half, 3, 4 on the near half
    return {
        1: Rect(work.x0, ym, xm, work.y1),
        2: Rect(xm, ym, work.x1, work.y1),
        3: Rect(work.x0, work.y0, xm, ym),
        4: Rect(xm, work.y0, work.x1, ym),
    }


def _crossbeams(cfg, mode):
    z0, z1 = cfg.crossbeam_z
    hw = cfg.crossbeam_width / 2
    L, W = cfg.length_m, cfg.width_m
    along_x, along_y = [], []
    if mode == 1:
        along_x = [10.0, 20.0, 30.0]
    elif mode == 2:
        along_y = [10.0, 20.0, 30.0, 40.0, 50.0]
    else:
        along_x = [20.0]
        along_y = [15.0, 30.0, 45.0]
    beams = [Box((0.0, yc - hw, z0), (L, yc + hw, z1), True, ("crossbeam", mode, "x", i))
             for i, yc in enumerate(along_x)]
    beams += [Box((xc - hw, 0.0, z0), (xc + hw, W, z1), True, ("crossbeam", mode, "y", i))
              for i, xc in enumerate(along_y)]
    return beams


def _columns(cfg, first_id):
    s = cfg.column_size
    cols = []
    iid = first_id
    for y0 in (0.0, cfg.width_m - s):
        for xc in cfg.column_x:
            fp = Rect(xc - s / 2, y0, xc + s / 2, y0 + s).corners()
            cols.append(ObjectSpec(COLUMN, iid, fp, cfg.height_m))
            iid += 1
    return cols


def sample_environment(cfg=None, rng=None, *, crossbeam_mode=None):
    """Draw a random factory layout.

    Two of the four work-area quadrants get one machine tool each (long
    axis along ``y`` in quadrants 1-2, along ``x`` in 3-4).  Arms,
    controllers and buckets are then placed uniformly in the work area
    without overlap; arms reserve the square swept by their rotation.
    """
    cfg = cfg or SceneConfig()
    rng = rng if rng is not None else np.random.default_rng()
    work = cfg.work_area
    quads = _quadrants(work)
    placed = []      # Rect keep-outs
    statics = []
    iid = 1

    def place(size, region):
        sx, sy = size
        for _ in range(cfg.placement_attempts):
            cx = rng.uniform(region.x0 + sx / 2, region.x1 - sx / 2)
            cy = rng.uniform(region.y0 + sy / 2, region.y1 - sy / 2)
            r = Rect(cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2)
            if not any(r.overlaps(p) for p in placed):
                placed.append(r)
                return cx, cy
        raise LayoutError(f"could not place object of size {size} after "
                          f"{cfg.placement_attempts} attempts")

    areas = sorted(rng.choice(4, size=2, replace=False) + 1)
    long_, short = cfg.tool_size
    for q in areas:
        size = (short, long_) if q in (1, 2) else (long_, short)
        cx, cy = place(size, quads[q])
        statics.append(ObjectSpec(MACHINE_TOOL, iid, _rect_polygon(cx, cy, *size),
                                  cfg.tool_height))
        iid += 1

    dynamics = []
    arm_len, arm_w = cfg.arm_size
    reach = math.hypot(arm_len, arm_w / 2) + 0.05
    for _ in range(cfg.n_arms):
        cx, cy = place((2 * reach, 2 * reach), work)
        fp = Rect(cx, cy - arm_w / 2, cx + arm_len, cy + arm_w / 2).corners()
        dynamics.append(ObjectSpec(ARM, iid, fp, cfg.arm_height, True, "arm",
                                   arm_len, arm_w, (cx, cy)))
        iid += 1
    for count, size, height, cls in (
            (cfg.n_controllers, cfg.controller_size, cfg.controller_height, CONTROLLER),
            (cfg.n_buckets, cfg.bucket_size, cfg.bucket_height, BUCKET)):
        for _ in range(count):
            cx, cy = place(size, work)
            statics.append(ObjectSpec(cls, iid, _rect_polygon(cx, cy, *size), height))
            iid += 1

    vl, vw = cfg.vehicle_size
    ux, uy = cfg.user_start
    dynamics.append(ObjectSpec(VEHICLE, iid, _rect_polygon(ux, uy, vl, vw), cfg.vehicle_height,
                               True, "vehicle", vl, vw, "user"))
    iid += 1
    for _ in range(cfg.n_vehicles):
        dynamics.append(ObjectSpec(VEHICLE, iid, _rect_polygon(0.0, 0.0, vl, vw),
                                   cfg.vehicle_height, True, "vehicle", vl, vw))
        iid += 1

    mode = int(rng.integers(1, 4)) if crossbeam_mode is None else int(crossbeam_mode)
    columns = _columns(cfg, first_id=iid)
    return FactoryLayout(
        cfg.length_m, cfg.width_m, cfg.height_m, work, cfg.transport_area, mode,
        statics, [tuple(p) for p in cfg.bs_positions], dynamics, columns,
        _crossbeams(cfg, mode))


def empty_layout(cfg=None, crossbeam_mode=1, with_structure=False):
    """A layout with no floor objects (and optionally no columns/beams)."""
    cfg = cfg or SceneConfig()
    cols = _columns(cfg, 1) if with_structure else []
    beams = _crossbeams(cfg, crossbeam_mode) if with_structure else []
    return FactoryLayout(cfg.length_m, cfg.width_m, cfg.height_m, cfg.work_area,
                         cfg.transport_area, crossbeam_mode, [],
                         [tuple(p) for p in cfg.bs_positions], [], cols, beams)


# --------------------------------------------------------------------------
# rasterization

def footprint_at(obj, state=None):
    """Footprint polygon of ``obj`` at ``state`` (CCW corners, meters)."""
    if not obj.is_dynamic or state is None:
        return obj.footprint
    if obj.motion_kind == "arm":
        px, py = obj.anchor
        a = math.radians(state.arm_angle_deg)
        d = np.array([math.cos(a), math.sin(a)])
        n = np.array([-d[1], d[0]])
        p = np.array([px, py])
        hw = obj.width_m / 2
        return np.array([p - hw * n, p + obj.length_m * d - hw * n,
                         p + obj.length_m * d + hw * n, p + hw * n])
    cx, cy = state.position
    a = math.radians(state.heading_deg)
    d = np.array([math.cos(a), math.sin(a)]) * obj.length_m / 2
    n = np.array([-math.sin(a), math.cos(a)]) * obj.width_m / 2
    c = np.array([cx, cy])
    return np.array([c - d - n, c + d - n, c + d + n, c - d + n])


def _polygon_window(corners, scale_x, scale_y, shape):
    """Pixel window and inside-mask of a convex CCW polygon."""
    rows, cols = shape
    c0 = max(int(math.floor(corners[:, 0].min() * scale_x)), 0)
    c1 = min(int(math.ceil(corners[:, 0].max() * scale_x)), cols)
    r0 = max(int(math.floor(corners[:, 1].min() * scale_y)), 0)
    r1 = min(int(math.ceil(corners[:, 1].max() * scale_y)), rows)
    if c1 <= c0 or r1 <= r0:
        return None
    xs = (np.arange(c0, c1) + 0.5) / scale_x
    ys = (np.arange(r0, r1) + 0.5) / scale_y
    X, Y = np.meshgrid(xs, ys)
    inside = np.ones(X.shape, dtype=bool)
    k = len(corners)
    for i in range(k):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % k]
        cross = (bx - ax) * (Y - ay) - (by - ay) * (X - ax)
        inside &= cross >= -1e-9
    return r0, r1, c0, c1, inside


class Rasterizer:
    """Orthographic top-down renderer with cached static footprints."""

    def __init__(self, layout, resolution=DEFAULT_RESOLUTION):
        self.layout = layout
        self.shape = tuple(resolution)
        self.scale_x = self.shape[1] / layout.length_m
        self.scale_y = self.shape[0] / layout.width_m
        self._static = []
        for obj in [*layout.static_objects, *layout.columns]:
            win = _polygon_window(obj.footprint, self.scale_x, self.scale_y, self.shape)
            self._static.append((obj, win))

    def render(self, states=None, frame_index=0):
        states = states or {}
        items = list(self._static)
        for obj in self.layout.dynamic_objects:
            st = states.get(obj.instance_id)
            if st is None:
                continue
            fp = footprint_at(obj, st)
            items.append((obj, _polygon_window(fp, self.scale_x, self.scale_y, self.shape)))
        items.sort(key=lambda it: (it[0].height_m, it[0].instance_id))
        cls = np.zeros(self.shape, dtype=np.uint8)
        inst = np.zeros(self.shape, dtype=np.uint16)
        for obj, win in items:
            if win is None:
                continue
            r0, r1, c0, c1, m = win
            cls[r0:r1, c0:c1][m] = obj.class_id
            inst[r0:r1, c0:c1][m] = obj.instance_id
        return SegMapFrame(cls, inst, frame_index, FRAME_INTERVAL_MS)


def rasterize(layout, states=None, resolution=DEFAULT_RESOLUTION, frame_index=0):
    """Render one frame: class ids of the topmost object per pixel."""
    return Rasterizer(layout, resolution).render(states, frame_index)


def inject_label_noise(frame, p_flip, rng, n_classes=N_CLASSES):
    """Replace each pixel by a uniformly random *other* class w.p. ``p_flip``."""
    if not 0.0 <= p_flip < 0.5:
        raise ParameterError(f"p_flip must lie in [0, 0.5), got {p_flip}")
    grid = frame.class_grid
    if p_flip == 0.0:
        return replace(frame, class_grid=grid.copy())
    flip = rng.random(grid.shape) < p_flip
    out = grid.copy()
    shift = rng.integers(1, n_classes, size=int(flip.sum()))
    out[flip] = ((grid[flip].astype(np.int64) + shift) % n_classes).astype(grid.dtype)
    return replace(frame, class_grid=out)


# --------------------------------------------------------------------------
# point clouds

def _box_surfaces(box):
    """The six faces of ``box`` as ``(origin, u, v)`` parallelograms."""
    lo = np.asarray(box.lo, float)
    hi = np.asarray(box.hi, float)
    ext = hi - lo
    out = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        u = np.zeros(3)
        v = np.zeros(3)
        u[a] = ext[a]
        v[b] = ext[b]
        for side in (lo, hi):
            origin = lo.copy()
            origin[axis] = side[axis]
            out.append((origin, u, v))
    return out


def sample_surfaces(boxes, density, seed, keys=None):
    """Uniform points on all faces of ``boxes``; ``round(density * area)`` per face."""
    if not density > 0:
        raise ParameterError("density must be positive")
    chunks = []
    for i, box in enumerate(boxes):
        key = keys[i] if keys is not None else (box.key or ("box", i))
        for f, (origin, u, v) in enumerate(_box_surfaces(box)):
            area = np.linalg.norm(np.cross(u, v))
            n = int(round(density * area))
            if n == 0:
                continue
            rng = substream(seed, *key, "face", f)
            st = rng.random((n, 2))
            chunks.append(origin + st[:, :1] * u + st[:, 1:] * v)
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks)


def sample_point_cloud(layout, density_pts_per_m2=2.0, rng=None, include_shell=True):
    """Static point cloud: objects, columns, crossbeams and building shell.

    Each surface draws from its own sub-stream keyed by the entity, so two
    layouts that differ in one entity share every other point exactly.
    """
    rng = rng if rng is not None else np.random.default_rng()
    seed = derive_seed(rng)
    boxes = layout.static_boxes()
    if include_shell:
        boxes.append(Box((0.0, 0.0, 0.0), (layout.length_m, layout.width_m, layout.height_m),
                         False, ("shell",)))
    return PointCloud(sample_surfaces(boxes, density_pts_per_m2, seed))


# --------------------------------------------------------------------------
# paths

@dataclass
class Trajectory:
    positions: np.ndarray      # (F, 3) user antenna positions

    def __len__(self):
        return len(self.positions)


class FrameSequence(Sequence):
    """Lazily rendered frames of a simulated path."""

    def __init__(self, rasterizer, states):
        self._r = rasterizer
        self._states = states

    def __len__(self):
        return len(self._states)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        return self._r.render(self._states[i], frame_index=i)


@dataclass
class SimulatedPath:
    trajectory: Trajectory
    frames: FrameSequence
    states: list               # per frame: {instance_id: MotionState}
    attempts: int = 1

    def __iter__(self):
        # unpacks as ``trajectory, frames``
        return iter((self.trajectory, self.frames))


class MotionSimulator:
    """Steps every dynamic object of a layout at a fixed frame interval.

    Each entity draws from its own named sub-stream of ``seed``.
    """

    def __init__(self, layout, cfg=None, seed=0, dt_s=FRAME_INTERVAL_MS / 1000.0):
        self.layout = layout
        self.cfg = cfg or SceneConfig()
        self.dt_s = dt_s
        self.seed = seed
        self.rngs = {}
        self.states = {}
        area = layout.transport_area
        for obj in layout.dynamic_objects:
            rng = substream(seed, obj.motion_kind, obj.instance_id)
            self.rngs[obj.instance_id] = rng
            if obj.motion_kind == "arm":
                self.states[obj.instance_id] = MotionState(
                    obj.anchor, 0.0, 0.0, float(rng.uniform(0.0, 360.0)))
            elif obj.anchor == "user":
                self.states[obj.instance_id] = MotionState(
                    tuple(self.cfg.user_start), 180.0, 1.0)
            else:
                self.states[obj.instance_id] = self._spawn_vehicle(rng, area)
        self.user_id = layout.user.instance_id if layout.user is not None else None
        self.reached = False

    def _spawn_vehicle(self, rng, area):
        o = area.outer
        inner = area.inner
        sx, sy = self.cfg.user_start
        for _ in range(10000):
            x = rng.uniform(o.x0, o.x1)
            y = rng.uniform(o.y0, o.y1)
            if area.contains(x, y) and math.hypot(x - sx, y - sy) > 6.0:
                break
        else:
            raise LayoutError("could not spawn vehicle in transport area")
        horizontal = y < inner.y0 or y > inner.y1
        heading = float(rng.choice([0.0, 180.0] if horizontal else [90.0, 270.0]))
        speed = float(rng.uniform(*self.cfg.motion.speed_bounds))
        return MotionState((x, y), heading, speed)

    def step(self):
        mcfg = self.cfg.motion
        area = self.layout.transport_area
        goal = self.cfg.user_end
        new = {}
        for obj in self.layout.dynamic_objects:
            iid = obj.instance_id
            st = self.states[iid]
            rng = self.rngs[iid]
            if obj.motion_kind == "arm":
                new[iid] = step_arm(st, mcfg, self.dt_s, rng)
            elif iid == self.user_id:
                if self.reached:
                    new[iid] = st
                    continue
                nxt = step_vehicle(st, mcfg, self.dt_s, rng, area=area, target=goal)
                remaining = math.hypot(goal[0] - st.position[0], goal[1] - st.position[1])
                if remaining <= nxt.speed_mps * self.dt_s:
                    nxt = replace(nxt, position=tuple(goal))
                    self.reached = True
                new[iid] = nxt
            else:
                new[iid] = step_vehicle(st, mcfg, self.dt_s, rng, area=area)
        self.states = new
        return new


def simulate_path(layout, cfg=None, rng=None, resolution=DEFAULT_RESOLUTION):
    """Simulate one user path from start to end point.

    Motion is simulated first; attempts whose frame count falls outside
    ``cfg.frame_band`` are redrawn from a fresh sub-stream.  Frames are
    rendered lazily from the recorded states.
    """
    cfg = cfg or SceneConfig()
    rng = rng if rng is not None else np.random.default_rng()
    lo, hi = cfg.frame_band
    if layout.user is None:
        raise SimulationError("layout has no user vehicle")
    for attempt in range(1, cfg.max_attempts + 1):
        sim = MotionSimulator(layout, cfg, seed=derive_seed(rng))
        states = [dict(sim.states)]
        while not sim.reached and len(states) <= hi:
            states.append(dict(sim.step()))
        if sim.reached and lo <= len(states) <= hi:
            uid = sim.user_id
            z = cfg.antenna_height
            pos = np.array([[*s[uid].position, z] for s in states])
            return SimulatedPath(Trajectory(pos), FrameSequence(Rasterizer(layout, resolution), states),
                                 states, attempt)
    raise SimulationError(f"user path did not finish within {lo}-{hi} frames "
                          f"after {cfg.max_attempts} attempts")

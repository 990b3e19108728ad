"""Deterministic quasi-static tabletop world.

Bodies are convex polygons lying flat in a square workspace centered on the
origin.  The world supports rendering (height map and ground-truth masks),
a position-based push model, a geometric parallel-jaw grasp oracle and
exact snapshot/restore through a canonical binary serialization.
"""
from __future__ import annotations

import copy
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import collision as cg
from .geometry2d import GridSpec, Pose2, normalize_angle, rotate_xy, unit_vector


class SceneTooDense(RuntimeError):
    """Rejection sampling could not place every object."""


class InvalidAction(ValueError):
    """A push whose start pose is outside the workspace or inside a body."""


class SceneParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GripperSpec:
    opening: float = 0.08
    finger_width: float = 0.01
    finger_depth: float = 0.02
    pusher_radius: float = 0.01

    def __post_init__(self):
        if not (self.opening > self.finger_width > 0):
            raise ValueError("gripper needs opening > finger_width > 0")


@dataclass(frozen=True)
class SimConfig:
    substep: float = 0.002
    iterations: int = 8
    kappa: float = 1.0
    contact_tol: float = 0.001
    settle_iterations: int = 200
    settle_tol: float = 0.00025
    min_contact_width: float = 0.005


@dataclass
class Body:
    id: int
    vertices: np.ndarray  # local frame, CCW, centroid at origin
    pose: Pose2
    height: float = 0.03

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if not cg.is_convex_ccw(self.vertices):
            raise ValueError(f"body {self.id}: polygon must be convex and counterclockwise")
        if cg.polygon_area(self.vertices) <= 1e-6:
            raise ValueError(f"body {self.id}: degenerate polygon")

    def world_vertices(self) -> np.ndarray:
        c, s = unit_vector(self.pose.theta)
        R = np.array([[c, -s], [s, c]])
        return self.vertices @ R.T + np.array([self.pose.x, self.pose.y])

    @property
    def area(self) -> float:
        return cg.polygon_area(self.vertices)

    def graspable_width(self, theta: float) -> float:
        """Extent of the body along direction ``theta`` (support-function width)."""
        u = np.array(unit_vector(theta))
        p = self.world_vertices() @ u
        return float(p.max() - p.min())


@dataclass
class Scene:
    bodies: List[Body]
    bounds: Tuple[float, float, float, float] = (-0.2, -0.2, 0.2, 0.2)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def copy(self) -> "Scene":
        return deserialize_scene(serialize_scene(self))

    def body(self, body_id: int) -> Body:
        for b in self.bodies:
            if b.id == body_id:
                return b
        raise KeyError(body_id)

    @property
    def ids(self) -> List[int]:
        return [b.id for b in self.bodies]

    def rotated(self, angle: float) -> "Scene":
        out = self.copy()
        for b in out.bodies:
            b.pose = b.pose.rotated(angle)
        return out

    def without(self, body_id: int) -> "Scene":
        out = self.copy()
        out.bodies = [b for b in out.bodies if b.id != body_id]
        return out

    def max_penetration(self) -> float:
        polys = [b.world_vertices() for b in self.bodies]
        worst = 0.0
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                hit = cg.sat_penetration(polys[i], polys[j])
                if hit is not None:
                    worst = max(worst, hit[0])
        return worst


# ---------------------------------------------------------------------------
# serialization
#
# Layout (little-endian):
#   magic  b"PGSC"            4 bytes
#   version u16 (=1)
#   bounds  4 x f64           xmin, ymin, xmax, ymax
#   rng     PCG64 state u128 (as 2 x u64 lo/hi), inc u128, has_uint32 u32, uinteger u32
#   n_bodies u32
#   per body: id u32, height f64, x f64, y f64, theta f64, n_vertices u32, n x (vx f64, vy f64)

_MAGIC = b"PGSC"
_VERSION = 1
_MASK64 = (1 << 64) - 1


def _pack_u128(v: int) -> bytes:
    return struct.pack("<QQ", v & _MASK64, v >> 64)


def serialize_scene(scene: Scene) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(struct.pack("<4d", *scene.bounds))
    st = scene.rng.bit_generator.state
    buf.write(_pack_u128(st["state"]["state"]))
    buf.write(_pack_u128(st["state"]["inc"]))
    buf.write(struct.pack("<II", st["has_uint32"], st["uinteger"]))
    buf.write(struct.pack("<I", len(scene.bodies)))
    for b in scene.bodies:
        buf.write(struct.pack("<I4dI", b.id, b.height, b.pose.x, b.pose.y, b.pose.theta, len(b.vertices)))
        buf.write(b.vertices.astype("<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise SceneParseError(f"truncated input, need {size} bytes for {fmt!r}", self.pos)
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def deserialize_scene(data: bytes) -> Scene:
    r = _Reader(data)
    (magic,) = r.take("<4s")
    if magic != _MAGIC:
        raise SceneParseError("bad magic", 0)
    (version,) = r.take("<H")
    if version != _VERSION:
        raise SceneParseError(f"unsupported version {version}", 4)
    bounds = r.take("<4d")
    s_lo, s_hi, i_lo, i_hi = r.take("<4Q")
    has32, uint = r.take("<II")
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
        "has_uint32": has32,
        "uinteger": uint,
    }
    (n,) = r.take("<I")
    bodies = []
    for _ in range(n):
        start = r.pos
        bid, h, x, y, th, nv = r.take("<I4dI")
        flat = r.take(f"<{2 * nv}d")
        try:
            body = Body(bid, np.array(flat).reshape(nv, 2), Pose2(x, y, th), h)
        except ValueError as exc:
            raise SceneParseError(str(exc), start) from None
        # keep the stored angle bit-exact
        object.__setattr__(body.pose, "theta", th)
        bodies.append(body)
    if r.pos != len(data):
        raise SceneParseError("trailing bytes", r.pos)
    return Scene(bodies, tuple(bounds), np.random.Generator(bitgen))


@dataclass(frozen=True)
class SceneSnapshot:
    data: bytes


def snapshot(scene: Scene) -> SceneSnapshot:
    return SceneSnapshot(serialize_scene(scene))


def restore(snap: SceneSnapshot) -> Scene:
    return deserialize_scene(snap.data)


# ---------------------------------------------------------------------------
# primitive library and scene generation


def rect_vertices(a: float, b: float) -> np.ndarray:
    return np.array([[-a / 2, -b / 2], [a / 2, -b / 2], [a / 2, b / 2], [-a / 2, b / 2]])


def disc_vertices(r: float, n: int = 32) -> np.ndarray:
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def triangle_vertices(base: float, height: float, apex: float) -> np.ndarray:
    v = np.array([[-base / 2, 0.0], [base / 2, 0.0], [apex * base / 2, height]])
    return v - cg.polygon_centroid(v)


def sample_primitive(rng: np.random.Generator) -> Tuple[np.ndarray, str]:
    kind = ("rect", "disc", "triangle", "bar")[int(rng.integers(4))]
    if kind == "rect":
        verts = rect_vertices(rng.uniform(0.02, 0.06), rng.uniform(0.02, 0.06))
    elif kind == "disc":
        verts = disc_vertices(rng.uniform(0.01, 0.03))
    elif kind == "triangle":
        verts = triangle_vertices(rng.uniform(0.03, 0.06), rng.uniform(0.025, 0.05), rng.uniform(-0.5, 0.5))
    else:
        verts = rect_vertices(rng.uniform(0.06, 0.08), rng.uniform(0.015, 0.025))
    return verts, kind


def _placement_half_extent(n_objects: int) -> float:
    # denser scenes spread out, sparse ones stay clustered near the center
    return min(0.17, 0.06 + 0.011 * n_objects)


def spawn_random_scene(n_objects: int, seed: int, max_rejections: int = 10000) -> Scene:
    if not 1 <= n_objects <= 30:
        raise ValueError("n_objects must be in [1, 30]")
    rng = np.random.default_rng(seed)
    bounds = (-0.2, -0.2, 0.2, 0.2)
    half = _placement_half_extent(n_objects)
    bodies: List[Body] = []
    polys: List[np.ndarray] = []
    rejections = 0
    while len(bodies) < n_objects:
        verts, _ = sample_primitive(rng)
        height = float(rng.uniform(0.02, 0.04))
        pose = Pose2(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(0, 2 * np.pi))
        body = Body(len(bodies), verts, pose, height)
        wv = body.world_vertices()
        ok = (wv[:, 0].min() > bounds[0] and wv[:, 1].min() > bounds[1]
              and wv[:, 0].max() < bounds[2] and wv[:, 1].max() < bounds[3])
        ok = ok and not any(cg.polygons_overlap(wv, p) for p in polys)
        if ok:
            bodies.append(body)
            polys.append(wv)
        else:
            rejections += 1
            if rejections > max_rejections:
                raise SceneTooDense(f"placed {len(bodies)} of {n_objects} objects")
    return Scene(bodies, bounds, rng)


CONSTRAINED_CASES = {
    1: "flanking pair",
    2: "L-wall with bumper",
    3: "U",
    4: "ring-4",
    5: "ring-6",
    6: "line-3",
    7: "2x2 corner cluster",
    8: "enclosure with one gap",
}


def _constrained_layout(case_id: int, rng: np.random.Generator):
    """Local-frame boxes ``(x, y, length_x, width_y)``; index 0 is the target."""
    TL = rng.uniform(0.074, 0.078)
    TW = rng.uniform(0.028, 0.032)
    gap = lambda: rng.uniform(0.0002, 0.001)  # noqa: E731
    FW = 0.035
    boxes = [(0.0, 0.0, TL, TW)]

    def flank(side, length=None, dx=0.0):
        L = length if length is not None else rng.uniform(0.09, 0.10)
        boxes.append((dx + rng.uniform(-0.002, 0.002), side * (TW / 2 + gap() + FW / 2), L, FW))

    def end(side, width_y=None):
        # sits in the channel between flanks, so no lateral jitter
        EL = 0.03
        boxes.append((side * (TL / 2 + gap() + EL / 2), 0.0, EL, width_y or TW - 0.001))

    if case_id == 1:
        flank(+1), flank(-1)
    elif case_id == 2:
        # L-shaped wall along +y and the -x end, bumper under the +x half
        flank(+1, length=TL + 0.004, dx=0.004)
        end(-1)
        boxes.append((0.025 + rng.uniform(-0.002, 0.002), -(TW / 2 + gap() + FW / 2), 0.045, FW))
    elif case_id == 3:
        flank(+1), flank(-1)
        end(+1)
    elif case_id == 4:
        flank(+1, length=TL), flank(-1, length=TL)
        end(+1), end(-1)
    elif case_id == 5:
        for side in (+1, -1):
            for dx in (-1, 1):
                half_len = TL / 2 - 0.0005
                boxes.append((dx * (half_len / 2 + 0.0005), side * (TW / 2 + gap() + FW / 2), half_len, FW))
        end(+1), end(-1)
    elif case_id == 6:
        for side in (+1, -1):
            boxes.append((rng.uniform(-0.002, 0.002), side * (TW + gap()), TL, TW))
    elif case_id == 7:
        # four boxes hugging the target's corners
        for side in (+1, -1):
            for dx in (-1, 1):
                boxes.append((dx * (0.022 + rng.uniform(-0.001, 0.001)), side * (TW / 2 + gap() + FW / 2), 0.04, FW))
    elif case_id == 8:
        S = 0.03
        for side in (+1, -1):
            for k in (-1, 0, 1):
                boxes.append((k * (S + 0.001), side * (TW / 2 + gap() + S / 2), S, S))
        boxes.append((-(TL / 2 + gap() + S / 2), 0.0, S, TW - 0.001))
    else:
        raise ValueError(f"unknown constrained case {case_id}")
    return boxes


def spawn_constrained_case(case_id: int, seed: int, rotation: Optional[float] = None) -> Tuple[Scene, int]:
    """A target box packed between obstacle boxes; returns ``(scene, target_id)``.

    The whole layout is jittered and rotated by a seeded random angle, which
    ``rotation`` overrides (the other random draws are unaffected).
    """
    rng = np.random.default_rng([case_id, seed])
    boxes = _constrained_layout(case_id, rng)
    phi = rng.uniform(0.0, 2 * np.pi)
    offset = rng.uniform(-0.02, 0.02, size=2)
    heights = rng.uniform(0.02, 0.04, size=len(boxes))
    if rotation is not None:
        phi = rotation
    bodies = []
    for k, (x, y, a, b) in enumerate(boxes):
        local = Pose2(x + offset[0], y + offset[1], 0.0)
        bodies.append(Body(k, rect_vertices(a, b), local.rotated(phi), float(heights[k])))
    return Scene(bodies, (-0.2, -0.2, 0.2, 0.2), rng), 0


def contacting_neighbors(scene: Scene, body_id: int, tol: float = 0.002) -> List[int]:
    target = scene.body(body_id).world_vertices()
    return [b.id for b in scene.bodies
            if b.id != body_id and cg.polygon_distance(target, b.world_vertices()) <= tol]


# ---------------------------------------------------------------------------
# rendering


@dataclass
class MaskSet:
    ids: List[int]
    masks: np.ndarray  # (n, h, w) bool, per-body visible region
    union: np.ndarray

    def mask_of(self, body_id: int) -> np.ndarray:
        return self.masks[self.ids.index(body_id)]


def _rasterize(scene: Scene, grid: GridSpec):
    X, Y = grid.pixel_centers()
    depth = np.zeros((grid.h, grid.w))
    owner = np.full((grid.h, grid.w), -1, dtype=np.int64)
    x0, y0 = grid.origin
    mpp = grid.meters_per_pixel
    for k, b in enumerate(scene.bodies):
        wv = b.world_vertices()
        j_lo = max(0, math.floor((wv[:, 0].min() - x0) / mpp) - 1)
        j_hi = min(grid.w, math.ceil((wv[:, 0].max() - x0) / mpp) + 2)
        i_lo = max(0, math.floor((wv[:, 1].min() - y0) / mpp) - 1)
        i_hi = min(grid.h, math.ceil((wv[:, 1].max() - y0) / mpp) + 2)
        if j_lo >= j_hi or i_lo >= i_hi:
            continue
        sl = (slice(i_lo, i_hi), slice(j_lo, j_hi))
        inside = cg.points_in_polygon(wv, X[sl], Y[sl])
        win_d = depth[sl]
        win_o = owner[sl]
        # taller body wins; equal heights keep the earlier body
        take = inside & (b.height > win_d)
        win_d[take] = b.height
        win_o[take] = k
    return depth, owner


def render_depth(scene: Scene, grid: GridSpec) -> np.ndarray:
    return _rasterize(scene, grid)[0]


def render_masks(scene: Scene, grid: GridSpec) -> MaskSet:
    _, owner = _rasterize(scene, grid)
    masks = np.stack([owner == k for k in range(len(scene.bodies))]) if scene.bodies \
        else np.zeros((0, grid.h, grid.w), dtype=bool)
    return MaskSet(scene.ids, masks, owner >= 0)


def write_pgm(path, image: np.ndarray, scale: float = 0.0005) -> None:
    """16-bit binary PGM; pixel value = image / scale (0.5 mm per unit by default)."""
    vals = np.clip(np.round(np.asarray(image, dtype=np.float64) / scale), 0, 65535).astype(">u2")
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.tobytes())


def write_label_pgm(path, masks: MaskSet) -> None:
    """Mask set as a 16-bit PGM label image (body id + 1, background 0)."""
    labels = np.zeros(masks.union.shape)
    for bid, m in zip(masks.ids, masks.masks):
        labels[m] = bid + 1
    write_pgm(path, labels, scale=1.0)


# ---------------------------------------------------------------------------
# pushing


class _Dyn:
    """Mutable body state used inside the push solver."""

    __slots__ = ("body", "p", "theta", "verts", "radius", "gyr")

    def __init__(self, body: Body):
        self.body = body
        self.p = np.array([body.pose.x, body.pose.y])
        self.theta = body.pose.theta
        self.radius = cg.bounding_radius(body.vertices)
        self.gyr = cg.polygon_gyration_sq(body.vertices)
        self._update()

    def _update(self):
        c, s = unit_vector(self.theta)
        self.verts = self.body.vertices @ np.array([[c, s], [-s, c]]) + self.p

    def apply(self, delta: np.ndarray, contact: np.ndarray, kappa: float):
        lever = contact - self.p
        torque = lever[0] * delta[1] - lever[1] * delta[0]
        self.p = self.p + delta
        self.theta = self.theta + kappa * torque / self.gyr
        self._update()

    def shift(self, delta: np.ndarray):
        self.p = self.p + delta
        self.verts = self.verts + delta

    def commit(self):
        self.body.pose = Pose2(float(self.p[0]), float(self.p[1]), self.theta)


def _resolve_pairs(dyn: Sequence[_Dyn], kappa: float) -> float:
    worst = 0.0
    n = len(dyn)
    for i in range(n):
        a = dyn[i]
        for j in range(i + 1, n):
            b = dyn[j]
            d = b.p - a.p
            if d[0] * d[0] + d[1] * d[1] >= (a.radius + b.radius) ** 2:
                continue
            hit = cg.sat_penetration(a.verts, b.verts)
            if hit is None:
                continue
            depth, normal, contact = hit
            worst = max(worst, depth)
            half = 0.5 * depth * normal
            a.apply(-half, contact, kappa)
            b.apply(half, contact, kappa)
    return worst


def _resolve_pusher(dyn: Sequence[_Dyn], center: np.ndarray, radius: float, kappa: float) -> float:
    worst = 0.0
    for b in dyn:
        d = b.p - center
        if d[0] * d[0] + d[1] * d[1] >= (b.radius + radius) ** 2:
            continue
        hit = cg.circle_penetration(b.verts, center, radius)
        if hit is None:
            continue
        depth, normal, contact = hit
        worst = max(worst, depth)
        b.apply(depth * normal, contact, kappa)
    return worst


def _clamp_walls(dyn: Sequence[_Dyn], bounds):
    xmin, ymin, xmax, ymax = bounds
    for b in dyn:
        lo = b.verts.min(axis=0)
        hi = b.verts.max(axis=0)
        dx = max(0.0, xmin - lo[0]) - max(0.0, hi[0] - xmax)
        dy = max(0.0, ymin - lo[1]) - max(0.0, hi[1] - ymax)
        if dx != 0.0 or dy != 0.0:
            b.shift(np.array([dx, dy]))


def _pusher_depth(dyn: Sequence[_Dyn], center: np.ndarray, radius: float) -> float:
    worst = 0.0
    for b in dyn:
        hit = cg.circle_penetration(b.verts, center, radius)
        if hit is not None:
            worst = max(worst, hit[0])
    return worst


def push_start_valid(scene: Scene, x: float, y: float, gripper: GripperSpec,
                     config: SimConfig = SimConfig()) -> bool:
    xmin, ymin, xmax, ymax = scene.bounds
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        return False
    c = np.array([x, y])
    for b in scene.bodies:
        hit = cg.circle_penetration(b.world_vertices(), c, gripper.pusher_radius)
        if hit is not None and hit[0] > config.contact_tol:
            return False
    return True


def execute_push(scene: Scene, pose: Pose2, distance: float = 0.10,
                 gripper: GripperSpec = GripperSpec(), config: SimConfig = SimConfig()) -> Scene:
    """Sweep the pusher disc from ``pose`` along its heading.

    Returns a new scene; the input is not modified.  The sweep stops early
    if the pusher jams (a wall-clamped body it cannot displace).
    """
    if distance <= 0:
        raise InvalidAction("push distance must be positive")
    if not push_start_valid(scene, pose.x, pose.y, gripper, config):
        raise InvalidAction(f"push start ({pose.x:.4f}, {pose.y:.4f}) is blocked or outside the workspace")
    out = scene.copy()
    dyn = [_Dyn(b) for b in out.bodies]
    u = np.array(unit_vector(pose.theta))
    start = np.array([pose.x, pose.y])
    n_sub = max(1, math.ceil(distance / config.substep - 1e-9))
    r = gripper.pusher_radius
    for k in range(1, n_sub + 1):
        center = start + u * min(distance, k * config.substep)
        for _ in range(config.iterations):
            _resolve_pairs(dyn, config.kappa)
            _resolve_pusher(dyn, center, r, config.kappa)
            _clamp_walls(dyn, out.bounds)
        if _pusher_depth(dyn, center, r) > config.contact_tol:
            break
    for _ in range(config.settle_iterations):
        worst = _resolve_pairs(dyn, config.kappa)
        _clamp_walls(dyn, out.bounds)
        if worst <= config.settle_tol:
            break
    for d in dyn:
        d.commit()
    return out


# ---------------------------------------------------------------------------
# grasping


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    removed_body: Optional[int] = None
    reason: str = ""

    def __post_init__(self):
        if self.success != (self.removed_body is not None):
            raise ValueError("success must coincide with a removed body")


def grasp_geometry(pose: Pose2, gripper: GripperSpec):
    """Finger rectangles and closing corridor as world polygons."""
    ux, uy = unit_vector(pose.theta)
    half = 0.5 * gripper.opening
    fingers = [
        cg.rect_polygon(pose.x + s * half * ux, pose.y + s * half * uy, ux, uy,
                        0.5 * gripper.finger_width, 0.5 * gripper.finger_depth)
        for s in (1.0, -1.0)
    ]
    corridor = cg.rect_polygon(pose.x, pose.y, ux, uy, half, 0.5 * gripper.finger_depth)
    return fingers, corridor


def evaluate_grasp(scene: Scene, pose: Pose2, gripper: GripperSpec = GripperSpec(),
                   config: SimConfig = SimConfig()) -> GraspOutcome:
    fingers, corridor = grasp_geometry(pose, gripper)
    reach = 0.5 * gripper.opening + gripper.finger_width + gripper.finger_depth
    center = np.array([pose.x, pose.y])
    polys = {}
    for b in scene.bodies:
        d = np.hypot(b.pose.x - pose.x, b.pose.y - pose.y)
        if d <= reach + cg.bounding_radius(b.vertices):
            polys[b.id] = b.world_vertices()
    for bid, wv in polys.items():
        if any(cg.polygons_overlap(f, wv) for f in fingers):
            return GraspOutcome(False, None, "finger_collision")
    inside = [bid for bid, wv in polys.items() if cg.polygons_overlap(corridor, wv)]
    if len(inside) != 1:
        return GraspOutcome(False, None, "empty_corridor" if not inside else "multiple_bodies")
    bid = inside[0]
    u = np.array(unit_vector(pose.theta))
    half = 0.5 * gripper.opening
    if cg.line_chord(polys[bid], center, u, -half, half) < config.min_contact_width:
        return GraspOutcome(False, None, "thin_contact")
    return GraspOutcome(True, bid, "")


def execute_grasp(scene: Scene, pose: Pose2, gripper: GripperSpec = GripperSpec(),
                  config: SimConfig = SimConfig()) -> Tuple[GraspOutcome, Scene]:
    outcome = evaluate_grasp(scene, pose, gripper, config)
    if outcome.success:
        return outcome, scene.without(outcome.removed_body)
    return outcome, scene

"""Planar poses, the discretized SE(2) action space and the cyclic-group action.

Conventions used throughout the package:

* World frame is metric, the workspace is centered on the origin.
* Pixel ``(i, j)`` has its center at ``x = origin[0] + j * mpp``,
  ``y = origin[1] + i * mpp``; rows follow +y and columns follow +x.
* A group element ``g_m`` of ``C_N`` rotates the world counterclockwise by
  ``2*pi*m/N`` about the workspace center.  On images this is the index
  permutation returned by :func:`rotate_image`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * math.pi
_EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap an angle to ``[0, 2*pi)``."""
    t = math.fmod(theta, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    if t >= TWO_PI:
        t = 0.0
    return t


def quarter_turns(angle: float) -> int | None:
    """Return k if ``angle`` is k quarter turns (mod 4), otherwise None."""
    q = angle / (0.5 * math.pi)
    k = round(q)
    if abs(q - k) < 1e-9:
        return k % 4
    return None


def rotate_xy(x: float, y: float, angle: float) -> Tuple[float, float]:
    """Rotate a point about the origin; exact for quarter turns."""
    k = quarter_turns(angle)
    if k is not None:
        for _ in range(k):
            x, y = -y, x
        return x, y
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def rotated(self, angle: float) -> "Pose2":
        """This pose after a world rotation about the origin by ``angle``."""
        x, y = rotate_xy(self.x, self.y, angle)
        return Pose2(x, y, self.theta + angle)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class GridSpec:
    h: int = 96
    w: int = 96
    meters_per_pixel: float = 0.40 / 96
    origin: Tuple[float, float] | None = None

    def __post_init__(self):
        if self.h != self.w:
            raise ValueError("grid must be square")
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")
        if self.origin is None:
            half = -(self.h - 1) / 2.0 * self.meters_per_pixel
            object.__setattr__(self, "origin", (half, half))

    @classmethod
    def centered(cls, size: int, span: float = 0.40) -> "GridSpec":
        return cls(size, size, span / size)

    @property
    def span(self) -> float:
        return self.h * self.meters_per_pixel

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """Workspace ``(xmin, ymin, xmax, ymax)`` covered by the pixels."""
        half = 0.5 * self.meters_per_pixel
        x0, y0 = self.origin
        return (x0 - half, y0 - half, x0 - half + self.span, y0 - half + self.span)

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """World ``(X, Y)`` arrays of shape ``(h, w)``."""
        j = np.arange(self.w, dtype=np.float64)
        i = np.arange(self.h, dtype=np.float64)
        # symmetric offsets keep quarter-turn rotations exact
        cj = (j - (self.w - 1) / 2.0) * self.meters_per_pixel
        ci = (i - (self.h - 1) / 2.0) * self.meters_per_pixel
        cx = self.origin[0] + (self.w - 1) / 2.0 * self.meters_per_pixel
        cy = self.origin[1] + (self.h - 1) / 2.0 * self.meters_per_pixel
        X, Y = np.meshgrid(cj + cx, ci + cy)
        return X, Y

    def pixel_to_world(self, i: int, j: int) -> Tuple[float, float]:
        mpp = self.meters_per_pixel
        cx = self.origin[0] + (self.w - 1) / 2.0 * mpp
        cy = self.origin[1] + (self.h - 1) / 2.0 * mpp
        return (cx + (j - (self.w - 1) / 2.0) * mpp, cy + (i - (self.h - 1) / 2.0) * mpp)

    def world_to_pixel(self, x: float, y: float) -> Tuple[int, int]:
        """Nearest pixel center; raises ValueError outside the grid."""
        j = math.floor((x - self.origin[0]) / self.meters_per_pixel + 0.5)
        i = math.floor((y - self.origin[1]) / self.meters_per_pixel + 0.5)
        if not (0 <= i < self.h and 0 <= j < self.w):
            raise ValueError(f"point ({x:.4f}, {y:.4f}) is outside the workspace")
        return i, j


@dataclass(frozen=True)
class OrientationScheme:
    """Discrete orientation bins and how the rotation group permutes them."""

    group_order: int
    n_orient: int
    range: str = "half"

    def __post_init__(self):
        if self.range not in ("half", "full"):
            raise ValueError("range must be 'half' or 'full'")
        if self.group_order < 1 or self.n_orient < 1:
            raise ValueError("group_order and n_orient must be positive")
        num = self.n_orient * (2 if self.range == "half" else 1)
        if num % self.group_order:
            raise ValueError(
                f"{self.n_orient} {self.range}-range bins are not permuted by C_{self.group_order}"
            )

    @classmethod
    def grasp_default(cls, group_order: int = 4) -> "OrientationScheme":
        return cls(group_order, 18, "half")

    @classmethod
    def push_default(cls, group_order: int = 4) -> "OrientationScheme":
        return cls(group_order, 16 if group_order == 4 else 18, "full")

    @property
    def range_degrees(self) -> float:
        return 180.0 if self.range == "half" else 360.0

    @property
    def bin_width(self) -> float:
        """Bin width in degrees."""
        return self.range_degrees / self.n_orient

    @property
    def shift_per_generator(self) -> int:
        num = self.n_orient * (2 if self.range == "half" else 1)
        return num // self.group_order

    @property
    def full_circle_bins(self) -> int:
        """Bins needed to tile 360 degrees at this resolution."""
        return self.n_orient * (2 if self.range == "half" else 1)

    def bin_of_angle(self, theta: float) -> int:
        deg = math.degrees(theta) % self.range_degrees
        return math.floor(deg / self.bin_width + 0.5 + _EPS) % self.n_orient

    def angle_of_bin(self, c: int) -> float:
        return math.radians(c * self.bin_width)


@dataclass(frozen=True)
class GroupElement:
    index: int
    N: int

    def __post_init__(self):
        object.__setattr__(self, "index", self.index % self.N)

    @property
    def angle(self) -> float:
        return TWO_PI * self.index / self.N

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        if other.N != self.N:
            raise ValueError("group orders differ")
        return GroupElement(self.index + other.index, self.N)

    def inverse(self) -> "GroupElement":
        return GroupElement(-self.index, self.N)

    @staticmethod
    def all(N: int):
        return [GroupElement(m, N) for m in range(N)]


@dataclass
class ActionMap:
    scheme: OrientationScheme
    grid: GridSpec
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores)
        expected = (self.scheme.n_orient, self.grid.h, self.grid.w)
        if self.scores.shape != expected:
            raise ValueError(f"scores shape {self.scores.shape} != {expected}")

    def argmax(self) -> Tuple[int, int, int]:
        """Lowest linear index among the maxima."""
        flat = int(np.argmax(self.scores))
        return tuple(int(v) for v in np.unravel_index(flat, self.scores.shape))

    def masked(self, valid: np.ndarray) -> "ActionMap":
        """Copy with entries outside ``valid`` set to -inf.

        ``valid`` may be ``(h, w)`` (all bins) or ``(n_orient, h, w)``.
        """
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), self.scores.shape)
        scores = np.where(valid, self.scores, -np.inf)
        return ActionMap(self.scheme, self.grid, scores)


def index_from_pose(pose: Pose2, grid: GridSpec, scheme: OrientationScheme) -> Tuple[int, int, int]:
    i, j = grid.world_to_pixel(pose.x, pose.y)
    return scheme.bin_of_angle(pose.theta), i, j


def pose_from_index(c: int, i: int, j: int, grid: GridSpec, scheme: OrientationScheme) -> Pose2:
    if not (0 <= c < scheme.n_orient and 0 <= i < grid.h and 0 <= j < grid.w):
        raise ValueError(f"index ({c}, {i}, {j}) out of range")
    x, y = grid.pixel_to_world(i, j)
    return Pose2(x, y, scheme.angle_of_bin(c))


# ---------------------------------------------------------------------------
# image rotation


def _bilinear_weights(size: int, angle: float):
    """Source indices/weights for a counterclockwise world rotation."""
    c0 = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64) - c0
    u, v = np.meshgrid(idx, idx)  # u ~ column (x), v ~ row (y)
    cs, sn = math.cos(angle), math.sin(angle)
    # inverse rotation gives the sampling location
    us = cs * u + sn * v + c0
    vs = -sn * u + cs * v + c0
    j0 = np.floor(us).astype(np.int64)
    i0 = np.floor(vs).astype(np.int64)
    fj = us - j0
    fi = vs - i0
    srcs, wts = [], []
    for di, dj, wgt in ((0, 0, (1 - fi) * (1 - fj)), (0, 1, (1 - fi) * fj),
                        (1, 0, fi * (1 - fj)), (1, 1, fi * fj)):
        ii, jj = i0 + di, j0 + dj
        inside = (ii >= 0) & (ii < size) & (jj >= 0) & (jj < size)
        srcs.append(np.where(inside, ii * size + jj, 0))
        wts.append(np.where(inside, wgt, 0.0))
    return np.stack(srcs), np.stack(wts)


def rotation_matrix_for_grid(size: int, angle: float) -> np.ndarray:
    """Dense ``(size*size, size*size)`` matrix of the bilinear rotation."""
    srcs, wts = _bilinear_weights(size, angle)
    n = size * size
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for s, w in zip(srcs, wts):
        np.add.at(mat, (rows, s.ravel()), w.ravel())
    return mat


def rotate_image(arr, angle: float):
    """Rotate the last two (square) axes counterclockwise in world terms.

    Quarter turns are exact index permutations; other angles use bilinear
    interpolation with zero padding.  Works on numpy arrays and torch tensors.
    """
    k = quarter_turns(angle)
    is_np = isinstance(arr, np.ndarray)
    if k is not None:
        if k == 0:
            return arr.copy() if is_np else arr.clone()
        if is_np:
            return np.ascontiguousarray(np.rot90(arr, k=k, axes=(-1, -2)))
        import torch

        return torch.rot90(arr, k=k, dims=(-1, -2))
    size = arr.shape[-1]
    if arr.shape[-2] != size:
        raise ValueError("rotation needs square images")
    srcs, wts = _bilinear_weights(size, angle)
    lead = arr.shape[:-2]
    if is_np:
        flat = arr.reshape(lead + (size * size,))
        out = sum(flat[..., s.ravel()] * w.ravel() for s, w in zip(srcs, wts))
        return out.reshape(arr.shape)
    import torch

    flat = arr.reshape(lead + (size * size,))
    out = 0
    for s, w in zip(srcs, wts):
        out = out + flat[..., torch.as_tensor(s.ravel())] * torch.as_tensor(w.ravel(), dtype=arr.dtype)
    return out.reshape(arr.shape)


def act_on_image(g: GroupElement, image):
    return rotate_image(image, g.angle)


def act_on_map(g: GroupElement, amap: ActionMap) -> ActionMap:
    """Rotate the spatial slices and cyclically shift the orientation bins."""
    if g.N != amap.scheme.group_order:
        raise ValueError(f"group order {g.N} != scheme order {amap.scheme.group_order}")
    scores = amap.scores
    if quarter_turns(g.angle) is not None:
        rotated = rotate_image(scores, g.angle)
    else:
        invalid = np.isneginf(scores)
        rotated = rotate_image(np.where(invalid, 0.0, scores), g.angle)
        # masked entries follow the map with nearest-neighbor transport
        inv_rot = rotate_image(invalid.astype(np.float64), g.angle) > 0.5
        rotated = np.where(inv_rot, -np.inf, rotated)
    shift = (g.index * amap.scheme.shift_per_generator) % amap.scheme.n_orient
    return ActionMap(amap.scheme, amap.grid, np.roll(rotated, shift, axis=0))


def act_on_scene(g: GroupElement, scene):
    """Rotate every body about the workspace center (test fixture)."""
    return scene.rotated(g.angle)


# ---------------------------------------------------------------------------
# rasterisation helpers


def rect_contains(X: np.ndarray, Y: np.ndarray, cx: float, cy: float, ux: float, uy: float,
                  half_len: float, half_wid: float) -> np.ndarray:
    """Points inside a rectangle with long axis ``(ux, uy)``."""
    dx = X - cx
    dy = Y - cy
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return (np.abs(along) <= half_len) & (np.abs(across) <= half_wid)


def gripper_finger_rects(pose: Pose2, gripper) -> list:
    """The two finger rectangles as ``(cx, cy, ux, uy, half_along, half_across)``."""
    ux, uy = unit_vector(pose.theta)
    half = 0.5 * gripper.opening
    return [
        (pose.x + s * half * ux, pose.y + s * half * uy, ux, uy,
         0.5 * gripper.finger_width, 0.5 * gripper.finger_depth)
        for s in (1.0, -1.0)
    ]


def unit_vector(theta: float) -> Tuple[float, float]:
    """``(cos, sin)`` with exact values on quarter turns."""
    k = quarter_turns(theta)
    if k is not None:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k]
    return math.cos(theta), math.sin(theta)


def draw_gripper_footprint(pose: Pose2, grid: GridSpec, gripper) -> np.ndarray:
    """Binary image of the two finger rectangles."""
    X, Y = grid.pixel_centers()
    img = np.zeros((grid.h, grid.w), dtype=np.uint8)
    for rect in gripper_finger_rects(pose, gripper):
        img |= rect_contains(X, Y, *rect).astype(np.uint8)
    return img


def disc_structure(radius_px: int) -> np.ndarray:
    r = int(radius_px)
    d = np.arange(-r, r + 1)
    return (d[:, None] ** 2 + d[None, :] ** 2) <= r * r


def dilate_mask(mask: np.ndarray, radius_px: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius_px <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc_structure(radius_px))

"""BEV geometry: poses, oriented boxes, ego state, occlusion grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(float(theta), TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def rotate(x: float, y: float, theta: float) -> tuple[float, float]:
    c = math.cos(theta)
    s = math.sin(theta)
    return c * x - s * y, s * x + c * y


@dataclass(frozen=True, slots=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0


@dataclass(frozen=True, slots=True)
class OrientedBox:
    """Nine-component 3D box; only the BEV footprint enters decisions."""

    x: float
    y: float
    z: float
    h: float
    l: float
    w: float
    vx: float
    vy: float
    theta: float

    def __post_init__(self):
        if not (self.h > 0 and self.l > 0 and self.w > 0):
            raise ValueError(f"box dims must be positive, got h={self.h} l={self.l} w={self.w}")
        if not (-math.pi < self.theta <= math.pi):
            raise ValueError(f"heading {self.theta} outside (-pi, pi]")

    def bev(self) -> tuple[float, float, float, float, float]:
        return (self.x, self.y, self.l, self.w, self.theta)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x, self.y, self.z, self.h, self.l, self.w, self.vx, self.vy, self.theta)

    @classmethod
    def from_tuple(cls, t: Sequence[float]) -> "OrientedBox":
        return cls(*(float(v) for v in t))

    def moved(self, **kw) -> "OrientedBox":
        return replace(self, **kw)


@dataclass(frozen=True, slots=True)
class EgoState:
    x: float
    y: float
    theta: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not (-math.pi < self.theta <= math.pi):
            raise ValueError(f"ego heading {self.theta} outside (-pi, pi]")

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.theta)


def world_to_ego(box: OrientedBox, ego: EgoState) -> OrientedBox:
    px, py = rotate(box.x - ego.x, box.y - ego.y, -ego.theta)
    vx, vy = rotate(box.vx, box.vy, -ego.theta)
    return replace(box, x=px, y=py, vx=vx, vy=vy, theta=wrap_angle(box.theta - ego.theta))


def ego_to_world(box: OrientedBox, ego: EgoState) -> OrientedBox:
    px, py = rotate(box.x, box.y, ego.theta)
    vx, vy = rotate(box.vx, box.vy, ego.theta)
    return replace(box, x=px + ego.x, y=py + ego.y, vx=vx, vy=vy,
                   theta=wrap_angle(box.theta + ego.theta))


@dataclass(frozen=True, eq=False)
class OcclusionGrid:
    """Binary BEV occlusion raster in the ego frame.

    ``cells`` is (height, width), row-major with row 0 at the grid's
    lower-left origin; ``True`` marks an occluded cell.
    """

    origin: Pose2D
    cell: float
    width: int
    height: int
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        c = np.asarray(self.cells, dtype=bool)
        if c.size != self.width * self.height:
            raise ValueError(f"bitmask has {c.size} cells, expected {self.width * self.height}")
        c = c.reshape(self.height, self.width).copy()
        c.flags.writeable = False
        object.__setattr__(self, "cells", c)

    def __eq__(self, other):
        if not isinstance(other, OcclusionGrid):
            return NotImplemented
        return (self.origin == other.origin and self.cell == other.cell
                and self.width == other.width and self.height == other.height
                and np.array_equal(self.cells, other.cells))

    def __hash__(self):
        return hash((self.origin, self.cell, self.width, self.height, self.cells.tobytes()))

    @classmethod
    def empty(cls, origin: Pose2D, cell: float, width: int, height: int) -> "OcclusionGrid":
        return cls(origin, cell, width, height, np.zeros((height, width), dtype=bool))

    def cell_index(self, x: float, y: float) -> tuple[int, int] | None:
        """(row, col) containing the point, or None outside the extent."""
        qx, qy = rotate(x - self.origin.x, y - self.origin.y, -self.origin.theta)
        col = math.floor(qx / self.cell)
        row = math.floor(qy / self.cell)
        if 0 <= col < self.width and 0 <= row < self.height:
            return row, col
        return None

    def occluded_at(self, x: float, y: float) -> bool:
        idx = self.cell_index(x, y)
        return bool(self.cells[idx]) if idx is not None else False

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        gx = (np.arange(self.width) + 0.5) * self.cell
        gy = (np.arange(self.height) + 0.5) * self.cell
        gxx, gyy = np.meshgrid(gx, gy)
        c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
        return self.origin.x + c * gxx - s * gyy, self.origin.y + s * gxx + c * gyy


def iou_bev(a: OrientedBox, b: OrientedBox) -> float:
    """Area IoU of the two rotated BEV footprints."""
    return kernels.iou_bev(a.bev(), b.bev())


def box_corners(box: OrientedBox) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.x, box.y])

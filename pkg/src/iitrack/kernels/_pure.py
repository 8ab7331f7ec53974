"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so both backends give
identical results; the compiled module is preferred when it is importable.
"""
from __future__ import annotations

import math

import numpy as np

INF = float("inf")


def hungarian_max(score: np.ndarray) -> np.ndarray:
    """Maximum-weight perfect assignment on a square matrix.

    Returns ``col`` with ``col[r]`` the column assigned to row ``r``.
    Shortest-augmenting-path variant of Kuhn-Munkres with row/column
    potentials, O(n^3).
    """
    a = np.asarray(score, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError(f"square matrix required, got shape {a.shape}")
    cost = [[-float(v) for v in row] for row in a.tolist()]
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            crow = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = crow[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col


def _corners(x: float, y: float, l: float, w: float, th: float) -> list[tuple[float, float]]:
    c = math.cos(th)
    s = math.sin(th)
    hl = 0.5 * l
    hw = 0.5 * w
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((x + c * dx - s * dy, y + s * dx + c * dy))
    return out


def _clip(poly: list[tuple[float, float]], ax: float, ay: float, bx: float, by: float):
    # keep the part of poly left of the directed edge a->b
    out = []
    n = len(poly)
    if n == 0:
        return out
    ex = bx - ax
    ey = by - ay
    px, py = poly[n - 1]
    pside = ex * (py - ay) - ey * (px - ax)
    for k in range(n):
        qx, qy = poly[k]
        qside = ex * (qy - ay) - ey * (qx - ax)
        if qside >= 0.0:
            if pside < 0.0:
                t = pside / (pside - qside)
                out.append((px + t * (qx - px), py + t * (qy - py)))
            out.append((qx, qy))
        elif pside >= 0.0:
            t = pside / (pside - qside)
            out.append((px + t * (qx - px), py + t * (qy - py)))
        px, py, pside = qx, qy, qside
    return out


def _area(poly) -> float:
    n = len(poly)
    acc = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def iou_bev(a, b) -> float:
    """IoU of two rotated rectangles given as (x, y, l, w, theta)."""
    ax, ay, al, aw, ath = (float(t) for t in a[:5])
    bx, by, bl, bw, bth = (float(t) for t in b[:5])
    area_a = al * aw
    area_b = bl * bw
    # cheap reject on circumscribed circles
    dx = ax - bx
    dy = ay - by
    ra = 0.5 * math.sqrt(al * al + aw * aw)
    rb = 0.5 * math.sqrt(bl * bl + bw * bw)
    if dx * dx + dy * dy > (ra + rb) * (ra + rb):
        return 0.0
    poly = _corners(ax, ay, al, aw, ath)
    clip = _corners(bx, by, bl, bw, bth)
    for k in range(4):
        x0, y0 = clip[k]
        x1, y1 = clip[(k + 1) % 4]
        poly = _clip(poly, x0, y0, x1, y1)
        if not poly:
            return 0.0
    inter = _area(poly)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    r = inter / union
    if r > 1.0:
        r = 1.0
    return r


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = iou_bev(a[i], b[j])
    return out


def raycast_grid(
    sensor_x: float,
    sensor_y: float,
    boxes: np.ndarray,
    origin_x: float,
    origin_y: float,
    origin_th: float,
    cell: float,
    width: int,
    height: int,
) -> np.ndarray:
    """Occlusion mask (height x width, row-major, row 0 at the grid's lower edge).

    A cell is occluded when the segment sensor -> cell centre crosses the
    footprint (x, y, l, w, theta) of a box that does not itself contain the
    cell centre.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    co = math.cos(origin_th)
    so = math.sin(origin_th)
    gx = (np.arange(width, dtype=np.float64) + 0.5) * cell
    gy = (np.arange(height, dtype=np.float64) + 0.5) * cell
    gxx, gyy = np.meshgrid(gx, gy)
    cx = origin_x + co * gxx - so * gyy
    cy = origin_y + so * gxx + co * gyy
    occluded = np.zeros((height, width), dtype=bool)
    for bx, by, bl, bw, bth in boxes:
        c = math.cos(bth)
        s = math.sin(bth)
        hl = 0.5 * bl
        hw = 0.5 * bw
        # segment endpoints in the box frame
        sx = c * (sensor_x - bx) + s * (sensor_y - by)
        sy = -s * (sensor_x - bx) + c * (sensor_y - by)
        ex = c * (cx - bx) + s * (cy - by)
        ey = -s * (cx - bx) + c * (cy - by)
        inside = (np.abs(ex) <= hl) & (np.abs(ey) <= hw)
        dxs = ex - sx
        dys = ey - sy
        t0 = np.zeros_like(ex)
        t1 = np.ones_like(ex)
        hit = np.ones_like(ex, dtype=bool)
        for d, p0, half in ((dxs, sx, hl), (dys, sy, hw)):
            par = d == 0.0
            hit &= ~(par & (abs(p0) > half))
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-half - p0) / d
                tb = (half - p0) / d
            lo = np.where(par, -INF, np.minimum(ta, tb))
            hi = np.where(par, INF, np.maximum(ta, tb))
            t0 = np.maximum(t0, lo)
            t1 = np.minimum(t1, hi)
        hit &= t0 <= t1
        occluded |= hit & ~inside
    return occluded

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Operation order matches ``_pure.py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, INFINITY

cnp.import_array()


def hungarian_max(score):
    cdef double[:, :] a = np.ascontiguousarray(score, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"square matrix required, got shape {(a.shape[0], a.shape[1])}")
    cdef double[:] u = np.zeros(n + 1)
    cdef double[:] v = np.zeros(n + 1)
    cdef double[:] minv = np.empty(n + 1)
    cdef Py_ssize_t[:] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[:] way = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[:] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                ui0 = u[i0]
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = (-a[i0 - 1, j - 1]) - ui0 - v[j]
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
    cdef cnp.int64_t[:] cv = col
    for j in range(1, n + 1):
        cv[p[j] - 1] = j - 1
    return col


cdef int _corners(double x, double y, double l, double w, double th, double* px, double* py) nogil:
    cdef double c = cos(th)
    cdef double s = sin(th)
    cdef double hl = 0.5 * l
    cdef double hw = 0.5 * w
    cdef double dxs[4]
    cdef double dys[4]
    dxs[0] = hl; dys[0] = hw
    dxs[1] = -hl; dys[1] = hw
    dxs[2] = -hl; dys[2] = -hw
    dxs[3] = hl; dys[3] = -hw
    cdef int k
    for k in range(4):
        px[k] = x + c * dxs[k] - s * dys[k]
        py[k] = y + s * dxs[k] + c * dys[k]
    return 4


cdef int _clip(double* inx, double* iny, int n, double ax, double ay, double bx, double by,
               double* outx, double* outy) nogil:
    cdef int m = 0
    cdef int k
    if n == 0:
        return 0
    cdef double ex = bx - ax
    cdef double ey = by - ay
    cdef double px = inx[n - 1]
    cdef double py = iny[n - 1]
    cdef double pside = ex * (py - ay) - ey * (px - ax)
    cdef double qx, qy, qside, t
    for k in range(n):
        qx = inx[k]
        qy = iny[k]
        qside = ex * (qy - ay) - ey * (qx - ax)
        if qside >= 0.0:
            if pside < 0.0:
                t = pside / (pside - qside)
                outx[m] = px + t * (qx - px)
                outy[m] = py + t * (qy - py)
                m += 1
            outx[m] = qx
            outy[m] = qy
            m += 1
        elif pside >= 0.0:
            t = pside / (pside - qside)
            outx[m] = px + t * (qx - px)
            outy[m] = py + t * (qy - py)
            m += 1
        px = qx
        py = qy
        pside = qside
    return m


cdef double _iou(double ax, double ay, double al, double aw, double ath,
                 double bx, double by, double bl, double bw, double bth) nogil:
    cdef double area_a = al * aw
    cdef double area_b = bl * bw
    cdef double dx = ax - bx
    cdef double dy = ay - by
    cdef double ra = 0.5 * sqrt(al * al + aw * aw)
    cdef double rb = 0.5 * sqrt(bl * bl + bw * bw)
    if dx * dx + dy * dy > (ra + rb) * (ra + rb):
        return 0.0
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef double cx[4]
    cdef double cy[4]
    cdef int n = _corners(ax, ay, al, aw, ath, px, py)
    _corners(bx, by, bl, bw, bth, cx, cy)
    cdef int k
    cdef int kn
    for k in range(4):
        kn = (k + 1) % 4
        if k % 2 == 0:
            n = _clip(px, py, n, cx[k], cy[k], cx[kn], cy[kn], qx, qy)
        else:
            n = _clip(qx, qy, n, cx[k], cy[k], cx[kn], cy[kn], px, py)
        if n == 0:
            return 0.0
    # after four clips the polygon lives in px/py
    cdef double acc = 0.0
    for k in range(n):
        kn = (k + 1) % n
        acc += px[k] * py[kn] - px[kn] * py[k]
    cdef double inter = 0.5 * fabs(acc)
    cdef double union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    cdef double r = inter / union
    if r > 1.0:
        r = 1.0
    return r


def iou_bev(a, b):
    return _iou(float(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]),
                float(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4]))


def iou_matrix(a, b):
    cdef double[:, :] A = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 5))
    cdef double[:, :] B = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 5))
    out = np.zeros((A.shape[0], B.shape[0]))
    cdef double[:, :] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(A.shape[0]):
            for j in range(B.shape[0]):
                o[i, j] = _iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3], A[i, 4],
                               B[j, 0], B[j, 1], B[j, 2], B[j, 3], B[j, 4])
    return out


def raycast_grid(double sensor_x, double sensor_y, boxes, double origin_x, double origin_y,
                 double origin_th, double cell, Py_ssize_t width, Py_ssize_t height):
    cdef double[:, :] bx = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 5))
    out = np.zeros((height, width), dtype=bool)
    cdef cnp.npy_bool[:, :] o = out
    cdef double co = cos(origin_th)
    cdef double so = sin(origin_th)
    cdef Py_ssize_t m = bx.shape[0]
    cdef Py_ssize_t r, c, k
    cdef double gx, gy, px, py, cb, sb, hl, hw, sx, sy, ex, ey, t0, t1, d, p0, half, ta, tb, lo, hi
    cdef double[:] cosb = np.empty(m)
    cdef double[:] sinb = np.empty(m)
    cdef int hit, ax
    for k in range(m):
        cosb[k] = cos(bx[k, 4])
        sinb[k] = sin(bx[k, 4])
    with nogil:
        for r in range(height):
            gy = (<double>r + 0.5) * cell
            for c in range(width):
                gx = (<double>c + 0.5) * cell
                px = origin_x + co * gx - so * gy
                py = origin_y + so * gx + co * gy
                for k in range(m):
                    cb = cosb[k]
                    sb = sinb[k]
                    hl = 0.5 * bx[k, 2]
                    hw = 0.5 * bx[k, 3]
                    ex = cb * (px - bx[k, 0]) + sb * (py - bx[k, 1])
                    ey = -sb * (px - bx[k, 0]) + cb * (py - bx[k, 1])
                    if fabs(ex) <= hl and fabs(ey) <= hw:
                        continue
                    sx = cb * (sensor_x - bx[k, 0]) + sb * (sensor_y - bx[k, 1])
                    sy = -sb * (sensor_x - bx[k, 0]) + cb * (sensor_y - bx[k, 1])
                    t0 = 0.0
                    t1 = 1.0
                    hit = 1
                    for ax in range(2):
                        if ax == 0:
                            d = ex - sx
                            p0 = sx
                            half = hl
                        else:
                            d = ey - sy
                            p0 = sy
                            half = hw
                        if d == 0.0:
                            if fabs(p0) > half:
                                hit = 0
                            continue
                        ta = (-half - p0) / d
                        tb = (half - p0) / d
                        lo = ta if ta < tb else tb
                        hi = tb if ta < tb else ta
                        if lo > t0:
                            t0 = lo
                        if hi < t1:
                            t1 = hi
                    if hit and t0 <= t1:
                        o[r, c] = 1
                        break
    return out

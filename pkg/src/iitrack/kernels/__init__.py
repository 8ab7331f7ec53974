"""Hot numerical kernels with a compiled backend and a pure-Python fallback.

The compiled extension (``_ckernels``, built from Cython) is used when it can
be imported; otherwise the numpy/Python implementations in ``_pure`` are used.
Both backends implement the same arithmetic in the same order.

Functions
---------
hungarian_max
    Maximum-weight perfect assignment on a square score matrix.
iou_bev, iou_matrix
    Intersection-over-union of rotated BEV rectangles ``(x, y, l, w, theta)``.
raycast_grid
    Sensor-centred occlusion mask over a regular BEV grid.
"""
from __future__ import annotations

from types import ModuleType

from . import _pure

try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS: dict[str, ModuleType] = {"python": _pure}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active: ModuleType = _compiled if _compiled is not None else _pure


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> None:
    """Switch the process-wide kernel backend (``"compiled"`` or ``"python"``)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _active = _BACKENDS[name]


def get(name: str) -> ModuleType:
    return _BACKENDS[name]


def hungarian_max(score):
    return _active.hungarian_max(score)


def iou_bev(a, b) -> float:
    return _active.iou_bev(a, b)


def iou_matrix(a, b):
    return _active.iou_matrix(a, b)


def raycast_grid(sensor_x, sensor_y, boxes, origin_x, origin_y, origin_th, cell, width, height):
    return _active.raycast_grid(
        float(sensor_x), float(sensor_y), boxes, float(origin_x), float(origin_y),
        float(origin_th), float(cell), int(width), int(height),
    )

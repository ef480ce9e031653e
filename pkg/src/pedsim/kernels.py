"""Backend selection for the hot kernels.

The compiled extension ``pedsim._kernels`` is used when it imports; otherwise
the NumPy implementation in ``pedsim._kernels_py`` takes over.  Both return
bit-identical results.  ``PEDSIM_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = "compiled" if _compiled is not None and os.environ.get("PEDSIM_BACKEND") != "python" else "python"

HEADINGS_DEG = (0, -20, 20, -40, 40, -60, 60, -80, 80, -100, 100, -120, 120, -140, 140, -160, 160, 180)
SPEED_FRACTIONS = (1.0, 0.5)


def available() -> list:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return _active


def backend():
    return _BACKENDS[_active]


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    _active = name


@contextmanager
def use_backend(name: str):
    prev = _active
    set_backend(name)
    try:
        yield _BACKENDS[name]
    finally:
        set_backend(prev)


def _cos_sin(deg: int):
    if deg == 0:
        return 1.0, 0.0
    if deg == 180:
        return -1.0, 0.0
    r = math.radians(deg)
    return math.cos(r), math.sin(r)


def _build_table():
    cands = []
    for f in SPEED_FRACTIONS:
        for deg in HEADINGS_DEG:
            c, s = _cos_sin(deg)
            cands.append((1.0 + f * f - 2.0 * f * c, c, s, f))
    cands.sort(key=lambda t: t[0])  # stable: right turns stay ahead of left
    c = np.array([t[1] for t in cands])
    s = np.array([t[2] for t in cands])
    f = np.array([t[3] for t in cands])
    return c, s, f


_TABLE = _build_table()


def candidate_table():
    """(cos, sin, speed fraction) for the 36 candidate velocities, ordered by
    deviation from the desired velocity."""
    return _TABLE


_EMPTY_WALLS = (np.zeros((0, 4)), 0.0, 0.0, 1.0, 1, 1, np.zeros(2, np.int64), np.zeros(0, np.int64))


def wall_args(walls) -> tuple:
    if walls is None or len(walls.segs) == 0:
        return _EMPTY_WALLS
    return walls.arrays()

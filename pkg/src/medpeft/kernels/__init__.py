"""Hot volumetric kernels with two interchangeable backends.

The numba backend (default) JIT-compiles the inner loops; the numpy backend
is a pure-vectorized fallback with identical semantics. Selection happens
once at import time via the ``MEDPEFT_NUMBA`` environment variable: set it
to ``0``/``false``/``off`` to force the numpy path. ``benchmarks/
bench_kernels.py`` times the two backends against each other.
"""

import os

import numpy as np

from . import _numpy_impl

_flag = os.environ.get("MEDPEFT_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

_impl = _numpy_impl
_backend = "numpy"
if _want_numba:
    try:
        from . import _numba_impl

        _impl = _numba_impl
        _backend = "numba"
    except ImportError:  # numba missing or broken: fall back silently
        pass


def backend_name() -> str:
    """Active backend, either ``"numba"`` or ``"numpy"``."""
    return _backend


def sample_trilinear(src, coords, edge_clamp=True):
    """Trilinear interpolation of a 3D array at fractional voxel coordinates.

    src: 3D float array. coords: (3, n) float64 voxel coordinates.
    edge_clamp=True clamps coordinates to the valid range (resize semantics);
    False treats everything outside the array as 0 (warp semantics).
    Returns float32 of shape (n,).
    """
    src = np.ascontiguousarray(src, dtype=np.float32)
    coords = _check_coords(coords)
    return _impl.sample_trilinear(src, coords, bool(edge_clamp))


def sample_nearest(src, coords, edge_clamp=True):
    """Nearest-neighbour sampling of a 3D integer array; same contract as
    sample_trilinear but value-preserving (used for label maps)."""
    src = np.ascontiguousarray(src, dtype=np.int32)
    coords = _check_coords(coords)
    return _impl.sample_nearest(src, coords, bool(edge_clamp))


def label_components(mask, connectivity=26):
    """Connected-component labeling of a boolean 3D mask.

    Returns (labels, n) where labels is int32 with components numbered
    1..n in first-voxel scan order and 0 on background.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.ascontiguousarray(mask.astype(np.uint8))
    return _impl.label_components(mask, int(connectivity))


def directed_min_dists(points, ref, spacing):
    """For each row of `points`, the physical distance to the nearest row of
    `ref`. Both are (n, 3) voxel index arrays; spacing is mm per axis."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    spacing = np.ascontiguousarray(spacing, dtype=np.float64)
    if ref.shape[0] == 0:
        raise ValueError("reference point set is empty")
    return _impl.directed_min_dists(points, ref, spacing)


def _check_coords(c):
    c = np.ascontiguousarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != 3:
        raise ValueError(f"coords must have shape (3, n), got {c.shape}")
    return c

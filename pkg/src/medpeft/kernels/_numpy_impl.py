"""Pure-numpy backend. Semantics must match _numba_impl exactly."""

import numpy as np


def sample_trilinear(src, coords, edge_clamp):
    nx, ny, nz = src.shape
    x, y, z = coords[0], coords[1], coords[2]
    if edge_clamp:
        x = np.clip(x, 0.0, nx - 1.0)
        y = np.clip(y, 0.0, ny - 1.0)
        z = np.clip(z, 0.0, nz - 1.0)

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0

    out = np.zeros(coords.shape[1], dtype=np.float64)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        ix = x0 + dx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            iy = y0 + dy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                iz = z0 + dz
                inside = (
                    (ix >= 0) & (ix < nx)
                    & (iy >= 0) & (iy < ny)
                    & (iz >= 0) & (iz < nz)
                )
                vals = np.zeros(out.shape, dtype=np.float64)
                vals[inside] = src[ix[inside], iy[inside], iz[inside]]
                out += (wx * wy * wz) * vals
    return out.astype(np.float32)


def sample_nearest(src, coords, edge_clamp):
    nx, ny, nz = src.shape
    ix = np.floor(coords[0] + 0.5).astype(np.int64)
    iy = np.floor(coords[1] + 0.5).astype(np.int64)
    iz = np.floor(coords[2] + 0.5).astype(np.int64)
    if edge_clamp:
        ix = np.clip(ix, 0, nx - 1)
        iy = np.clip(iy, 0, ny - 1)
        iz = np.clip(iz, 0, nz - 1)
        return src[ix, iy, iz].astype(np.int32)
    out = np.zeros(coords.shape[1], dtype=np.int32)
    inside = (
        (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    )
    out[inside] = src[ix[inside], iy[inside], iz[inside]]
    return out


def neighbor_offsets(connectivity):
    if connectivity == 6:
        return [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    return [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ]


def _shift_gather(cur, offset, fill):
    """result[v] = cur[v + offset] where in bounds, else fill."""
    out = np.full(cur.shape, fill, dtype=cur.dtype)
    dst, src = [], []
    for d, n in zip(offset, cur.shape):
        dst.append(slice(max(0, -d), n - max(0, d)))
        src.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = cur[tuple(src)]
    return out


def label_components(mask, connectivity):
    # Min-label flood: every foreground voxel starts with its own flat index
    # and repeatedly takes the minimum over its foreground neighbours until
    # stable. Component ids end up being the minimum flat index, which is
    # also first-voxel scan order after compaction.
    fg = mask.astype(bool)
    big = np.iinfo(np.int64).max
    labels = np.where(fg, np.arange(mask.size, dtype=np.int64).reshape(mask.shape) + 1, big)
    offs = neighbor_offsets(connectivity)

    while True:
        best = labels.copy()
        for off in offs:
            np.minimum(best, _shift_gather(labels, off, big), out=best)
        best = np.where(fg, best, big)
        if np.array_equal(best, labels):
            break
        labels = best

    flat = np.where(fg, labels, 0).ravel()
    uniq = np.unique(flat[flat > 0])  # ascending == scan order of component min-index
    out = np.zeros(flat.shape, dtype=np.int32)
    nz = flat > 0
    out[nz] = np.searchsorted(uniq, flat[nz]) + 1
    return out.reshape(mask.shape), int(uniq.size)


def directed_min_dists(points, ref, spacing):
    n = points.shape[0]
    out = np.empty(n, dtype=np.float64)
    ref_mm = ref * spacing
    chunk = 1024
    for start in range(0, n, chunk):
        p = points[start:start + chunk] * spacing
        d2 = ((p[:, None, :] - ref_mm[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out

"""Numba backend: JIT-compiled inner loops for the hot kernels."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def sample_trilinear(src, coords, edge_clamp):
    nx, ny, nz = src.shape
    n = coords.shape[1]
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        x = coords[0, i]
        y = coords[1, i]
        z = coords[2, i]
        if edge_clamp:
            x = min(max(x, 0.0), nx - 1.0)
            y = min(max(y, 0.0), ny - 1.0)
            z = min(max(z, 0.0), nz - 1.0)
        x0 = math.floor(x)
        y0 = math.floor(y)
        z0 = math.floor(z)
        fx = x - x0
        fy = y - y0
        fz = z - z0
        ix0 = int(x0)
        iy0 = int(y0)
        iz0 = int(z0)
        acc = 0.0
        for dx in range(2):
            wx = fx if dx == 1 else 1.0 - fx
            ix = ix0 + dx
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                iy = iy0 + dy
                for dz in range(2):
                    wz = fz if dz == 1 else 1.0 - fz
                    iz = iz0 + dz
                    v = 0.0
                    if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                        v = float(src[ix, iy, iz])
                    acc += (wx * wy * wz) * v
        out[i] = acc
    return out


@njit(cache=True)
def sample_nearest(src, coords, edge_clamp):
    nx, ny, nz = src.shape
    n = coords.shape[1]
    out = np.zeros(n, dtype=np.int32)
    for i in range(n):
        ix = int(math.floor(coords[0, i] + 0.5))
        iy = int(math.floor(coords[1, i] + 0.5))
        iz = int(math.floor(coords[2, i] + 0.5))
        if edge_clamp:
            ix = min(max(ix, 0), nx - 1)
            iy = min(max(iy, 0), ny - 1)
            iz = min(max(iz, 0), nz - 1)
            out[i] = src[ix, iy, iz]
        elif 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
            out[i] = src[ix, iy, iz]
    return out


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:  # path compression
        parent[i], i = root, parent[i]
    return root


@njit(cache=True)
def _label_union_find(mask, offsets):
    nx, ny, nz = mask.shape
    labels = np.zeros(mask.size, dtype=np.int32)  # provisional, 1-based
    parent = np.empty(mask.size + 1, dtype=np.int32)
    next_label = 1
    n_off = offsets.shape[0]

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if mask[x, y, z] == 0:
                    continue
                flat = (x * ny + y) * nz + z
                best = 0
                for k in range(n_off):
                    px = x + offsets[k, 0]
                    py = y + offsets[k, 1]
                    pz = z + offsets[k, 2]
                    if px < 0 or py < 0 or pz < 0 or px >= nx or py >= ny or pz >= nz:
                        continue
                    if mask[px, py, pz] == 0:
                        continue
                    root = _find(parent, labels[(px * ny + py) * nz + pz])
                    if best == 0:
                        best = root
                    elif root < best:
                        parent[best] = root
                        best = root
                    elif root > best:
                        parent[root] = best
                if best == 0:
                    parent[next_label] = next_label
                    labels[flat] = next_label
                    next_label += 1
                else:
                    labels[flat] = best

    # second pass: resolve roots and renumber in scan order
    remap = np.zeros(next_label, dtype=np.int32)
    out = np.zeros(mask.size, dtype=np.int32)
    count = 0
    for flat in range(mask.size):
        lab = labels[flat]
        if lab == 0:
            continue
        root = _find(parent, lab)
        if remap[root] == 0:
            count += 1
            remap[root] = count
        out[flat] = remap[root]
    return out.reshape(mask.shape), count


def label_components(mask, connectivity):
    from ._numpy_impl import neighbor_offsets

    # only look backwards in scan order during the first pass
    offs = np.array(
        [o for o in neighbor_offsets(connectivity) if o < (0, 0, 0)],
        dtype=np.int64,
    )
    return _label_union_find(mask, offs)


@njit(cache=True)
def directed_min_dists(points, ref, spacing):
    n = points.shape[0]
    m = ref.shape[0]
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        px = points[i, 0] * sx
        py = points[i, 1] * sy
        pz = points[i, 2] * sz
        best = np.inf
        for j in range(m):
            dx = px - ref[j, 0] * sx
            dy = py - ref[j, 1] * sy
            dz = pz - ref[j, 2] * sz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = math.sqrt(best)
    return out

"""Brute-force reference implementations used only by tests.

Everything here is intentionally naive (python loops, set arithmetic,
all-pairs scans, exhaustive enumeration) and shares no code with the
package's fast paths.
"""

import itertools
from collections import deque

import numpy as np

OFFSETS_26 = [(dx, dy, dz)
              for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
              if (dx, dy, dz) != (0, 0, 0)]
OFFSETS_6 = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def voxel_set(mask):
    return {tuple(ix) for ix in np.argwhere(np.asarray(mask, dtype=bool))}


def dice_oracle(pred, gt) -> float:
    p, g = voxel_set(pred), voxel_set(gt)
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def sens_spec_oracle(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = fn = fp = tn = 0
    for pv, gv in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if pv and gv:
            tp += 1
        elif pv:
            fp += 1
        elif gv:
            fn += 1
        else:
            tn += 1
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return sens, spec


def surface_oracle(mask):
    """Foreground voxels with a 6-neighbour outside the mask (borders count)."""
    mask = np.asarray(mask, dtype=bool)
    out = []
    for p in voxel_set(mask):
        for off in OFFSETS_6:
            q = tuple(a + b for a, b in zip(p, off))
            inside = all(0 <= qi < s for qi, s in zip(q, mask.shape))
            if not inside or not mask[q]:
                out.append(p)
                break
    return out


def _percentile_linear(values, q):
    """Linear-interpolation percentile, written out longhand."""
    vs = sorted(values)
    if len(vs) == 1:
        return vs[0]
    pos = (q / 100.0) * (len(vs) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(vs) - 1)
    frac = pos - lo
    return vs[lo] * (1 - frac) + vs[hi] * frac


def hd95_oracle(pred, gt, spacing=(1.0, 1.0, 1.0), penalty=374.0) -> float:
    ps, gs = surface_oracle(pred), surface_oracle(gt)
    p_any, g_any = np.asarray(pred).any(), np.asarray(gt).any()
    if not p_any and not g_any:
        return 0.0
    if not p_any or not g_any:
        return float(penalty)

    def directed(a, b):
        dists = []
        for p in a:
            best = None
            for q in b:
                d = sum(((pi - qi) * s) ** 2 for pi, qi, s in zip(p, q, spacing)) ** 0.5
                if best is None or d < best:
                    best = d
            dists.append(best)
        return dists

    pooled = directed(ps, gs) + directed(gs, ps)
    return _percentile_linear(pooled, 95)


def components_oracle(mask, connectivity=26):
    """List of voxel sets, one per connected component (BFS)."""
    mask = np.asarray(mask, dtype=bool)
    offsets = OFFSETS_26 if connectivity == 26 else OFFSETS_6
    remaining = voxel_set(mask)
    comps = []
    while remaining:
        seed = next(iter(remaining))
        comp = {seed}
        remaining.discard(seed)
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for off in offsets:
                q = tuple(a + b for a, b in zip(p, off))
                if q in remaining:
                    remaining.discard(q)
                    comp.add(q)
                    queue.append(q)
        comps.append(comp)
    return comps


def dilate_oracle(vox, shape, connectivity=26):
    """One-voxel dilation of a voxel set."""
    offsets = OFFSETS_26 if connectivity == 26 else OFFSETS_6
    grown = set(vox)
    for p in vox:
        for off in offsets:
            q = tuple(a + b for a, b in zip(p, off))
            if all(0 <= qi < s for qi, s in zip(q, shape)):
                grown.add(q)
    return grown


def _mask_from(vox, shape):
    m = np.zeros(shape, dtype=bool)
    for p in vox:
        m[p] = True
    return m


def lesionwise_oracle(pred, gt, spacing=(1.0, 1.0, 1.0), min_lesion_size=10,
                      min_pred_size=0, penalty=374.0):
    """Exhaustive lesion matching mirroring the documented protocol."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    shape = gt.shape
    gt_lesions = [c for c in components_oracle(gt) if len(c) >= min_lesion_size]
    pred_comps = [c for c in components_oracle(pred)
                  if len(c) >= max(1, min_pred_size)]

    entries = []
    matched = set()
    for lesion in gt_lesions:
        zone = dilate_oracle(lesion, shape)
        hits = [i for i, comp in enumerate(pred_comps) if comp & zone]
        if hits:
            union = set().union(*[pred_comps[i] for i in hits])
            matched.update(hits)
            entries.append((dice_oracle(_mask_from(union, shape),
                                        _mask_from(lesion, shape)),
                            hd95_oracle(_mask_from(union, shape),
                                        _mask_from(lesion, shape),
                                        spacing, penalty)))
        else:
            entries.append((0.0, float(penalty)))
    for i in range(len(pred_comps)):
        if i not in matched:
            entries.append((0.0, float(penalty)))

    if not entries:
        return 1.0, 0.0
    return (float(np.mean([e[0] for e in entries])),
            float(np.mean([e[1] for e in entries])))


def permutation_p_oracle(a, b):
    """Exhaustive two-sided sign-flip p-value via itertools (small n only)."""
    d = [bi - ai for ai, bi in zip(a, b)]
    n = len(d)
    obs = abs(sum(d) / n)
    count = 0
    for signs in itertools.product((1, -1), repeat=n):
        m = abs(sum(s * di for s, di in zip(signs, d)) / n)
        if m >= obs - 1e-12 * max(1.0, obs):
            count += 1
    return count / 2 ** n


def trilinear_oracle(src, point):
    """Single-point trilinear interpolation with explicit corner arithmetic,
    clamp-to-edge semantics."""
    src = np.asarray(src, dtype=np.float64)
    out = 0.0
    coords = [min(max(c, 0.0), s - 1.0) for c, s in zip(point, src.shape)]
    base = [int(np.floor(c)) for c in coords]
    frac = [c - b for c, b in zip(coords, base)]
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for axis in range(3):
            w *= frac[axis] if corner[axis] else 1.0 - frac[axis]
            idx.append(min(base[axis] + corner[axis], src.shape[axis] - 1))
        out += w * src[tuple(idx)]
    return out

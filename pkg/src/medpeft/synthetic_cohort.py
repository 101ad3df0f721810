"""Synthetic two-domain cohorts of nested-ellipsoid tumor phantoms.

A case is a brain-shaped ellipsoid (background exactly 0 outside it, as in
brain-extracted MRI) containing 1..k lesions, each a set of concentric
ellipsoids: an outer SNFH shell, a tumor-core shell (NETC) and an enhancing
core (ET). The SOURCE domain renders clean images; the SHIFTED domain
degrades the same underlying case with noise, blur (simulating lower
acquisition resolution) and a global gamma shift, so anatomy and labels are
identical across domains while appearance differs.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyCohort, LesionDoesNotFit
from .volume_io import (
    DEFAULT_CHANNELS,
    DEFAULT_LABEL_SEMANTICS,
    LabelMap,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)

COHORT_MANIFEST_VERSION = 1


class Domain(str, Enum):
    SOURCE = "source"
    SHIFTED = "shifted"


@dataclass
class ShiftParams:
    """Degradation applied on top of the clean rendering in the SHIFTED domain."""

    blur_sigma: float = 1.2
    noise_sigma: float = 0.10      # Rician-like, applied before the blur
    gamma: float = 1.6
    source_noise_sigma: float = 0.02


@dataclass
class CohortSpec:
    n_cases: int
    spatial_shape: tuple = (32, 32, 32)
    n_channels: int = 4
    domain: Domain = Domain.SOURCE
    rng_seed: int = 0
    tumor_count_range: tuple = (1, 3)
    shift: ShiftParams = field(default_factory=ShiftParams)

    def __post_init__(self):
        if self.n_cases < 1:
            raise EmptyCohort("cohort must contain at least one case")
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        self.domain = Domain(self.domain)


# nominal per-channel intensity of each tissue class, on a 0..1 scale
_CONTRAST = {
    "t1c":   {"tissue": 0.40, "SNFH": 0.48, "NETC": 0.25, "ET": 0.90},
    "t1w":   {"tissue": 0.42, "SNFH": 0.38, "NETC": 0.28, "ET": 0.55},
    "flair": {"tissue": 0.35, "SNFH": 0.88, "NETC": 0.55, "ET": 0.60},
    "t2w":   {"tissue": 0.38, "SNFH": 0.80, "NETC": 0.50, "ET": 0.65},
}
_FALLBACK_CONTRAST = {"tissue": 0.40, "SNFH": 0.70, "NETC": 0.30, "ET": 0.85}

_MIN_ET_RADIUS = 1.8
_MIN_SHELL = 0.9  # minimum radial gap between nested surfaces, in voxels


def _ellipsoid_mask(shape, center, radii, rot):
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    pts = np.stack([g - c for g, c in zip(grids, center)])
    local = np.einsum("ij,jxyz->ixyz", rot.T, pts)
    q = sum((local[i] / radii[i]) ** 2 for i in range(3))
    return q <= 1.0


def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sample_anatomy(spec: CohortSpec, case_index: int):
    """Lesion geometry + brain mask; identical for SOURCE and SHIFTED."""
    rng = np.random.default_rng([spec.rng_seed, case_index, 0x0A7A])
    shape = np.array(spec.spatial_shape, dtype=np.float64)
    min_dim = shape.min()

    wt_low = max(3.2, 0.11 * min_dim)
    wt_high = max(wt_low + 0.6, 0.18 * min_dim)
    if 2 * (wt_high + 1.0) > min_dim:
        wt_high = min_dim / 2.0 - 1.0
    if wt_high < wt_low or 2 * (wt_low + 1.0) > min_dim:
        raise LesionDoesNotFit(
            f"spatial shape {spec.spatial_shape} too small for minimum lesion "
            f"radius {wt_low:.1f}"
        )

    brain_center = shape / 2.0 + rng.uniform(-0.02, 0.02, size=3) * shape
    brain_radii = shape * rng.uniform(0.40, 0.46, size=3)

    n_lesions = int(rng.integers(spec.tumor_count_range[0],
                                 spec.tumor_count_range[1] + 1))
    lesions = []
    for _ in range(n_lesions):
        wt = rng.uniform(wt_low, wt_high, size=3)
        tc = np.maximum(wt * rng.uniform(0.55, 0.75), _MIN_ET_RADIUS + _MIN_SHELL)
        et = np.maximum(tc * rng.uniform(0.50, 0.70), _MIN_ET_RADIUS)
        tc = np.maximum(tc, et + _MIN_SHELL)
        wt = np.maximum(wt, tc + _MIN_SHELL)
        margin = wt.max() + 1.0
        reach = brain_radii - margin  # keep the whole lesion inside the brain
        if np.any(reach <= 0):
            raise LesionDoesNotFit(
                f"lesion with outer radii {wt.round(1)} cannot be placed in "
                f"{spec.spatial_shape}"
            )
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        center = brain_center + direction * reach * rng.random() ** (1.0 / 3.0)
        lesions.append({"center": center, "wt": wt, "tc": tc, "et": et,
                        "rot": _random_rotation(rng)})
    return {"brain_center": brain_center, "brain_radii": brain_radii,
            "lesions": lesions}


def _paint_labels(spec: CohortSpec, anatomy) -> np.ndarray:
    shape = spec.spatial_shape
    labels = np.zeros(shape, dtype=np.int16)
    for les in anatomy["lesions"]:
        wt = _ellipsoid_mask(shape, les["center"], les["wt"], les["rot"])
        tc = _ellipsoid_mask(shape, les["center"], les["tc"], les["rot"])
        et = _ellipsoid_mask(shape, les["center"], les["et"], les["rot"])
        labels[wt] = 2   # SNFH
        labels[tc] = 1   # NETC
        labels[et] = 3   # ET
    return labels


def _render_base(spec: CohortSpec, case_index: int, labels, brain):
    """Clean multi-channel rendering shared by both domains."""
    rng = np.random.default_rng([spec.rng_seed, case_index, 0xBA5E])
    shape = spec.spatial_shape
    names = list(DEFAULT_CHANNELS[:spec.n_channels])
    while len(names) < spec.n_channels:
        names.append(f"ch{len(names)}")

    data = np.zeros((spec.n_channels, *shape), dtype=np.float64)
    for c, name in enumerate(names):
        contrast = dict(_CONTRAST.get(name, _FALLBACK_CONTRAST))
        jitter = {k: rng.uniform(-0.04, 0.04) for k in contrast}
        img = np.full(shape, contrast["tissue"] + jitter["tissue"])
        img[labels == 2] = contrast["SNFH"] + jitter["SNFH"]
        img[labels == 1] = contrast["NETC"] + jitter["NETC"]
        img[labels == 3] = contrast["ET"] + jitter["ET"]
        texture = gaussian_filter(rng.normal(size=shape), sigma=3.0)
        texture /= max(np.abs(texture).max(), 1e-9)
        img = img + 0.06 * texture
        img = gaussian_filter(img, sigma=0.5)  # soften region boundaries
        img = np.clip(img, 0.05, 1.2)
        img[~brain] = 0.0
        data[c] = img
    return data, tuple(names)


def _degrade(base, brain, rng, shift: ShiftParams):
    """SHIFTED-domain appearance: Rician-like noise, blur, gamma shift."""
    out = np.empty_like(base)
    for c in range(base.shape[0]):
        img = base[c]
        n1 = rng.normal(0.0, shift.noise_sigma, size=img.shape)
        n2 = rng.normal(0.0, shift.noise_sigma, size=img.shape)
        noisy = np.sqrt((img + n1) ** 2 + n2 ** 2)
        low = gaussian_filter(noisy, sigma=shift.blur_sigma)
        low = np.clip(low / 1.2, 0.0, 1.0) ** shift.gamma * 1.2
        low[~brain] = 0.0
        out[c] = np.maximum(low, 0.0)
        out[c][brain] = np.maximum(out[c][brain], 1e-4)  # keep foreground nonzero
    return out


def generate_case(spec: CohortSpec, case_index: int):
    """Deterministically generate one (Volume, LabelMap) pair."""
    if case_index >= spec.n_cases or case_index < 0:
        raise IndexError(f"case_index {case_index} outside 0..{spec.n_cases - 1}")

    n_vox = int(np.prod(spec.spatial_shape))
    min_count = max(1, int(0.001 * n_vox))
    labels = brain = None
    for attempt in range(8):
        probe = replace(spec, rng_seed=spec.rng_seed + 7919 * attempt) if attempt else spec
        anatomy = _sample_anatomy(probe, case_index)
        cand = _paint_labels(spec, anatomy)
        cand_brain = _ellipsoid_mask(spec.spatial_shape, anatomy["brain_center"],
                                     anatomy["brain_radii"], np.eye(3))
        cand[~cand_brain] = 0  # lesions are sampled inside, but stay safe
        counts = [(cand == v).sum() for v in (1, 2, 3)]
        if min(counts) >= min_count:
            labels, brain = cand, cand_brain
            break
    if labels is None:
        raise LesionDoesNotFit(
            f"could not place lesions with >=0.1% prevalence per class in "
            f"{spec.spatial_shape}"
        )

    base, names = _render_base(spec, case_index, labels, brain)
    if spec.domain == Domain.SOURCE:
        rng = np.random.default_rng([spec.rng_seed, case_index, 0x50C])
        data = base + rng.normal(0.0, spec.shift.source_noise_sigma, size=base.shape)
        data[:, ~brain] = 0.0
    else:
        rng = np.random.default_rng([spec.rng_seed, case_index, 0x5F1])
        data = _degrade(base, brain, rng, spec.shift)

    volume = Volume(data=data.astype(np.float32), affine=np.eye(4),
                    channel_names=names)
    labelmap = LabelMap(data=labels, label_semantics=dict(DEFAULT_LABEL_SEMANTICS))
    return volume, labelmap


def generate_cohort(spec: CohortSpec, out_dir) -> dict:
    """Write all cases in the raw sidecar format plus a cohort manifest.
    Re-running with the same spec produces bit-identical files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.n_cases):
        volume, labelmap = generate_case(spec, i)
        case_id = f"case_{i:04d}"
        save_volume(volume, out_dir / f"{case_id}.rawvol")
        save_labels(labelmap, out_dir / f"{case_id}_seg.rawvol", affine=volume.affine)
        entries.append({
            "case_id": case_id,
            "image": f"{case_id}.rawvol",
            "labels": f"{case_id}_seg.rawvol",
        })
    manifest = {
        "format_version": COHORT_MANIFEST_VERSION,
        "domain": spec.domain.value,
        "seed": spec.rng_seed,
        "n_cases": spec.n_cases,
        "spatial_shape": list(spec.spatial_shape),
        "n_channels": spec.n_channels,
        "cases": entries,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )
    return manifest


def read_manifest(cohort_dir) -> dict:
    path = Path(cohort_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no cohort manifest at {path}")
    return json.loads(path.read_text())


def load_cohort(cohort_dir):
    """Load every case of a generated cohort into memory.
    Returns (cases, manifest) where cases is a list of (Volume, LabelMap)."""
    cohort_dir = Path(cohort_dir)
    manifest = read_manifest(cohort_dir)
    cases = []
    for entry in manifest["cases"]:
        v = load_volume(cohort_dir / entry["image"])
        m = load_labels(cohort_dir / entry["labels"])
        cases.append((v, m))
    if not cases:
        raise EmptyCohort(f"cohort at {cohort_dir} has no cases")
    return cases, manifest

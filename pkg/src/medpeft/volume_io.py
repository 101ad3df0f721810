"""Volume and label-map types, file I/O, and the preprocessing pipeline.

Index convention: image data is (channel, x, y, z); label data is (x, y, z).
The affine maps homogeneous voxel indices (x, y, z, 1) to world millimetres.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from ._nifti import is_nifti_path, read_nifti, write_nifti
from .errors import (
    InvalidTarget,
    MissingModality,
    NonInvertibleAffine,
    ShapeMismatch,
    UnknownLabelValue,
)

DEFAULT_CHANNELS = ("t1c", "t1w", "flair", "t2w")
DEFAULT_LABEL_SEMANTICS = {0: "BACKGROUND", 1: "NETC", 2: "SNFH", 3: "ET"}
LABEL_CLASSES = ("BACKGROUND", "NETC", "SNFH", "ET")

RAW_FORMAT_VERSION = 1


@dataclass
class Volume:
    """Multi-channel 3D image with world-space geometry."""

    data: np.ndarray                      # (C, x, y, z) float32
    affine: np.ndarray                    # (4, 4) voxel -> mm
    channel_names: tuple = DEFAULT_CHANNELS
    voxel_spacing: np.ndarray | None = None  # mm per axis, derived if None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"volume data must be 4D (C,x,y,z), got {self.data.shape}")
        if self.data.shape[0] != len(self.channel_names):
            raise MissingModality(
                f"{self.data.shape[0]} channels for names {list(self.channel_names)}"
            )
        if min(self.data.shape[1:]) < 1:
            raise ShapeMismatch(f"degenerate spatial shape {self.data.shape[1:]}")
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)
        if self.voxel_spacing is None:
            self.voxel_spacing = np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))
        else:
            self.voxel_spacing = np.asarray(self.voxel_spacing, dtype=np.float64)

    @property
    def spatial_shape(self):
        return self.data.shape[1:]

    @property
    def n_channels(self):
        return self.data.shape[0]


@dataclass
class LabelMap:
    """Integer segmentation aligned with a Volume."""

    data: np.ndarray                      # (x, y, z) int16
    label_semantics: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_SEMANTICS))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"label data must be 3D, got {self.data.shape}")
        self.data = self.data.astype(np.int16)
        bad = set(np.unique(self.data).tolist()) - set(self.label_semantics)
        if bad:
            raise UnknownLabelValue(f"label values {sorted(bad)} not in semantics map")
        for name in self.label_semantics.values():
            if name not in LABEL_CLASSES:
                raise UnknownLabelValue(f"unknown class name {name!r}")

    @property
    def spatial_shape(self):
        return self.data.shape

    def values_for(self, class_names) -> set:
        """Integer values whose semantic class is in `class_names`."""
        return {v for v, name in self.label_semantics.items() if name in class_names}


# ---------------------------------------------------------------------------
# file I/O: raw sidecar-manifest format and NIfTI
# ---------------------------------------------------------------------------

def _manifest_path(raw_path) -> Path:
    p = Path(raw_path)
    return p.with_suffix(".json")


def save_raw(path, array, manifest_extra=None):
    """Write `<name>.rawvol` (float32, C-order, little-endian) plus a JSON
    sidecar manifest describing shape and geometry."""
    path = Path(path)
    if path.suffix != ".rawvol":
        raise ValueError(f"raw volumes use the .rawvol extension, got {path.name}")
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes(order="C"))
    manifest = {"format_version": RAW_FORMAT_VERSION, "shape": list(arr.shape)}
    if manifest_extra:
        manifest.update(manifest_extra)
    _manifest_path(path).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )


def load_raw(path):
    """Read a .rawvol file; returns (array, manifest)."""
    path = Path(path)
    manifest = json.loads(_manifest_path(path).read_text())
    shape = tuple(manifest["shape"])
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
    return arr, manifest


def save_volume(v: Volume, path):
    path = Path(path)
    if is_nifti_path(path):
        # NIfTI wants channels last
        write_nifti(path, np.moveaxis(v.data, 0, -1), v.affine)
    else:
        save_raw(path, v.data, {
            "channels": list(v.channel_names),
            "affine": v.affine.tolist(),
        })


def load_volume(path, channel_names=None) -> Volume:
    path = Path(path)
    if is_nifti_path(path):
        data, affine = read_nifti(path)
        if data.ndim == 3:
            data = data[None]
        else:
            data = np.moveaxis(data, -1, 0)
        names = channel_names or tuple(f"ch{i}" for i in range(data.shape[0]))
        return Volume(data=data, affine=affine, channel_names=tuple(names))
    arr, manifest = load_raw(path)
    names = channel_names or tuple(manifest.get("channels") or
                                   (f"ch{i}" for i in range(arr.shape[0])))
    return Volume(data=arr, affine=np.asarray(manifest["affine"]),
                  channel_names=tuple(names))


def save_labels(m: LabelMap, path, affine=None):
    path = Path(path)
    if is_nifti_path(path):
        write_nifti(path, m.data, affine if affine is not None else np.eye(4))
    else:
        save_raw(path, m.data.astype(np.float32), {
            "label_semantics": {str(k): v for k, v in m.label_semantics.items()},
            "affine": (affine if affine is not None else np.eye(4)).tolist(),
        })


def load_labels(path, label_semantics=None) -> LabelMap:
    path = Path(path)
    if is_nifti_path(path):
        data, _ = read_nifti(path)
        return _labels_from_float(data, label_semantics or dict(DEFAULT_LABEL_SEMANTICS))
    arr, manifest = load_raw(path)
    semantics = label_semantics
    if semantics is None:
        raw_sem = manifest.get("label_semantics")
        semantics = ({int(k): v for k, v in raw_sem.items()}
                     if raw_sem else dict(DEFAULT_LABEL_SEMANTICS))
    return _labels_from_float(arr, semantics)


def _labels_from_float(data, semantics):
    rounded = np.rint(data)
    if not np.allclose(data, rounded, atol=1e-3):
        raise UnknownLabelValue("label volume contains non-integer values")
    return LabelMap(data=rounded.astype(np.int16), label_semantics=semantics)


def load_case(image_paths, label_path=None, channel_names=DEFAULT_CHANNELS,
              label_semantics=None):
    """Load one case: a list of single-channel image files (one per modality,
    in `channel_names` order) and an optional label file."""
    image_paths = [Path(p) for p in image_paths]
    if len(image_paths) != len(channel_names):
        raise MissingModality(
            f"expected {len(channel_names)} modalities, got {len(image_paths)}"
        )
    for p in image_paths:
        if not p.exists():
            raise FileNotFoundError(p)

    channels, affine = [], None
    for p in image_paths:
        vol = load_volume(p)
        if vol.n_channels != 1:
            raise ShapeMismatch(f"{p}: expected a single-channel file")
        if affine is None:
            affine = vol.affine
        if channels and vol.data.shape[1:] != channels[0].shape:
            raise ShapeMismatch(
                f"{p}: shape {vol.data.shape[1:]} differs from {channels[0].shape}"
            )
        channels.append(vol.data[0])

    volume = Volume(data=np.stack(channels), affine=affine,
                    channel_names=tuple(channel_names))
    labels = None
    if label_path is not None:
        labels = load_labels(label_path, label_semantics)
        if labels.spatial_shape != volume.spatial_shape:
            raise ShapeMismatch(
                f"labels {labels.spatial_shape} vs image {volume.spatial_shape}"
            )
    return volume, labels


# ---------------------------------------------------------------------------
# canonical (RAS) orientation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrientationTransform:
    """Axis permutation + flips bringing voxel axes to RAS order."""

    perm: tuple      # canonical axis i is fed from input axis perm[i]
    flip: tuple      # whether canonical axis i runs against input axis perm[i]

    @property
    def is_identity(self):
        return self.perm == (0, 1, 2) and not any(self.flip)


def compute_canonical_transform(affine) -> OrientationTransform:
    """Find the permutation/flips whose application makes the affine's
    direction cosines closest to the positive identity (RAS)."""
    affine = np.asarray(affine, dtype=np.float64)
    rot = affine[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-12:
        raise NonInvertibleAffine("affine rotation/scale block is singular")
    cosines = rot / np.sqrt((rot ** 2).sum(axis=0))

    # greedy assignment of voxel axes to world axes by |cosine|
    order = np.argsort(-np.abs(cosines).ravel())
    axis_for_world = [-1, -1, -1]
    used_voxel = set()
    for flat in order:
        world, voxel = divmod(int(flat), 3)
        if axis_for_world[world] >= 0 or voxel in used_voxel:
            continue
        axis_for_world[world] = voxel
        used_voxel.add(voxel)
        if len(used_voxel) == 3:
            break

    perm = tuple(axis_for_world)
    flip = tuple(bool(cosines[w, perm[w]] < 0) for w in range(3))
    return OrientationTransform(perm=perm, flip=flip)


def _apply_orientation(data, t: OrientationTransform, spatial_offset):
    """Reorder spatial axes of `data`; spatial_offset is the index of the
    first spatial axis (1 for (C,x,y,z) volumes, 0 for label maps)."""
    out = data
    for world_axis, src_axis in enumerate(t.perm):
        if t.flip[world_axis]:
            out = np.flip(out, axis=src_axis + spatial_offset)
    axes = list(range(spatial_offset)) + [p + spatial_offset for p in t.perm]
    return np.transpose(out, axes=axes).copy()


def _orientation_affine(affine, t: OrientationTransform, spatial_shape):
    """Affine of the reoriented volume: old voxel index expressed in terms of
    the new index composed with the old affine."""
    voxmap = np.eye(4)
    voxmap[:3, :3] = 0.0
    for world_axis, src_axis in enumerate(t.perm):
        n = spatial_shape[src_axis]
        if t.flip[world_axis]:
            voxmap[src_axis, world_axis] = -1.0
            voxmap[src_axis, 3] = n - 1.0
        else:
            voxmap[src_axis, world_axis] = 1.0
    return np.asarray(affine, dtype=np.float64) @ voxmap


def to_canonical(v: Volume) -> Volume:
    """Reorient to RAS. World-space positions of all voxels are preserved."""
    t = compute_canonical_transform(v.affine)
    if t.is_identity:
        return replace(v, data=v.data, affine=v.affine.copy())
    new_affine = _orientation_affine(v.affine, t, v.spatial_shape)
    return Volume(data=_apply_orientation(v.data, t, 1), affine=new_affine,
                  channel_names=v.channel_names)


def to_canonical_labels(m: LabelMap, affine) -> LabelMap:
    """Apply to a label map the same reorientation its paired Volume gets."""
    t = compute_canonical_transform(affine)
    if t.is_identity:
        return m
    return LabelMap(data=_apply_orientation(m.data, t, 0),
                    label_semantics=dict(m.label_semantics))


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _resize_coords(src_shape, target):
    """Voxel coordinates in the source grid for each target voxel center
    (align-corners-false convention)."""
    axes = []
    for s, t in zip(src_shape, target):
        r = s / t
        axes.append((np.arange(t, dtype=np.float64) + 0.5) * r - 0.5)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


def _check_target(target):
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise InvalidTarget(f"resize target must be 3 positive ints, got {target}")
    return target


def _resize_affine(affine, src_shape, target):
    scale = np.eye(4)
    for i, (s, t) in enumerate(zip(src_shape, target)):
        r = s / t
        scale[i, i] = r
        scale[i, 3] = 0.5 * r - 0.5
    return np.asarray(affine, dtype=np.float64) @ scale


def resize_volume(v: Volume, target) -> Volume:
    """Trilinear resample to `target` spatial shape."""
    target = _check_target(target)
    src_shape = v.spatial_shape
    coords = _resize_coords(src_shape, target)
    out = np.empty((v.n_channels, *target), dtype=np.float32)
    for c in range(v.n_channels):
        out[c] = kernels.sample_trilinear(v.data[c], coords, edge_clamp=True).reshape(target)
    ratio = np.array(src_shape, dtype=np.float64) / np.array(target, dtype=np.float64)
    return Volume(data=out, affine=_resize_affine(v.affine, src_shape, target),
                  channel_names=v.channel_names,
                  voxel_spacing=v.voxel_spacing * ratio)


def resize_labels(m: LabelMap, target) -> LabelMap:
    """Nearest-neighbour resample of a label map to `target` shape."""
    target = _check_target(target)
    coords = _resize_coords(m.spatial_shape, target)
    out = kernels.sample_nearest(m.data.astype(np.int32), coords,
                                 edge_clamp=True).reshape(target)
    return LabelMap(data=out, label_semantics=dict(m.label_semantics))


# ---------------------------------------------------------------------------
# intensity normalization
# ---------------------------------------------------------------------------

def z_normalize(v: Volume, nonzero_only: bool = True) -> Volume:
    """Per-channel z-scoring. With nonzero_only (the default) statistics come
    from nonzero voxels only and background stays exactly 0, matching
    brain-extracted inputs; constant channels map to all zeros."""
    out = np.zeros_like(v.data)
    for c in range(v.n_channels):
        ch = v.data[c].astype(np.float64)
        mask = ch != 0 if nonzero_only else np.ones_like(ch, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            continue
        mu = ch[mask].mean()
        sd = ch[mask].std()
        if sd < 1e-12:
            continue  # constant channel -> zeros
        normed = (ch - mu) / sd
        if nonzero_only:
            out[c][mask] = normed[mask].astype(np.float32)
        else:
            out[c] = normed.astype(np.float32)
    return replace(v, data=out)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    affine_prob: float = 1.0
    scale_range: tuple = (0.9, 1.1)
    rotate_deg: float = 10.0
    translate_vox: float = 5.0
    noise_prob: float = 1.0
    noise_sigma: tuple = (0.0, 0.1)


def _rotation_matrix(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def augment(v: Volume, m: LabelMap, rng_seed: int, cfg: AugmentConfig = AugmentConfig()):
    """Random LR flip + affine warp + additive noise, applied identically to
    image (trilinear) and labels (nearest). Deterministic given rng_seed."""
    if v.spatial_shape != m.spatial_shape:
        raise ShapeMismatch(f"image {v.spatial_shape} vs labels {m.spatial_shape}")
    rng = np.random.default_rng(rng_seed)

    do_flip = rng.random() < cfg.flip_prob
    do_affine = rng.random() < cfg.affine_prob
    scale = rng.uniform(*cfg.scale_range)
    rots = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=3))
    trans = rng.uniform(-cfg.translate_vox, cfg.translate_vox, size=3)
    do_noise = rng.random() < cfg.noise_prob
    sigma = rng.uniform(*cfg.noise_sigma)

    img = v.data
    lab = m.data
    if do_flip:
        img = np.flip(img, axis=1)  # first spatial axis = LR after RAS
        lab = np.flip(lab, axis=0)

    if do_affine:
        shape = v.spatial_shape
        center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
        M = _rotation_matrix(*rots) * scale
        Minv = np.linalg.inv(M)
        gx, gy, gz = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape],
                                 indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()])
        src = Minv @ (pts - (center + trans)[:, None]) + center[:, None]
        warped = np.empty_like(img)
        for c in range(img.shape[0]):
            warped[c] = kernels.sample_trilinear(
                np.ascontiguousarray(img[c]), src, edge_clamp=False
            ).reshape(shape)
        img = warped
        lab = kernels.sample_nearest(
            np.ascontiguousarray(lab.astype(np.int32)), src, edge_clamp=False
        ).reshape(shape)

    img = np.ascontiguousarray(img, dtype=np.float32)
    if do_noise and sigma > 0:
        img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)

    return (
        replace(v, data=img),
        LabelMap(data=np.ascontiguousarray(lab), label_semantics=dict(m.label_semantics)),
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def preprocess_case(v: Volume, m: LabelMap | None, target, nonzero_norm=True):
    """Canonical orientation -> resize -> z-normalize, keeping the label map
    aligned. The standard inference-time pipeline."""
    t = compute_canonical_transform(v.affine)
    orig_affine = v.affine
    v = to_canonical(v)
    if m is not None and not t.is_identity:
        m = to_canonical_labels(m, orig_affine)
    if tuple(v.spatial_shape) != tuple(target):
        v = resize_volume(v, target)
        if m is not None:
            m = resize_labels(m, target)
    v = z_normalize(v, nonzero_only=nonzero_norm)
    return v, m

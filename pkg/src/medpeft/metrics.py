"""Segmentation evaluation: overlap, surface-distance and lesion-wise metrics
plus a paired permutation test and the per-case/aggregate report.

Conventions that dominate small-cohort aggregates, stated once here:
  * dice(empty, empty) = 1.0; dice with exactly one empty mask = 0.0
  * hd95(empty, empty) = 0.0; exactly one empty mask scores the penalty
    constant (374.0 mm by default)
  * missed lesions and false-positive components enter the lesion-wise
    means as dice 0 / hd95 penalty entries
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import LengthMismatch, ShapeMismatch, TooFewCases
from .volume_io import LabelMap

METRICS_SCHEMA_VERSION = 1

HD_PENALTY = 374.0

REGIONS = ("ET", "TC", "WT")
_REGION_CLASSES = {
    "ET": {"ET"},
    "TC": {"ET", "NETC"},
    "WT": {"ET", "NETC", "SNFH"},
}

METRIC_NAMES = ("dice", "hd95", "lw_dice", "lw_hd95", "sensitivity", "specificity")


@dataclass
class RegionMask:
    region: str
    data: np.ndarray  # 3D bool


def extract_region(m: LabelMap, region: str) -> RegionMask:
    """Boolean mask of an evaluation region (ET, TC = ET+NETC, WT = all tumor)."""
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    values = m.values_for(_REGION_CLASSES[region])
    data = np.isin(m.data, sorted(values))
    return RegionMask(region=region, data=data)


def _as_bool(mask):
    if isinstance(mask, RegionMask):
        mask = mask.data
    return np.asarray(mask, dtype=bool)


def _check_pair(pred, gt):
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); both empty -> 1.0, one empty -> 0.0."""
    pred, gt = _check_pair(pred, gt)
    p, g = int(pred.sum()), int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def sensitivity_specificity(pred, gt) -> dict:
    """Voxel-level sensitivity TP/(TP+FN) and specificity TN/(TN+FP).
    Empty ground truth yields sensitivity 1.0 by convention."""
    pred, gt = _check_pair(pred, gt)
    tp = int(np.logical_and(pred, gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    tn = pred.size - tp - fn - fp
    sens = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
    spec = 1.0 if (tn + fp) == 0 else tn / (tn + fp)
    return {"sensitivity": sens, "specificity": spec}


def surface_voxels(mask) -> np.ndarray:
    """(n, 3) indices of foreground voxels with at least one of their six
    face neighbours outside the mask (array borders count as outside)."""
    mask = _as_bool(mask)
    if not mask.any():
        return np.zeros((0, 3), dtype=np.int64)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (1, -1):
            rolled = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                dst[axis], src[axis] = slice(1, None), slice(None, -1)
            else:
                dst[axis], src[axis] = slice(None, -1), slice(1, None)
            rolled[tuple(dst)] = mask[tuple(src)]
            interior &= rolled
    surface = mask & ~interior
    return np.argwhere(surface)


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), penalty: float = HD_PENALTY) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface
    distances between the two masks, in mm."""
    pred, gt = _check_pair(pred, gt)
    p_empty, g_empty = not pred.any(), not gt.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return float(penalty)
    sp = np.asarray(spacing, dtype=np.float64)
    ps = surface_voxels(pred)
    gs = surface_voxels(gt)
    d_pg = kernels.directed_min_dists(ps.astype(np.float64), gs.astype(np.float64), sp)
    d_gp = kernels.directed_min_dists(gs.astype(np.float64), ps.astype(np.float64), sp)
    pooled = np.concatenate([d_pg, d_gp])
    return float(np.percentile(pooled, 95))


# ---------------------------------------------------------------------------
# lesion-wise metrics
# ---------------------------------------------------------------------------

@dataclass
class LesionMatchingConfig:
    min_lesion_size: int = 10      # ground-truth components below this are ignored
    min_pred_size: int = 0         # predicted components below this are ignored
    dilation_voxels: int = 1       # matching-zone dilation around each GT lesion
    connectivity: int = 26
    penalty: float = HD_PENALTY


@dataclass
class LesionwiseResult:
    lw_dice: float
    lw_hd95: float
    n_gt_lesions: int
    n_matched: int
    n_false_positive: int
    entries: list = field(default_factory=list)  # (kind, dice, hd95) per entry


def binary_dilate(mask, iterations=1, connectivity=26):
    """Morphological dilation with the 6/26-neighbourhood structuring element."""
    mask = _as_bool(mask).copy()
    offs = [o for o in _all_offsets(connectivity)]
    for _ in range(iterations):
        grown = mask.copy()
        for off in offs:
            shifted = np.zeros_like(mask)
            dst, src = [], []
            for d, n in zip(off, mask.shape):
                dst.append(slice(max(0, d), n - max(0, -d)))
                src.append(slice(max(0, -d), n - max(0, d)))
            shifted[tuple(dst)] = mask[tuple(src)]
            grown |= shifted
        mask = grown
    return mask


def _all_offsets(connectivity):
    from .kernels._numpy_impl import neighbor_offsets

    return neighbor_offsets(connectivity)


def lesionwise(pred, gt, spacing=(1.0, 1.0, 1.0),
               cfg: LesionMatchingConfig = LesionMatchingConfig()) -> LesionwiseResult:
    """Per-lesion scoring: each ground-truth component (above the size cutoff)
    is matched to all predicted components intersecting its dilated zone and
    scored against their union; unmatched GT lesions and unmatched predicted
    components contribute penalty entries."""
    pred, gt = _check_pair(pred, gt)
    sp = np.asarray(spacing, dtype=np.float64)

    gt_labels, n_gt = kernels.label_components(gt, cfg.connectivity)
    pred_labels, n_pred = kernels.label_components(pred, cfg.connectivity)

    gt_ids = [i for i in range(1, n_gt + 1)
              if int((gt_labels == i).sum()) >= cfg.min_lesion_size]
    pred_sizes = {j: int((pred_labels == j).sum()) for j in range(1, n_pred + 1)}
    pred_ids = [j for j in range(1, n_pred + 1)
                if pred_sizes[j] >= max(1, cfg.min_pred_size)]

    entries = []
    matched_preds = set()
    n_matched = 0
    for i in gt_ids:
        lesion = gt_labels == i
        zone = binary_dilate(lesion, cfg.dilation_voxels, cfg.connectivity)
        touching = sorted(set(np.unique(pred_labels[zone]).tolist()) & set(pred_ids))
        if touching:
            union = np.isin(pred_labels, touching)
            entries.append(("matched", dice(union, lesion),
                            hd95(union, lesion, sp, cfg.penalty)))
            matched_preds.update(touching)
            n_matched += 1
        else:
            entries.append(("missed", 0.0, float(cfg.penalty)))

    false_pos = [j for j in pred_ids if j not in matched_preds]
    for _ in false_pos:
        entries.append(("false_positive", 0.0, float(cfg.penalty)))

    if not entries:  # both sides empty (or only dust)
        return LesionwiseResult(1.0, 0.0, 0, 0, 0, [])

    lw_dice = float(np.mean([e[1] for e in entries]))
    lw_hd95 = float(np.mean([e[2] for e in entries]))
    return LesionwiseResult(lw_dice, lw_hd95, len(gt_ids), n_matched,
                            len(false_pos), entries)


# ---------------------------------------------------------------------------
# paired significance
# ---------------------------------------------------------------------------

def paired_significance(scores_a, scores_b, n_resamples: int = 100_000,
                        seed: int = 0) -> float:
    """Two-sided sign-flip permutation test on per-case differences.
    Exhaustive over all 2^n sign patterns for n <= 20, Monte-Carlo with a
    fixed seed above that. Returns p in (0, 1]."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired arrays of equal length required, "
                             f"got {a.shape} and {b.shape}")
    n = a.size
    if n < 5:
        raise TooFewCases(f"need at least 5 paired cases, got {n}")

    d = b - a
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, observed)

    if n <= 20:
        count = 0
        total = 1 << n
        chunk = 1 << 14
        idx = np.arange(n)
        for start in range(0, total, chunk):
            pats = np.arange(start, min(start + chunk, total), dtype=np.uint32)
            signs = np.where((pats[:, None] >> idx) & 1, -1.0, 1.0)
            means = np.abs(signs @ d) / n
            count += int((means >= observed - tol).sum())
        return count / total

    rng = np.random.default_rng(seed)
    signs = rng.choice((-1.0, 1.0), size=(n_resamples, n))
    means = np.abs(signs @ d) / n
    exceed = int((means >= observed - tol).sum())
    return (1 + exceed) / (1 + n_resamples)


# ---------------------------------------------------------------------------
# per-case rows and the aggregate report
# ---------------------------------------------------------------------------

@dataclass
class CaseRow:
    case_id: str
    region: str
    dice: float
    hd95: float
    lw_dice: float
    lw_hd95: float
    sensitivity: float
    specificity: float


def evaluate_pair(pred: LabelMap, gt: LabelMap, spacing=(1.0, 1.0, 1.0),
                  case_id: str = "case",
                  lesion_cfg: LesionMatchingConfig = LesionMatchingConfig()):
    """All metrics for one predicted/reference label-map pair, per region."""
    if pred.spatial_shape != gt.spatial_shape:
        raise ShapeMismatch(f"pred {pred.spatial_shape} vs gt {gt.spatial_shape}")
    rows = []
    for region in REGIONS:
        p = extract_region(pred, region).data
        g = extract_region(gt, region).data
        lw = lesionwise(p, g, spacing, lesion_cfg)
        ss = sensitivity_specificity(p, g)
        rows.append(CaseRow(
            case_id=case_id, region=region,
            dice=dice(p, g), hd95=hd95(p, g, spacing, lesion_cfg.penalty),
            lw_dice=lw.lw_dice, lw_hd95=lw.lw_hd95,
            sensitivity=ss["sensitivity"], specificity=ss["specificity"],
        ))
    return rows


@dataclass
class MetricsReport:
    rows: list
    schema_version: int = METRICS_SCHEMA_VERSION

    @property
    def case_ids(self):
        seen = dict.fromkeys(r.case_id for r in self.rows)
        return list(seen)

    def region_values(self, metric: str, region: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows if r.region == region])

    def per_case_mean(self, metric: str) -> dict:
        """Per case, the metric averaged over regions (the 'Avg.' column)."""
        out = {}
        for cid in self.case_ids:
            vals = [getattr(r, metric) for r in self.rows if r.case_id == cid]
            out[cid] = float(np.mean(vals))
        return out

    def aggregates(self) -> dict:
        agg = {"schema_version": self.schema_version, "n_cases": len(self.case_ids),
               "regions": {}, "region_mean": {}}
        for region in REGIONS:
            agg["regions"][region] = {}
            for metric in METRIC_NAMES:
                vals = self.region_values(metric, region)
                agg["regions"][region][metric] = {
                    "mean": float(vals.mean()) if vals.size else float("nan"),
                    "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                }
        for metric in METRIC_NAMES:
            agg["region_mean"][metric] = float(np.mean(
                [agg["regions"][r][metric]["mean"] for r in REGIONS]
            ))
        return agg

    def mean_dice(self) -> float:
        """Mean over cases and regions of the plain Dice score."""
        return float(np.mean([r.dice for r in self.rows]))

    # -- serialization --------------------------------------------------

    _CSV_FIELDS = ("case_id", "region", "dice", "hd95", "lw_dice", "lw_hd95",
                   "sensitivity", "specificity")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("schema_version", self.schema_version))
        writer.writerow(self._CSV_FIELDS)
        for r in sorted(self.rows, key=lambda r: (r.case_id, REGIONS.index(r.region))):
            writer.writerow((r.case_id, r.region) + tuple(
                format(getattr(r, m), ".10g") for m in METRIC_NAMES
            ))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None) -> str:
        payload = self.aggregates()
        text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        lines = Path(path).read_text().splitlines()
        reader = csv.reader(lines)
        head = next(reader)
        if head[0] != "schema_version":
            raise ValueError(f"{path}: missing schema_version header")
        version = int(head[1])
        fields = next(reader)
        if tuple(fields) != cls._CSV_FIELDS:
            raise ValueError(f"{path}: unexpected columns {fields}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            vals = dict(zip(fields, rec))
            rows.append(CaseRow(
                case_id=vals["case_id"], region=vals["region"],
                **{m: float(vals[m]) for m in METRIC_NAMES},
            ))
        return cls(rows=rows, schema_version=version)

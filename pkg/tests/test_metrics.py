import numpy as np
import pytest

from medpeft.errors import LengthMismatch, ShapeMismatch, TooFewCases
from medpeft.metrics import (
    HD_PENALTY,
    CaseRow,
    LesionMatchingConfig,
    MetricsReport,
    dice,
    evaluate_pair,
    extract_region,
    hd95,
    lesionwise,
    paired_significance,
    sensitivity_specificity,
)
from medpeft.volume_io import LabelMap
from oracles import (
    dice_oracle,
    hd95_oracle,
    lesionwise_oracle,
    permutation_p_oracle,
    sens_spec_oracle,
)


def box(shape, lo, hi):
    m = np.zeros(shape, dtype=bool)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return m


# ---- region extraction ------------------------------------------------------

def test_extract_region_definitions():
    data = np.zeros((6, 6, 6), dtype=np.int16)
    data[0, 0, 0] = 2  # SNFH only
    m = LabelMap(data=data)
    assert extract_region(m, "ET").data.sum() == 0
    assert extract_region(m, "TC").data.sum() == 0
    assert extract_region(m, "WT").data.sum() == 1

    data2 = np.zeros((6, 6, 6), dtype=np.int16)
    data2[1, 1, 1] = 3  # ET only
    m2 = LabelMap(data=data2)
    for region in ("ET", "TC", "WT"):
        assert extract_region(m2, region).data.sum() == 1


# ---- dice -------------------------------------------------------------------

def test_dice_closed_forms():
    a = box((8, 8, 8), (0, 0, 0), (1, 1, 2))          # 2 voxels
    b = box((8, 8, 8), (0, 0, 1), (1, 1, 3))          # 2 voxels, overlap 1
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.5
    empty = np.zeros((8, 8, 8), bool)
    assert dice(empty, empty) == 1.0
    assert dice(a, empty) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice(np.zeros((4, 4, 4), bool), np.zeros((5, 4, 4), bool))


# ---- hd95 ---------------------------------------------------------------------

def test_hd95_closed_forms():
    a = np.zeros((9, 9, 9), bool)
    b = np.zeros((9, 9, 9), bool)
    a[2, 2, 2] = True
    b[2, 2, 5] = True
    assert hd95(a, a) == 0.0
    assert hd95(a, b) == pytest.approx(3.0)
    empty = np.zeros((9, 9, 9), bool)
    assert hd95(empty, empty) == 0.0
    assert hd95(a, empty) == HD_PENALTY


def test_hd95_respects_spacing():
    a = np.zeros((9, 9, 9), bool)
    b = np.zeros((9, 9, 9), bool)
    a[2, 2, 2] = True
    b[2, 2, 5] = True
    assert hd95(a, b, spacing=(1, 1, 2.5)) == pytest.approx(7.5)


# ---- lesion-wise --------------------------------------------------------------

def test_lesionwise_hand_constructed_cases():
    shape = (16, 16, 16)
    gt1 = box(shape, (2, 2, 2), (6, 6, 6))
    r = lesionwise(gt1, gt1)
    assert (r.lw_dice, r.lw_hd95) == (1.0, 0.0)

    gt2 = gt1 | box(shape, (10, 10, 10), (14, 14, 14))
    r2 = lesionwise(gt1, gt2)  # one lesion predicted, one missed
    assert r2.lw_dice == pytest.approx(0.5)
    assert r2.lw_hd95 == pytest.approx((0.0 + HD_PENALTY) / 2)

    pred3 = gt1 | box(shape, (10, 10, 10), (14, 14, 14))
    r3 = lesionwise(pred3, gt1)  # perfect match + spurious component
    assert r3.lw_dice == pytest.approx(0.5)
    assert r3.lw_hd95 == pytest.approx(187.0)
    assert r3.n_false_positive == 1


def test_lesionwise_small_gt_components_ignored():
    shape = (12, 12, 12)
    gt = box(shape, (1, 1, 1), (2, 2, 3))   # 2 voxels, below min size 10
    pred = np.zeros(shape, bool)
    r = lesionwise(pred, gt)
    assert (r.lw_dice, r.lw_hd95) == (1.0, 0.0)
    assert r.n_gt_lesions == 0


def test_lesionwise_monotone_penalty(rng):
    shape = (14, 14, 14)
    gt = box(shape, (2, 2, 2), (7, 7, 7))
    pred = box(shape, (2, 2, 2), (7, 7, 6))
    base = lesionwise(pred, gt)
    spur = pred | box(shape, (11, 11, 11), (14, 14, 14))
    worse = lesionwise(spur, gt)
    assert worse.lw_dice <= base.lw_dice
    assert worse.lw_hd95 >= base.lw_hd95


# ---- sensitivity / specificity -------------------------------------------------

def test_sens_spec_closed_forms():
    shape = (6, 6, 6)
    gt = box(shape, (1, 1, 1), (4, 4, 4))
    perfect = sensitivity_specificity(gt, gt)
    assert perfect == {"sensitivity": 1.0, "specificity": 1.0}
    none = sensitivity_specificity(np.zeros(shape, bool), gt)
    assert none["sensitivity"] == 0.0
    assert none["specificity"] == 1.0
    over = sensitivity_specificity(box(shape, (0, 0, 0), (5, 5, 5)), gt)
    assert over["sensitivity"] == 1.0
    tn = 6 ** 3 - 5 ** 3
    fp = 5 ** 3 - 3 ** 3
    assert over["specificity"] == pytest.approx(tn / (tn + fp))


# ---- oracle equivalence ---------------------------------------------------------

def test_metrics_match_oracles_on_random_masks(rng):
    spacing = (1.0, 1.25, 0.8)
    for trial in range(40):
        shape = tuple(rng.integers(6, 13, 3))
        p = rng.random(shape) < rng.uniform(0.05, 0.4)
        g = rng.random(shape) < rng.uniform(0.05, 0.4)
        assert dice(p, g) == pytest.approx(dice_oracle(p, g), abs=1e-9)
        assert hd95(p, g, spacing) == pytest.approx(
            hd95_oracle(p, g, spacing), abs=1e-9)
        ss = sensitivity_specificity(p, g)
        sens, spec = sens_spec_oracle(p, g)
        assert ss["sensitivity"] == pytest.approx(sens, abs=1e-9)
        assert ss["specificity"] == pytest.approx(spec, abs=1e-9)
        lw = lesionwise(p, g, spacing)
        lw_d, lw_h = lesionwise_oracle(p, g, spacing)
        assert lw.lw_dice == pytest.approx(lw_d, abs=1e-9)
        assert lw.lw_hd95 == pytest.approx(lw_h, abs=1e-9)


def test_symmetry_and_bounds(rng):
    for _ in range(20):
        p = rng.random((9, 9, 9)) < 0.3
        g = rng.random((9, 9, 9)) < 0.3
        assert dice(p, g) == dice(g, p)
        assert hd95(p, g) == hd95(g, p)
        assert 0.0 <= dice(p, g) <= 1.0
        d = hd95(p, g)
        assert d == HD_PENALTY or 0.0 <= d <= np.sqrt(3 * 8 ** 2)


# ---- permutation test ------------------------------------------------------------

def test_paired_significance_closed_forms():
    same = np.linspace(0, 1, 8)
    assert paired_significance(same, same) == 1.0
    shifted = same + 0.2
    assert paired_significance(same, shifted) == pytest.approx(2 / 256)


def test_paired_significance_matches_exhaustive_oracle(rng):
    a = rng.normal(size=10)
    b = a + rng.normal(0.3, 0.5, size=10)
    assert paired_significance(a, b) == pytest.approx(
        permutation_p_oracle(a, b), abs=1e-12)


def test_paired_significance_monte_carlo_close_to_exhaustive(rng):
    a = rng.normal(size=12)
    b = a + rng.normal(0.25, 0.4, size=12)
    exact = paired_significance(a, b)
    # force the Monte-Carlo path by lying about n? no: call the estimator on
    # replicated data is wrong; instead sample with the internal MC branch via
    # a 22-case array built to keep the same distribution of differences
    mc = _monte_carlo_reference(a, b, n=100_000, seed=3)
    se = np.sqrt(exact * (1 - exact) / 100_000)
    assert abs(mc - exact) <= 3 * se + 1e-12


def _monte_carlo_reference(a, b, n, seed):
    rng = np.random.default_rng(seed)
    d = np.asarray(b) - np.asarray(a)
    obs = abs(d.mean())
    signs = rng.choice((-1.0, 1.0), size=(n, d.size))
    means = np.abs(signs @ d) / d.size
    return (1 + int((means >= obs - 1e-12).sum())) / (1 + n)


def test_paired_significance_errors():
    with pytest.raises(LengthMismatch):
        paired_significance([1, 2, 3, 4, 5], [1, 2, 3, 4])
    with pytest.raises(TooFewCases):
        paired_significance([1, 2], [3, 4])


# ---- report assembly ---------------------------------------------------------------

def _toy_report():
    rows = []
    for i, cid in enumerate(["case_0000", "case_0001"]):
        for j, region in enumerate(("ET", "TC", "WT")):
            rows.append(CaseRow(case_id=cid, region=region,
                                dice=0.5 + 0.1 * j + 0.05 * i, hd95=3.0 - j,
                                lw_dice=0.4 + 0.1 * j, lw_hd95=10.0 + j,
                                sensitivity=0.9, specificity=0.99))
    return MetricsReport(rows=rows)


def test_report_aggregates_consistent_with_rows():
    rep = _toy_report()
    agg = rep.aggregates()
    for region in ("ET", "TC", "WT"):
        vals = rep.region_values("dice", region)
        assert agg["regions"][region]["dice"]["mean"] == pytest.approx(
            vals.mean(), abs=1e-9)
        if vals.size > 1:
            assert agg["regions"][region]["dice"]["std"] == pytest.approx(
                vals.std(ddof=1), abs=1e-9)
    expect_avg = np.mean([agg["regions"][r]["dice"]["mean"] for r in ("ET", "TC", "WT")])
    assert agg["region_mean"]["dice"] == pytest.approx(expect_avg, abs=1e-12)


def test_report_csv_roundtrip(tmp_path):
    rep = _toy_report()
    path = tmp_path / "metrics.csv"
    text1 = rep.to_csv(path)
    back = MetricsReport.from_csv(path)
    assert back.schema_version == rep.schema_version
    assert len(back.rows) == len(rep.rows)
    assert back.to_csv() == text1  # byte-stable serialization


def test_evaluate_pair_produces_all_regions(rng):
    data = np.zeros((12, 12, 12), dtype=np.int16)
    data[2:6, 2:6, 2:6] = 3
    data[6:9, 2:6, 2:6] = 1
    data[2:6, 6:10, 2:6] = 2
    gt = LabelMap(data=data)
    rows = evaluate_pair(gt, gt, case_id="self")
    assert [r.region for r in rows] == ["ET", "TC", "WT"]
    for r in rows:
        assert r.dice == 1.0 and r.hd95 == 0.0 and r.lw_dice == 1.0

import json

import numpy as np
import pytest

from medpeft.errors import LesionDoesNotFit
from medpeft.metrics import extract_region
from medpeft.synthetic_cohort import (
    CohortSpec,
    Domain,
    generate_case,
    generate_cohort,
    load_cohort,
    read_manifest,
)


def spec(domain=Domain.SOURCE, n=3, shape=(16, 16, 16), seed=11, **kw):
    return CohortSpec(n_cases=n, spatial_shape=shape, domain=domain,
                      rng_seed=seed, **kw)


def test_nested_regions_and_prevalence():
    for i in range(3):
        _, m = generate_case(spec(), i)
        et = extract_region(m, "ET").data
        tc = extract_region(m, "TC").data
        wt = extract_region(m, "WT").data
        assert np.all(~et | tc) and np.all(~tc | wt)   # ET ⊆ TC ⊆ WT
        assert et.sum() <= tc.sum() <= wt.sum()
        n_vox = m.data.size
        for value in (1, 2, 3):
            assert (m.data == value).sum() >= 0.001 * n_vox


def test_domains_share_labels_but_not_images():
    for i in range(3):
        vs, ms = generate_case(spec(Domain.SOURCE), i)
        vd, md = generate_case(spec(Domain.SHIFTED), i)
        assert np.array_equal(ms.data, md.data)
        assert not np.array_equal(vs.data, vd.data)


def _laplacian_energy(vol):
    total = 0.0
    for c in range(vol.shape[0]):
        x = vol[c].astype(np.float64)
        lap = -6.0 * x
        for axis in range(3):
            lap += np.roll(x, 1, axis=axis) + np.roll(x, -1, axis=axis)
        total += (lap ** 2).mean()
    return total / vol.shape[0]


def test_shifted_domain_loses_high_frequency_energy():
    wins = 0
    n = 20
    for i in range(n):
        vs, _ = generate_case(spec(Domain.SOURCE, n=n, seed=5), i)
        vd, _ = generate_case(spec(Domain.SHIFTED, n=n, seed=5), i)
        if _laplacian_energy(vd.data) < _laplacian_energy(vs.data):
            wins += 1
    assert wins >= 19


def _intensity_hist_distance(a, b, bins=64):
    """1-Wasserstein between normalized nonzero-intensity distributions."""
    av = a[a != 0].ravel()
    bv = b[b != 0].ravel()
    lo, hi = min(av.min(), bv.min()), max(av.max(), bv.max())
    qa = np.quantile(av, np.linspace(0, 1, 101))
    qb = np.quantile(bv, np.linspace(0, 1, 101))
    return float(np.abs(qa - qb).mean() / max(hi - lo, 1e-9))


def test_domain_shift_exceeds_within_domain_variation():
    n = 6
    src = [generate_case(spec(Domain.SOURCE, n=n, seed=2), i)[0].data for i in range(n)]
    shf = [generate_case(spec(Domain.SHIFTED, n=n, seed=2), i)[0].data for i in range(n)]
    cross = [_intensity_hist_distance(src[i][0], shf[i][0]) for i in range(n)]
    within = [_intensity_hist_distance(src[i][0], src[j][0])
              for i in range(n) for j in range(i + 1, n)]
    assert np.mean(cross) > np.mean(within)


def test_lesion_does_not_fit():
    with pytest.raises(LesionDoesNotFit):
        generate_case(spec(shape=(8, 8, 8)), 0)


def test_case_index_bounds():
    with pytest.raises(IndexError):
        generate_case(spec(n=2), 2)


def test_generate_cohort_files_and_determinism(tmp_path):
    s = spec(n=5)
    m1 = generate_cohort(s, tmp_path / "a")
    assert m1["n_cases"] == 5
    assert len(m1["cases"]) == 5
    images = sorted((tmp_path / "a").glob("case_*[0-9].rawvol"))
    labels = sorted((tmp_path / "a").glob("case_*_seg.rawvol"))
    assert len(images) == 5 and len(labels) == 5

    generate_cohort(s, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    cases, manifest = load_cohort(tmp_path / "a")
    assert len(cases) == 5
    assert manifest["domain"] == "source"
    assert read_manifest(tmp_path / "a")["seed"] == s.rng_seed


def test_manifest_schema(tmp_path):
    generate_cohort(spec(n=1), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("format_version", "domain", "seed", "n_cases", "spatial_shape", "cases"):
        assert key in manifest

"""Phantom rendering and cohort sampling tests.

Geometry checks use threshold-count or intensity-deficit oracles computed
directly on the rendered volumes; statistical checks use wide intervals
around values derived from the sampler's own closed-form design.
"""

import json
from collections import Counter

import numpy as np
import pytest

from dsynth import phantom as ph
from dsynth.deform import Grid3
from dsynth.errors import ValidationError


def _attrs(age=50.0, sex=0, load=0.0, seed=11, sid="s"):
    return ph.PhantomAttributes(subject_id=sid, age=age, sex=sex, lesion_load=load, seed=seed)


# --------------------------------------------------------------------------
# attributes and bins


def test_attribute_validation():
    with pytest.raises(ValidationError):
        _attrs(age=30.0)
    with pytest.raises(ValidationError):
        _attrs(age=81.0)
    with pytest.raises(ValidationError):
        ph.PhantomAttributes("s", 50.0, 2, 0.0, 1)
    with pytest.raises(ValidationError):
        _attrs(load=-1.0)


def test_age_bin_boundaries():
    assert ph.age_bin(38.0) == "younger"
    assert ph.age_bin(50.0) == "younger"
    assert ph.age_bin(np.nextafter(50.0, 80.0)) == "middle"
    assert ph.age_bin(55.0) == "middle"
    assert ph.age_bin(55.1) == "older"
    assert ph.age_bin(80.0) == "older"


def test_lesion_quartile_strict():
    # With a duplicated value the 75th percentile lands exactly on a data
    # point; that point must stay in the bottom three quartiles.
    loads = [1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 7.0]
    cut = ph.lesion_quartile_cut(loads)
    assert cut == 5.0
    assert ph.bin_attributes(_attrs(load=5.0), cut).lesion_bin == "bottom3q"
    assert ph.bin_attributes(_attrs(load=5.0 + 1e-9), cut).lesion_bin == "topq"
    with pytest.raises(ValidationError):
        ph.lesion_quartile_cut([1.0, 2.0])


# --------------------------------------------------------------------------
# pearson


def test_pearson_identity_and_hand_case():
    xs = np.arange(10.0)
    r, p = ph.pearson(xs, xs)
    assert r == pytest.approx(1.0)
    assert p < 1e-8
    r, _ = ph.pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    assert r == pytest.approx(1.0)


def test_pearson_independent_permutation():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=1000)
    ys = rng.permutation(xs)
    r, p = ph.pearson(xs, ys)
    assert abs(r) < 0.1
    assert p > 1e-4


def test_pearson_rejects_degenerate():
    with pytest.raises(ValidationError):
        ph.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValidationError):
        ph.pearson([1.0, 2.0], [1.0, 2.0])


# --------------------------------------------------------------------------
# rendering


def test_render_deterministic():
    a = _attrs(age=62.0, sex=1, load=90.0, seed=4)
    v1 = ph.render_phantom(a)
    v2 = ph.render_phantom(a)
    assert np.array_equal(v1.values, v2.values)
    assert v1.values.min() >= 0.0 and v1.values.max() <= 1.0


def test_render_seed_changes_image():
    v1 = ph.render_phantom(_attrs(seed=1))
    v2 = ph.render_phantom(_attrs(seed=2))
    assert not np.array_equal(v1.values, v2.values)


def _ventricle_proxy(age: float) -> float:
    # Integrated intensity deficit over the central block: continuous in
    # the ventricle radius, so strict monotonicity survives the 24-voxel
    # grid where a hard threshold count would plateau.
    img = ph.render_phantom(_attrs(age=age)).values[6:18, 6:18, 6:18]
    return float(np.clip(0.45 - img, 0.0, None).sum())


def test_ventricle_grows_with_age():
    values = [_ventricle_proxy(a) for a in (40.0, 50.0, 60.0, 70.0, 80.0)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_shell_thins_with_age():
    young = ph.render_phantom(_attrs(age=40.0)).values
    old = ph.render_phantom(_attrs(age=80.0)).values
    assert int((young > 0.70).sum()) > int((old > 0.70).sum())


def test_sex_sets_aspect_ratio():
    f = ph.render_phantom(_attrs(age=50.0, sex=0)).values
    m = ph.render_phantom(_attrs(age=50.0, sex=1)).values
    x_extent = lambda img: int((img > 0.3).any(axis=(1, 2)).sum())
    y_extent = lambda img: int((img > 0.3).any(axis=(0, 2)).sum())
    assert x_extent(m) > x_extent(f)
    assert y_extent(m) == y_extent(f)


def test_lesions_absent_and_present():
    clean = ph.render_phantom(_attrs(age=60.0, sex=1, load=0.0, seed=5)).values
    loaded = ph.render_phantom(_attrs(age=60.0, sex=1, load=120.0, seed=5)).values
    assert int((clean > 0.9).sum()) == 0
    assert int((loaded > 0.9).sum()) >= 5


def test_counterfactual_keeps_noise_and_blobs():
    # Re-rendering with a changed age must keep the same jitter, blob and
    # noise draws; outside the moving anatomy the difference is tiny.
    base = _attrs(age=45.0, sex=0, load=80.0, seed=9)
    older = ph.counterfactual_attrs(base, age=75.0)
    i1 = ph.render_phantom(base).values
    i2 = ph.render_phantom(older).values
    assert not np.array_equal(i1, i2)
    corner = (slice(0, 3),) * 3  # far outside both heads: only shared noise
    assert np.array_equal(i1[corner], i2[corner])
    with pytest.raises(ValidationError):
        ph.counterfactual_attrs(base)


# --------------------------------------------------------------------------
# cohorts


def test_minority_zero_has_no_older():
    c = ph.sample_cohort(ph.CohortSpec(n=400, mode="minority", minority_fraction=0.0),
                         seed=2, render=False)
    bins = Counter(r.bins.age_bin for r in c.records)
    assert bins["older"] == 0
    assert bins["younger"] == 200 and bins["middle"] == 200


def test_minority_one_percent_counts():
    c = ph.sample_cohort(ph.CohortSpec(n=2000, mode="minority", minority_fraction=0.01),
                         seed=2, render=False)
    bins = Counter(r.bins.age_bin for r in c.records)
    assert bins == {"younger": 990, "middle": 990, "older": 20}


def test_minority_marginals_converge():
    c = ph.sample_cohort(ph.CohortSpec(n=10000, mode="minority", minority_fraction=0.25),
                         seed=7, render=False)
    bins = Counter(r.bins.age_bin for r in c.records)
    for name, want in (("younger", 0.375), ("middle", 0.375), ("older", 0.25)):
        assert abs(bins[name] / 10000 - want) <= 0.01


def test_balanced_cells():
    n = 600
    c = ph.sample_cohort(ph.CohortSpec(n=n, mode="balanced"), seed=2, render=False)
    cells = Counter((r.attrs.sex, r.bins.age_bin) for r in c.records)
    assert len(cells) == 6
    for count in cells.values():
        assert abs(count - n / 6) <= 0.02 * n


def test_collider_correlation():
    c = ph.sample_cohort(ph.CohortSpec(n=2000, mode="collider"), seed=3, render=False)
    r = c.achieved["r_sex_topq"]
    assert 0.75 <= r <= 0.88
    assert c.achieved["p_sex_topq"] < 0.0005


def test_confounder_couplings():
    c1 = ph.sample_cohort(ph.CohortSpec(n=4000, mode="confounder", coupling=0.4),
                          seed=1, render=False)
    assert 0.32 <= c1.achieved["r_age_load"] <= 0.45
    c2 = ph.sample_cohort(ph.CohortSpec(n=4000, mode="confounder", coupling=0.85),
                          seed=1, render=False)
    assert 0.78 <= c2.achieved["r_age_load"] <= 0.88


def test_cohort_reproducible():
    spec = ph.CohortSpec(n=50, mode="natural")
    a = ph.sample_cohort(spec, seed=5, render=False)
    b = ph.sample_cohort(spec, seed=5, render=False)
    assert [r.attrs for r in a.records] == [r.attrs for r in b.records]
    c = ph.sample_cohort(spec, seed=6, render=False)
    assert [r.attrs for r in a.records] != [r.attrs for r in c.records]


def test_infeasible_specs():
    with pytest.raises(ValidationError):
        ph.CohortSpec(n=0)
    with pytest.raises(ValidationError):
        ph.CohortSpec(n=10, minority_fraction=1.5)
    with pytest.raises(ValidationError):
        ph.sample_cohort(ph.CohortSpec(n=1000, mode="minority", minority_fraction=0.0001),
                         seed=1, render=False)
    with pytest.raises(ValidationError):
        ph.sample_cohort(ph.CohortSpec(n=5, mode="balanced"), seed=1, render=False)
    with pytest.raises(ValidationError):
        ph.sample_cohort(ph.CohortSpec(n=3, mode="collider"), seed=1, render=False)


def test_cohort_rendering_and_roundtrip(tmp_path):
    c = ph.sample_cohort(ph.CohortSpec(n=5, grid=Grid3((16, 16, 16))), seed=8)
    assert all(r.volume is not None for r in c.records)
    ph.save_cohort(c, tmp_path / "cohort")
    back = ph.load_cohort(tmp_path / "cohort")
    assert back.lesion_cut == pytest.approx(c.lesion_cut)
    for r1, r2 in zip(c.records, back.records):
        assert r1.attrs == r2.attrs
        assert r1.bins == r2.bins
        assert np.array_equal(r1.volume.values, r2.volume.values)
    manifest = json.loads((tmp_path / "cohort" / "manifest.json").read_text())
    assert manifest["format"] == "dsynth-cohort-v1"
    keys = set(manifest["subjects"][0])
    assert {"id", "age", "sex", "lesion_load", "seed", "age_bin", "lesion_bin", "volume"} <= keys


def test_load_cohort_rejects_bad_manifest(tmp_path):
    with pytest.raises(ValidationError):
        ph.load_cohort(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValidationError):
        ph.load_cohort(tmp_path)

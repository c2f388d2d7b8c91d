import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrn.data import (
    TEMPLATE_COORDS,
    SynthTemplate,
    augment,
    generate_augmented,
    generate_synthetic,
    load_dataset,
    load_subjects,
    make_folds,
    parse_dataset,
    save_dataset,
)
from rrn.errors import ConfigurationError, InvalidWeightsError, LoadError
from rrn.landmarks import ALL_LANDMARKS, LandmarkName, LandmarkSet

L = LandmarkName


def _uniform(sid, value, spacing=(1.0, 1.0, 1.0)):
    return LandmarkSet(sid, spacing, {n: (value, value, value) for n in ALL_LANDMARKS})


def _doc(n=2):
    ds = generate_synthetic(SynthTemplate(), n, np.random.default_rng(0))
    return ds.to_json()


# --------------------------------------------------------------------- I/O


def test_round_trip(tmp_path):
    ds = generate_synthetic(SynthTemplate(), 5, np.random.default_rng(1))
    save_dataset(ds, tmp_path / "d.json")
    back = load_dataset(tmp_path / "d.json")
    assert back.ids == ds.ids and back.provenance == ds.provenance
    np.testing.assert_array_equal(back.coords(), ds.coords())
    np.testing.assert_array_equal(back.spacings(), ds.spacings())


def test_valid_two_subject_file(tmp_path):
    (tmp_path / "d.json").write_text(json.dumps(_doc(2)))
    assert len(load_dataset(tmp_path / "d.json")) == 2


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["subjects"][1]["landmarks"].pop("Na"), "syn00001.*Na"),
    (lambda d: d["subjects"][1].update(id="syn00000"), "duplicate"),
    (lambda d: d["subjects"][0].update(spacing_mm=[0.5, 0.0, 0.5]), "syn00000.*spacing_mm"),
    (lambda d: d["subjects"][0]["landmarks"].update(Me=[1, "x", 2]), "syn00000"),
    (lambda d: d["subjects"][0]["landmarks"].update(Zz=[1, 2, 3]), "Zz"),
    (lambda d: d.pop("subjects"), "subjects"),
])
def test_load_errors_name_subject_and_field(mutate, needle):
    doc = _doc(2)
    mutate(doc)
    with pytest.raises(LoadError, match=needle):
        parse_dataset(doc)


def test_lenient_loader_keeps_partial_subjects(tmp_path):
    doc = _doc(2)
    doc["subjects"][0]["landmarks"].pop("Gn")
    (tmp_path / "d.json").write_text(json.dumps(doc))
    subjects = load_subjects(tmp_path / "d.json")
    assert subjects[0].missing() == [L.Gn] and not subjects[1].missing()


def test_loading_does_not_touch_the_file(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(_doc(3)))
    before = path.read_bytes()
    load_dataset(path)
    assert path.read_bytes() == before


# ------------------------------------------------------------ augmentation


def test_augment_examples():
    a, b = _uniform("a", 0.0), _uniform("b", 2.0, (0.3, 0.3, 0.3))
    np.testing.assert_array_equal(augment([a, b], [1.0, 0.0], 0).as_array(), a.as_array())
    np.testing.assert_array_equal(augment([a, b], [0.5, 0.5], 0).as_array(), np.ones((14, 3)))
    c = augment([b, b], [0.3, 0.7], 0)
    np.testing.assert_allclose(c.as_array(), b.as_array(), atol=1e-12)
    assert augment([a, b], [0.2, 0.8], 0).spacing_mm == (0.3, 0.3, 0.3)


def test_augment_weight_errors():
    a, b = _uniform("a", 0.0), _uniform("b", 1.0)
    with pytest.raises(InvalidWeightsError):
        augment([a, b], [0.5, 0.5 + 2e-9], 0)
    with pytest.raises(InvalidWeightsError):
        augment([a, b], [1.2, -0.2], 0)
    augment([a, b], [0.5, 0.5 + 5e-10], 0)


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3]))
@settings(max_examples=50)
def test_augment_stays_in_expanded_hull(seed, k):
    rng = np.random.default_rng(seed)
    sources = [LandmarkSet.from_array(str(i), (1, 1, 1), rng.uniform(0, 300, (14, 3))) for i in range(k)]
    out = augment(sources, rng.dirichlet(np.ones(k)), 5.0, rng).as_array()
    stack = np.stack([s.as_array() for s in sources])
    assert np.all(out >= stack.min(axis=0) - 5.0) and np.all(out <= stack.max(axis=0) + 5.0)


def test_generate_augmented_bookkeeping():
    ds = generate_synthetic(SynthTemplate(), 2, np.random.default_rng(2))
    assert generate_augmented(ds, 0, np.random.default_rng(0)) is ds
    out = generate_augmented(ds, 100, np.random.default_rng(0))
    assert len(out) == 102
    kids = [s for s in out if out.provenance[s.subject_id] == "augmented"]
    assert len(kids) == 100 and set(out.parents.values()) <= set(ds.ids)
    plan = make_folds(ds, k=2, rng_seed=0)
    full = plan.assign_children(out)
    for kid in kids:
        assert full.fold_of(kid.subject_id) == plan.fold_of(out.parents[kid.subject_id])


def test_augmentation_needs_two_originals():
    ds = generate_synthetic(SynthTemplate(), 1, np.random.default_rng(2))
    with pytest.raises(ConfigurationError):
        generate_augmented(ds, 5, np.random.default_rng(0))


# ---------------------------------------------------------------- synthetic


def test_template_respects_gross_anatomy():
    me = np.array(TEMPLATE_COORDS[L.Me])
    for cd in (L.CdL, L.CdR):
        # condyles sit superior and posterior to menton
        assert TEMPLATE_COORDS[cd][2] > me[2] and TEMPLATE_COORDS[cd][1] > me[1]
    assert TEMPLATE_COORDS[L.Na][2] == max(c[2] for c in TEMPLATE_COORDS.values())


def test_identity_transform_reproduces_template():
    t = SynthTemplate(scale_range=(1.0, 1.0), max_rotation_deg=0, max_translation=0, jitter_sigma=0)
    ds = generate_synthetic(t, 3, np.random.default_rng(0))
    for s in ds:
        np.testing.assert_allclose(s.as_array(), t.base_array(), atol=1e-12)


def test_synthetic_is_reproducible_and_valid():
    a = generate_synthetic(SynthTemplate(), 1000, np.random.default_rng(5))
    b = generate_synthetic(SynthTemplate(), 1000, np.random.default_rng(5))
    assert len(a) == 1000 and all(s.spacing_mm == (0.5, 0.5, 0.5) for s in a)
    np.testing.assert_array_equal(a.coords(), b.coords())


def test_scale_range_bounds_pairwise_distance_ratio():
    t = SynthTemplate(jitter_sigma=0.0)
    coords = generate_synthetic(t, 2000, np.random.default_rng(3)).coords()
    base = t.base_array()
    ref = np.linalg.norm(base[L.CdL.index] - base[L.Me.index])
    ratio = np.linalg.norm(coords[:, L.CdL.index] - coords[:, L.Me.index], axis=1) / ref
    assert ratio.min() >= 0.9 - 1e-12 and ratio.max() <= 1.1 + 1e-12
    assert ratio.min() < 0.905 and ratio.max() > 1.095


# -------------------------------------------------------------------- folds


def test_fold_sizes():
    ds8 = generate_synthetic(SynthTemplate(), 8, np.random.default_rng(0))
    assert sorted(Counter(make_folds(ds8, 4, 1).assignments.values()).values()) == [2, 2, 2, 2]
    ds250 = generate_synthetic(SynthTemplate(), 250, np.random.default_rng(0))
    sizes = Counter(make_folds(ds250, 4, 1).assignments.values())
    assert sorted(sizes.values()) == [62, 62, 63, 63]


def test_fold_errors():
    ds = generate_synthetic(SynthTemplate(), 3, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        make_folds(ds, 1)
    with pytest.raises(ConfigurationError):
        make_folds(ds, 4)


def test_split_keeps_augmented_out_of_test_and_with_parent():
    ds = generate_synthetic(SynthTemplate(), 12, np.random.default_rng(0))
    ds = generate_augmented(ds, 60, np.random.default_rng(1))
    plan = make_folds(ds, 4, 7)
    for fold in range(4):
        train, test = plan.split(ds, fold)
        assert all(test.provenance[i] != "augmented" for i in test.ids)
        assert set(train.ids).isdisjoint(test.ids)
        for kid, parent in train.parents.items():
            assert parent in train.ids
        assert len(train) + len(test) + sum(
            1 for i in ds.ids if ds.provenance[i] == "augmented" and plan.fold_of(i) == fold) == len(ds)

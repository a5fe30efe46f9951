import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import copy_crop, lookup_semantic
from textseg.errors import BoundsError, MappingError, ShapeError, StructuralError
from textseg.masks import (
    ClassMap,
    InstanceMap,
    PatchSpec,
    SemanticMask,
    crop,
    instance_to_semantic,
    load_instances,
    load_semantic,
    pad_to,
    save_instances,
    save_semantic,
)


@st.composite
def instance_maps(draw, max_side=24, max_instances=6, n_classes=4):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    k = draw(st.integers(0, max_instances))
    ids = rng.choice(np.arange(1, 50), size=k, replace=False) if k else np.array([], dtype=int)
    data = rng.choice(np.concatenate([[0], ids]), size=(h, w)) if k else np.zeros((h, w), dtype=int)
    present = sorted(set(np.unique(data).tolist()) - {0})
    classes = {i: int(rng.integers(1, n_classes)) for i in present}
    return InstanceMap(data, classes)


def test_all_zero_instance_map_is_background():
    s = instance_to_semantic(InstanceMap(np.zeros((4, 4), dtype=int), {}))
    assert s == SemanticMask.full(4, 4, 0)


def test_single_instance_covers_everything():
    s = instance_to_semantic(InstanceMap(np.full((3, 5), 7), {7: 1}))
    assert s == SemanticMask.full(3, 5, 1)


def test_three_instances_match_lookup_oracle():
    rng = np.random.default_rng(3)
    data = rng.choice([0, 2, 5, 9], size=(8, 8))
    data[0, :3] = [2, 5, 9]
    table = {2: 1, 5: 2, 9: 1}
    s = instance_to_semantic(InstanceMap(data, table))
    assert s.data.tolist() == lookup_semantic(data.tolist(), table)


def test_custom_background_id():
    cm = ClassMap((("fields", 0), ("bg", 3)), background_id=3)
    assert cm.background_label == "bg"
    s = instance_to_semantic(InstanceMap([[0, 1]], {1: 0}), background_id=3)
    assert s.data.tolist() == [[3, 0]]


@pytest.mark.parametrize(
    "data,table",
    [([[1, 0]], {}), ([[0, 0]], {4: 1}), ([[1]], {0: 1, 1: 1}), ([[-1]], {-1: 1})],
)
def test_invalid_instance_maps_rejected(data, table):
    with pytest.raises(StructuralError):
        InstanceMap(data, table)


@pytest.mark.parametrize(
    "entries,bg",
    [
        ((("a", 0), ("a", 1)), 0),
        ((("a", 0), ("b", 0)), 0),
        ((("a", 1),), 0),
        ((("", 0),), 0),
        ((("x*y", 0),), 0),
        ((("x|y", 0),), 0),
        ((("x\ny", 0),), 0),
        (((" x", 0),), 0),
    ],
)
def test_invalid_class_maps_rejected(entries, bg):
    with pytest.raises(StructuralError):
        ClassMap(entries, bg)


def test_class_map_lookup():
    cm = ClassMap.default()
    assert cm.labels[0] == "background"
    assert cm.id_of("fields") == 1
    assert cm.label_of(5) == "wells"
    assert cm.get("lava") == 0
    with pytest.raises(MappingError):
        cm.id_of("lava")
    with pytest.raises(MappingError):
        cm.check_mask(SemanticMask([[0, 6]]))


@pytest.mark.parametrize("shape", [(0, 3), (3, 0), (3,), (2, 2, 2)])
def test_semantic_mask_shape_checked(shape):
    with pytest.raises(ShapeError):
        SemanticMask(np.zeros(shape, dtype=int))


def test_masks_are_immutable():
    src = np.zeros((2, 2), dtype=int)
    m = SemanticMask(src)
    src[0, 0] = 3
    assert m.data[0, 0] == 0
    with pytest.raises(ValueError):
        m.data[0, 0] = 1


def test_identity_and_single_pixel_crop():
    m = SemanticMask(np.arange(20).reshape(4, 5) % 3)
    assert crop(m, PatchSpec(0, 0, 4, 5)) == m
    assert crop(m, PatchSpec(2, 3, 1, 1)).data.tolist() == [[m.data[2, 3]]]


def test_random_crop_of_615_matches_double_loop():
    rng = np.random.default_rng(615)
    m = SemanticMask(rng.integers(0, 6, size=(615, 615)))
    for _ in range(5):
        top, left = (int(x) for x in rng.integers(0, 615 - 32 + 1, size=2))
        got = crop(m, PatchSpec(top, left, 32, 32))
        assert got.data.tolist() == copy_crop(m.data.tolist(), top, left, 32, 32)


@pytest.mark.parametrize("spec", [PatchSpec(-1, 0, 2, 2), PatchSpec(0, 0, 5, 1), PatchSpec(3, 4, 2, 2)])
def test_out_of_bounds_crop(spec):
    with pytest.raises(BoundsError):
        crop(SemanticMask.full(4, 5), spec)


def test_zero_sized_patch_rejected():
    with pytest.raises(BoundsError):
        PatchSpec(0, 0, 0, 4)


def test_pad_to():
    m = pad_to(SemanticMask([[1, 2]]), 2, 3, 0)
    assert m.data.tolist() == [[1, 2, 0], [0, 0, 0]]
    with pytest.raises(BoundsError):
        pad_to(m, 1, 3, 0)


@given(instance_maps(), st.data())
@settings(max_examples=200)
def test_crop_commutes_with_instance_to_semantic(m, data):
    top = data.draw(st.integers(0, m.height - 1))
    left = data.draw(st.integers(0, m.width - 1))
    h = data.draw(st.integers(1, m.height - top))
    w = data.draw(st.integers(1, m.width - left))
    p = PatchSpec(top, left, h, w)
    sub = m.data[p.slices()]
    present = set(np.unique(sub).tolist()) - {0}
    cropped = InstanceMap(sub, {k: v for k, v in m.classes.items() if k in present})
    assert instance_to_semantic(cropped) == crop(instance_to_semantic(m), p)


@given(instance_maps())
@settings(max_examples=200)
def test_semantic_values_come_from_table_or_background(m):
    values = set(np.unique(instance_to_semantic(m).data).tolist())
    assert values <= set(m.classes.values()) | {0}
    assert values >= set(m.classes.values())


def test_class_map_json_round_trip(tmp_path):
    cm = ClassMap((("bg", 4), ("farm land", 1)), background_id=4)
    cm.save(tmp_path / "c.json")
    assert ClassMap.load(tmp_path / "c.json") == cm


@pytest.mark.parametrize("hi", [5, 300])
def test_semantic_png_round_trip(tmp_path, hi):
    m = SemanticMask(np.random.default_rng(0).integers(0, hi, size=(7, 9)))
    save_semantic(tmp_path / "m.png", m)
    assert load_semantic(tmp_path / "m.png") == m


def test_instance_png_round_trip(tmp_path):
    data = np.zeros((6, 6), dtype=int)
    data[1:3, 1:3] = 1
    data[4:, :] = 1000
    m = InstanceMap(data, {1: 2, 1000: 1})
    save_instances(tmp_path / "i.png", m)
    assert (tmp_path / "i.json").exists()
    assert load_instances(tmp_path / "i.png") == m

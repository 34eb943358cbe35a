import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwff.features import (
    ABBREV,
    CLASS_ID,
    NUM_CLASSES,
    FeatureStack,
    MissingLabelError,
    SceneDataset,
    SurrogateBackbone,
    check_labels,
    generate_scene,
    split_dataset,
)
from dwff.tensor import Tensor


def test_class_order():
    assert NUM_CLASSES == 15
    assert ABBREV == ("Pf", "Dl", "Wa", "Fb", "Asg", "St", "Gb", "Tf", "River", "Water", "Pr", "Dr", "Cl", "Ul", "Ridge")
    assert CLASS_ID["Ridge"] == 14


def test_surrogate_shapes():
    bb = SurrogateBackbone(0, c_in=32, patch=4)
    stack = bb.features(np.random.default_rng(0).random((2, 3, 32, 32)))
    assert stack.m == 4 and stack.layer_ids == [1, 8, 16, 24]
    assert all(lvl.shape == (2, 32, 8, 8) for lvl in stack.levels)


def test_surrogate_deterministic():
    img = np.random.default_rng(3).random((3, 16, 16))
    a = SurrogateBackbone(7).features(img)
    b = SurrogateBackbone(7).features(img)
    for x, y in zip(a.levels, b.levels):
        assert x.data.tobytes() == y.data.tobytes()


def test_surrogate_zero_image_nonzero():
    stack = SurrogateBackbone(0).features(np.zeros((3, 8, 8)))
    assert all(np.any(lvl.data != 0) for lvl in stack.levels)


def test_deeper_levels_are_smoother():
    img, _ = generate_scene(5, 16, 16, 6)
    stack = SurrogateBackbone(0).features(img)

    def roughness(x):
        return np.abs(np.diff(x, axis=-1)).mean()

    r = [roughness(lvl.data) for lvl in stack.levels]
    assert r[0] > r[1] > r[2] > r[3]


def test_surrogate_rejects_indivisible():
    with pytest.raises(ValueError):
        SurrogateBackbone(0, patch=4).features(np.zeros((3, 10, 8)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), count=st.integers(1, 15))
def test_scene_has_exact_class_count(seed, count):
    img, lab = generate_scene(seed, 12, 12, count)
    assert len(np.unique(lab)) == count
    assert lab.dtype == np.uint8 and img.shape == (3, 48, 48)


def test_scene_single_class_constant():
    _, lab = generate_scene(1, 8, 8, 1)
    assert np.all(lab == lab[0, 0])


def test_scene_deterministic():
    a, b = generate_scene(7, 8, 8, 4), generate_scene(7, 8, 8, 4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("count", [0, 16])
def test_scene_rejects_bad_count(count):
    with pytest.raises(ValueError):
        generate_scene(0, 8, 8, count)


@pytest.mark.parametrize("n,sizes", [(800, (600, 100, 100)), (8, (6, 1, 1)), (80, (60, 10, 10))])
def test_split_sizes(n, sizes):
    assert tuple(len(p) for p in split_dataset(n, seed=3)) == sizes


@settings(max_examples=60, deadline=None)
@given(n=st.integers(8, 2000), seed=st.integers(0, 1000))
def test_split_is_partition(n, seed):
    parts = split_dataset(n, seed=seed)
    flat = [i for p in parts for i in p]
    assert sorted(flat) == list(range(n))


def test_split_rejects_small():
    with pytest.raises(ValueError):
        split_dataset(7)


def test_feature_stack_validation():
    lvl = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ValueError):
        FeatureStack([lvl, Tensor(np.zeros((1, 2, 4, 4)))], [1, 2])
    with pytest.raises(ValueError):
        FeatureStack([lvl, lvl], [2, 1])


def test_check_labels():
    with pytest.raises(ValueError):
        check_labels(np.array([15]))
    with pytest.raises(ValueError):
        check_labels(np.array([0.5]))


def test_dataset_layout(small_data, tmp_path):
    ds = SceneDataset(small_data.data_dir, "train")
    assert len(ds) == 6
    stack, labels = ds.batch(ds.ids[:2])
    assert stack.shape == (2, 32, 8, 8) and labels.shape == (2, 8, 8)


def test_missing_label_reported(small_data, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(small_data.data_dir, root)
    ds = SceneDataset(root, "val")
    (root / "val" / ds.ids[0] / "label.dwf").unlink()
    with pytest.raises(MissingLabelError):
        ds.load(ds.ids[0])

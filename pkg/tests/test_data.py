import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from rvernet_lab.data import (CutoutPair, DatasetError, LabeledImage,
                              SyntheticSpec, apply_mask, class_names,
                              filter_classes, flip_batch, generate_synthetic,
                              horizontal_flip, load_dataset, quantize,
                              save_dataset, to_arrays)
from rvernet_lab.tensor import ConfigurationError, DimensionError

SMALL = SyntheticSpec(image_side=32, num_classes=4, samples_per_class=5, test_per_class=2, seed=7)


def _li(seed=0, s=16, label=0):
    rng = np.random.default_rng(seed)
    img = rng.random((3, s, s)).astype(np.float32)
    mask = (rng.random((s, s)) < 0.4).astype(np.float32)
    return LabeledImage(img, mask, label)


def _complementary(pair, image):
    return np.array_equal(pair.x1 + pair.x2, image) and not (pair.x1 * pair.x2).any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_cutouts_are_exact_complements(seed):
    li = _li(seed)
    pair = apply_mask(li)
    assert _complementary(pair, li.image)
    assert np.array_equal(pair.x1, li.image * li.mask)
    assert np.array_equal(pair.x2, li.image * (1 - li.mask))
    flipped = horizontal_flip(pair, 1.0, np.random.default_rng(0))
    assert _complementary(flipped, li.image[..., ::-1])


def test_full_and_empty_masks():
    li = _li()
    full = apply_mask(LabeledImage(li.image, np.ones((16, 16), np.float32), 0))
    assert np.array_equal(full.x1, li.image) and not full.x2.any()
    empty = apply_mask(LabeledImage(li.image, np.zeros((16, 16), np.float32), 0))
    assert not empty.x1.any() and np.array_equal(empty.x2, li.image)


def test_non_binary_mask_reports_count():
    li = _li()
    li.mask[0, :3] = 0.5
    with pytest.raises(ValueError, match="3 pixel"):
        apply_mask(li)
    with pytest.raises(DimensionError):
        apply_mask(LabeledImage(li.image, np.ones((8, 8), np.float32), 0))


def test_flip_identity_involution_and_range():
    pair = apply_mask(_li())
    rng = np.random.default_rng(0)
    assert horizontal_flip(pair, 0.0, rng) is pair
    twice = horizontal_flip(horizontal_flip(pair, 1.0, rng), 1.0, rng)
    assert np.array_equal(twice.x1, pair.x1) and np.array_equal(twice.x2, pair.x2)
    with pytest.raises(ConfigurationError):
        horizontal_flip(pair, 1.5, rng)


def test_flip_batch_shares_coin_per_sample():
    lis = [_li(i) for i in range(8)]
    x1 = np.stack([apply_mask(li).x1 for li in lis])
    x2 = np.stack([apply_mask(li).x2 for li in lis])
    f1, f2 = flip_batch(x1, x2, 0.5, np.random.default_rng(3))
    for i, li in enumerate(lis):
        flipped = not np.array_equal(f1[i], x1[i])
        ref = li.image[..., ::-1] if flipped else li.image
        assert np.array_equal(f1[i] + f2[i], ref)
    assert flip_batch(x1, x2, 0.0, np.random.default_rng(3))[0] is x1


def test_generator_is_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert len(a) == 20
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
               and x.label == y.label and x.split == y.split for x, y in zip(a, b))
    c = generate_synthetic(SyntheticSpec(**{**SMALL.to_dict(), "seed": 8, "ambiguous_pair": (0, 1)}))
    assert not np.array_equal(a[0].image, c[0].image)


def test_values_quantized_and_masks_binary():
    for li in generate_synthetic(SMALL):
        assert li.image.dtype == np.float32 and 0 <= li.image.min() and li.image.max() <= 1
        assert np.array_equal(quantize(li.image), li.image)
        assert set(np.unique(li.mask)) <= {0.0, 1.0} and li.mask.sum() > 0


def test_ambiguous_pair_shares_roi_cutouts():
    # index-keyed ROI streams: same index in the two ambiguous classes gives the same x1
    data = generate_synthetic(SMALL)
    by = {(li.label, int(li.meta.split(":")[2])): li for li in data}
    for i in range(SMALL.samples_per_class):
        a, b = apply_mask(by[(0, i)]), apply_mask(by[(1, i)])
        assert np.array_equal(a.x1, b.x1)
        assert not np.array_equal(a.x2, b.x2)
    # other classes carry a distinct ROI appearance
    assert not np.array_equal(apply_mask(by[(2, 0)]).x1, apply_mask(by[(0, 0)]).x1)


def test_split_counts_and_names():
    data = generate_synthetic(SMALL)
    assert sum(li.split == "test" for li in data) == 8
    assert class_names(SMALL) == ["ambiguous_a", "ambiguous_b", "class_2", "class_3"]


@pytest.mark.parametrize("bad", [dict(samples_per_class=0), dict(test_per_class=9),
                                 dict(num_classes=1), dict(ambiguous_pair=(1, 1)),
                                 dict(image_side=16), dict(noise_std=-1.0)])
def test_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        generate_synthetic(SyntheticSpec(**{**SMALL.to_dict(), "ambiguous_pair": (0, 1), **bad}))


def test_spec_dict_round_trip():
    assert SyntheticSpec.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"sides": 3})


def test_save_load_round_trip(tmp_path):
    data = generate_synthetic(SMALL)
    path = save_dataset(data, tmp_path, class_names(SMALL))
    back = load_dataset(path)
    assert len(back) == len(data)
    for x, y in zip(data, back):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
        assert (x.label, x.split, x.meta) == (y.label, y.split, y.meta)
    assert json.loads(path.read_text())["classes"][0] == "ambiguous_a"


def test_empty_manifest(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"classes": [], "samples": []}))
    assert load_dataset(tmp_path / "m.json") == []


def test_load_errors(tmp_path):
    path = save_dataset(generate_synthetic(SMALL)[:2], tmp_path)
    (tmp_path / "images" / "000001.png").unlink()
    with pytest.raises(DatasetError, match="000001.png"):
        load_dataset(path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "absent.json")
    Image.fromarray(np.full((32, 32), 128, np.uint8), mode="L").save(tmp_path / "masks" / "000000.png")
    man = json.loads(path.read_text())
    man["samples"] = man["samples"][:1]
    path.write_text(json.dumps(man))
    with pytest.raises(DatasetError, match="not binary"):
        load_dataset(path)
    Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(tmp_path / "masks" / "000000.png")
    with pytest.raises(DatasetError, match="sizes differ"):
        load_dataset(path)


def test_filter_classes():
    data = generate_synthetic(SMALL)
    same, ident = filter_classes(data, set())
    assert [li.label for li in same] == [li.label for li in data]
    assert ident == {k: k for k in range(4)}
    kept, mapping = filter_classes(data, {1})
    assert mapping == {0: 0, 2: 1, 3: 2}
    assert np.bincount([li.label for li in kept]).tolist() == [5, 5, 5]
    inverse = {v: k for k, v in mapping.items()}
    originals = [li.label for li in data if li.label != 1]
    assert [inverse[li.label] for li in kept] == originals
    with pytest.raises(ConfigurationError):
        filter_classes(data, {0, 1, 2, 3})


def test_to_arrays_split_and_empty():
    data = generate_synthetic(SMALL)
    te = to_arrays(data, "test")
    assert len(te) == 8 and te.x1.shape == (8, 3, 32, 32)
    assert np.array_equal(te.images, np.stack([li.image for li in data if li.split == "test"]))
    empty = to_arrays(data, "val")
    assert len(empty) == 0 and empty.x1.shape == (0, 3, 32, 32)
    assert isinstance(apply_mask(data[0]), CutoutPair)

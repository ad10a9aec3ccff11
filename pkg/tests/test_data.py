import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from vesseldiff.data import (DatasetLayout, TrainingData, acquisition_id, apply_transform, augment_pair,
                             corrupt_gaussian, denormalize, load_training_batch, make_smoke_corpus, normalize,
                             patch_retinal, read_gray, read_mask, stitch_patches, to_uint8, write_png)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return make_smoke_corpus(tmp_path_factory.mktemp("smoke") / "smoke", seed=0)


def test_smoke_corpus_is_byte_identical(smoke, tmp_path):
    again = make_smoke_corpus(tmp_path / "again", seed=0)
    assert _digest(smoke) == _digest(again)
    other = make_smoke_corpus(tmp_path / "other", seed=1)
    assert _digest(smoke) != _digest(other)


def test_smoke_corpus_contract(smoke):
    layout = DatasetLayout.open(smoke)
    angio, bgs, frs = layout.training_files()
    assert 0 < len(angio) <= 32 and 0 < len(bgs) <= 32 and 0 < len(frs) <= 32
    for img_path, gt_path in layout.labeled_pairs("test"):
        img, gt = read_gray(img_path), read_mask(gt_path)
        assert img.shape == gt.shape == (64, 64)
        assert gt.any()
        # vessels are darker than the anatomy around them
        assert img[gt > 0].mean() < img[gt == 0].mean()
    assert len(layout.labeled_pairs("val")) == 4
    with pytest.raises(ValueError):
        make_smoke_corpus(smoke.parent / "big", n_fractals=33)


def test_smoke_ground_truth_is_generating_mask(smoke):
    from vesseldiff.data import SMOKE_FRACTAL
    from vesseldiff.fractal import synthesize_fractal_mask

    expected = synthesize_fractal_mask(SMOKE_FRACTAL.with_seed(10_000))
    assert np.array_equal(read_mask(smoke / "masks" / "ang000__frame1.png"), expected)


def test_layout_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetLayout.open(tmp_path / "nope")
    (tmp_path / "angiograms").mkdir()
    with pytest.raises(FileNotFoundError):
        DatasetLayout.open(tmp_path).training_files()


def test_undecodable_image(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(IOError):
        read_gray(bad)


def test_rgb_uses_luma(tmp_path):
    p = tmp_path / "rgb.png"
    Image.fromarray(np.full((4, 4, 3), (200, 100, 50), np.uint8), mode="RGB").save(p)
    expected = round(0.299 * 200 + 0.587 * 100 + 0.114 * 50)
    assert abs(int(read_gray(p)[0, 0]) - expected) <= 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (5, 7)))
def test_normalize_round_trip(img):
    x = normalize(img)
    assert x.min() >= -1 and x.max() <= 1
    assert np.abs(denormalize(x) - img).max() <= 1.0
    assert np.array_equal(to_uint8(x), img)


def test_training_batch_contract(smoke):
    layout = DatasetLayout.open(smoke)
    rng = np.random.default_rng(0)
    a, b, f = load_training_batch(layout, 4, rng, size=64)
    for arr in (a, b, f):
        assert arr.shape == (4, 1, 64, 64) and arr.dtype == np.float32
        assert arr.min() >= -1 and arr.max() <= 1
    assert set(np.unique(f)) <= {0.0, 1.0}
    again = load_training_batch(layout, 4, np.random.default_rng(0), size=64)
    for x, y in zip((a, b, f), again):
        assert np.array_equal(x, y)


def test_training_batch_256_default(smoke):
    data = TrainingData.from_layout(DatasetLayout.open(smoke), 256)
    a, b, f = data.batch(0, 0, 4)
    assert a.shape == b.shape == f.shape == (4, 1, 256, 256)


def test_index_streams_independent():
    data = TrainingData(np.zeros((20, 4, 4)), np.zeros((20, 4, 4)), np.zeros((20, 4, 4)), seed=3, augment=False)
    ai, bi = [], []
    for k in range(250):
        a, b, _ = data.batch_indices(k // 5, k % 5, 4)
        ai.extend(a)
        bi.extend(b)
    assert len(ai) == 1000
    r = np.corrcoef(ai, bi)[0, 1]
    assert abs(r) < 0.1


def test_never_pairs_same_acquisition():
    ids = [f"p{i}" for i in range(5)]
    data = TrainingData(np.zeros((5, 4, 4)), np.zeros((5, 4, 4)), np.zeros((3, 4, 4)), seed=0,
                        angio_ids=ids, background_ids=ids)
    for e in range(20):
        for b in range(data.steps_per_epoch(2)):
            ai, bi, _ = data.batch_indices(e, b, 2)
            assert all(ids[x] != ids[y] for x, y in zip(ai, bi))
    lonely = TrainingData(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 4, 4)),
                          angio_ids=["x"], background_ids=["x"])
    with pytest.raises(ValueError):
        lonely.batch_indices(0, 0, 1)


def test_epoch_covers_every_angiogram():
    data = TrainingData(np.zeros((10, 4, 4)), np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), augment=False)
    seen = np.concatenate([data.batch_indices(2, b, 5)[0] for b in range(2)])
    assert sorted(seen) == list(range(10))


def test_acquisition_id():
    assert acquisition_id("p17__frame3.png") == "p17"
    assert acquisition_id("plain.png") == "plain"


def test_pair_augmentation_shares_transform():
    grid = np.arange(64).reshape(8, 8)
    rng = np.random.default_rng(5)
    for _ in range(30):
        img, mask = augment_pair(grid, grid.copy(), rng)
        assert np.array_equal(img, mask)
        assert sorted(img.ravel()) == list(range(64))


@pytest.mark.parametrize("t", [(h, v, k) for h in (False, True) for v in (False, True) for k in range(4)])
def test_transforms_are_dihedral(t):
    g = np.arange(16).reshape(4, 4)
    out = apply_transform(g, t)
    ref = g[:, ::-1] if t[0] else g
    ref = ref[::-1] if t[1] else ref
    assert np.array_equal(out, np.rot90(ref, t[2]))


def test_patch_constant():
    patches = patch_retinal(np.full((500, 620), 0.25, np.float32))
    assert patches.shape == (9, 256, 256)
    assert np.all(patches == 0.25)


def test_patch_index_oracle():
    yy, xx = np.mgrid[0:768, 0:768].astype(np.float32)
    ramp = yy * 1000 + xx
    patches = patch_retinal(ramp)
    for i in range(3):
        for j in range(3):
            p = patches[3 * i + j]
            assert p[0, 0] == (256 * i) * 1000 + 256 * j
            assert np.array_equal(p, ramp[256 * i:256 * (i + 1), 256 * j:256 * (j + 1)])
    assert np.array_equal(stitch_patches(patches), ramp)


def test_stitch_round_trip_after_resize():
    img = np.random.default_rng(0).uniform(size=(300, 400)).astype(np.float32)
    patches = patch_retinal(img)
    assert np.array_equal(stitch_patches(patch_retinal(stitch_patches(patches))), stitch_patches(patches))
    with pytest.raises(ValueError):
        stitch_patches(patches[:8])


def test_corrupt_identity_and_errors():
    img = np.random.default_rng(0).uniform(0, 255, size=(8, 8))
    assert np.array_equal(corrupt_gaussian(img, 0), img)
    with pytest.raises(ValueError):
        corrupt_gaussian(img, -1)


def test_corrupt_std():
    img = np.full((100_000,), 127.5)
    out = corrupt_gaussian(img, 25, rng=np.random.default_rng(1))
    assert abs(out.std() / 25 - 1) < 0.03


def test_corrupt_clips():
    img = np.full((100, 100), 250.0)
    out = corrupt_gaussian(img, 50, rng=np.random.default_rng(2))
    assert out.max() <= 255 and out.min() >= 0
    assert out.max() == 255


def test_write_read_png(tmp_path):
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    write_png(tmp_path / "x.png", img)
    assert np.array_equal(read_gray(tmp_path / "x.png"), img)

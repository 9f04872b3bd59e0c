import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from duskforge.data import (DatasetManifest, ImageFormatError, ManifestError, ShapeSceneSpec, decode_ppm, encode_ppm,
                            epoch_batches, generate_shapescenes, load_batch, load_image, manifest_from_class_folders,
                            render_day, render_night, render_split, save_image)


# -- PPM --------------------------------------------------------------------------------

def test_white_pixel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(load_image(p), np.ones((3, 1, 1), np.float32))


def test_header_comments_allowed():
    img = decode_ppm(b"P6 # comment\n2 # w\n1\n255\n" + bytes(range(6)))
    assert img.shape == (3, 1, 2)
    assert img[2, 0, 1] == np.float32(5 / 255)


@given(hnp.arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 6), st.integers(1, 6))))
def test_round_trip_bit_identical(q):
    img = q.astype(np.float32) / np.float32(255.0)
    assert decode_ppm(encode_ppm(img)).tobytes() == img.tobytes()


def test_save_load_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (3, 7, 5)).astype(np.float32) / np.float32(255)
    save_image(img, tmp_path / "a" / "x.ppm")
    assert load_image(tmp_path / "a" / "x.ppm").tobytes() == img.tobytes()


@pytest.mark.parametrize("buf,reason", [
    (b"P5\n1 1\n255\n\x00", "magic"),
    (b"P6\n1 1\n", "truncated header"),
    (b"P6\n2 2\n255\n\x00\x00", "truncated payload"),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
    (b"P6\nx 1\n255\n\x00\x00\x00", "non-integer"),
    (b"P6\n0 1\n255\n", "invalid size"),
    (b"", "magic"),
])
def test_malformed_ppm_errors(buf, reason):
    with pytest.raises(ImageFormatError) as info:
        decode_ppm(buf, "bad.ppm")
    assert reason in str(info.value) and info.value.path == "bad.ppm"


@given(st.binary(max_size=64))
def test_random_bytes_never_crash(buf):
    try:
        img = decode_ppm(b"P6" + buf)
    except ImageFormatError:
        return
    assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1


def test_missing_file_is_structured(tmp_path):
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "nope.ppm")


def test_png_needs_opt_in(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    arr = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    pil.fromarray(arr).save(tmp_path / "x.png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.png")
    out = load_image(tmp_path / "x.png", allow_png=True)
    np.testing.assert_array_equal(out, arr.transpose(2, 0, 1) / np.float32(255))


# -- manifests -------------------------------------------------------------------------------

def test_manifest_reserialize_byte_identical(tiny_root):
    path = tiny_root / "train.manifest"
    text = path.read_text(encoding="utf-8")
    m = DatasetManifest.load(path)
    assert m.split == "train" and m.serialize() == text


@pytest.mark.parametrize("text", ["a.ppm\t0\n", "#classes: a\nfoo.ppm\n", "#classes: a\nfoo.ppm\tx\n",
                                  "#classes: a\nfoo.ppm\t3\n"])
def test_malformed_manifest(text, tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest.parse(text, tmp_path, check_paths=False)


def test_manifest_missing_files(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest.parse("#classes: a\nfoo.ppm\t0\n", tmp_path)


def test_class_folder_indexing(tmp_path, rng):
    for cls in ("cat", "dog"):
        for i in range(2):
            save_image(rng.uniform(0, 1, (3, 2, 2)), tmp_path / "train" / cls / f"{i}.ppm")
    m = manifest_from_class_folders(tmp_path, "train")
    assert m.class_names == ["cat", "dog"] and m.labels.tolist() == [0, 0, 1, 1]


def test_load_batch_matches_load_image(tiny_root):
    m = DatasetManifest.load(tiny_root / "val.manifest")
    images, labels = load_batch(m, [0])
    np.testing.assert_array_equal(images[0], load_image(tiny_root / m.entries[0][0]))
    assert labels.tolist() == [m.entries[0][1]]
    rep, _ = load_batch(m, [1, 1])
    np.testing.assert_array_equal(rep[0], rep[1])


def test_load_batch_cache_agrees(tiny_root):
    m = DatasetManifest.load(tiny_root / "val.manifest")
    a, _ = load_batch(m, [3, 0])
    b, _ = load_batch(m.preload(), [3, 0])
    assert a.tobytes() == b.tobytes()


def test_load_batch_bounds(tiny_root):
    m = DatasetManifest.load(tiny_root / "val.manifest")
    with pytest.raises(IndexError):
        load_batch(m, [len(m)])


def test_augment_needs_rng_and_keeps_shape(tiny_root):
    m = DatasetManifest.load(tiny_root / "val.manifest")
    with pytest.raises(ValueError):
        load_batch(m, [0], augment=True)
    out, _ = load_batch(m, [0, 1], augment=True, rng=np.random.default_rng(0))
    assert out.shape == (2, 3, 16, 16)


def test_epoch_batches_cover_once(rng):
    batches = epoch_batches(23, 5, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(23))


# -- shape scenes --------------------------------------------------------------------------------

def test_generation_is_byte_exact(tmp_path):
    spec = ShapeSceneSpec(num_classes=3, image_size=16, train_per_class=1, val_per_class=1, test_per_class=1)
    generate_shapescenes(spec, 5, tmp_path / "a")
    generate_shapescenes(spec, 5, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_splits_are_class_balanced(tiny_root):
    for split, per in (("train", 3), ("val", 2), ("test_day", 2), ("test_night", 2)):
        labels = DatasetManifest.load(tiny_root / f"{split}.manifest").labels
        assert np.bincount(labels).tolist() == [per] * 10


def test_night_is_darker_than_day():
    spec = ShapeSceneSpec(image_size=16, test_per_class=3)
    day, _ = render_split(spec, 0, "test_day")
    night, _ = render_split(spec, 0, "test_night")
    assert night.mean() < 0.5 * day.mean()


def test_default_split_intensity_bounds():
    spec = ShapeSceneSpec()
    day, _ = render_split(spec, 0, "test_day")
    night, _ = render_split(spec, 0, "test_night")
    assert day.mean(axis=(1, 2, 3)).min() >= 0.35
    assert night.mean(axis=(1, 2, 3)).max() <= 0.15


def test_two_night_renders_differ():
    spec = ShapeSceneSpec(image_size=16)
    day = render_day(2, np.random.default_rng(0), spec)
    a = render_night(day, np.random.default_rng(1), spec)
    b = render_night(day, np.random.default_rng(2), spec)
    assert a.shape == day.shape and not np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        ShapeSceneSpec(num_classes=0)

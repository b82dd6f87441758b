import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from crossbar import data_io, sampling
from crossbar.data_io import PhantomConfig


def test_phantom_shape_range_determinism():
    cfg = PhantomConfig()
    a = data_io.generate_phantom(cfg, np.random.default_rng(3))
    b = data_io.generate_phantom(cfg, np.random.default_rng(3))
    assert a[0].shape == (296, 296) and a[1].dtype == bool
    assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])
    assert a[0].min() == 0 and a[0].max() == 1


@given(seed=st.integers(0, 2**20))
def test_phantom_single_component_and_diameter(seed):
    cfg = PhantomConfig(image_size=(160, 160), diameter_range=(10, 90))
    _, mask = data_io.generate_phantom(cfg, np.random.default_rng(seed))
    _, n = ndimage.label(mask)
    assert n == 1
    d = 2 * sampling.region_stats(mask).circumcircle_radius
    amp = cfg.boundary_perturbation
    # pixel discretization and the boundary wobble widen the range a little
    assert 10 * (1 - amp) - 2 <= d <= 90 * (1 + amp) + 2


def test_phantom_clean_threshold():
    cfg = PhantomConfig(noise_sigma=0, distractor_count=0, contrast_range=(0.9, 0.9),
                        background_variation=0, edge_blur=0)
    image, mask = data_io.generate_phantom(cfg, np.random.default_rng(4))
    np.testing.assert_array_equal(image > 0.5, mask)


def test_phantom_distractors_outside_mask():
    cfg = PhantomConfig(noise_sigma=0, background_variation=0, edge_blur=0, distractor_count=3)
    for seed in range(5):
        image, mask = data_io.generate_phantom(cfg, np.random.default_rng(seed))
        tumor_level = image[mask].mean()
        bright = image > tumor_level + 0.05
        assert bright.any() and not (bright & mask).any()


def test_image_roundtrip(tmp_path, rng):
    img = rng.random((23, 31))
    p = tmp_path / "a.pgm"
    data_io.write_image(p, img)
    back = data_io.read_image(p)
    assert back.shape == img.shape and np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    data_io.write_image(p, np.zeros((5, 7)))
    assert not data_io.read_image(p).any()
    assert open(p, "rb").read().startswith(b"P5\n7 5\n255\n")


def test_mask_roundtrip(tmp_path, rng):
    m = rng.random((17, 9)) > 0.5
    p = tmp_path / "m.pgm"
    data_io.write_mask(p, m)
    np.testing.assert_array_equal(data_io.read_mask(p), m)
    assert set(np.unique(np.frombuffer(open(p, "rb").read()[-17 * 9:], np.uint8))) <= {0, 255}


def test_pgm_errors(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 2\n255\n1 2 3 4")
    with pytest.raises(data_io.PGMFormatError, match="magic"):
        data_io.read_image(bad)
    short = tmp_path / "short.pgm"
    short.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(data_io.TruncatedDataError):
        data_io.read_image(short)
    grey = tmp_path / "grey.pgm"
    grey.write_bytes(b"P5\n2 1\n255\n" + bytes([0, 128]))
    with pytest.raises(data_io.NonBinaryMaskError, match="non-binary mask"):
        data_io.read_mask(grey)
    # the three are distinct error kinds
    assert not issubclass(data_io.NonBinaryMaskError, data_io.PGMFormatError)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made elsewhere\n3 1\n255\n" + bytes([0, 255, 0]))
    np.testing.assert_array_equal(data_io.read_mask(p), [[False, True, False]])


def test_make_folds():
    ids = [f"s{i}" for i in range(94)]
    folds = data_io.make_folds(ids, 3, seed=1)
    assert sorted(np.bincount(list(folds.values()))) == [31, 31, 32]
    assert folds == data_io.make_folds(ids, 3, seed=1)
    assert sorted(data_io.make_folds(["a", "b", "c"], 3).values()) == [0, 1, 2]
    with pytest.raises(ValueError):
        data_io.make_folds(["a", "b"], 3)


@given(n=st.integers(3, 60), k=st.integers(1, 3), seed=st.integers(0, 1000))
def test_fold_sizes_balanced(n, k, seed):
    sizes = np.bincount(list(data_io.make_folds(range(n), k, seed).values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1


def test_manifest_roundtrip(tmp_path):
    recs = []
    for s, fold in (("s0", 0), ("s1", 1)):
        for k in range(2):
            name = f"{s}_{k}.pgm"
            data_io.write_image(tmp_path / name, np.zeros((4, 4)))
            data_io.write_mask(tmp_path / ("m" + name), np.zeros((4, 4), bool))
            recs.append(data_io.ManifestRecord(s, name, "m" + name, fold))
    path = tmp_path / "manifest.tsv"
    data_io.save_manifest(data_io.DatasetManifest(recs), path)
    text = path.read_text()
    assert text.startswith("#version 1\n")
    m = data_io.load_manifest(path)
    assert m.records == recs and m.subjects() == ["s0", "s1"]
    assert len(m.fold(0)) == 2 and len(m.excluding_fold(0)) == 2
    data_io.save_manifest(m, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_text() == text
    img, mk = m.load_pair(recs[0])
    assert img.shape == (4, 4) and mk.dtype == bool


def test_manifest_errors(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("#version 1\ns0\ta.pgm\tb.pgm\t0\n")
    with pytest.raises(FileNotFoundError):
        data_io.load_manifest(path)
    path.write_text("#version 1\ns0\ta\tb\t0\ns0\tc\td\t1\n")
    with pytest.raises(ValueError, match="spans folds"):
        data_io.load_manifest(path, check_paths=False)
    path.write_text("s0\ta\tb\t0\n")
    with pytest.raises(ValueError, match="version"):
        data_io.load_manifest(path, check_paths=False)


def test_record_image_id():
    assert data_io.ManifestRecord("s", os.path.join("images", "s_01.pgm"), "x", 0).image_id == "s_01"

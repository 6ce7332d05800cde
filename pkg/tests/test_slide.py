import colorsys
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from drasmil import slide as sl
from drasmil.slide import Bag, SynthSpec


# -- synthetic ---------------------------------------------------------------

def test_full_scale_region_size():
    bag = sl.generate_synthetic(SynthSpec(M=4))
    assert len(bag) == 16000
    assert bag.region.sum() == 800


def test_region_is_contiguous_block():
    bag = sl.generate_synthetic(SynthSpec(width=50, height=80, M=4, seed=3))
    grid = bag.region.reshape(80, 50)
    r, c = np.nonzero(grid)
    assert grid.sum() == 200
    # bounding box is a near-square block filled row-major
    h, w = r.max() - r.min() + 1, c.max() - c.min() + 1
    assert w == 15 and h == 14
    assert grid[r.min():r.max(), c.min():c.max() + 1].all()


def test_full_fraction_and_determinism():
    spec = SynthSpec(width=10, height=10, fraction=1.0, M=4, label=1, seed=2)
    a, b = sl.generate_synthetic(spec), sl.generate_synthetic(spec)
    assert a.region.all()
    assert a == b and a.features.tobytes() == b.features.tobytes()


def test_zero_region_rejected():
    with pytest.raises(ValueError):
        sl.generate_synthetic(SynthSpec(width=4, height=4, fraction=0.01, M=4))
    with pytest.raises(ValueError):
        SynthSpec(fraction=0.0)


@pytest.mark.parametrize("label", [0, 1])
def test_planted_shift_within_sampling_tolerance(label):
    spec = SynthSpec(width=100, height=160, M=8, shift=2.0, label=label, seed=7)
    bag = sl.generate_synthetic(spec)
    sig = bag.features[bag.region, label].mean()
    bg = bag.features[~bag.region, label].mean()
    n = bag.region.sum()
    tol = 3 * spec.noise * np.sqrt(1 / n + 1 / (len(bag) - n))
    assert abs((sig - bg) - spec.shift) < tol
    other = 1 - label
    assert abs(bag.features[bag.region, other].mean()) < 3 / np.sqrt(n)


def test_dataset_patient_labels():
    bags = sl.synthetic_dataset(8, 2, seed=0, width=10, height=10, M=4)
    by_patient = {}
    for b in bags:
        by_patient.setdefault(b.patient_id, set()).add(b.label)
    assert all(len(v) == 1 for v in by_patient.values())
    assert len(by_patient) == 4 and sum(b.label for b in bags) == 4


def test_bag_invariants():
    with pytest.raises(sl.EmptyBagError):
        Bag("s", "p", 0, np.zeros((0, 2)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Bag("s", "p", 0, [[0, 0], [0, 0]], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Bag("s", "p", 0, [[0, 0], [1, 0]], np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Bag("s", "p", 2, [[0, 0]], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Bag("s", "p", 0, [[0, 0]], [[np.nan, 0.0]])


# -- tissue detection ----------------------------------------------------------

def _hsv_saturation_oracle(image):
    return np.array([[colorsys.rgb_to_hsv(*(px / 255.0))[1] for px in row] for row in image])


def test_saturation_matches_colorsys():
    img = np.random.default_rng(0).integers(0, 256, (12, 9, 3), dtype=np.uint8)
    img[0, 0] = 0
    np.testing.assert_allclose(sl.saturation(img), _hsv_saturation_oracle(img), atol=1e-12)


def test_mask_white_and_magenta():
    white = np.full((64, 64, 3), 255, np.uint8)
    assert not sl.tissue_mask(white, 16).mask.any()
    magenta = np.zeros((64, 64, 3), np.uint8)
    magenta[..., 0] = magenta[..., 2] = 255
    assert sl.tissue_mask(magenta, 16).mask.all()


def test_half_white_half_pink_card():
    rng = np.random.default_rng(1)
    img = np.full((64, 96, 3), 255, np.uint8)
    pink = np.array([230, 160, 200]) + rng.integers(-10, 10, (64, 48, 3))
    img[:, 48:] = np.clip(pink, 0, 255)
    img[:, :48] -= rng.integers(0, 4, (64, 48, 3)).astype(np.uint8)  # off-white noise
    ps = 16
    m = sl.tissue_mask(img, ps)
    sat = _hsv_saturation_oracle(img) > 0.07
    oracle = np.array([[sat[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps].mean() > 0.5
                        for c in range(6)] for r in range(4)])
    assert np.array_equal(m.mask, oracle)
    assert m.mask[:, 3:].all() and not m.mask[:, :3].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.5), st.floats(0, 0.5))
def test_mask_monotone_in_threshold(seed, t1, t2):
    img = np.random.default_rng(seed).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    lo, hi = sorted((t1, t2))
    a = sl.tissue_mask(img, 8, lo).mask
    b = sl.tissue_mask(img, 8, hi).mask
    assert not (b & ~a).any()


def test_mask_degenerate():
    with pytest.raises(ValueError):
        sl.tissue_mask(np.zeros((10, 10, 3), np.uint8), 16)


# -- tiling -------------------------------------------------------------------

def test_extract_grid_counts():
    img = np.zeros((512, 512, 3), np.uint8)
    coords, patches = sl.extract_grid(img)
    assert coords.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert patches.shape == (4, 256, 256, 3)
    assert len(sl.extract_grid(np.zeros((600, 600, 3), np.uint8))[0]) == 4
    empty = sl.TissueMask(np.zeros((2, 2), bool), 0.07)
    assert len(sl.extract_grid(img, 256, empty)[0]) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 70), st.integers(1, 70), st.integers(1, 16))
def test_tiling_partition(h, w, ps):
    img = np.arange(h * w * 3, dtype=np.int64).reshape(h, w, 3)
    coords, patches = sl.extract_grid(img, ps)
    assert len(coords) == (h // ps) * (w // ps)
    seen = np.zeros((h, w), int)
    for (c, r), p in zip(coords, patches):
        assert (r + 1) * ps <= h and (c + 1) * ps <= w
        seen[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] += 1
        assert np.array_equal(p, img[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps])
    assert seen.max() <= 1


# -- encoders ------------------------------------------------------------------

def test_color_histogram_black_patch():
    f = sl.encode_patches(np.zeros((1, 4, 4, 3), np.uint8), "color_histogram", M=24)
    expected = np.zeros(24)
    expected[[0, 8, 16]] = 1.0
    assert f[0].tolist() == expected.tolist()
    tiled = sl.encode_patches(np.zeros((1, 4, 4, 3), np.uint8), "color_histogram", M=30)
    assert tiled[0, 24] == 1.0 and tiled.shape == (1, 30)


def test_histogram_matches_numpy_histogram():
    p = np.random.default_rng(2).integers(0, 256, (3, 5, 5, 3), dtype=np.uint8)
    f = sl.ColorHistogramEncoder(24)(p)
    for i in range(3):
        for c in range(3):
            h, _ = np.histogram(p[i, :, :, c], bins=8, range=(0, 256))
            np.testing.assert_allclose(f[i, c * 8:(c + 1) * 8], h / 25)


def test_identical_patches_identical_rows():
    p = np.random.default_rng(3).integers(0, 256, (1, 6, 6, 3), dtype=np.uint8)
    for kind in ("random_projection", "color_histogram"):
        f = sl.encode_patches(np.concatenate([p, p]), kind, M=16, seed=1)
        assert np.array_equal(f[0], f[1])


def test_random_projection_linear():
    rng = np.random.default_rng(4)
    enc = sl.RandomProjectionEncoder(48, 8, seed=3)
    p1 = rng.integers(0, 100, (2, 4, 4, 3)).astype(float)
    p2 = rng.integers(0, 100, (2, 4, 4, 3)).astype(float)
    np.testing.assert_allclose(enc(p1 + p2), enc(p1) + enc(p2), atol=1e-10)
    assert np.array_equal(enc.matrix, sl.RandomProjectionEncoder(48, 8, seed=3).matrix)
    with pytest.raises(ValueError):
        sl.RandomProjectionEncoder(48, 0)
    with pytest.raises(ValueError):
        sl.make_encoder("resnet", (4, 4, 3), 8)


def test_bag_from_png(tmp_path):
    img = np.full((64, 64, 3), 255, np.uint8)
    img[:32, :32] = [200, 100, 180]
    Image.fromarray(img).save(tmp_path / "s.png")
    bag = sl.bag_from_image(sl.load_image(tmp_path / "s.png"), "s", "p", 1, patch_size=16, M=8)
    assert bag.coords.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert bag.provenance == "raster"
    with pytest.raises(sl.EmptyBagError):
        sl.bag_from_image(np.full((64, 64, 3), 255, np.uint8), "w", "p", 0, patch_size=16)


# -- cache ---------------------------------------------------------------------

def test_cache_roundtrip(tmp_path):
    bag = sl.generate_synthetic(SynthSpec(width=9, height=7, fraction=0.2, M=5, slide_id="slidé",
                                          patient_id="p1", label=1))
    sl.cache_write(bag, tmp_path / "b.feat")
    back = sl.cache_read(tmp_path / "b.feat")
    assert back == bag
    assert back.features.tobytes() == bag.features.tobytes()


def test_cache_size_arithmetic(tmp_path):
    K, M = 16230, 1024
    rows, cols = np.divmod(np.arange(K), 200)
    bag = Bag("abc", "pq", 0, np.stack([cols, rows], 1), np.zeros((K, M)))
    path = tmp_path / "big.feat"
    sl.cache_write(bag, path)
    header = 8 + struct.calcsize("<HQQB") + (8 + 3) + (8 + 2) + K * 2 * 4
    assert path.stat().st_size == header + K * M * 8


def test_cache_corruption(tmp_path):
    bag = sl.generate_synthetic(SynthSpec(width=5, height=5, fraction=0.2, M=3))
    path = tmp_path / "b.feat"
    sl.cache_write(bag, path)
    data = path.read_bytes()
    for bad in (data[:-1], data[:20], data[:40], b"XXXXXXXX" + data[8:], data + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(sl.CorruptCacheError):
            sl.cache_read(path)
    path.write_bytes(data[:8] + struct.pack("<H", 9) + data[10:])
    with pytest.raises(sl.CorruptCacheError):
        sl.cache_read(path)


def test_manifest_roundtrip(tmp_path):
    bags = sl.synthetic_dataset(4, 2, width=5, height=5, M=3, fraction=0.2)
    rows = []
    (tmp_path / "bags").mkdir()
    for b in bags:
        sl.cache_write(b, tmp_path / "bags" / f"{b.slide_id}.feat")
        rows.append(dict(slide_id=b.slide_id, patient_id=b.patient_id, label=b.label,
                         path=f"bags/{b.slide_id}.feat"))
    sl.write_manifest(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "slide_id,patient_id,label,path"
    assert sl.load_manifest_bags(tmp_path / "m.csv") == bags

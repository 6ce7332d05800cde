"""Bags of patch features: synthetic slides, raster tiling, encoders and the feature cache."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from drasmil.seeding import derive_seed, make_rng

CACHE_MAGIC = b"DRASFEAT"
CACHE_VERSION = 1
MANIFEST_HEADER = ["slide_id", "patient_id", "label", "path"]


class CorruptCacheError(ValueError):
    pass


class EmptyBagError(ValueError):
    pass


@dataclass(eq=False)
class Bag:
    slide_id: str
    patient_id: str
    label: int
    coords: np.ndarray  # K x 2 int64, (column, row)
    features: np.ndarray  # K x M float64
    provenance: str = "synthetic"
    region: np.ndarray | None = field(default=None, repr=False)  # signal patch mask, synthetic only

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if len(self.coords) < 1:
            raise EmptyBagError(f"bag {self.slide_id!r} has no patches")
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ValueError("coords and features must align by index")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite features")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ValueError("duplicate patch coordinates")

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.slide_id == other.slide_id and self.patient_id == other.patient_id
                and self.label == other.label
                and np.array_equal(self.coords, other.coords)
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())

    def fetch(self, indices) -> np.ndarray:
        return self.features[np.asarray(indices, dtype=np.int64)]


@dataclass
class SynthSpec:
    width: int = 100
    height: int = 160
    fraction: float = 0.05
    shift: float = 2.0
    noise: float = 1.0
    M: int = 32
    seed: int = 0
    label: int = 0
    slide_id: str = "synth"
    patient_id: str = "p0"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid area must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.M < 2:
            raise ValueError("synthetic bags need M >= 2 for class-specific signal")


def region_size(spec: SynthSpec) -> int:
    n = int(round(spec.fraction * spec.width * spec.height))
    if n < 1:
        raise ValueError("signal fraction yields zero patches")
    return n


def place_region(spec: SynthSpec, rng) -> np.ndarray:
    """Contiguous near-square block of exactly ``region_size`` cells, row-major filled."""
    n = region_size(spec)
    W, H = spec.width, spec.height
    side = int(np.ceil(np.sqrt(n)))
    bw = min(side, W)
    bh = -(-n // bw)
    if bh > H:
        raise ValueError("region does not fit the grid")
    x0 = int(rng.integers(0, W - bw + 1))
    y0 = int(rng.integers(0, H - bh + 1))
    mask = np.zeros((H, W), dtype=bool)
    flat = np.zeros(bw * bh, dtype=bool)
    flat[:n] = True
    mask[y0:y0 + bh, x0:x0 + bw] = flat.reshape(bh, bw)
    return mask.ravel()


def generate_synthetic(spec: SynthSpec) -> Bag:
    """Gaussian background with a class-specific mean shift planted in one contiguous region.

    Class c shifts feature column c by ``spec.shift``; everything else is
    N(0, noise^2). Patches are the full grid in row-major order.
    """
    rng = make_rng(spec.seed, "synth")
    rows, cols = np.divmod(np.arange(spec.width * spec.height), spec.width)
    coords = np.stack([cols, rows], axis=1)
    region = place_region(spec, rng)
    feats = rng.normal(0.0, spec.noise, size=(len(coords), spec.M))
    feats[region, spec.label] += spec.shift
    return Bag(spec.slide_id, spec.patient_id, spec.label, coords, feats,
               provenance="synthetic", region=region)


def synthetic_dataset(n_bags: int, slides_per_patient: int = 2, seed: int = 0, **kw) -> list[Bag]:
    """Balanced-ish dataset; every slide of a patient shares the patient's label."""
    bags = []
    for i in range(n_bags):
        p = i // slides_per_patient
        label = p % 2
        spec = SynthSpec(seed=derive_seed(seed, "bag", i), label=label,
                         slide_id=f"s{i:04d}", patient_id=f"p{p:04d}", **kw)
        bags.append(generate_synthetic(spec))
    return bags


# -- raster ingestion ------------------------------------------------------

@dataclass
class TissueMask:
    mask: np.ndarray  # rows x cols bool
    threshold: float


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def saturation(image: np.ndarray) -> np.ndarray:
    """Hexcone HSV saturation in [0, 1]: (max - min) / max, 0 where max is 0."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    out = np.zeros_like(mx)
    nz = mx > 0
    out[nz] = (mx[nz] - mn[nz]) / mx[nz]
    return out


def tissue_mask(image: np.ndarray, patch_size: int = 256, threshold: float = 0.07,
                min_coverage: float = 0.5) -> TissueMask:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an RGB image")
    rows, cols = image.shape[0] // patch_size, image.shape[1] // patch_size
    if patch_size < 1 or rows < 1 or cols < 1:
        raise ValueError("image smaller than one patch")
    sat = saturation(image[: rows * patch_size, : cols * patch_size]) > threshold
    frac = sat.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))
    return TissueMask(frac > min_coverage, threshold)


def extract_grid(image: np.ndarray, patch_size: int = 256, mask: TissueMask | None = None):
    """Non-overlapping tiles in row-major order; partial edge tiles are dropped."""
    rows, cols = image.shape[0] // patch_size, image.shape[1] // patch_size
    keep = np.ones((rows, cols), bool) if mask is None else mask.mask
    if keep.shape != (rows, cols):
        raise ValueError("mask does not match the patch grid")
    r, c = np.nonzero(keep)
    coords = np.stack([c, r], axis=1).astype(np.int64)
    patches = np.empty((len(coords), patch_size, patch_size, image.shape[2]), dtype=image.dtype)
    for i, (cx, ry) in enumerate(coords):
        patches[i] = image[ry * patch_size:(ry + 1) * patch_size, cx * patch_size:(cx + 1) * patch_size]
    return coords, patches


# -- encoders --------------------------------------------------------------

class RandomProjectionEncoder:
    """Fixed seeded Gaussian projection of flattened pixels, scaled by 1/sqrt(pixel count)."""

    name = "random_projection"

    def __init__(self, n_values: int, M: int, seed: int = 0):
        if M < 1:
            raise ValueError("M must be >= 1")
        self.M = M
        self.n_values = n_values
        rng = make_rng(seed, "projection", n_values, M)
        self.matrix = rng.standard_normal((n_values, M)) / np.sqrt(n_values)

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        flat = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
        if flat.shape[1] != self.n_values:
            raise ValueError(f"patch has {flat.shape[1]} values, encoder expects {self.n_values}")
        return flat @ self.matrix


class ColorHistogramEncoder:
    name = "color_histogram"
    bins = 8

    def __init__(self, M: int):
        if M < 1:
            raise ValueError("M must be >= 1")
        self.M = M

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        p = np.asarray(patches).reshape(len(patches), -1, 3)
        idx = np.clip(p.astype(np.int64) * self.bins // 256, 0, self.bins - 1)
        n_px = p.shape[1]
        hist = np.empty((len(p), 3 * self.bins))
        offset = np.arange(len(p))[:, None] * self.bins
        for c in range(3):
            counts = np.bincount((idx[:, :, c] + offset).ravel(), minlength=len(p) * self.bins)
            hist[:, c * self.bins:(c + 1) * self.bins] = counts.reshape(len(p), self.bins) / n_px
        reps = -(-self.M // hist.shape[1])
        return np.tile(hist, (1, reps))[:, : self.M]


def make_encoder(kind: str, patch_shape, M: int, seed: int = 0):
    if kind == "random_projection":
        return RandomProjectionEncoder(int(np.prod(patch_shape)), M, seed)
    if kind == "color_histogram":
        return ColorHistogramEncoder(M)
    raise ValueError(f"unknown encoder {kind!r}")


def encode_patches(patches: np.ndarray, encoder: str = "random_projection", M: int = 32,
                   seed: int = 0) -> np.ndarray:
    patches = np.asarray(patches)
    return make_encoder(encoder, patches.shape[1:], M, seed)(patches)


def bag_from_image(image, slide_id: str, patient_id: str, label: int, patch_size: int = 256,
                   threshold: float = 0.07, encoder: str = "random_projection", M: int = 32,
                   seed: int = 0) -> Bag:
    mask = tissue_mask(image, patch_size, threshold)
    coords, patches = extract_grid(image, patch_size, mask)
    if len(coords) == 0:
        raise EmptyBagError(f"no tissue patches found in {slide_id!r}")
    feats = encode_patches(patches, encoder, M, seed)
    return Bag(slide_id, patient_id, label, coords, feats, provenance="raster")


# -- feature cache ---------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<Q", len(b)) + b


def cache_write(bag: Bag, path) -> None:
    K, M = bag.features.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HQQB", CACHE_VERSION, K, M, bag.label))
        fh.write(_pack_str(bag.slide_id))
        fh.write(_pack_str(bag.patient_id))
        fh.write(np.ascontiguousarray(bag.coords, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(bag.features, dtype="<f8").tobytes())


def cache_read(path) -> Bag:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CACHE_MAGIC:
        raise CorruptCacheError(f"{path}: bad magic")
    try:
        version, K, M, label = struct.unpack_from("<HQQB", data, 8)
        if version != CACHE_VERSION:
            raise CorruptCacheError(f"{path}: unsupported version {version}")
        off = 8 + struct.calcsize("<HQQB")
        ids = []
        for _ in range(2):
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + n > len(data):
                raise CorruptCacheError(f"{path}: truncated id")
            ids.append(data[off:off + n].decode("utf-8"))
            off += n
        need = off + K * 2 * 4 + K * M * 8
        if need != len(data):
            raise CorruptCacheError(f"{path}: expected {need} bytes, found {len(data)}")
        coords = np.frombuffer(data, "<u4", K * 2, off).reshape(K, 2).astype(np.int64)
        off += K * 8
        feats = np.frombuffer(data, "<f8", K * M, off).reshape(K, M).astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCacheError(f"{path}: {exc}") from exc
    return Bag(ids[0], ids[1], int(label), coords, feats, provenance="cache")


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r["slide_id"], r["patient_id"], int(r["label"]), r["path"]])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = list(reader)
    base = os.path.dirname(os.path.abspath(path))
    for r in rows:
        r["label"] = int(r["label"])
        if not os.path.isabs(r["path"]):
            r["path"] = os.path.join(base, r["path"])
    return rows


def load_manifest_bags(path) -> list[Bag]:
    return [cache_read(r["path"]) for r in read_manifest(path)]

"""Efficiency harness: batch-size sweep of full vs active-sampling evaluation.

Patches are rendered and encoded on demand (no feature cache) so the cost of
encoding is part of every measurement. Memory is an accounting of bytes held
in patch-pixel and feature buffers, not process RSS.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from drasmil.model import ModelParams
from drasmil.sampler import SamplingConfig, run_dras, run_full
from drasmil.seeding import derive_seed, make_rng
from drasmil.slide import RandomProjectionEncoder, SynthSpec, place_region

CSV_HEADER = ["method", "batch_size", "total_seconds", "mean_seconds_per_bag",
              "peak_bytes", "patches_encoded"]


@dataclass
class BenchConfig:
    batch_sizes: list = field(default_factory=lambda: [1, 4, 8, 16, 32, 64])
    methods: list = field(default_factory=lambda: ["full", "dras"])
    repetitions: int = 3
    n_bags: int = 10
    width: int = 100
    height: int = 160
    patch_size: int = 16
    M: int = 32
    L: int = 16
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        if any(b < 1 for b in self.batch_sizes):
            raise ValueError("batch sizes must be >= 1")
        if self.repetitions < 1 or self.repetitions % 2 == 0:
            raise ValueError("repetitions must be odd")
        for m in self.methods:
            if m not in ("full", "dras"):
                raise ValueError(f"unknown method {m!r}")


@dataclass
class BenchCell:
    method: str
    batch_size: int
    total_seconds: float
    mean_seconds_per_bag: float
    peak_bytes: int
    patches_encoded: int


@dataclass
class BenchReport:
    cells: list = field(default_factory=list)

    def cell(self, method, batch_size) -> BenchCell:
        for c in self.cells:
            if c.method == method and c.batch_size == batch_size:
                return c
        raise KeyError((method, batch_size))


class BufferTracker:
    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def free(self, nbytes: int) -> None:
        self.current -= nbytes


class LiveSlide:
    """A synthetic slide whose patches are rendered and encoded only when fetched."""

    def __init__(self, spec: SynthSpec, patch_size: int, encoder: RandomProjectionEncoder,
                 batch_size: int, tracker: BufferTracker, bank_size: int = 32):
        self.spec = spec
        self.patch_size = patch_size
        self.encoder = encoder
        self.batch_size = batch_size
        self.tracker = tracker
        rng = make_rng(spec.seed, "render")
        rows, cols = np.divmod(np.arange(spec.width * spec.height), spec.width)
        self.coords = np.stack([cols, rows], axis=1).astype(np.int64)
        self.region = place_region(spec, rng)
        self.bank = rng.normal(0.0, 12.0, size=(bank_size, patch_size, patch_size, 3))
        self.base = np.array([205.0, 130.0, 180.0])
        tint = np.zeros(3)
        tint[spec.label] = spec.shift
        self.tint = tint
        self.patch_bytes = patch_size * patch_size * 3
        self.encoded = 0
        self.held = 0

    def __len__(self):
        return len(self.coords)

    def render(self, indices: np.ndarray) -> np.ndarray:
        px = self.bank[indices % len(self.bank)] + self.base
        px[self.region[indices]] += self.tint
        return np.clip(px, 0, 255).astype(np.uint8)

    def fetch(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        out = np.empty((len(indices), self.encoder.M))
        feat_bytes = out.nbytes
        self.tracker.alloc(feat_bytes)
        self.held += feat_bytes
        for s in range(0, len(indices), self.batch_size):
            chunk = indices[s:s + self.batch_size]
            nbytes = len(chunk) * self.patch_bytes
            self.tracker.alloc(nbytes)
            out[s:s + len(chunk)] = self.encoder(self.render(chunk))
            self.tracker.free(nbytes)
        self.encoded += len(indices)
        return out

    def release(self) -> None:
        self.tracker.free(self.held)
        self.held = 0


def _bag_specs(config: BenchConfig):
    return [SynthSpec(width=config.width, height=config.height, shift=40.0, M=config.M,
                      seed=derive_seed(config.seed, "bench", i), label=i % 2,
                      slide_id=f"b{i:03d}", patient_id=f"b{i:03d}")
            for i in range(config.n_bags)]


def _run_method(method, model, specs, config, encoder, batch_size):
    tracker = BufferTracker()
    encoded = 0
    start = time.perf_counter()
    for spec in specs:
        slide = LiveSlide(spec, config.patch_size, encoder, batch_size, tracker)
        if method == "full":
            run_full(model, slide)
        else:
            run_dras(model, slide, config.sampling)
        encoded += slide.encoded
        slide.release()
    return time.perf_counter() - start, tracker.peak, encoded


def run_bench(config: BenchConfig, progress=None) -> BenchReport:
    specs = _bag_specs(config)
    encoder = RandomProjectionEncoder(config.patch_size * config.patch_size * 3, config.M,
                                      seed=config.seed)
    model = ModelParams.init(M=config.M, L=config.L, seed=config.seed)
    report = BenchReport()
    for bs in config.batch_sizes:
        for method in config.methods:  # warm-up, discarded
            _run_method(method, model, specs[:1], config, encoder, bs)
        times = {m: [] for m in config.methods}
        peaks = {}
        counts = {}
        for _ in range(config.repetitions):
            # alternate methods within each repetition
            for method in config.methods:
                dt, peak, encoded = _run_method(method, model, specs, config, encoder, bs)
                times[method].append(dt)
                peaks[method] = peak
                counts[method] = encoded
        for method in config.methods:
            total = statistics.median(times[method])
            report.cells.append(BenchCell(method, bs, total, total / len(specs),
                                          peaks[method], counts[method]))
            if progress:
                progress(report.cells[-1])
    return report


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in report.cells:
        w.writerow([c.method, c.batch_size, repr(c.total_seconds), repr(c.mean_seconds_per_bag),
                    c.peak_bytes, c.patches_encoded])
    return buf.getvalue()


def parse_csv(text: str) -> BenchReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    return BenchReport([BenchCell(r["method"], int(r["batch_size"]), float(r["total_seconds"]),
                                  float(r["mean_seconds_per_bag"]), int(r["peak_bytes"]),
                                  int(r["patches_encoded"])) for r in rows])


def report_render(report: BenchReport):
    """(aligned text table, CSV text)."""
    lines = [f"{'method':<8}{'batch':>7}{'total s':>12}{'s/bag':>12}{'peak bytes':>14}{'encoded':>10}"]
    for c in report.cells:
        lines.append(f"{c.method:<8}{c.batch_size:>7}{c.total_seconds:>12.3f}"
                     f"{c.mean_seconds_per_bag:>12.4f}{c.peak_bytes:>14}{c.patches_encoded:>10}")
    return "\n".join(lines) + "\n", report_csv(report)

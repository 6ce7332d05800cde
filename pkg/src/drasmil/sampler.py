"""Attention-guided active sampling (DRAS-MIL) plus the full-bag and random baselines.

A *source* is anything with ``coords`` (K x 2 grid positions), ``__len__`` and
``fetch(indices) -> features``. :class:`~drasmil.slide.Bag` serves cached
features; the benchmark harness supplies sources that encode patches on demand.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from drasmil import kernels
from drasmil.evaluation import PredictionTable
from drasmil.model import ModelParams, attention_forward, classify, positive_probability
from drasmil.seeding import derive_seed
from drasmil.slide import EmptyBagError

# iteration counts offered by the sampling search space
ITERATION_CHOICES = (2, 4, 6, 8, 10, 12, 16)
TRACE_HEADER = ["iteration", "patch_index", "grid_x", "grid_y", "drawn_randomly",
                "weight_at_draw", "attention"]


@dataclass
class SamplingConfig:
    total_budget: int = 800
    iterations: int = 10
    final_extra: int = 160
    neighbours: int = 64
    sampling_random: float = 0.29
    sampling_random_delta: float = 0.36
    seed: int = 0
    # replaces the decay schedule for every iteration after the first
    force_rate: float | None = None

    def __post_init__(self):
        if not 0 <= self.sampling_random <= 1:
            raise ValueError("sampling_random must be in [0, 1]")
        if not 0 < self.sampling_random_delta <= 1:
            raise ValueError("sampling_random_delta must be in (0, 1]")
        if self.neighbours < 1:
            raise ValueError("neighbours must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.final_extra < self.total_budget:
            raise ValueError("final_extra must be in [0, total_budget)")
        if self.force_rate is not None and not 0 <= self.force_rate <= 1:
            raise ValueError("force_rate must be in [0, 1]")
        self.schedule()

    @property
    def samples_per_iteration(self) -> int:
        return self.schedule()[0]

    def schedule(self) -> list[int]:
        return schedule_counts(self.iterations, self.total_budget - self.final_extra)

    def rate(self, i: int) -> float:
        if i > 0 and self.force_rate is not None:
            return float(self.force_rate)
        return random_rate_schedule(self.sampling_random, self.sampling_random_delta, i)


def schedule_counts(iterations: int, total: int) -> list[int]:
    """Per-iteration draw counts: round(total/iterations), last one absorbs the remainder."""
    per = int(math.floor(total / iterations + 0.5))
    last = total - per * (iterations - 1)
    if per < 1 or last < 1:
        raise ValueError(f"cannot split {total} samples over {iterations} iterations")
    return [per] * (iterations - 1) + [last]


def random_rate_schedule(r0: float, delta: float, i: int) -> float:
    if i < 0:
        raise ValueError("iteration must be >= 0")
    if i == 0:
        return 1.0
    return r0 * (1.0 - delta) ** i


@dataclass
class SamplerState:
    sampled: list
    weights: np.ndarray
    mask: np.ndarray  # uint8, 1 where sampled
    current_random_rate: float = 1.0
    iteration: int = 0

    @classmethod
    def empty(cls, K: int) -> "SamplerState":
        return cls([], np.zeros(K), np.zeros(K, dtype=np.uint8))

    def mark(self, indices) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if self.mask[idx].any() or len(np.unique(idx)) != len(idx):
            raise RuntimeError("patch sampled twice")
        self.mask[idx] = 1
        self.weights[idx] = 0.0
        self.sampled.extend(int(i) for i in idx)

    def unsampled(self) -> np.ndarray:
        return np.flatnonzero(self.mask == 0)


@dataclass
class Draw:
    indices: np.ndarray
    randomly: np.ndarray  # bool per index
    weight_at_draw: np.ndarray


@dataclass
class TraceRow:
    iteration: int
    patch_index: int
    grid_x: int
    grid_y: int
    drawn_randomly: bool
    weight_at_draw: float
    attention: float


@dataclass
class SamplingResult:
    method: str
    logits: np.ndarray
    sampled: np.ndarray
    scores: np.ndarray  # attention over ``sampled``, same order
    weights: np.ndarray  # final sampling-weight map over all K patches
    patches_encoded: int
    forward_passes: int
    trace: list = field(default_factory=list)

    @property
    def probability(self) -> float:
        return positive_probability(self.logits)

    def attention_map(self, K: int) -> np.ndarray:
        out = np.full(K, np.nan)
        out[self.sampled] = self.scores
        return out

    def same_as(self, other: "SamplingResult") -> bool:
        return (np.array_equal(self.logits, other.logits)
                and np.array_equal(self.sampled, other.sampled)
                and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.weights, other.weights)
                and self.patches_encoded == other.patches_encoded
                and self.forward_passes == other.forward_passes)


AttentionFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sampling_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, "sampling"))


def _uniform(rng, pool: np.ndarray, n: int) -> np.ndarray:
    if n <= 0:
        return pool[:0]
    return pool[rng.choice(len(pool), size=n, replace=False)]


def _check_source(bag):
    if len(bag) < 1:
        raise EmptyBagError("cannot evaluate an empty bag")


def _trace(rows, iteration, bag, draw: Draw, attention):
    for j, idx in enumerate(draw.indices):
        x, y = bag.coords[idx]
        rows.append(TraceRow(iteration, int(idx), int(x), int(y), bool(draw.randomly[j]),
                             float(draw.weight_at_draw[j]), float(attention[j])))


def run_full(model: ModelParams, bag) -> SamplingResult:
    _check_source(bag)
    K = len(bag)
    idx = np.arange(K)
    att = attention_forward(model, bag.fetch(idx))
    logits = classify(model, att.bag_embedding)
    return SamplingResult("full", logits, idx, att.scores, np.zeros(K), K, 1)


def run_random(model: ModelParams, bag, budget: int = 800, seed: int = 0) -> SamplingResult:
    _check_source(bag)
    K = len(bag)
    rng = sampling_rng(seed)
    idx = _uniform(rng, np.arange(K), min(budget, K))
    att = attention_forward(model, bag.fetch(idx))
    logits = classify(model, att.bag_embedding)
    trace = []
    _trace(trace, 0, bag, Draw(idx, np.ones(len(idx), bool), np.zeros(len(idx))), att.scores)
    return SamplingResult("random", logits, idx, att.scores, np.zeros(K), len(idx), 1, trace)


def propagate_weights(state: SamplerState, coords: np.ndarray, new_indices, scores, k: int) -> np.ndarray:
    """Give each new sample's attention to its k nearest unsampled patches, max-combined.

    Distance is Euclidean on grid coordinates with ties broken by lower patch
    index. ``state.mask`` must already include ``new_indices``.
    """
    if k <= 0:
        raise ValueError("k must be >= 1")
    new_indices = np.ascontiguousarray(new_indices, dtype=np.int64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if new_indices.shape != scores.shape:
        raise ValueError("scores must align with the new indices")
    kernels.knn_propagate(np.ascontiguousarray(coords, dtype=np.int64), state.weights,
                          state.mask, new_indices, scores, int(k))
    state.weights[state.mask == 1] = 0.0
    return state.weights


def draw_iteration(state: SamplerState, n: int, rate: float, rng: np.random.Generator) -> Draw:
    """Draw ``n`` new patches: floor(rate*n) uniformly, the rest by weight.

    Zero-weight patches never enter the weighted pool; if it runs dry the
    remainder is uniform over what is left. Does not mark the draw as sampled.
    """
    pool = state.unsampled()
    if len(pool) <= n:
        return Draw(pool, np.ones(len(pool), bool), state.weights[pool].copy())
    n_rand = int(math.floor(rate * n))
    rand = _uniform(rng, pool, n_rand)
    taken = np.zeros(len(state.weights), bool)
    taken[rand] = True
    cand = pool[(~taken[pool]) & (state.weights[pool] > 0)]
    u = rng.random(n - n_rand)
    pos = kernels.weighted_draw(np.ascontiguousarray(state.weights[cand]), u)
    weighted = cand[pos]
    taken[weighted] = True
    rest = pool[~taken[pool]]
    fill = _uniform(rng, rest, n - n_rand - len(weighted))
    indices = np.concatenate([rand, weighted, fill]).astype(np.int64)
    flags = np.concatenate([np.ones(len(rand), bool), np.zeros(len(weighted), bool),
                            np.ones(len(fill), bool)])
    return Draw(indices, flags, state.weights[indices].copy())


def run_dras(model: ModelParams, bag, config: SamplingConfig | None = None,
             attention_fn: AttentionFn | None = None) -> SamplingResult:
    """Iterative attention-guided sampling; bags smaller than the budget get a full pass.

    ``attention_fn(indices, features) -> scores`` replaces the model's attention
    during the sampling iterations (used to plant an oracle in tests).
    """
    config = config or SamplingConfig()
    _check_source(bag)
    K = len(bag)
    if K < config.total_budget:
        return run_full(model, bag)
    rng = sampling_rng(config.seed)
    coords = np.ascontiguousarray(bag.coords, dtype=np.int64)
    state = SamplerState.empty(K)
    feats = []
    trace = []
    forwards = 0
    for i, n in enumerate(config.schedule()):
        rate = config.rate(i)
        draw = draw_iteration(state, n, rate, rng)
        state.mark(draw.indices)
        state.current_random_rate = rate
        state.iteration = i
        feats.append(bag.fetch(draw.indices))
        cum = np.concatenate(feats)
        if attention_fn is None:
            scores = attention_forward(model, cum).scores
        else:
            scores = np.asarray(attention_fn(np.asarray(state.sampled), cum), dtype=np.float64)
        forwards += 1
        new_scores = scores[len(cum) - len(draw.indices):]
        _trace(trace, i, bag, draw, new_scores)
        propagate_weights(state, coords, draw.indices, new_scores, config.neighbours)

    rate = config.rate(config.iterations)
    draw = draw_iteration(state, config.final_extra, rate, rng)
    state.mark(draw.indices)
    state.current_random_rate = rate
    feats.append(bag.fetch(draw.indices))
    cum = np.concatenate(feats)
    att = attention_forward(model, cum)
    logits = classify(model, att.bag_embedding)
    forwards += 1
    _trace(trace, config.iterations, bag, draw, att.scores[len(cum) - len(draw.indices):])
    sampled = np.asarray(state.sampled, dtype=np.int64)
    return SamplingResult("dras", logits, sampled, att.scores, state.weights.copy(),
                          len(sampled), forwards, trace)


def evaluate(model: ModelParams, bag, method: str, config: SamplingConfig | None = None,
             seed: int = 0) -> SamplingResult:
    config = replace(config or SamplingConfig(), seed=seed)
    if method == "full":
        return run_full(model, bag)
    if method == "random":
        return run_random(model, bag, config.total_budget, seed)
    if method == "dras":
        return run_dras(model, bag, config)
    raise ValueError(f"unknown method {method!r}")


def repeat_evaluate(models, bags, method: str, repeats: int = 50, base_seed: int = 0,
                    config: SamplingConfig | None = None, workers: int = 1) -> PredictionTable:
    """Positive-class probability per (bag, repeat).

    ``models`` is one ModelParams or a mapping slide_id -> ModelParams (per-fold
    checkpoints). Seeds derive from (base_seed, slide_id, repeat), so the table
    does not depend on ``workers``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    bags = list(bags)

    def model_for(bag):
        return models[bag.slide_id] if isinstance(models, dict) else models

    def one_bag(bag):
        model = model_for(bag)
        if method == "full":
            p = run_full(model, bag).probability
            return [p] * repeats
        return [evaluate(model, bag, method, config,
                         derive_seed(base_seed, "eval", method, bag.slide_id, r)).probability
                for r in range(repeats)]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one_bag, bags))
    else:
        rows = [one_bag(b) for b in bags]
    return PredictionTable([b.slide_id for b in bags], [b.patient_id for b in bags],
                           np.array([b.label for b in bags], dtype=np.int64),
                           np.array(rows, dtype=np.float64).reshape(len(bags), repeats))


# -- exports ---------------------------------------------------------------

def write_trace(result: SamplingResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in result.trace:
            w.writerow([r.iteration, r.patch_index, r.grid_x, r.grid_y, int(r.drawn_randomly),
                        repr(r.weight_at_draw), repr(r.attention)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [TraceRow(int(r["iteration"]), int(r["patch_index"]), int(r["grid_x"]),
                         int(r["grid_y"]), r["drawn_randomly"] == "1",
                         float(r["weight_at_draw"]), float(r["attention"])) for r in reader]


def grid_image(coords: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Min-max scale ``values`` onto an 8-bit grid; missing patches and NaNs are 0."""
    coords = np.asarray(coords)
    W = int(coords[:, 0].max()) + 1
    H = int(coords[:, 1].max()) + 1
    img = np.zeros((H, W), dtype=np.uint8)
    vals = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(vals)
    if not ok.any():
        return img
    lo, hi = vals[ok].min(), vals[ok].max()
    scaled = np.zeros_like(vals)
    if hi > lo:
        scaled[ok] = (vals[ok] - lo) / (hi - lo)
    px = np.rint(scaled * 255).astype(np.uint8)
    img[coords[ok, 1], coords[ok, 0]] = px[ok]
    return img


def write_pgm(img: np.ndarray, path) -> None:
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(data, dtype=np.uint8, count=W * H, offset=pos + 1).reshape(H, W)


def write_map_csv(coords, values, path, column="weight") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_x", "grid_y", column])
        for (x, y), v in zip(np.asarray(coords), np.asarray(values, dtype=np.float64)):
            if np.isfinite(v):
                w.writerow([int(x), int(y), repr(float(v))])

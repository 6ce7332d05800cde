"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs under both backends; outputs are checked
for bit-equality and the best-of-N wall-clock time is reported.
"""

import argparse
import time

import numpy as np

from drasmil import kernels
from drasmil.model import ModelParams
from drasmil.sampler import SamplingConfig, run_dras
from drasmil.slide import SynthSpec, generate_synthetic


def _knn_case(rng):
    w, h = 100, 160
    rows, cols = np.divmod(np.arange(w * h), w)
    coords = np.stack([cols, rows], 1).astype(np.int64)
    sampled = np.zeros(w * h, np.uint8)
    src = rng.choice(w * h, 64, replace=False).astype(np.int64)
    sampled[src] = 1
    values = rng.random(64)

    def run(impl):
        weights = np.zeros(w * h)
        impl.knn_propagate(coords, weights, sampled, src, values, 64)
        return weights

    return run


def _cases(rng):
    w = rng.random(16000) * (rng.random(16000) < 0.3)
    u = rng.random(64)
    probs = rng.random((120, 50))
    labels = np.r_[np.zeros(60), np.ones(60)].astype(np.int8)
    choice = rng.integers(0, 50, (2000, 120)).astype(np.int64)
    knn = _knn_case(rng)
    return {
        "knn_propagate (16000 patches, 64 sources, k=64)": knn,
        "weighted_draw (16000 weights, 64 draws)": lambda impl: impl.weighted_draw(w.copy(), u),
        "bootstrap_epochs (120 slides, 2000 epochs)":
            lambda impl: impl.bootstrap_epochs(probs, labels, choice, 0.5),
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is available")
    names = list(backends)
    print(f"{'kernel':<50}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for label, case in _cases(np.random.default_rng(0)).items():
        res = {n: _best(lambda: case(backends[n]), args.repeat) for n in names}
        outs = [r[1] for r in res.values()]
        assert all(np.array_equal(o, outs[0]) for o in outs), label
        row = f"{label:<50}" + "".join(f"{res[n][0] * 1e3:>14.2f}" for n in names)
        if len(names) == 2:
            row += f"{res['python'][0] / res['cython'][0]:>9.1f}x"
        print(row)

    # end to end: one sampling run on a full-size bag under each backend
    bag = generate_synthetic(SynthSpec(M=32, seed=1))
    model = ModelParams.init(M=32, L=16, seed=0)
    for n in names:
        saved = {k: getattr(kernels, k) for k in ("knn_propagate", "weighted_draw")}
        for k in saved:
            setattr(kernels, k, getattr(backends[n], k))
        try:
            t, _ = _best(lambda: run_dras(model, bag, SamplingConfig(seed=3)), args.repeat)
        finally:
            for k, v in saved.items():
                setattr(kernels, k, v)
        print(f"run_dras on a 16000-patch bag, {n} kernels: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()

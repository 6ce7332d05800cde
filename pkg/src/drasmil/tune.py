"""Random-search hyperparameter tuning over declarative parameter spaces."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from drasmil.seeding import derive_seed


@dataclass
class Dist:
    kind: str  # log_uniform | uniform | choice
    low: float | None = None
    high: float | None = None
    values: list | None = None
    paired: dict = field(default_factory=dict)  # name -> list aligned with ``values``

    def __post_init__(self):
        if self.kind in ("log_uniform", "uniform"):
            if self.low is None or self.high is None or not self.low < self.high:
                raise ValueError(f"{self.kind} needs low < high")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError("log_uniform needs low > 0")
        elif self.kind == "choice":
            if not self.values:
                raise ValueError("choice needs a non-empty value list")
            for name, vals in self.paired.items():
                if len(vals) != len(self.values):
                    raise ValueError(f"paired list {name!r} length differs from choices")
        else:
            raise ValueError(f"unknown distribution {self.kind!r}")

    def to_json(self) -> dict:
        if self.kind == "choice":
            out = {"dist": "choice", "values": list(self.values)}
            if self.paired:
                out["paired"] = {k: list(v) for k, v in self.paired.items()}
            return out
        return {"dist": self.kind, "low": self.low, "high": self.high}


class ParamSpace(dict):
    """Ordered name -> Dist mapping; draw order follows insertion order."""

    @classmethod
    def from_json(cls, obj) -> "ParamSpace":
        if isinstance(obj, str):
            obj = json.loads(obj)
        space = cls()
        for name, spec in obj.items():
            spec = dict(spec)
            kind = spec.pop("dist")
            space[name] = Dist(kind, spec.get("low"), spec.get("high"), spec.get("values"),
                               spec.get("paired", {}))
        return space

    @classmethod
    def load(cls, path) -> "ParamSpace":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {k: d.to_json() for k, d in self.items()}

    def names(self) -> list[str]:
        out = []
        for k, d in self.items():
            out.append(k)
            out.extend(d.paired)
        return out


TRAIN_SPACE = ParamSpace({
    "learning_rate": Dist("log_uniform", 1e-5, 1e-2),
    "weight_decay": Dist("log_uniform", 1e-10, 1e-2),
    "dropout": Dist("uniform", 0.0, 0.99),
})

SAMPLING_SPACE = ParamSpace({
    "iterations": Dist("choice", values=[2, 4, 6, 8, 10, 12, 16],
                       paired={"samples_per_iteration": [320, 160, 107, 80, 64, 53, 40]}),
    "neighbours": Dist("choice", values=[4, 8, 16, 32, 48, 64]),
    "sampling_random": Dist("uniform", 0.0, 0.75),
    "sampling_random_delta": Dist("log_uniform", 0.0001, 0.5),
})


def sample_config(space: ParamSpace, seed: int) -> dict:
    rng = np.random.default_rng(derive_seed(seed, "config"))
    out = {}
    for name, d in space.items():
        if d.kind == "uniform":
            out[name] = float(rng.uniform(d.low, d.high))
        elif d.kind == "log_uniform":
            x = math.exp(rng.uniform(math.log(d.low), math.log(d.high)))
            out[name] = min(max(x, d.low), d.high)
        else:
            j = int(rng.integers(len(d.values)))
            out[name] = d.values[j]
            for pname, vals in d.paired.items():
                out[pname] = vals[j]
    return out


@dataclass
class TrialRecord:
    trial: int
    config: dict
    objective: float
    seed: int
    repeats: int
    failed: bool = False


def random_search(space: ParamSpace, objective, trials: int, repeats_per_trial: int = 1,
                  seed: int = 0, mode: str = "max", workers: int = 1):
    """Returns ``(best, log)``.

    ``objective(config, seed)`` is evaluated ``repeats_per_trial`` times per
    sampled config with distinct derived seeds and averaged. Non-finite results
    mark the trial failed and exclude it from selection.
    """
    if trials < 1 or repeats_per_trial < 1:
        raise ValueError("trials and repeats must be >= 1")
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'")

    def run(t):
        tseed = derive_seed(seed, "trial", t)
        config = sample_config(space, tseed)
        try:
            vals = [float(objective(config, derive_seed(tseed, "repeat", r)))
                    for r in range(repeats_per_trial)]
            value = float(np.mean(vals))
        except (ArithmeticError, ValueError):
            value = float("nan")
        return TrialRecord(t, config, value, tseed, repeats_per_trial, not math.isfinite(value))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            log = list(ex.map(run, range(trials)))
    else:
        log = [run(t) for t in range(trials)]
    ok = [r for r in log if not r.failed]
    if not ok:
        raise RuntimeError("every trial failed")
    pick = max if mode == "max" else min
    best = pick(ok, key=lambda r: (r.objective, -r.trial) if mode == "max" else (r.objective, r.trial))
    return best, log


def write_log(log, space: ParamSpace, path) -> None:
    names = space.names()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial"] + names + ["objective", "seed", "repeats", "failed"])
        for r in log:
            w.writerow([r.trial] + [repr(r.config[n]) for n in names]
                       + [repr(r.objective), r.seed, r.repeats, int(r.failed)])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

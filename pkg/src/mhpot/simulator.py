"""Trace-driven step-time simulation of synchronous data-parallel training.

Every worker computes for ``alpha + beta * atoms`` seconds. A worker whose
atom total exceeds its running high-water mark pays an extra ``delta``
(allocator growth). The step ends when the slowest worker is done, followed
by an all-reduce costing ``gamma``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import InputError
from .scheduler import MiniBatchSchedule, highwater_events


@dataclass(frozen=True)
class CostModel:
    alpha: float = 5e-3  # s per worker step
    beta: float = 1e-5  # s per atom (1 ms per hundred atoms)
    gamma: float = 10e-3  # s per all-reduce
    delta: float = 50e-3  # s per high-water growth

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise InputError("cost model parameters must be non-negative")


@dataclass
class SimResult:
    step_time: np.ndarray  # (steps,)
    compute: np.ndarray  # (steps, G)
    realloc: np.ndarray  # (steps, G) bool
    idle: np.ndarray  # (steps, G)
    num_samples: int

    @property
    def total_time(self) -> float:
        return float(self.step_time.sum())

    @property
    def realloc_events(self) -> int:
        return int(self.realloc.sum())

    @property
    def throughput(self) -> float:
        t = self.total_time
        return self.num_samples / t if t > 0 else math.inf

    def summary(self) -> dict:
        return {
            "steps": int(len(self.step_time)),
            "total_time": self.total_time,
            "throughput": self.throughput,
            "realloc_events": self.realloc_events,
            "idle_time": float(self.idle.sum()),
            "step_time": step_time_stats(self.step_time),
        }


def simulate(schedule: MiniBatchSchedule, cost: CostModel = CostModel()) -> SimResult:
    totals = schedule.atoms.sum(axis=2).astype(np.float64)
    compute = cost.alpha + cost.beta * totals
    realloc = highwater_events(totals)
    busy = compute + cost.delta * realloc
    step_time = busy.max(axis=1) + cost.gamma
    idle = step_time[:, None] - cost.gamma - busy
    return SimResult(
        step_time=step_time,
        compute=compute,
        realloc=realloc,
        idle=idle,
        num_samples=int(schedule.sample_ids.size),
    )


def nearest_rank(values, pct: float) -> float:
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise InputError("no values")
    rank = max(1, math.ceil(pct / 100.0 * len(x)))
    return float(x[rank - 1])


def step_time_stats(step_time) -> dict:
    x = np.asarray(step_time, dtype=np.float64)
    return {
        "min": float(x.min()),
        "median": nearest_rank(x, 50),
        "mean": float(x.mean()),
        "max": float(x.max()),
        "p95": nearest_rank(x, 95),
    }


def compare(schedules: dict[str, MiniBatchSchedule], cost: CostModel = CostModel(), baseline: str | None = None) -> dict:
    """Simulate each schedule; throughput is reported relative to ``baseline``."""
    if not schedules:
        raise InputError("nothing to compare")
    names = list(schedules)
    ref = schedules[names[0]]
    for name, s in schedules.items():
        if s.num_samples != ref.num_samples or (
            s.population and ref.population and s.population != ref.population
        ):
            raise InputError(f"schedule {name!r} covers a different sample population")
    baseline = names[0] if baseline is None else baseline
    if baseline not in schedules:
        raise InputError(f"unknown baseline {baseline!r}")
    results = {name: simulate(s, cost) for name, s in schedules.items()}
    base_tp = results[baseline].throughput
    report = {"baseline": baseline, "cost_model": asdict(cost), "schedules": {}}
    for name, r in results.items():
        entry = r.summary()
        entry["relative_throughput"] = r.throughput / base_tp
        report["schedules"][name] = entry
    return report


def write_step_csv(result: SimResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "step_time", "max_compute", "idle_total", "realloc_events"))
        for m in range(len(result.step_time)):
            w.writerow(
                (
                    m,
                    repr(float(result.step_time[m])),
                    repr(float(result.compute[m].max())),
                    repr(float(result.idle[m].sum())),
                    int(result.realloc[m].sum()),
                )
            )
    return path


def write_summary_json(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic atom-count traces


def bimodal_trace(
    n: int,
    modes=(15.0, 160.0),
    sigmas=(0.3, 0.25),
    weights=(0.5, 0.5),
    seed: int = 0,
    max_atoms: int = 300,
) -> np.ndarray:
    """Log-normal mixture of atom counts; component k has mean ``modes[k]``."""
    if n < 1:
        raise InputError("trace needs at least one sample")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(modes) or len(sigmas) != len(modes) or np.any(w < 0) or w.sum() <= 0:
        raise InputError("modes, sigmas and weights must align and weights be non-negative")
    rng = np.random.default_rng(seed)
    sizes = np.floor(w / w.sum() * n).astype(np.int64)
    sizes[: n - sizes.sum()] += 1
    parts = [
        rng.lognormal(np.log(m) - 0.5 * s * s, s, size=k) for m, s, k in zip(modes, sigmas, sizes)
    ]
    x = np.concatenate(parts)
    return np.clip(np.rint(x), 1, max_atoms).astype(np.int64)[rng.permutation(n)]


def uniform_trace(n: int, mean_atoms: float) -> np.ndarray:
    """Equal-mean trace with every sample the same size."""
    return np.full(n, max(1, int(round(mean_atoms))), dtype=np.int64)

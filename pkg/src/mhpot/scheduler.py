"""Atom-count aware mini-batch planning for synchronous multi-worker training.

``plan_balanced`` rearranges an epoch in three steps:

1. shuffle, cut into ``S`` near-equal splits and sort each split by atom
   count (descending, ties by sample id);
2. cut every split into chunks of ``G`` samples and consume the chunks in
   column-major order of the (split x rank) matrix: rank 0 of every split,
   then rank 1 of every split, ...; ``B`` consecutive chunks form a mini-batch;
3. distribute each mini-batch over the workers with :func:`greedy_assign`.

Within one split the chunks are therefore consumed in non-increasing order of
total atoms.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import InputError

MODES = ("balanced", "greedy_only", "naive")
CSV_COLUMNS = ("step", "worker", "sample_id", "atoms", "split", "chunk_rank")


@dataclass(frozen=True)
class ScheduleConfig:
    num_workers: int = 4
    batch_size: int = 2
    num_splits: int = 100
    seed: int = 0
    mode: str = "balanced"

    def __post_init__(self):
        if self.num_workers < 1 or self.batch_size < 1 or self.num_splits < 1:
            raise InputError("num_workers, batch_size and num_splits must be >= 1")
        if self.mode not in MODES:
            raise InputError(f"unknown schedule mode {self.mode!r}")


def population_digest(atom_counts) -> str:
    a = np.ascontiguousarray(np.asarray(atom_counts, dtype="<i8"))
    return hashlib.sha256(a.tobytes()).hexdigest()[:16]


@dataclass
class MiniBatchSchedule:
    """Arrays of shape (steps, G, B); ``split``/``chunk_rank`` are -1 when unused."""

    sample_ids: np.ndarray
    atoms: np.ndarray
    split: np.ndarray
    chunk_rank: np.ndarray
    num_samples: int
    population: str = ""
    mode: str = "balanced"

    @property
    def num_steps(self) -> int:
        return self.sample_ids.shape[0]

    @property
    def num_workers(self) -> int:
        return self.sample_ids.shape[1]

    @property
    def batch_size(self) -> int:
        return self.sample_ids.shape[2]

    def worker_totals(self) -> np.ndarray:
        return self.atoms.sum(axis=2)

    def __iter__(self):
        return iter(self.sample_ids)


def greedy_assign(atom_counts, num_workers: int, batch_size: int) -> np.ndarray:
    """LPT with a cardinality cap: returns the worker index of every sample.

    Samples are visited largest first; each goes to the worker with the
    smallest running atom total among workers holding fewer than
    ``batch_size`` samples (lowest index on ties).
    """
    counts = np.asarray(atom_counts)
    if len(counts) != num_workers * batch_size:
        raise InputError(
            f"greedy_assign needs exactly {num_workers * batch_size} samples, got {len(counts)}"
        )
    order = np.argsort(-counts, kind="stable")
    totals = np.zeros(num_workers)
    filled = np.zeros(num_workers, dtype=np.int64)
    out = np.empty(len(counts), dtype=np.int64)
    for k in order:
        open_totals = np.where(filled < batch_size, totals, np.inf)
        w = int(np.argmin(open_totals))
        out[k] = w
        totals[w] += counts[k]
        filled[w] += 1
    return out


def _pack(batches, atom_counts, cfg: ScheduleConfig, split_of=None, rank_of=None, assign=True):
    G, B = cfg.num_workers, cfg.batch_size
    steps = len(batches)
    ids = np.empty((steps, G, B), dtype=np.int64)
    for m, batch in enumerate(batches):
        batch = np.asarray(batch)
        if assign:
            workers = greedy_assign(atom_counts[batch], G, B)
            # stable grouping keeps batch order within a worker
            order = np.argsort(workers, kind="stable")
            ids[m] = batch[order].reshape(G, B)
        else:
            ids[m] = batch.reshape(G, B)
    split = np.full(ids.shape, -1) if split_of is None else split_of[ids]
    rank = np.full(ids.shape, -1) if rank_of is None else rank_of[ids]
    return MiniBatchSchedule(
        sample_ids=ids,
        atoms=atom_counts[ids] if steps else np.zeros(ids.shape, dtype=np.int64),
        split=split,
        chunk_rank=rank,
        num_samples=len(atom_counts),
        population=population_digest(atom_counts),
        mode=cfg.mode,
    )


def _check(atom_counts, cfg: ScheduleConfig) -> np.ndarray:
    counts = np.asarray(atom_counts, dtype=np.int64)
    if counts.ndim != 1:
        raise InputError("atom_counts must be one-dimensional")
    if len(counts) < cfg.num_workers * cfg.batch_size:
        raise InputError(
            f"{len(counts)} samples cannot fill one mini-batch of "
            f"{cfg.num_workers} x {cfg.batch_size}"
        )
    return counts


def split_chunks(atom_counts, cfg: ScheduleConfig) -> list[list[np.ndarray]]:
    """Steps 1-2 input: per split, the list of chunks (sample id arrays) by rank."""
    counts = np.asarray(atom_counts, dtype=np.int64)
    G = cfg.num_workers
    perm = np.random.default_rng(cfg.seed).permutation(len(counts))
    out = []
    for part in np.array_split(perm, cfg.num_splits):
        part = part[np.lexsort((part, -counts[part]))]
        n_chunks = len(part) // G
        out.append([part[r * G : (r + 1) * G] for r in range(n_chunks)])
    return out


def plan_balanced(atom_counts, cfg: ScheduleConfig) -> MiniBatchSchedule:
    counts = _check(atom_counts, cfg)
    splits = split_chunks(counts, cfg)
    split_of = np.full(len(counts), -1)
    rank_of = np.full(len(counts), -1)
    order = []
    max_rank = max((len(c) for c in splits), default=0)
    for r in range(max_rank):
        for s, chunks in enumerate(splits):
            if r < len(chunks):
                order.append(chunks[r])
                split_of[chunks[r]] = s
                rank_of[chunks[r]] = r
    B = cfg.batch_size
    batches = [
        np.concatenate(order[m * B : (m + 1) * B]) for m in range(len(order) // B)
    ]
    if not batches:
        raise InputError("no complete mini-batch after chunking; reduce num_splits")
    return _pack(batches, counts, cfg, split_of, rank_of, assign=True)


def plan_naive(atom_counts, cfg: ScheduleConfig) -> MiniBatchSchedule:
    """Shuffle and cut contiguous mini-batches; ``naive`` mode slices workers
    contiguously, any other mode uses :func:`greedy_assign`."""
    counts = _check(atom_counts, cfg)
    GB = cfg.num_workers * cfg.batch_size
    perm = np.random.default_rng(cfg.seed).permutation(len(counts))
    batches = [perm[m * GB : (m + 1) * GB] for m in range(len(counts) // GB)]
    return _pack(batches, counts, cfg, assign=cfg.mode != "naive")


def plan(atom_counts, cfg: ScheduleConfig) -> MiniBatchSchedule:
    if cfg.mode == "balanced":
        return plan_balanced(atom_counts, cfg)
    return plan_naive(atom_counts, cfg)


# ---------------------------------------------------------------------------
# metrics


def highwater_events(worker_totals) -> np.ndarray:
    """Boolean (steps, G): the worker's total exceeds every earlier total."""
    t = np.asarray(worker_totals, dtype=np.float64)
    prev = np.maximum.accumulate(np.vstack([np.zeros((1, t.shape[1])), t[:-1]]), axis=0)
    return t > prev


def split_monotonicity_violations(schedule: MiniBatchSchedule) -> int:
    """Number of times a split's next consumed chunk holds more atoms than the previous."""
    if np.all(schedule.split < 0):
        return 0
    split = schedule.split.ravel()
    rank = schedule.chunk_rank.ravel()
    atoms = schedule.atoms.ravel()
    step = np.repeat(np.arange(schedule.num_steps), schedule.num_workers * schedule.batch_size)
    chunk_total: dict[tuple[int, int], int] = {}
    first_step: dict[tuple[int, int], int] = {}
    for s, r, a, st in zip(split, rank, atoms, step):
        key = (int(s), int(r))
        chunk_total[key] = chunk_total.get(key, 0) + int(a)
        first_step.setdefault(key, int(st))
    violations = 0
    by_split: dict[int, list[tuple[int, int, int]]] = {}
    for (s, r), tot in chunk_total.items():
        by_split.setdefault(s, []).append((first_step[(s, r)], r, tot))
    for seq in by_split.values():
        seq.sort()
        totals = [t for _, _, t in seq]
        violations += sum(b > a for a, b in zip(totals, totals[1:]))
    return violations


def schedule_metrics(schedule: MiniBatchSchedule, atom_counts=None) -> dict:
    atoms = schedule.atoms if atom_counts is None else np.asarray(atom_counts)[schedule.sample_ids]
    totals = atoms.sum(axis=2)
    mean = totals.mean(axis=1)
    ratio = np.where(mean > 0, totals.max(axis=1) / np.where(mean > 0, mean, 1.0), 1.0)
    hw = highwater_events(totals)
    return {
        "imbalance_ratio": ratio,
        "mean_imbalance_ratio": float(ratio.mean()) if len(ratio) else 1.0,
        "worker_totals": totals,
        "monotonicity_violations": split_monotonicity_violations(schedule),
        "highwater_events": hw,
        "highwater_event_count": int(hw.sum()),
    }


# ---------------------------------------------------------------------------
# CSV export


def write_schedule_csv(schedule: MiniBatchSchedule, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        S, G, B = schedule.sample_ids.shape
        for m in range(S):
            for g in range(G):
                for b in range(B):
                    w.writerow(
                        (
                            m,
                            g,
                            int(schedule.sample_ids[m, g, b]),
                            int(schedule.atoms[m, g, b]),
                            int(schedule.split[m, g, b]),
                            int(schedule.chunk_rank[m, g, b]),
                        )
                    )
    return path


def read_schedule_csv(path, num_samples: int | None = None) -> MiniBatchSchedule:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{path}: empty schedule")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise InputError(f"{path}: missing columns {sorted(missing)}")
    arr = np.array([[int(r[c]) for c in CSV_COLUMNS] for r in rows], dtype=np.int64)
    steps = arr[:, 0].max() + 1
    G = arr[:, 1].max() + 1
    if len(arr) % (steps * G):
        raise InputError(f"{path}: ragged schedule")
    B = len(arr) // (steps * G)
    order = np.lexsort((np.arange(len(arr)), arr[:, 1], arr[:, 0]))
    arr = arr[order].reshape(steps, G, B, len(CSV_COLUMNS))
    if np.any(arr[..., 0] != np.arange(steps)[:, None, None]) or np.any(
        arr[..., 1] != np.arange(G)[None, :, None]
    ):
        raise InputError(f"{path}: every worker needs the same number of samples per step")
    n = int(arr[..., 2].max()) + 1 if num_samples is None else num_samples
    return MiniBatchSchedule(
        sample_ids=arr[..., 2],
        atoms=arr[..., 3],
        split=arr[..., 4],
        chunk_rank=arr[..., 5],
        num_samples=n,
        mode="balanced" if np.any(arr[..., 4] >= 0) else "naive",
    )

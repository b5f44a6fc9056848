"""Synthetic catalog generation, splitting, filtering and temperature mixing."""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import AtomicSystem, InputError, Labels, Sample

TASK_KINDS = ("energy_and_forces", "energy_only", "denoising")
DATASET_MAGIC = b"LAMMDS1"


# ---------------------------------------------------------------------------
# temperature sampling


def temperature_counts(sizes, T: float = 2.0) -> np.ndarray:
    """Virtual subset sizes ``n_max**(1-1/T) * n_k**(1/T)``.

    The largest subset keeps its size; smaller subsets are inflated.
    """
    n = np.asarray(list(sizes), dtype=np.float64)
    if n.size == 0:
        raise InputError("empty size list")
    if np.any(n < 1):
        raise InputError("subset sizes must be >= 1")
    if not T >= 1:
        raise InputError("temperature must be >= 1")
    n_max = n.max()
    r = n_max ** (1.0 - 1.0 / T) * n ** (1.0 / T)
    r[n == n_max] = n_max
    return r


def largest_remainder_round(values) -> np.ndarray:
    """Round to integers preserving ``round(sum(values))``."""
    v = np.asarray(values, dtype=np.float64)
    base = np.floor(v).astype(np.int64)
    total = int(math.floor(v.sum() + 0.5))
    missing = total - int(base.sum())
    if missing > 0:
        frac = v - base
        # stable sort: ties go to the lowest index
        order = np.argsort(-frac, kind="stable")
        base[order[:missing]] += 1
    return base


@dataclass(frozen=True)
class MixPlan:
    sizes: tuple[int, ...]
    repeats: tuple[float, ...]
    temperature: float = 2.0

    @classmethod
    def build(cls, sizes, temperature: float = 2.0) -> MixPlan:
        sizes = tuple(int(s) for s in sizes)
        r = temperature_counts(sizes, temperature)
        return cls(sizes=sizes, repeats=tuple(float(x) for x in r), temperature=temperature)

    def integer_counts(self) -> np.ndarray:
        return largest_remainder_round(self.repeats)


def build_epoch_index(plan: MixPlan, sizes=None, seed: int = 0) -> np.ndarray:
    """Epoch as an (M, 2) array of (subset_id, sample_id) rows.

    Every sample of subset k is repeated ``R_k // n_k`` times; the remaining
    ``R_k % n_k`` extra slots go to evenly spaced sample ids, so the multiset
    depends only on the plan while the order depends on ``seed``.
    """
    sizes = plan.sizes if sizes is None else tuple(int(s) for s in sizes)
    if len(sizes) != len(plan.repeats):
        raise InputError("plan and sizes disagree on the number of subsets")
    counts = plan.integer_counts()
    parts = []
    for k, (n_k, r_k) in enumerate(zip(sizes, counts)):
        q, rem = divmod(int(r_k), n_k)
        ids = np.tile(np.arange(n_k), q)
        if rem:
            extra = (np.arange(rem) * n_k) // rem
            ids = np.concatenate([ids, extra])
        parts.append(np.column_stack([np.full(len(ids), k), ids]))
    index = np.concatenate(parts).astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(index))
    return index[perm]


# ---------------------------------------------------------------------------
# filtering and splitting


def filter_max_atoms(samples, limit: int = 300) -> tuple[list, int]:
    """Drop samples with more than ``limit`` atoms; returns (kept, removed)."""
    if limit < 1:
        raise InputError("limit must be >= 1")
    kept = [s for s in samples if s.natoms <= limit]
    return kept, len(samples) - len(kept)


def split_train_val(samples, val_fraction: float = 0.01, seed: int = 0) -> tuple[list, list]:
    if not 0.0 < val_fraction < 1.0:
        raise InputError("val_fraction must be in (0, 1)")
    n = len(samples)
    if n < 2:
        raise InputError("need at least two samples to split")
    n_val = int(math.floor(val_fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    val_ids = np.sort(perm[:n_val])
    train_ids = np.sort(perm[n_val:])
    return [samples[i] for i in train_ids], [samples[i] for i in val_ids]


# ---------------------------------------------------------------------------
# Morse label oracle


def default_element_params(z: int) -> tuple[float, float, float]:
    """(D_e eV, a 1/A, r_e A) for a pseudo-element; smooth in Z, deterministic."""
    d_e = 0.25 + 0.08 * ((z * 7) % 5)
    a = 1.4 + 0.1 * ((z * 3) % 4)
    r_e = 1.0 + 0.35 * math.log(z + 1.0) / math.log(10.0)
    return d_e, a, r_e


def default_morse_table(elements) -> dict[tuple[int, int], tuple[float, float, float]]:
    """Pair parameters from per-element values: geometric-mean D_e, mean a and r_e."""
    table = {}
    for za in elements:
        for zb in elements:
            da, aa, ra = default_element_params(za)
            db, ab, rb = default_element_params(zb)
            table[(min(za, zb), max(za, zb))] = (
                math.sqrt(da * db),
                0.5 * (aa + ab),
                0.5 * (ra + rb),
            )
    return table


class MorsePotential:
    """Pairwise Morse energy with a C2 polynomial switch between r_on and r_off."""

    def __init__(self, table, r_on: float = 4.0, r_off: float = 5.0):
        if not 0 < r_on < r_off:
            raise InputError("need 0 < r_on < r_off")
        self.table = {(min(a, b), max(a, b)): tuple(map(float, v)) for (a, b), v in table.items()}
        self.r_on = float(r_on)
        self.r_off = float(r_off)
        self.elements = sorted({z for pair in self.table for z in pair})
        lut = np.full(max(self.elements) + 1, -1, dtype=np.int64)
        lut[self.elements] = np.arange(len(self.elements))
        self._lut = lut
        m = len(self.elements)
        self._params = np.full((3, m, m), np.nan)
        for (a, b), (d, alpha, r) in self.table.items():
            ia, ib = lut[a], lut[b]
            self._params[:, ia, ib] = self._params[:, ib, ia] = (d, alpha, r)

    def _switch(self, r):
        x = np.clip((r - self.r_on) / (self.r_off - self.r_on), 0.0, 1.0)
        s = 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x * x)
        ds = -30.0 * x * x * (1.0 - x) ** 2 / (self.r_off - self.r_on)
        return s, ds

    def energy_forces(self, positions, numbers) -> tuple[float, np.ndarray]:
        pos = np.asarray(positions, dtype=np.float64)
        z = np.asarray(numbers)
        n = len(pos)
        if n < 2:
            return 0.0, np.zeros_like(pos)
        if np.any(z > len(self._lut) - 1) or np.any(self._lut[z] < 0):
            raise InputError("element without Morse parameters")
        iu, ju = np.triu_indices(n, 1)
        diff = pos[iu] - pos[ju]
        r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        ti, tj = self._lut[z[iu]], self._lut[z[ju]]
        d_e, a, r_e = (self._params[k, ti, tj] for k in range(3))
        ex = np.exp(-a * (r - r_e))
        v = d_e * ((1.0 - ex) ** 2 - 1.0)
        dv = 2.0 * d_e * a * ex * (1.0 - ex)
        s, ds = self._switch(r)
        energy = float(np.sum(v * s))
        dedr = dv * s + v * ds
        g = (dedr / r)[:, None] * diff  # dE/dx_i for the (i, j) pair
        forces = np.zeros_like(pos)
        np.add.at(forces, iu, -g)
        np.add.at(forces, ju, g)
        return energy, forces


# ---------------------------------------------------------------------------
# synthetic subsets


@dataclass
class SynthSpec:
    """Recipe for one synthetic subset (structure distribution + label transform)."""

    name: str
    task_kind: str = "energy_and_forces"
    head_index: int = 0
    atom_mode: float = 15.0
    atom_sigma: float = 0.35
    min_atoms: int = 2
    max_atoms: int = 320
    elements: list[int] = field(default_factory=lambda: [1, 6, 7, 8])
    element_weights: list[float] | None = None
    morse: dict | None = None  # {(Za, Zb): (D_e, a, r_e)}; default from elements
    r_on: float = 4.0
    r_off: float = 5.0
    energy_offsets: dict[int, float] = field(default_factory=dict)
    energy_scale: float = 1.0
    relax_steps: int = 5
    relax_step: float = 0.02  # A^2/eV
    relax_max_disp: float = 0.1

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise InputError(f"unknown task_kind {self.task_kind!r}")
        if not self.atom_mode > 0:
            raise InputError("atom_mode must be positive")
        if not self.energy_scale > 0:
            raise InputError("energy_scale must be positive")
        if self.min_atoms < 1 or self.max_atoms < self.min_atoms:
            raise InputError("need 1 <= min_atoms <= max_atoms")
        if not self.elements:
            raise InputError("element palette is empty")
        self.energy_offsets = {int(k): float(v) for k, v in self.energy_offsets.items()}
        if self.morse is not None:
            self.morse = {_pair_key(k): tuple(v) for k, v in self.morse.items()}

    @property
    def has_energy(self) -> bool:
        return self.task_kind != "denoising"

    @property
    def has_forces(self) -> bool:
        return self.task_kind == "energy_and_forces"

    def potential(self) -> MorsePotential:
        table = self.morse if self.morse is not None else default_morse_table(self.elements)
        return MorsePotential(table, self.r_on, self.r_off)

    def to_json(self) -> dict:
        d = asdict(self)
        d["energy_offsets"] = {str(k): v for k, v in self.energy_offsets.items()}
        if self.morse is not None:
            d["morse"] = {f"{a}-{b}": list(v) for (a, b), v in self.morse.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> SynthSpec:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**d)


def _pair_key(k):
    if isinstance(k, str):
        a, b = (int(x) for x in k.split("-"))
    else:
        a, b = (int(x) for x in k)
    return (min(a, b), max(a, b))


def _sample_natoms(spec: SynthSpec, rng) -> int:
    mu = math.log(spec.atom_mode) + spec.atom_sigma**2
    n = int(round(math.exp(rng.normal(mu, spec.atom_sigma))))
    return int(np.clip(n, spec.min_atoms, spec.max_atoms))


def _grow_cluster(numbers, pot: MorsePotential, rng) -> np.ndarray:
    """Place atoms one by one next to a random existing atom near its bond length."""
    n = len(numbers)
    pos = np.zeros((n, 3))
    lut = pot._lut
    r_e = pot._params[2]
    for k in range(1, n):
        best, best_gap = None, -np.inf
        for _ in range(30):
            anchor = rng.integers(k)
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            bond = r_e[lut[numbers[k]], lut[numbers[anchor]]] * rng.uniform(0.95, 1.15)
            trial = pos[anchor] + bond * v
            rmin = r_e[lut[numbers[k]], lut[numbers[:k]]]
            gap = np.min(np.linalg.norm(pos[:k] - trial, axis=1) / rmin)
            if gap >= 0.85:
                best = trial
                break
            if gap > best_gap:
                best, best_gap = trial, gap
        pos[k] = best
    return pos - pos.mean(axis=0)


def relax(positions, numbers, pot: MorsePotential, steps: int, step: float, max_disp: float):
    pos = np.array(positions, dtype=np.float64)
    for _ in range(steps):
        _, f = pot.energy_forces(pos, numbers)
        disp = step * f
        norm = np.linalg.norm(disp, axis=1, keepdims=True)
        disp *= np.minimum(1.0, max_disp / np.maximum(norm, 1e-300))
        pos += disp
    return pos


def transform_labels(spec: SynthSpec, numbers, energy: float, forces):
    offset = sum(spec.energy_offsets.get(int(z), 0.0) for z in numbers)
    return spec.energy_scale * energy + offset, spec.energy_scale * np.asarray(forces)


def synth_one(spec: SynthSpec, ordinal: int, base_seed: int, subset_id: int = 0) -> Sample:
    rng = np.random.default_rng(base_seed + ordinal)
    pot = spec.potential()
    n = _sample_natoms(spec, rng)
    p = spec.element_weights
    if p is not None:
        p = np.asarray(p, dtype=np.float64)
        p = p / p.sum()
    numbers = rng.choice(np.asarray(spec.elements), size=n, p=p)
    pos = _grow_cluster(numbers, pot, rng)
    pos = relax(pos, numbers, pot, spec.relax_steps, spec.relax_step, spec.relax_max_disp)
    system = AtomicSystem(pos, numbers)
    if spec.task_kind == "denoising":
        labels = Labels.make(dataset_index=spec.head_index)
    else:
        e, f = pot.energy_forces(pos, numbers)
        e, f = transform_labels(spec, numbers, e, f)
        labels = Labels.make(
            energy=e,
            forces=f if spec.has_forces else None,
            dataset_index=spec.head_index,
        )
    return Sample(system=system, labels=labels, subset_id=subset_id)


def _synth_range(args):
    spec, start, stop, seed, subset_id = args
    return [synth_one(spec, k, seed, subset_id) for k in range(start, stop)]


def max_workers() -> int:
    env = os.environ.get("LAMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"LAMM_THREADS must be an integer, got {env!r}") from None
    return 1


def synth_generate(spec: SynthSpec, count: int, seed: int = 0, subset_id: int = 0) -> list[Sample]:
    """Generate ``count`` samples; sample k uses seed ``seed + k`` (order independent)."""
    workers = min(max_workers(), max(1, count // 64))
    if workers <= 1:
        return [synth_one(spec, k, seed, subset_id) for k in range(count)]
    bounds = np.linspace(0, count, workers * 4 + 1).astype(int)
    jobs = [(spec, a, b, seed, subset_id) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(workers) as ex:
        return [s for part in ex.map(_synth_range, jobs) for s in part]


# ---------------------------------------------------------------------------
# catalog


@dataclass
class SubsetMeta:
    name: str
    task_kind: str
    size: int
    head_index: int
    has_energy: bool
    has_forces: bool

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise InputError(f"unknown task_kind {self.task_kind!r}")
        expect_e = self.task_kind != "denoising"
        expect_f = self.task_kind == "energy_and_forces"
        if (self.has_energy, self.has_forces) != (expect_e, expect_f):
            raise InputError(f"label flags inconsistent with task_kind for {self.name!r}")


@dataclass
class Subset:
    meta: SubsetMeta
    samples: list[Sample]
    spec: SynthSpec | None = None


class Catalog:
    """Ordered collection of subsets; subset ids are positions in the list."""

    def __init__(self, subsets: list[Subset] | None = None):
        self.subsets: list[Subset] = list(subsets or [])

    def __len__(self):
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)

    def __getitem__(self, k) -> Subset:
        return self.subsets[k]

    @property
    def names(self) -> list[str]:
        return [s.meta.name for s in self.subsets]

    @property
    def num_heads(self) -> int:
        return 1 + max(s.meta.head_index for s in self.subsets)

    def by_name(self, name: str) -> Subset:
        for s in self.subsets:
            if s.meta.name == name:
                return s
        raise InputError(f"no subset named {name!r}")

    def add(self, spec: SynthSpec, samples: list[Sample]):
        sid = len(self.subsets)
        samples = [
            s if s.subset_id == sid else Sample(s.system, s.labels, sid) for s in samples
        ]
        meta = SubsetMeta(
            name=spec.name,
            task_kind=spec.task_kind,
            size=len(samples),
            head_index=spec.head_index,
            has_energy=spec.has_energy,
            has_forces=spec.has_forces,
        )
        self.subsets.append(Subset(meta, samples, spec))


def synth_catalog(specs, counts, seed: int = 0) -> Catalog:
    cat = Catalog()
    for k, (spec, count) in enumerate(zip(specs, counts)):
        # separate seed ranges per subset
        cat.add(spec, synth_generate(spec, count, seed + 1_000_003 * k, subset_id=k))
    return cat


def write_samples(path, samples) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(samples)))
        for s in samples:
            n = s.natoms
            fh.write(struct.pack("<I", n))
            fh.write(np.ascontiguousarray(s.system.positions, dtype="<f8").tobytes())
            fh.write(np.asarray(s.system.numbers, dtype=np.uint8).tobytes())
            mask = s.labels.energy_mask | (s.labels.force_mask << 1)
            fh.write(struct.pack("<B", mask))
            if s.labels.energy_mask:
                fh.write(struct.pack("<d", s.labels.energy))
            if s.labels.force_mask:
                fh.write(np.ascontiguousarray(s.labels.forces, dtype="<f8").tobytes())


def read_samples(path, dataset_index: int = 0, subset_id: int = 0) -> list[Sample]:
    try:
        return _read_samples(Path(path).read_bytes(), path, dataset_index, subset_id)
    except InputError:
        raise
    except (struct.error, ValueError, IndexError) as e:
        raise InputError(f"{path}: truncated or corrupt sample file ({e})") from None


def _read_samples(data: bytes, path, dataset_index: int, subset_id: int) -> list[Sample]:
    if data[:7] != DATASET_MAGIC:
        raise InputError(f"{path}: bad magic")
    (count,) = struct.unpack_from("<Q", data, 7)
    off = 15
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        pos = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3)
        off += 24 * n
        z = np.frombuffer(data, np.uint8, n, off).astype(np.int64)
        off += n
        mask = data[off]
        off += 1
        energy = forces = None
        if mask & 1:
            (energy,) = struct.unpack_from("<d", data, off)
            off += 8
        if mask & 2:
            forces = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3)
            off += 24 * n
        out.append(
            Sample(
                AtomicSystem(pos, z),
                Labels.make(energy=energy, forces=forces, dataset_index=dataset_index),
                subset_id,
            )
        )
    if off != len(data):
        raise InputError(f"{path}: trailing bytes")
    return out


def save_catalog(catalog: Catalog, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, sub in enumerate(catalog):
        fname = f"subset_{k:02d}.bin"
        write_samples(directory / fname, sub.samples)
        entry = asdict(sub.meta)
        entry["file"] = fname
        if sub.spec is not None:
            entry["spec"] = sub.spec.to_json()
        entries.append(entry)
    path = directory / "catalog.json"
    path.write_text(json.dumps({"subsets": entries}, indent=2) + "\n")
    return path


def load_catalog(directory) -> Catalog:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "catalog.json").read_text())
    except FileNotFoundError:
        raise InputError(f"no catalog.json in {directory}") from None
    cat = Catalog()
    for k, entry in enumerate(meta["subsets"]):
        entry = dict(entry)
        fname = entry.pop("file")
        spec = entry.pop("spec", None)
        m = SubsetMeta(**entry)
        samples = read_samples(directory / fname, m.head_index, k)
        if len(samples) != m.size:
            raise InputError(f"{fname}: size mismatch with catalog.json")
        cat.subsets.append(Subset(m, samples, SynthSpec.from_json(spec) if spec else None))
    return cat


def default_catalog_specs() -> list[SynthSpec]:
    """Six subsets with ~15 and ~160 atom modes and distinct label transforms."""
    organic = [1, 6, 7, 8]
    inorganic = [1, 8, 13, 14, 26]
    return [
        SynthSpec("cat_large", "energy_and_forces", 0, atom_mode=160, atom_sigma=0.25,
                  elements=inorganic, energy_offsets={1: -3.4, 8: -7.2, 13: -3.7, 14: -5.4, 26: -8.3}),
        SynthSpec("oxide_large", "energy_and_forces", 1, atom_mode=140, atom_sigma=0.25,
                  elements=[8, 13, 26], energy_offsets={8: -6.9, 13: -3.1, 26: -7.7}, energy_scale=1.1),
        SynthSpec("mol_small", "energy_and_forces", 2, atom_mode=14, elements=organic,
                  energy_offsets={1: -13.6, 6: -1029.0, 7: -1484.0, 8: -2041.0}, energy_scale=0.95),
        SynthSpec("mol_medium", "energy_and_forces", 3, atom_mode=17, elements=organic,
                  energy_offsets={1: -13.2, 6: -1027.5, 7: -1482.1, 8: -2039.9}, energy_scale=1.05),
        SynthSpec("mol_energy", "energy_only", 4, atom_mode=50, atom_sigma=0.3, elements=organic,
                  energy_offsets={1: -13.9, 6: -1030.2, 7: -1485.3, 8: -2042.4}),
        SynthSpec("mol_unlabeled", "denoising", 5, atom_mode=46, atom_sigma=0.3, elements=organic),
    ]

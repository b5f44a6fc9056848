"""Geometric and sample types shared across the package."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

MAX_Z = 118
DEFAULT_CUTOFF = 5.0


class InputError(ValueError):
    """Raised when caller-supplied data or configuration is invalid."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AtomicSystem:
    positions: np.ndarray  # (N, 3), Angstrom
    numbers: np.ndarray  # (N,)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        z = np.asarray(self.numbers)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InputError(f"positions must have shape (N, 3), got {pos.shape}")
        if len(pos) < 1:
            raise InputError("a system needs at least one atom")
        if z.shape != (len(pos),):
            raise InputError("numbers must have one entry per atom")
        if not np.all(np.isfinite(pos)):
            raise InputError("non-finite coordinate")
        if not np.issubdtype(z.dtype, np.integer):
            if not np.all(np.equal(np.mod(z, 1), 0)):
                raise InputError("atomic numbers must be integers")
        z = z.astype(np.int64)
        if z.min() < 1 or z.max() > MAX_Z:
            raise InputError(f"atomic numbers must lie in [1, {MAX_Z}]")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "numbers", _frozen(z))

    @property
    def natoms(self) -> int:
        return len(self.numbers)

    def with_positions(self, positions: np.ndarray) -> AtomicSystem:
        return AtomicSystem(positions, self.numbers)


@dataclass(frozen=True, eq=False)
class Labels:
    """Energy/force labels with presence masks and the head (dataset) index."""

    energy: float | None = None
    forces: np.ndarray | None = None
    energy_mask: int = 0
    force_mask: int = 0
    dataset_index: int = 0

    def __post_init__(self):
        if self.energy_mask not in (0, 1) or self.force_mask not in (0, 1):
            raise InputError("masks must be 0 or 1")
        if self.energy_mask != int(self.energy is not None):
            raise InputError("energy mask inconsistent with energy presence")
        if self.force_mask != int(self.forces is not None):
            raise InputError("force mask inconsistent with force presence")
        if self.energy is not None:
            if not np.isfinite(self.energy):
                raise InputError("non-finite energy label")
            object.__setattr__(self, "energy", float(self.energy))
        if self.forces is not None:
            f = np.asarray(self.forces, dtype=np.float64)
            if f.ndim != 2 or f.shape[1] != 3:
                raise InputError("forces must have shape (N, 3)")
            object.__setattr__(self, "forces", _frozen(f))
        if self.dataset_index < 0:
            raise InputError("dataset_index must be non-negative")

    @classmethod
    def make(cls, energy=None, forces=None, dataset_index=0) -> Labels:
        return cls(
            energy=energy,
            forces=forces,
            energy_mask=int(energy is not None),
            force_mask=int(forces is not None),
            dataset_index=dataset_index,
        )


@dataclass(frozen=True, eq=False)
class Sample:
    system: AtomicSystem
    labels: Labels = field(default_factory=Labels)
    subset_id: int = 0

    def __post_init__(self):
        f = self.labels.forces
        if f is not None and len(f) != self.system.natoms:
            raise InputError(
                f"forces have {len(f)} rows for a {self.system.natoms}-atom system"
            )

    @property
    def natoms(self) -> int:
        return self.system.natoms


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Directed pairs (i, j); ``unit`` points from atom j to atom i."""

    i: np.ndarray
    j: np.ndarray
    distance: np.ndarray
    unit: np.ndarray
    cutoff: float

    def __len__(self) -> int:
        return len(self.i)

    @property
    def pairs(self) -> list[tuple[int, int, float, np.ndarray]]:
        return [
            (int(a), int(b), float(d), u)
            for a, b, d, u in zip(self.i, self.j, self.distance, self.unit)
        ]


def build_neighbor_list(system: AtomicSystem, cutoff: float = DEFAULT_CUTOFF) -> NeighborList:
    """All ordered pairs closer than ``cutoff`` (strict), sorted by (i, j)."""
    if not cutoff > 0:
        raise InputError("cutoff must be positive")
    pos = np.asarray(system.positions, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise InputError("non-finite coordinate")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    mask = dist < cutoff
    np.fill_diagonal(mask, False)
    i, j = np.nonzero(mask)
    d = dist[i, j]
    if np.any(d == 0.0):
        raise InputError("coincident atoms")
    unit = diff[i, j] / d[:, None]
    return NeighborList(i=i, j=j, distance=d, unit=unit, cutoff=float(cutoff))


def composition_vector(system: AtomicSystem) -> dict[int, int]:
    counts = Counter(int(z) for z in system.numbers)
    return dict(sorted(counts.items()))

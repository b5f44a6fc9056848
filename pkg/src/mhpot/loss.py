"""Masked multi-head loss, linear reference energies and label normalisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InputError, Labels, Sample, composition_vector


@dataclass(frozen=True)
class LossConfig:
    energy_weight: float = 1.0
    force_weight: float = 1.0

    def __post_init__(self):
        if self.energy_weight < 0 or self.force_weight < 0:
            raise InputError("loss weights must be non-negative")
        if self.energy_weight == 0 and self.force_weight == 0:
            raise InputError("at least one loss weight must be positive")


@dataclass
class BatchTargets:
    """Labels of B samples laid out to match a batched forward pass."""

    energy: np.ndarray  # (B,)
    energy_mask: np.ndarray  # (B,)
    forces: np.ndarray  # (N_total, 3)
    force_mask: np.ndarray  # (B,)
    head: np.ndarray  # (B,)
    natoms: np.ndarray  # (B,)

    @classmethod
    def from_samples(cls, samples) -> BatchTargets:
        energy, e_mask, f_mask, head, natoms, forces = [], [], [], [], [], []
        for s in samples:
            lab = s.labels
            energy.append(lab.energy if lab.energy_mask else 0.0)
            e_mask.append(lab.energy_mask)
            f_mask.append(lab.force_mask)
            head.append(lab.dataset_index)
            natoms.append(s.natoms)
            forces.append(lab.forces if lab.force_mask else np.zeros((s.natoms, 3)))
        return cls(
            energy=np.asarray(energy, dtype=np.float64),
            energy_mask=np.asarray(e_mask, dtype=np.float64),
            forces=np.concatenate(forces).astype(np.float64),
            force_mask=np.asarray(f_mask, dtype=np.float64),
            head=np.asarray(head, dtype=np.int64),
            natoms=np.asarray(natoms, dtype=np.int64),
        )

    @property
    def atom_batch(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.natoms)), self.natoms)


@dataclass
class LossResult:
    loss: float
    energy_term: float
    force_term: float
    no_energy_labels: bool
    no_force_labels: bool
    d_energy: np.ndarray | None = None  # (B, D)
    d_forces: np.ndarray | None = None  # (N, 3, D)


def masked_loss(
    targets: BatchTargets,
    energy_pred: np.ndarray,
    forces_pred: np.ndarray,
    cfg: LossConfig = LossConfig(),
    with_grad: bool = False,
) -> LossResult:
    """Masked energy MAE plus size-balanced per-atom L2 force error.

    Only channel ``head[i]`` of sample i contributes. A term whose mask sum is
    zero is defined as 0 and flagged in the result.
    """
    B = len(targets.natoms)
    D = energy_pred.shape[1]
    if energy_pred.shape[0] != B or forces_pred.shape[:2] != (targets.forces.shape[0], 3):
        raise InputError("prediction shapes do not match the targets")
    if np.any(targets.head >= D) or np.any(targets.head < 0):
        raise InputError("dataset index outside the prediction channels")

    rows = np.arange(B)
    atom_b = targets.atom_batch
    n_e = targets.energy_mask.sum()
    n_f = targets.force_mask.sum()

    e_sel = energy_pred[rows, targets.head]
    e_res = targets.energy - e_sel
    energy_term = 0.0
    if n_e > 0:
        energy_term = cfg.energy_weight / n_e * float(np.sum(targets.energy_mask * np.abs(e_res)))

    atom_head = targets.head[atom_b]
    f_sel = forces_pred[np.arange(len(atom_b)), :, atom_head]  # (N, 3)
    f_res = targets.forces - f_sel
    f_norm = np.sqrt(np.einsum("ij,ij->i", f_res, f_res))
    atom_w = (targets.force_mask / targets.natoms)[atom_b]
    force_term = 0.0
    if n_f > 0:
        force_term = cfg.force_weight / n_f * float(np.sum(atom_w * f_norm))

    out = LossResult(
        loss=energy_term + force_term,
        energy_term=energy_term,
        force_term=force_term,
        no_energy_labels=bool(n_e == 0),
        no_force_labels=bool(n_f == 0),
    )
    if with_grad:
        d_energy = np.zeros_like(energy_pred)
        if n_e > 0:
            d_energy[rows, targets.head] = -cfg.energy_weight / n_e * targets.energy_mask * np.sign(e_res)
        d_forces = np.zeros_like(forces_pred)
        if n_f > 0:
            safe = np.where(f_norm > 0, f_norm, 1.0)
            g = -(cfg.force_weight / n_f * atom_w / safe)[:, None] * f_res
            g[f_norm == 0] = 0.0
            d_forces[np.arange(len(atom_b)), :, atom_head] = g
        out.d_energy, out.d_forces = d_energy, d_forces
    return out


# ---------------------------------------------------------------------------
# linear reference energies


def composition_matrix(samples, elements=None) -> tuple[np.ndarray, list[int]]:
    comps = [composition_vector(s.system) for s in samples]
    if elements is None:
        elements = sorted({z for c in comps for z in c})
    col = {z: k for k, z in enumerate(elements)}
    A = np.zeros((len(samples), len(elements)))
    for r, c in enumerate(comps):
        for z, n in c.items():
            if z in col:
                A[r, col[z]] = n
    return A, list(elements)


def fit_reference(samples) -> dict[int, float]:
    """Minimum-norm least-squares per-element energies from energy-labelled samples."""
    labelled = [s for s in samples if s.labels.energy_mask]
    if not labelled:
        raise InputError("no energy labels: reference energies undefined")
    A, elements = composition_matrix(labelled)
    y = np.array([s.labels.energy for s in labelled])
    rho, *_ = np.linalg.lstsq(A, y, rcond=None)
    return {z: float(r) for z, r in zip(elements, rho)}


def reference_energy(sample_or_system, rho: dict[int, float]) -> float:
    system = getattr(sample_or_system, "system", sample_or_system)
    return float(sum(rho.get(z, 0.0) * n for z, n in composition_vector(system).items()))


@dataclass
class HeadNormalizer:
    rho: dict[int, float] = field(default_factory=dict)
    energy_mean: float = 0.0
    energy_std: float = 1.0
    force_std: float = 1.0

    def __post_init__(self):
        if not (self.energy_std > 0 and self.force_std > 0):
            raise InputError("normaliser standard deviations must be positive")

    def to_json(self) -> dict:
        return {
            "rho": {str(z): v for z, v in self.rho.items()},
            "energy_mean": self.energy_mean,
            "energy_std": self.energy_std,
            "force_std": self.force_std,
        }

    @classmethod
    def from_json(cls, d) -> HeadNormalizer:
        return cls(
            rho={int(z): float(v) for z, v in d["rho"].items()},
            energy_mean=float(d["energy_mean"]),
            energy_std=float(d["energy_std"]),
            force_std=float(d["force_std"]),
        )


class ReferenceTable:
    """Per-head reference energies and normalisers, fit on training data only."""

    def __init__(self, heads: dict[int, HeadNormalizer] | None = None):
        self.heads: dict[int, HeadNormalizer] = dict(heads or {})

    def __getitem__(self, d: int) -> HeadNormalizer:
        try:
            return self.heads[int(d)]
        except KeyError:
            raise InputError(f"no reference entry for dataset index {d}") from None

    def __contains__(self, d) -> bool:
        return int(d) in self.heads

    def to_json(self) -> dict:
        return {str(d): h.to_json() for d, h in sorted(self.heads.items())}

    @classmethod
    def from_json(cls, d) -> ReferenceTable:
        return cls({int(k): HeadNormalizer.from_json(v) for k, v in d.items()})

    @classmethod
    def fit(cls, samples, force_samples=None) -> ReferenceTable:
        """Fit every head present in ``samples``.

        ``force_samples`` optionally supplies samples whose force labels define
        the force scale (e.g. pseudo-forces drawn for unlabeled structures).
        """
        by_head: dict[int, list[Sample]] = {}
        for s in samples:
            by_head.setdefault(s.labels.dataset_index, []).append(s)
        f_by_head: dict[int, list[Sample]] = {}
        for s in force_samples if force_samples is not None else samples:
            f_by_head.setdefault(s.labels.dataset_index, []).append(s)
        heads = {}
        for d in sorted(set(by_head) | set(f_by_head)):
            group = by_head.get(d, [])
            norm = HeadNormalizer()
            if any(s.labels.energy_mask for s in group):
                norm.rho = fit_reference(group)
                resid = np.array(
                    [s.labels.energy - reference_energy(s, norm.rho) for s in group if s.labels.energy_mask]
                )
                norm.energy_mean = float(resid.mean())
                std = float(resid.std())
                norm.energy_std = std if std > 1e-12 else 1.0
            comps = [s.labels.forces.ravel() for s in f_by_head.get(d, []) if s.labels.force_mask]
            if comps:
                std = float(np.concatenate(comps).std())
                norm.force_std = std if std > 1e-12 else 1.0
            heads[d] = norm
        return cls(heads)


def normalize_labels(sample: Sample, table: ReferenceTable) -> Sample:
    norm = table[sample.labels.dataset_index]
    lab = sample.labels
    energy = forces = None
    if lab.energy_mask:
        energy = (lab.energy - reference_energy(sample, norm.rho) - norm.energy_mean) / norm.energy_std
    if lab.force_mask:
        forces = lab.forces / norm.force_std
    return Sample(sample.system, Labels.make(energy, forces, lab.dataset_index), sample.subset_id)


def denormalize_energy(energy, system, d: int, table: ReferenceTable) -> float:
    norm = table[d]
    return float(energy) * norm.energy_std + norm.energy_mean + reference_energy(system, norm.rho)


def denormalize_forces(forces, d: int, table: ReferenceTable) -> np.ndarray:
    return np.asarray(forces) * table[d].force_std


def denormalize_prediction(energy, forces, system, d: int, table: ReferenceTable):
    return denormalize_energy(energy, system, d, table), denormalize_forces(forces, d, table)

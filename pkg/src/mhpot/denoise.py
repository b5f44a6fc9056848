"""Pseudo-force labels for coordinate denoising.

Two labelling schemes are supported:

* ``baseline``: displace every atom by an independent Gaussian vector ``dx_i``
  and use ``-dx_i`` as its force label.
* ``centered``: subtract the mean displacement first, so the label of each
  atom is ``-(dx_i - mean(dx))``. Labels then sum to zero and are a function
  of the (original, noisy) geometry pair alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AtomicSystem, InputError, Labels, Sample

SCHEMES = ("baseline", "centered")


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.3
    scheme: str = "centered"
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError("sigma must be positive")
        if self.scheme not in SCHEMES:
            raise InputError(f"unknown noise scheme {self.scheme!r}")


def displacements_to_labels(dx: np.ndarray, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (applied displacement, pseudo-force label) for raw noise ``dx``."""
    dx = np.asarray(dx, dtype=np.float64)
    if scheme == "centered":
        dx = dx - dx.mean(axis=0, keepdims=True)
    elif scheme != "baseline":
        raise InputError(f"unknown noise scheme {scheme!r}")
    return dx, -dx


def apply_noise(system: AtomicSystem, cfg: NoiseConfig) -> tuple[AtomicSystem, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    dx = rng.normal(0.0, cfg.sigma, size=(system.natoms, 3))
    shift, labels = displacements_to_labels(dx, cfg.scheme)
    noisy = system.with_positions(system.positions + shift)
    if cfg.scheme == "centered":
        # exact identity label = x - x_noisy, independent of rounding in the shift
        labels = system.positions - noisy.positions
    return noisy, labels


def noisy_sample(sample: Sample, cfg: NoiseConfig) -> Sample:
    """Denoising training sample: noisy structure, pseudo-forces, no energy."""
    noisy, labels = apply_noise(sample.system, cfg)
    return Sample(
        system=noisy,
        labels=Labels.make(forces=labels, dataset_index=sample.labels.dataset_index),
        subset_id=sample.subset_id,
    )

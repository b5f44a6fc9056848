"""Pre-training, fine-tuning and denoising benchmarks for the toy potential.

A mini-batch of ``G * B`` samples comes from the scheduler. Each of the
``G`` simulated workers evaluates the masked loss on its own ``B`` samples;
gradients are averaged over workers in worker order, clipped, and applied
with an RMS-scaled step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import InputError, Labels, Sample
from .dataset import Catalog, MixPlan, Subset, build_epoch_index, filter_max_atoms, split_train_val
from .denoise import NoiseConfig, noisy_sample
from .loss import (
    BatchTargets,
    LossConfig,
    ReferenceTable,
    denormalize_energy,
    denormalize_forces,
    masked_loss,
    normalize_labels,
)
from .model import (
    Graph,
    ModelConfig,
    backward,
    forward,
    init_params,
    reset_heads,
    save_checkpoint,
)
from .scheduler import ScheduleConfig, plan

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")


class TrainingError(RuntimeError):
    """Raised when training diverges."""


@dataclass
class TrainConfig:
    max_steps: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine" (decays to lr * lr_min_factor)
    lr_min_factor: float = 0.05
    clip_norm: float = 10.0
    rms_decay: float = 0.99
    eps: float = 1e-8
    num_workers: int = 2
    batch_size: int = 4
    num_splits: int = 100
    schedule_mode: str = "balanced"
    seed: int = 0
    val_every: int = 50
    checkpoint_every: int = 0
    energy_threshold: float | None = None  # meV/atom
    force_threshold: float | None = None  # meV/A (mA for pseudo-forces)
    energy_weight: float = 1.0
    force_weight: float = 1.0
    noise_sigma: float = 0.3
    noise_scheme: str = "centered"
    val_fraction: float = 0.01
    max_atoms: int = 300
    max_val_samples: int | None = None

    def __post_init__(self):
        if self.max_steps < 0:
            raise InputError("max_steps must be >= 0")
        if not self.lr > 0:
            raise InputError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise InputError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.val_every < 1:
            raise InputError("val_every must be >= 1")
        LossConfig(self.energy_weight, self.force_weight)
        NoiseConfig(self.noise_sigma, self.noise_scheme)

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.max_steps == 0:
            return self.lr
        frac = min(step / self.max_steps, 1.0)
        lo = self.lr * self.lr_min_factor
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def schedule_config(self, seed: int, num_samples: int | None = None) -> ScheduleConfig:
        """Schedule for one epoch; splits are capped so each holds a full mini-batch."""
        splits = self.num_splits
        if num_samples is not None:
            splits = max(1, min(splits, num_samples // (self.num_workers * self.batch_size)))
        return ScheduleConfig(self.num_workers, self.batch_size, splits, seed, self.schedule_mode)


@dataclass
class RunMetrics:
    """Validation history; MAEs in meV/atom and meV/A (mA for pseudo-forces)."""

    steps: list[int] = field(default_factory=list)
    energy_mae: list[float | None] = field(default_factory=list)
    force_mae: list[float | None] = field(default_factory=list)
    train_loss: list[float | None] = field(default_factory=list)
    per_subset: list[dict] = field(default_factory=list)
    energy_threshold: float | None = None
    force_threshold: float | None = None
    flags: list[str] = field(default_factory=list)

    def record(self, step, energy, force, loss, per_subset):
        self.steps.append(int(step))
        self.energy_mae.append(energy)
        self.force_mae.append(force)
        self.train_loss.append(loss)
        self.per_subset.append(per_subset)

    @staticmethod
    def _first_below(steps, values, threshold):
        if threshold is None:
            return None
        for s, v in zip(steps, values):
            if v is not None and v <= threshold:
                return s
        return None

    @property
    def steps_to_threshold(self) -> dict:
        """First validation step at or below each threshold; None means not reached."""
        return {
            "energy": self._first_below(self.steps, self.energy_mae, self.energy_threshold),
            "forces": self._first_below(self.steps, self.force_mae, self.force_threshold),
        }

    @property
    def best_energy_mae(self) -> float | None:
        vals = [v for v in self.energy_mae if v is not None]
        return min(vals) if vals else None

    @property
    def best_force_mae(self) -> float | None:
        vals = [v for v in self.force_mae if v is not None]
        return min(vals) if vals else None

    def summary(self) -> dict:
        return {
            "steps_to_threshold": self.steps_to_threshold,
            "energy_threshold": self.energy_threshold,
            "force_threshold": self.force_threshold,
            "best_energy_mae": self.best_energy_mae,
            "best_force_mae": self.best_force_mae,
            "final_energy_mae": self.energy_mae[-1] if self.energy_mae else None,
            "final_force_mae": self.force_mae[-1] if self.force_mae else None,
            "validations": len(self.steps),
            "flags": list(self.flags),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)

        def fmt(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "split", "energy_mae", "force_mae", "loss"))
            for k, step in enumerate(self.steps):
                w.writerow((step, "val", fmt(self.energy_mae[k]), fmt(self.force_mae[k]), fmt(self.train_loss[k])))
                for name, m in sorted(self.per_subset[k].items()):
                    w.writerow((step, f"val/{name}", fmt(m.get("energy_mae")), fmt(m.get("force_mae")), ""))
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    table: ReferenceTable
    metrics: RunMetrics
    checkpoint: Path | None = None


# ---------------------------------------------------------------------------
# optimiser


class RMSScaled:
    """Momentum-free per-parameter RMS scaling.

    The running mean of squared gradients is bias-corrected so the first
    steps are not inflated by the zero initial state.
    """

    def __init__(self, params, lr, decay=0.99, eps=1e-8):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        corr = 1.0 - self.decay**self.t
        for k, g in grads.items():
            sq = self.sq[k]
            sq *= self.decay
            sq += (1.0 - self.decay) * g * g
            params[k] -= self.lr * g / (np.sqrt(sq / corr) + self.eps)


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedSubset:
    name: str
    task_kind: str
    head: int
    train: list[Sample]
    val: list[Sample]
    removed: int = 0

    @property
    def denoising(self) -> bool:
        return self.task_kind == "denoising"


def _with_head(samples, head: int, subset_id: int):
    return [
        s if (s.labels.dataset_index == head and s.subset_id == subset_id)
        else Sample(s.system, replace(s.labels, dataset_index=head), subset_id)
        for s in samples
    ]


def prepare_subsets(subsets, cfg: TrainConfig, heads=None) -> list[PreparedSubset]:
    out = []
    for k, sub in enumerate(subsets):
        head = sub.meta.head_index if heads is None else heads[k]
        kept, removed = filter_max_atoms(sub.samples, cfg.max_atoms)
        kept = _with_head(kept, head, k)
        train, val = split_train_val(kept, cfg.val_fraction, seed=cfg.seed + 7919 * k)
        if cfg.max_val_samples is not None:
            val = val[: cfg.max_val_samples]
        out.append(PreparedSubset(sub.meta.name, sub.meta.task_kind, head, train, val, removed))
    return out


def _noise_seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _fixed_val_sets(prepared, cfg: TrainConfig, scheme: str) -> list[list[Sample]]:
    """Validation samples; unlabeled structures get one fixed noise draw each."""
    sets = []
    for k, p in enumerate(prepared):
        if p.denoising:
            sets.append(
                [
                    noisy_sample(s, NoiseConfig(cfg.noise_sigma, scheme, _noise_seed(cfg.seed, 99991, k, i)))
                    for i, s in enumerate(p.val)
                ]
            )
        else:
            sets.append(list(p.val))
    return sets


def fit_table(prepared, cfg: TrainConfig, scheme: str) -> ReferenceTable:
    """Reference energies and scales from the training splits only."""
    labelled, force_src = [], []
    for k, p in enumerate(prepared):
        if p.denoising:
            draw = p.train[:2000]
            force_src += [
                noisy_sample(s, NoiseConfig(cfg.noise_sigma, scheme, _noise_seed(cfg.seed, 77773, k, i)))
                for i, s in enumerate(draw)
            ]
        else:
            labelled += p.train
            force_src += p.train
    return ReferenceTable.fit(labelled, force_samples=force_src)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(params, cfg: ModelConfig, systems, batch: int = 64):
    """Normalised predictions: list of (energies (D,), forces (N, 3, D))."""
    out = []
    for a in range(0, len(systems), batch):
        chunk = systems[a : a + batch]
        g = Graph(chunk, cfg)
        energy, forces, _ = forward(g, params, cfg)
        offs = np.concatenate([[0], np.cumsum(g.natoms)])
        for b in range(len(chunk)):
            out.append((energy[b], forces[offs[b] : offs[b + 1]]))
    return out


def mae_metrics(samples, energy_pred, forces_pred) -> dict:
    """Energy MAE per atom and size-balanced force L2 MAE, in label units.

    ``energy_pred``/``forces_pred`` are physical predictions aligned with
    ``samples`` (entries for unlabeled quantities are ignored).
    """
    e_err, f_err = [], []
    for s, e, f in zip(samples, energy_pred, forces_pred):
        if s.labels.energy_mask:
            e_err.append(abs(e - s.labels.energy) / s.natoms)
        if s.labels.force_mask:
            f_err.append(float(np.mean(np.linalg.norm(np.asarray(f) - s.labels.forces, axis=1))))
    return {
        "energy_mae": float(np.mean(e_err)) if e_err else None,
        "force_mae": float(np.mean(f_err)) if f_err else None,
    }


def evaluate(params, cfg: ModelConfig, table: ReferenceTable, samples) -> dict:
    """MAEs in meV/atom and meV/A, denormalised to physical units."""
    if not samples:
        return {"energy_mae": None, "force_mae": None}
    preds = predict(params, cfg, [s.system for s in samples])
    energies, forces = [], []
    for s, (e, f) in zip(samples, preds):
        d = s.labels.dataset_index
        if d >= cfg.num_heads:
            raise InputError(f"sample head {d} outside the model's {cfg.num_heads} heads")
        energies.append(denormalize_energy(e[d], s.system, d, table) if d in table and s.labels.energy_mask else None)
        forces.append(denormalize_forces(f[:, :, d], d, table) if d in table else f[:, :, d])
    m = mae_metrics(samples, energies, forces)
    return {k: (None if v is None else 1000.0 * v) for k, v in m.items()}


# ---------------------------------------------------------------------------
# training engine


def train_step(params, cfg: ModelConfig, device_batches, loss_cfg: LossConfig):
    """Loss and worker-averaged gradients for one mini-batch (list of G sample lists)."""
    flat = [s for dev in device_batches for s in dev]
    graph = Graph([s.system for s in flat], cfg)
    energy, forces, cache = forward(graph, params, cfg)
    d_energy = np.zeros_like(energy)
    d_forces = np.zeros_like(forces)
    G = len(device_batches)
    total = 0.0
    row = atom = 0
    for dev in device_batches:
        n = len(dev)
        na = sum(s.natoms for s in dev)
        t = BatchTargets.from_samples(dev)
        r = masked_loss(t, energy[row : row + n], forces[atom : atom + na], loss_cfg, with_grad=True)
        total += r.loss / G
        d_energy[row : row + n] = r.d_energy / G
        d_forces[atom : atom + na] = r.d_forces / G
        row += n
        atom += na
    grads = backward(graph, params, cfg, cache, d_energy, d_forces)
    return total, grads


def _validate(params, cfg, table, prepared, val_sets):
    per = {}
    e_vals, f_vals = [], []
    for p, vs in zip(prepared, val_sets):
        if not vs:
            continue
        m = evaluate(params, cfg, table, vs)
        per[p.name] = m
        if m["energy_mae"] is not None:
            e_vals.append(m["energy_mae"])
        if m["force_mae"] is not None and not p.denoising:
            f_vals.append(m["force_mae"])
    if not f_vals:
        # pure denoising runs report the pseudo-force error
        f_vals = [m["force_mae"] for m in per.values() if m["force_mae"] is not None]
    e = float(np.mean(e_vals)) if e_vals else None
    f = float(np.mean(f_vals)) if f_vals else None
    return e, f, per


def run_training(
    params,
    model_cfg: ModelConfig,
    prepared: list[PreparedSubset],
    train_cfg: TrainConfig,
    temperature: float = 1.0,
    schedule_cfg: ScheduleConfig | None = None,
    table: ReferenceTable | None = None,
    out_dir=None,
    metadata: dict | None = None,
) -> TrainResult:
    cfg = train_cfg
    params = {k: v.copy() for k, v in params.items()}
    scheme = cfg.noise_scheme
    loss_cfg = LossConfig(cfg.energy_weight, cfg.force_weight)
    if table is None:
        table = fit_table(prepared, cfg, scheme)
    val_sets = _fixed_val_sets(prepared, cfg, scheme)
    train_sizes = [len(p.train) for p in prepared]
    if min(train_sizes) < 1:
        raise InputError("every subset needs at least one training sample")
    mix = MixPlan.build(train_sizes, temperature)
    metrics = RunMetrics(energy_threshold=cfg.energy_threshold, force_threshold=cfg.force_threshold)
    opt = RMSScaled(params, cfg.lr, cfg.rms_decay, cfg.eps)
    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoint = None
    meta = dict(metadata or {})
    meta["reference_table"] = table.to_json()

    def save(step):
        nonlocal checkpoint
        if out_dir is not None:
            checkpoint = save_checkpoint(out_dir / "checkpoint.bin", params, model_cfg, {**meta, "step": step})

    step, epoch = 0, 0
    recent = []
    while True:
        index = build_epoch_index(mix, seed=_noise_seed(cfg.seed, 1, epoch))
        atoms = np.array([prepared[k].train[i].natoms for k, i in index])
        ep_seed = _noise_seed(cfg.seed, 2, epoch)
        if schedule_cfg is not None:
            sched = plan(atoms, replace(schedule_cfg, seed=ep_seed))
        else:
            sched = plan(atoms, cfg.schedule_config(ep_seed, len(atoms)))
        for m in range(sched.num_steps):
            if step % cfg.val_every == 0:
                e, f, per = _validate(params, model_cfg, table, prepared, val_sets)
                metrics.record(step, e, f, float(np.mean(recent)) if recent else None, per)
                recent = []
            if cfg.checkpoint_every and step and step % cfg.checkpoint_every == 0:
                save(step)
            if step >= cfg.max_steps:
                break
            device_batches = []
            for g in range(sched.num_workers):
                dev = []
                for pos in sched.sample_ids[m, g]:
                    k, i = index[pos]
                    s = prepared[k].train[i]
                    if prepared[k].denoising:
                        s = noisy_sample(s, NoiseConfig(cfg.noise_sigma, scheme, _noise_seed(cfg.seed, 3, epoch, pos)))
                    dev.append(normalize_labels(s, table))
                device_batches.append(dev)
            loss, grads = train_step(params, model_cfg, device_batches, loss_cfg)
            if not math.isfinite(loss):
                comp = Counter(prepared[int(index[pos][0])].name for pos in sched.sample_ids[m].ravel())
                raise TrainingError(f"non-finite loss at step {step}; batch composition {dict(comp)}")
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            opt.lr = cfg.lr_at(step)
            opt.step(params, grads)
            recent.append(loss)
            step += 1
        else:
            epoch += 1
            continue
        break
    save(step)
    return TrainResult(params, model_cfg, table, metrics, checkpoint)


# ---------------------------------------------------------------------------
# public entry points


def pretrain(
    catalog: Catalog,
    mix: MixPlan | float | None,
    schedule_cfg: ScheduleConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Joint multi-head training over every subset of ``catalog``.

    The mixing temperature is taken from ``mix``; repeat counts are recomputed
    for the training splits actually used.
    """
    if len(catalog) < 1:
        raise InputError("catalog has no subsets")
    if model_cfg.num_heads != catalog.num_heads:
        raise InputError(
            f"model has {model_cfg.num_heads} heads but the catalog uses {catalog.num_heads}"
        )
    temperature = mix.temperature if isinstance(mix, MixPlan) else (2.0 if mix is None else float(mix))
    prepared = prepare_subsets(catalog.subsets, train_cfg)
    params = init_params(model_cfg, train_cfg.seed)
    meta = {
        "kind": "pretrain",
        "heads": {p.name: p.head for p in prepared},
        "train_config": asdict(train_cfg),
    }
    return run_training(
        params, model_cfg, prepared, train_cfg, temperature, schedule_cfg, out_dir=out_dir, metadata=meta
    )


def finetune(
    params,
    model_cfg: ModelConfig,
    targets: Subset | list[Subset],
    train_cfg: TrainConfig,
    num_heads: int = 1,
    out_dir=None,
) -> TrainResult:
    """Reset the heads to ``num_heads`` channels and train on the target subset(s)."""
    targets = [targets] if isinstance(targets, Subset) else list(targets)
    flags = []
    if num_heads != 1:
        flags.append(f"multi-target fine-tune with {num_heads} heads")
        log.warning(flags[-1])
    heads = [min(k, num_heads - 1) for k in range(len(targets))]
    new_params, new_cfg = reset_heads(params, model_cfg, num_heads, seed=train_cfg.seed)
    prepared = prepare_subsets(targets, train_cfg, heads=heads)
    meta = {
        "kind": "finetune",
        "heads": {p.name: p.head for p in prepared},
        "train_config": asdict(train_cfg),
    }
    result = run_training(new_params, new_cfg, prepared, train_cfg, 1.0, out_dir=out_dir, metadata=meta)
    result.metrics.flags.extend(flags)
    return result


def from_scratch(model_cfg: ModelConfig, targets, train_cfg: TrainConfig, num_heads: int = 1, out_dir=None):
    """Fine-tuning from an untrained encoder (the no-pre-training baseline)."""
    return finetune(init_params(model_cfg, train_cfg.seed), model_cfg, targets, train_cfg, num_heads, out_dir)


def denoise_bench(
    subset: Subset,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    schemes=("baseline", "centered"),
    threshold: float | None = None,
) -> dict:
    """Train one single-head model per labelling scheme from identical seeds.

    Validation errors are pseudo-force MAEs in mA against each scheme's own
    labels. ``step_ratio`` is steps-to-threshold of the first scheme divided
    by that of the second (None if either misses the threshold).
    """
    if subset.meta.task_kind != "denoising":
        raise InputError("denoise_bench needs an unlabeled (denoising) subset")
    model_cfg = model_cfg.with_heads(1)
    runs = {}
    for scheme in schemes:
        cfg = replace(train_cfg, noise_scheme=scheme, force_threshold=threshold)
        prepared = prepare_subsets([subset], cfg, heads=[0])
        params = init_params(model_cfg, cfg.seed)
        runs[scheme] = run_training(params, model_cfg, prepared, cfg, 1.0).metrics
    ratio = None
    if len(schemes) == 2:
        a = runs[schemes[0]].steps_to_threshold["forces"]
        b = runs[schemes[1]].steps_to_threshold["forces"]
        if a is not None and b:
            ratio = a / b
    return {"runs": runs, "step_ratio": ratio, "schemes": list(schemes)}


def train_config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise InputError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def config_dict(cfg) -> dict:
    return asdict(cfg)

"""Command-line entry point: ``mhpot <command> --config cfg.json --out DIR``.

Exit codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .core import InputError
from .dataset import (
    Catalog,
    MixPlan,
    SynthSpec,
    default_catalog_specs,
    load_catalog,
    save_catalog,
    synth_catalog,
)
from .loss import ReferenceTable
from .model import ModelConfig, load_checkpoint
from .scheduler import ScheduleConfig, plan, read_schedule_csv, schedule_metrics, write_schedule_csv
from .simulator import CostModel, bimodal_trace, compare, simulate, uniform_trace, write_step_csv, write_summary_json
from .trainer import (
    TrainConfig,
    _fixed_val_sets,
    denoise_bench,
    evaluate,
    finetune,
    from_scratch,
    prepare_subsets,
    pretrain,
)

log = logging.getLogger("mhpot")

COMMANDS = ("synth", "mix", "schedule", "simulate", "pretrain", "finetune", "denoise-bench", "evaluate", "inspect")

# accepted top-level keys per command
SCHEMA = {
    "synth": {"seed", "subsets", "counts"},
    "mix": {"seed", "sizes", "names", "temperature", "catalog"},
    "schedule": {"seed", "catalog", "atom_counts", "trace", "num_workers", "batch_size", "num_splits", "modes"},
    "simulate": {
        "seed", "catalog", "atom_counts", "trace", "schedules", "num_workers", "batch_size",
        "num_splits", "modes", "cost", "baseline", "uniform_reference",
    },
    "pretrain": {"seed", "catalog", "model", "train", "temperature"},
    "finetune": {"seed", "checkpoint", "catalog", "target", "train", "num_heads", "scratch"},
    "denoise-bench": {"seed", "catalog", "subset", "model", "train", "schemes", "threshold"},
    "evaluate": {"seed", "checkpoint", "catalog", "subsets", "split"},
    "inspect": {"seed", "catalog", "checkpoint", "schedule_csv"},
}
TRACE_KEYS = {"n", "modes", "sigmas", "weights", "max_atoms", "seed"}


def _strict(d: dict, allowed, where: str) -> dict:
    if not isinstance(d, dict):
        raise InputError(f"{where}: expected a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise InputError(f"{where}: unknown keys {sorted(unknown)}")
    return d


def _dataclass_from(cls, d, where):
    return cls(**_strict(d or {}, cls.__dataclass_fields__, where))


def load_config(path, command: str, seed: int | None) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: invalid JSON ({e})") from None
    _strict(cfg, SCHEMA[command], f"{command} config")
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    if "train" in SCHEMA[command]:
        train = dict(cfg.get("train") or {})
        if seed is not None or "seed" not in train:
            train["seed"] = cfg["seed"]
        cfg["train"] = train
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class Run:
    """Output directory bookkeeping; one manifest per directory."""

    def __init__(self, out: Path, command: str, cfg: dict, quiet: bool):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.quiet = quiet
        self.artifacts: list[str] = []
        self.started = _now()
        out.mkdir(parents=True, exist_ok=True)
        self.add(out / "config.json")
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    def add(self, path) -> Path:
        path = Path(path)
        rel = str(path.relative_to(self.out)) if path.is_relative_to(self.out) else str(path)
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return path

    def json(self, name: str, obj) -> Path:
        path = self.add(self.out / name)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path

    def say(self, msg: str):
        if not self.quiet:
            print(msg)

    def finish(self):
        manifest = {
            "tool": "mhpot",
            "version": __version__,
            "command": self.command,
            "config": self.cfg,
            "config_digest": config_digest(self.cfg),
            "seeds": {"seed": self.cfg.get("seed"), "train_seed": (self.cfg.get("train") or {}).get("seed")},
            "artifacts": sorted(self.artifacts),
            "started": self.started,
            "finished": _now(),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x)}")


# ---------------------------------------------------------------------------
# helpers


def _catalog(cfg) -> Catalog:
    if "catalog" not in cfg:
        raise InputError("config needs a 'catalog' directory")
    return load_catalog(cfg["catalog"])


def _atom_counts(cfg) -> np.ndarray:
    given = [k for k in ("catalog", "atom_counts", "trace") if k in cfg]
    if len(given) != 1:
        raise InputError("give exactly one of 'catalog', 'atom_counts' or 'trace'")
    if "catalog" in cfg:
        return np.array([s.natoms for sub in _catalog(cfg) for s in sub.samples], dtype=np.int64)
    if "atom_counts" in cfg:
        a = np.asarray(cfg["atom_counts"], dtype=np.int64)
        if a.ndim != 1 or a.size == 0 or a.min() < 1:
            raise InputError("atom_counts must be a non-empty list of positive integers")
        return a
    t = dict(_strict(cfg["trace"], TRACE_KEYS, "trace"))
    t.setdefault("seed", cfg["seed"])
    n = int(t.pop("n", 100_000))
    return bimodal_trace(n, **t)


def _schedule_cfg(cfg, mode) -> ScheduleConfig:
    return ScheduleConfig(
        int(cfg.get("num_workers", 16)),
        int(cfg.get("batch_size", 2)),
        int(cfg.get("num_splits", 100)),
        int(cfg["seed"]),
        mode,
    )


def _model_cfg(d, num_heads=None) -> ModelConfig:
    d = dict(d or {})
    if num_heads is not None:
        d.setdefault("num_heads", num_heads)
    return _dataclass_from(ModelConfig, d, "model")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, run: Run):
    specs = (
        [SynthSpec.from_json(s) for s in cfg["subsets"]] if "subsets" in cfg else default_catalog_specs()
    )
    counts = cfg.get("counts", [200] * len(specs))
    if len(counts) != len(specs):
        raise InputError("counts must have one entry per subset")
    cat = synth_catalog(specs, [int(c) for c in counts], seed=int(cfg["seed"]))
    path = save_catalog(cat, run.out / "catalog")
    run.add(path)
    for k in range(len(cat)):
        run.add(run.out / "catalog" / f"subset_{k:02d}.bin")
    for sub in cat:
        run.say(f"{sub.meta.name:16s} {sub.meta.task_kind:18s} head {sub.meta.head_index}  {sub.meta.size} samples")


def cmd_mix(cfg, run: Run):
    if "catalog" in cfg:
        cat = _catalog(cfg)
        sizes, names = [s.meta.size for s in cat], cat.names
    else:
        if "sizes" not in cfg:
            raise InputError("mix needs 'sizes' or 'catalog'")
        sizes = [int(x) for x in cfg["sizes"]]
        names = cfg.get("names") or [f"subset{k}" for k in range(len(sizes))]
    if len(names) != len(sizes):
        raise InputError("names and sizes differ in length")
    mp = MixPlan.build(sizes, float(cfg.get("temperature", 2.0)))
    counts = mp.integer_counts()
    path = run.add(run.out / "mix.csv")
    with open(path, "w") as fh:
        fh.write("name,size,repeats,count\n")
        for name, n, r, c in zip(names, sizes, mp.repeats, counts):
            fh.write(f"{name},{n},{r!r},{int(c)}\n")
            run.say(f"{name:16s} {n:>14d} -> {int(c):>14d}")


def cmd_schedule(cfg, run: Run):
    counts = _atom_counts(cfg)
    report = {}
    for mode in cfg.get("modes", ["balanced"]):
        sched = plan(counts, _schedule_cfg(cfg, mode))
        run.add(write_schedule_csv(sched, run.out / f"schedule_{mode}.csv"))
        m = schedule_metrics(sched)
        report[mode] = {
            "steps": sched.num_steps,
            "mean_imbalance_ratio": m["mean_imbalance_ratio"],
            "monotonicity_violations": m["monotonicity_violations"],
            "highwater_event_count": m["highwater_event_count"],
        }
        run.say(f"{mode:12s} steps {sched.num_steps}  imbalance {m['mean_imbalance_ratio']:.4f}  "
                f"high-water events {m['highwater_event_count']}")
    run.json("schedule_metrics.json", report)


def cmd_simulate(cfg, run: Run):
    cost = _dataclass_from(CostModel, cfg.get("cost"), "cost")
    if "schedules" in cfg:
        if not isinstance(cfg["schedules"], dict) or not cfg["schedules"]:
            raise InputError("'schedules' must map names to schedule CSV paths")
        scheds = {name: read_schedule_csv(p) for name, p in cfg["schedules"].items()}
        counts = None
    else:
        counts = _atom_counts(cfg)
        scheds = {m: plan(counts, _schedule_cfg(cfg, m)) for m in cfg.get("modes", ["naive", "greedy_only", "balanced"])}
    report = compare(scheds, cost, cfg.get("baseline"))
    for name, s in scheds.items():
        run.add(write_step_csv(simulate(s, cost), run.out / f"steps_{name}.csv"))
    if counts is not None and cfg.get("uniform_reference", True):
        uni = plan(uniform_trace(len(counts), counts.mean()), _schedule_cfg(cfg, "naive"))
        u = simulate(uni, cost)
        u_mean = float(u.step_time.mean())
        report["uniform_reference"] = u.summary()
        for name, entry in report["schedules"].items():
            entry["mean_step_over_uniform"] = entry["step_time"]["mean"] / u_mean
    run.add(write_summary_json(report, run.out / "summary.json"))
    for name, entry in report["schedules"].items():
        extra = f"  vs uniform {entry['mean_step_over_uniform']:.3f}" if "mean_step_over_uniform" in entry else ""
        run.say(f"{name:12s} mean step {entry['step_time']['mean']:.5f} s  rel. throughput "
                f"{entry['relative_throughput']:.3f}  realloc {entry['realloc_events']}{extra}")


def cmd_pretrain(cfg, run: Run):
    cat = _catalog(cfg)
    train = _dataclass_from(TrainConfig, cfg["train"], "train")
    model = _model_cfg(cfg.get("model"), cat.num_heads)
    temperature = float(cfg.get("temperature", 2.0))
    res = pretrain(cat, temperature, None, model, train, out_dir=run.out)
    run.add(res.checkpoint)
    run.add(str(res.checkpoint) + ".json")
    run.add(res.metrics.write_csv(run.out / "metrics.csv"))
    run.add(res.metrics.write_json(run.out / "summary.json"))
    s = res.metrics.summary()
    run.say(f"pretrain: final energy MAE {s['final_energy_mae']} meV/atom, force MAE {s['final_force_mae']} meV/A")


def cmd_finetune(cfg, run: Run):
    for key in ("checkpoint", "target"):
        if key not in cfg:
            raise InputError(f"finetune needs '{key}'")
    params, model, meta = load_checkpoint(cfg["checkpoint"])
    target = _catalog(cfg).by_name(cfg["target"])
    if target.meta.name in meta.get("heads", {}):
        raise InputError(f"target {target.meta.name!r} was part of pre-training")
    train = _dataclass_from(TrainConfig, cfg["train"], "train")
    num_heads = int(cfg.get("num_heads", 1))
    warm = finetune(params, model, target, train, num_heads, out_dir=run.out / "warm_start")
    run.add(warm.checkpoint)
    run.add(str(warm.checkpoint) + ".json")
    run.add(warm.metrics.write_csv(run.out / "warm_start_metrics.csv"))
    summary = {"warm_start": warm.metrics.summary()}
    if cfg.get("scratch", True):
        cold = from_scratch(model, target, train, num_heads)
        run.add(cold.metrics.write_csv(run.out / "from_scratch_metrics.csv"))
        summary["from_scratch"] = cold.metrics.summary()
    run.json("summary.json", summary)
    for arm, s in summary.items():
        run.say(f"{arm:12s} steps to threshold {s['steps_to_threshold']}  best energy "
                f"{s['best_energy_mae']} meV/atom  best force {s['best_force_mae']} meV/A")


def cmd_denoise_bench(cfg, run: Run):
    cat = _catalog(cfg)
    name = cfg.get("subset")
    if name is None:
        unlabeled = [s for s in cat if s.meta.task_kind == "denoising"]
        if not unlabeled:
            raise InputError("catalog has no unlabeled subset")
        subset = unlabeled[0]
    else:
        subset = cat.by_name(name)
    train = _dataclass_from(TrainConfig, cfg["train"], "train")
    model = _model_cfg(cfg.get("model"), 1)
    schemes = tuple(cfg.get("schemes", ("baseline", "centered")))
    out = denoise_bench(subset, train, model, schemes, cfg.get("threshold"))
    summary = {"schemes": out["schemes"], "step_ratio": out["step_ratio"], "runs": {}}
    for scheme, metrics in out["runs"].items():
        run.add(metrics.write_csv(run.out / f"{scheme}_metrics.csv"))
        summary["runs"][scheme] = metrics.summary()
        run.say(f"{scheme:10s} final denoising MAE {metrics.force_mae[-1]} mA  "
                f"steps to threshold {metrics.steps_to_threshold['forces']}")
    run.json("summary.json", summary)
    run.say(f"step ratio {out['step_ratio']}")


def cmd_evaluate(cfg, run: Run):
    if "checkpoint" not in cfg:
        raise InputError("evaluate needs 'checkpoint'")
    params, model, meta = load_checkpoint(cfg["checkpoint"])
    if "reference_table" not in meta:
        raise InputError("checkpoint has no reference table")
    table = ReferenceTable.from_json(meta["reference_table"])
    train = _dataclass_from(TrainConfig, meta.get("train_config", {}), "train_config")
    cat = _catalog(cfg)
    heads = meta.get("heads", {})
    names = cfg.get("subsets") or [n for n in cat.names if n in heads]
    if not names:
        raise InputError("no catalog subset matches the checkpoint's heads")
    subsets = [cat.by_name(n) for n in names]
    head_ids = [int(heads.get(n, 0)) for n in names]
    prepared = prepare_subsets(subsets, train, heads=head_ids)
    split = cfg.get("split", "val")
    if split == "val":
        sets = _fixed_val_sets(prepared, train, train.noise_scheme)
    elif split == "train":
        for p in prepared:
            p.val = p.train
        sets = _fixed_val_sets(prepared, train, train.noise_scheme)
    else:
        raise InputError("split must be 'val' or 'train'")
    report = {}
    for p, vs in zip(prepared, sets):
        report[p.name] = evaluate(params, model, table, vs)
        run.say(f"{p.name:16s} energy MAE {report[p.name]['energy_mae']} meV/atom  "
                f"force MAE {report[p.name]['force_mae']} meV/A")
    run.json("eval.json", report)


def cmd_inspect(cfg, run: Run):
    report = {}
    if "catalog" in cfg:
        cat = _catalog(cfg)
        report["catalog"] = [
            {**asdict(s.meta), "mean_atoms": float(np.mean([x.natoms for x in s.samples]))} for s in cat
        ]
        for e in report["catalog"]:
            run.say(f"{e['name']:16s} {e['task_kind']:18s} {e['size']:>8d} samples  mean atoms {e['mean_atoms']:.1f}")
    if "checkpoint" in cfg:
        params, model, meta = load_checkpoint(cfg["checkpoint"])
        report["checkpoint"] = {
            "model_config": asdict(model),
            "parameters": int(sum(v.size for v in params.values())),
            "metadata": {k: v for k, v in meta.items() if k != "reference_table"},
        }
        run.say(f"checkpoint: {asdict(model)}  {report['checkpoint']['parameters']} parameters")
    if "schedule_csv" in cfg:
        sched = read_schedule_csv(cfg["schedule_csv"])
        m = schedule_metrics(sched)
        report["schedule"] = {
            "steps": sched.num_steps,
            "workers": sched.num_workers,
            "batch_size": sched.batch_size,
            "mean_imbalance_ratio": m["mean_imbalance_ratio"],
            "highwater_event_count": m["highwater_event_count"],
        }
        run.say(f"schedule: {report['schedule']}")
    if not report:
        raise InputError("inspect needs 'catalog', 'checkpoint' or 'schedule_csv'")
    run.json("inspect.json", report)


HANDLERS = {
    "synth": cmd_synth,
    "mix": cmd_mix,
    "schedule": cmd_schedule,
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "denoise-bench": cmd_denoise_bench,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhpot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mhpot {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, default=Path("out") / name, help="output directory")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, args.command, args.seed)
        run = Run(args.out, args.command, cfg, args.quiet)
        HANDLERS[args.command](cfg, run)
        run.finish()
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

import csv
import json

import pytest

from mhpot import cli

SUBSETS = [
    {"name": "a", "task_kind": "energy_and_forces", "head_index": 0, "atom_mode": 6, "max_atoms": 12,
     "elements": [1, 6, 8], "energy_offsets": {"1": -1.0, "6": -2.0, "8": -3.0}},
    {"name": "b", "task_kind": "energy_only", "head_index": 1, "atom_mode": 8, "max_atoms": 12,
     "elements": [1, 6, 8]},
    {"name": "u", "task_kind": "denoising", "head_index": 2, "atom_mode": 6, "max_atoms": 12,
     "elements": [1, 6, 8]},
]
TRAIN = {"max_steps": 6, "val_every": 3, "num_workers": 2, "batch_size": 2, "num_splits": 2, "val_fraction": 0.2}
MODEL = {"hidden": 8, "layers": 1, "num_rbf": 6}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, cfg, name=None, seed=None):
    out = tmp_path / (name or command)
    argv = [command, "--config", str(write_cfg(tmp_path / f"{name or command}.json", cfg)), "--out", str(out), "--quiet"]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return cli.main(argv), out


@pytest.fixture(scope="module")
def catalog_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    rc, out = run(tmp, "synth", {"seed": 4, "subsets": SUBSETS, "counts": [40, 30, 30]})
    assert rc == 0
    return out / "catalog"


@pytest.fixture(scope="module")
def target_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_target")
    spec = {"name": "t", "atom_mode": 7, "max_atoms": 12, "elements": [1, 6, 8]}
    rc, out = run(tmp, "synth", {"seed": 5, "subsets": [spec], "counts": [30]})
    assert rc == 0
    return out / "catalog"


def test_synth_writes_manifest(catalog_dir):
    manifest = json.loads((catalog_dir.parent / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert "config.json" in manifest["artifacts"]
    assert len(manifest["config_digest"]) == 64


def test_mix_counts(tmp_path):
    rc, out = run(tmp_path, "mix", {"sizes": [100, 25], "temperature": 2.0})
    assert rc == 0
    rows = list(csv.DictReader(open(out / "mix.csv")))
    assert [int(r["count"]) for r in rows] == [100, 50]


def test_unknown_key_is_an_input_error(tmp_path):
    rc, _ = run(tmp_path, "mix", {"sizes": [10], "temprature": 2.0})
    assert rc == 1


def test_missing_config_file(tmp_path):
    assert cli.main(["mix", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg, run):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.HANDLERS, "mix", boom)
    rc, _ = run(tmp_path, "mix", {"sizes": [10]})
    assert rc == 2


def test_schedule_modes_cover_same_samples(tmp_path):
    cfg = {"trace": {"n": 400}, "num_workers": 4, "batch_size": 2, "num_splits": 5, "modes": ["naive", "balanced"]}
    rc, out = run(tmp_path, "schedule", cfg)
    assert rc == 0
    ids = {}
    for mode in ("naive", "balanced"):
        rows = list(csv.DictReader(open(out / f"schedule_{mode}.csv")))
        ids[mode] = sorted(int(r["sample_id"]) for r in rows)
    assert ids["naive"] == ids["balanced"]
    metrics = json.loads((out / "schedule_metrics.json").read_text())
    assert metrics["balanced"]["monotonicity_violations"] == 0


def test_simulate_reports_uniform_reference(tmp_path):
    cfg = {"trace": {"n": 2000}, "num_workers": 4, "batch_size": 2, "num_splits": 10}
    rc, out = run(tmp_path, "simulate", cfg)
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["schedules"]) == {"naive", "greedy_only", "balanced"}
    assert summary["schedules"]["naive"]["mean_step_over_uniform"] > 1.0
    assert (out / "steps_balanced.csv").exists()


def test_pretrain_finetune_evaluate_inspect(tmp_path, catalog_dir, target_dir):
    pre_cfg = {"catalog": str(catalog_dir), "model": MODEL, "train": TRAIN}
    rc, pre = run(tmp_path, "pretrain", pre_cfg)
    assert rc == 0
    assert (pre / "checkpoint.bin").exists()
    rows = list(csv.DictReader(open(pre / "metrics.csv")))
    assert {r["split"] for r in rows} == {"val", "val/a", "val/b", "val/u"}

    ft_cfg = {"checkpoint": str(pre / "checkpoint.bin"), "catalog": str(target_dir), "target": "t",
              "train": {**TRAIN, "force_threshold": 1e9}}
    rc, ft = run(tmp_path, "finetune", ft_cfg)
    assert rc == 0
    summary = json.loads((ft / "summary.json").read_text())
    assert summary["warm_start"]["steps_to_threshold"]["forces"] == 0
    assert "steps_to_threshold" in summary["from_scratch"]
    assert (ft / "warm_start" / "checkpoint.bin").exists()

    rc, ev = run(tmp_path, "evaluate", {"checkpoint": str(pre / "checkpoint.bin"), "catalog": str(catalog_dir)})
    assert rc == 0
    report = json.loads((ev / "eval.json").read_text())
    assert set(report) == {"a", "b", "u"}
    assert report["b"]["force_mae"] is None

    rc, ins = run(tmp_path, "inspect", {"catalog": str(catalog_dir), "checkpoint": str(pre / "checkpoint.bin")})
    assert rc == 0
    info = json.loads((ins / "inspect.json").read_text())
    assert info["checkpoint"]["model_config"]["num_heads"] == 3


def test_finetune_rejects_pretraining_subset(tmp_path, catalog_dir):
    rc, pre = run(tmp_path, "pretrain", {"catalog": str(catalog_dir), "model": MODEL, "train": {**TRAIN, "max_steps": 0}})
    assert rc == 0
    cfg = {"checkpoint": str(pre / "checkpoint.bin"), "catalog": str(catalog_dir), "target": "a", "train": TRAIN}
    rc, _ = run(tmp_path, "finetune", cfg)
    assert rc == 1


def test_rerun_is_byte_identical(tmp_path, catalog_dir):
    cfg = {"catalog": str(catalog_dir), "model": MODEL, "train": TRAIN}
    run(tmp_path, "pretrain", cfg, name="one")
    run(tmp_path, "pretrain", cfg, name="two")
    for f in ("metrics.csv", "summary.json", "config.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_seed_override_reaches_training(tmp_path, catalog_dir):
    cfg = {"catalog": str(catalog_dir), "model": MODEL, "train": TRAIN}
    rc, out = run(tmp_path, "pretrain", cfg, seed=9)
    assert rc == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 9 and saved["train"]["seed"] == 9


def test_denoise_bench_command(tmp_path, catalog_dir):
    cfg = {"catalog": str(catalog_dir), "model": MODEL, "train": TRAIN, "threshold": 1e9}
    rc, out = run(tmp_path, "denoise-bench", cfg)
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["runs"]) == {"baseline", "centered"}
    assert (out / "centered_metrics.csv").exists()

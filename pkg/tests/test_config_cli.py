import csv
import json

import numpy as np
import pytest

from trajstitch.cli import main
from trajstitch.config import RunConfig, parse_ratio, stream
from trajstitch.data import load_dataset
from trajstitch.errors import ConfigError

TINY = {
    "n_per_family": 6,
    "horizon": 8,
    "diffusion_steps": 20,
    "delta": 1e6,
    "iterations": 6,
    "min_keep": 3,
    "denoiser_hidden": [32],
    "denoiser_steps": 120,
    "denoiser_batch": 8,
    "aux_inv_hidden": [16],
    "aux_dyn_hidden": [16],
    "aux_steps": 90,
    "aux_batch": 64,
    "bc_hidden": [16],
    "bc_steps": 40,
    "batch_size": 64,
    "log_every": 30,
    "percentile": 1.0,
    "eval_seeds": 2,
    "sweep_deltas": [1e-6, 1e6],
    "sweep_ratios": ["0:1", "1:1", "1:0"],
}


def write_config(tmp_path, **extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(TINY, **extra)))
    return path


def test_config_round_trip(tmp_path):
    cfg = RunConfig(horizon=12, ratio="2:1", denoiser_hidden=[8, 8])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = RunConfig.load(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert RunConfig(out="elsewhere").hash() == RunConfig().hash()
    assert RunConfig(seed=1).hash() != RunConfig().hash()


def test_overrides():
    cfg = RunConfig().with_overrides(["delta=4", "ratio=1:1", "denoiser_hidden=[8,8]", "dataset=data/x.jsonl"])
    assert cfg.delta == 4 and cfg.ratio == "1:1" and cfg.denoiser_hidden == [8, 8]
    assert cfg.dataset == "data/x.jsonl"
    for bad in (["nokey=1"], ["delta"], ["delta=-1"], ["ratio=0:0"]):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(min_keep=1)
    with pytest.raises(ConfigError):
        RunConfig(low_quantile=0.9, high_quantile=0.5)
    assert parse_ratio("4:1") == (4.0, 1.0)
    with pytest.raises(ConfigError):
        parse_ratio("4-1")


def test_streams_independent_and_reproducible():
    a = stream(0, "data").integers(1 << 30, size=4)
    assert np.array_equal(a, stream(0, "data").integers(1 << 30, size=4))
    assert not np.array_equal(a, stream(0, "stitch").integers(1 << 30, size=4))
    assert not np.array_equal(a, stream(1, "data").integers(1 << 30, size=4))


# exit codes


def test_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    with pytest.raises(SystemExit) as e:
        main(["bogus", "--config", str(cfg)])
    assert e.value.code == 1
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 1
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "r"), "--set", "scenario=other"]) == 1
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "r"), "--set", "lr=1e300"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--set", "lr=1e300"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 1


# a full tiny pipeline


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    out = root / "run"
    assert main(["run-all", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    return cfg, out


def test_run_all_outputs(tiny_run):
    _, out = tiny_run
    for name in (
        "config.json", "dataset.jsonl", "dataset.stats.json", "denoiser.json", "denoiser_loss.csv",
        "inv_dyn.json", "reward.json", "fwd_dyn.json", "aux_loss.csv", "d_aug.jsonl",
        "stitch_stats.json", "stitch_attempts.csv", "eval_report.json", "rtg_pairs.csv",
    ):
        assert (out / name).exists(), name
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 3 and echo["out"] == str(out)


def test_loss_logs(tiny_run):
    _, out = tiny_run
    rows = read_csv(out / "denoiser_loss.csv")
    assert [int(r["step"]) for r in rows] == [30, 60, 90, 120]
    aux = read_csv(out / "aux_loss.csv")
    for name in ("inv_dyn", "reward", "fwd_dyn"):
        assert [int(r["step"]) for r in aux if r["model"] == name] == [30, 60, 90]


def test_report_statistics(tiny_run):
    _, out = tiny_run
    report = json.loads((out / "eval_report.json").read_text())
    stats = json.loads((out / "stitch_stats.json").read_text())
    assert report["n_augmented"] == stats["accepts"] == len(load_dataset(out / "d_aug.jsonl"))
    for arm in report["arms"].values():
        assert len(arm["success"]) == 2
        assert arm["success_mean"] == pytest.approx(np.mean(arm["success"]))
        assert arm["success_std"] == pytest.approx(np.std(arm["success"]))
        assert arm["return_std"] == pytest.approx(np.std(arm["return"]))
    assert report["arms"]["raw"]["ratio"] == "1:0"
    assert report["config_hash"] == RunConfig.load(out / "config.json").hash()
    pairs = read_csv(out / "rtg_pairs.csv")
    if report["improved_rtg_fraction"] is not None:
        frac = np.mean([float(p["rtg_after"]) > float(p["rtg_before"]) for p in pairs])
        assert frac == pytest.approx(report["improved_rtg_fraction"])


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    cfg, out = tiny_run
    again = tmp_path / "again"
    assert main(["run-all", "--config", str(cfg), "--out", str(again), "--seed", "3"]) == 0
    for name in ("dataset.jsonl", "denoiser.json", "fwd_dyn.json", "d_aug.jsonl", "stitch_attempts.csv", "eval_report.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_ratio_sweep(tiny_run):
    cfg, out = tiny_run
    assert main(["sweep", "ratio", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    rows = json.loads((out / "sweep_ratio.json").read_text())["rows"]
    assert [r["ratio"] for r in rows] == ["0:1", "1:1", "1:0"]
    raw = json.loads((out / "eval_report.json").read_text())["arms"]["raw"]
    assert rows[2]["success"] == raw["success"]
    assert len(read_csv(out / "sweep_ratio.csv")) == 3


def test_delta_sweep(tiny_run):
    cfg, out = tiny_run
    assert main(["sweep", "delta", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    rows = json.loads((out / "sweep_delta.json").read_text())["rows"]
    assert [r["delta"] for r in rows] == [1e-6, 1e6]
    assert rows[0]["accepts"] <= rows[1]["accepts"] == rows[1]["attempts"]
    if rows[0]["accepts"] == 0:
        assert rows[0]["success_mean"] is None


def test_gen_data_copies_given_dataset(tiny_run, tmp_path):
    cfg, out = tiny_run
    dest = tmp_path / "copy"
    assert main(["gen-data", "--config", str(cfg), "--out", str(dest), "--set", f"dataset={out / 'dataset.jsonl'}"]) == 0
    a, b = load_dataset(out / "dataset.jsonl"), load_dataset(dest / "dataset.jsonl")
    assert [t.states.tobytes() for t in a] == [t.states.tobytes() for t in b]

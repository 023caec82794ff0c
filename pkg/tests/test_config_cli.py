"""Config tree round trips, overrides, manifests, and CLI exit codes."""

import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from panonav.config import (OUT_DIR_ENV, RunConfig, apply_overrides,
                            config_keys, from_yaml, load_config, to_yaml,
                            write_manifest)
from panonav.errors import ConfigError


def test_yaml_round_trip_is_fixed_point():
    cfg = RunConfig()
    text = to_yaml(cfg)
    again = to_yaml(from_yaml(text))
    assert again == text
    # and once more, bytes for bytes
    assert to_yaml(from_yaml(again)) == again


def test_partial_yaml_fills_defaults():
    cfg = from_yaml("train:\n  lr: 0.01\n")
    assert cfg.train.lr == 0.01
    assert cfg.train.iterations == RunConfig().train.iterations
    assert from_yaml("").train.lr == RunConfig().train.lr


def test_unknown_keys_fail_with_suggestion():
    with pytest.raises(ConfigError, match="closest valid key.*train"):
        from_yaml("trian:\n  lr: 0.01\n")
    with pytest.raises(ConfigError, match="train.iterations"):
        from_yaml("train:\n  iteration: 5\n")


def test_yaml_rejects_non_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        from_yaml("- 1\n- 2\n")


def test_overrides_coerce_and_nest():
    cfg = apply_overrides(RunConfig(), [
        "train.lr=5e-4",
        "train.iterations=100",
        "arch.channels=[8, 8, 8, 8]",
        "arch.strides=[[1, 2], [2, 2], [2, 2], [1, 1]]",
        "obs.mode=forward",
        "precision=float32",
    ])
    assert cfg.train.lr == 5e-4
    assert cfg.train.iterations == 100
    assert cfg.arch.channels == (8, 8, 8, 8)
    assert cfg.arch.strides == ((1, 2), (2, 2), (2, 2), (1, 1))
    assert cfg.obs.mode == "forward"
    assert cfg.dtype is np.float32
    assert RunConfig().dtype is np.float64


def test_override_errors():
    with pytest.raises(ConfigError, match="not key=value"):
        apply_overrides(RunConfig(), ["train.lr"])
    with pytest.raises(ConfigError, match="closest valid key: train.lr"):
        apply_overrides(RunConfig(), ["train.lrr=1e-3"])
    with pytest.raises(ConfigError, match="expects an integer"):
        apply_overrides(RunConfig(), ["train.iterations=2.5"])
    with pytest.raises(ConfigError, match="expects a number"):
        apply_overrides(RunConfig(), ["train.lr=fast"])


def test_validation_catches_bad_values():
    with pytest.raises(ConfigError, match="panorama or forward"):
        load_config(None, ["obs.mode=sideways"])
    with pytest.raises(ConfigError):
        load_config(None, ["precision=float16"])
    with pytest.raises(ConfigError):
        load_config(None, ["eval.axis=altitude"])


def test_config_keys_inventory():
    keys = config_keys()
    assert len(keys) == 100
    as_dict = dict(keys)
    # the default loss weights echo with these exact values
    assert as_dict["loss.col"] == 5.0
    assert as_dict["loss.v_hat"] == 2.0
    assert as_dict["loss.obj"] == 2.0
    assert as_dict["loss.acc"] == 0.01
    assert as_dict["loss.jerk"] == 0.001
    assert "col: 5.0" in to_yaml(RunConfig())


def test_out_dir_env_override(monkeypatch, tmp_path):
    cfg = RunConfig(out_dir="runs", run_name="abc")
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)
    assert cfg.resolved_out_dir() == os.path.join("runs", "abc")
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path))
    assert cfg.resolved_out_dir() == os.path.join(str(tmp_path), "abc")


def test_manifest_replays_identical_config(tmp_path):
    cfg = apply_overrides(RunConfig(), ["train.lr=2e-4", "eval.n_agents=5"])
    path = write_manifest(str(tmp_path), "train", cfg, seed=3,
                          outputs=["train_log.csv"])
    assert os.path.basename(path) == "manifest.yaml"
    replayed = load_config(path)
    assert to_yaml(replayed) == to_yaml(cfg)


# ---------------------------------------------------------------------------
# CLI (subprocess)

def run_cli(*argv, out_root=None, timeout=600):
    env = os.environ.copy()
    if out_root is not None:
        env[OUT_DIR_ENV] = str(out_root)
    return subprocess.run([sys.executable, "-m", "panonav.cli", *argv],
                          capture_output=True, text=True, env=env,
                          timeout=timeout)


TINY = ("--set", "train.iterations=2", "--set", "train.batch_size=4",
        "--set", "train.horizon=2", "--set", "train.agents_min=2",
        "--set", "train.agents_max=2", "--set", "train.checkpoint_every=0")


def test_cli_train_and_resume(tmp_path):
    out = run_cli("train", *TINY, "--quiet", out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    run_dir = tmp_path / "run"
    assert (run_dir / "manifest.yaml").exists()
    assert (run_dir / "ckpt_000002.bin").exists()
    with open(run_dir / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["iteration"] for r in rows] == ["0", "1"]

    out = run_cli("train", *TINY, "--set", "train.iterations=3",
                  "--resume", "2", "--quiet", out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    assert (run_dir / "ckpt_000003.bin").exists()


def test_cli_eval_baseline(tmp_path):
    out = run_cli("eval", "--method", "apf",
                  "--set", "eval.duration=2", "--set", "eval.n_agents=2",
                  out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    assert "SR" in out.stdout
    eval_dir = tmp_path / "run" / "eval"
    assert (eval_dir / "results.csv").exists()
    assert (eval_dir / "report.txt").exists()


def test_cli_sweep(tmp_path):
    out = run_cli("sweep", "--methods", "apf",
                  "--set", "eval.axis=scale", "--set", "eval.values=[2]",
                  "--set", "eval.n_maps=1", "--set", "eval.duration=2",
                  "--quiet", out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    with open(tmp_path / "run" / "sweep" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["method"] == "apf"


def test_cli_render(tmp_path):
    out = run_cli("render", "--every", "5",
                  "--set", "eval.duration=1", "--set", "eval.n_agents=2",
                  "--quiet", out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "run" / "render" / "frames" / "index.txt").exists()


def test_cli_gradcheck_ops(tmp_path):
    out = run_cli("gradcheck", "--scope", "ops", out_root=tmp_path)
    assert out.returncode == 0, out.stderr
    assert "all gradient checks passed" in out.stdout


def test_cli_config_errors(tmp_path):
    cases = (
        ("train", "--set", "train.lrr=1e-3"),          # unknown key
        ("train", "--set", "train.lr=-1"),             # bad value
        ("eval", "--method", "policy"),                # missing --checkpoint
        ("eval", "--ablation", "--frames",
         "--checkpoint", "x.bin"),                     # conflicting flags
        ("eval", "--ablation", "--method", "apf"),     # ablation needs policy
    )
    for argv in cases:
        out = run_cli(*argv, "--quiet", out_root=tmp_path)
        assert out.returncode == 2, (argv, out.stderr)
        assert "error (config):" in out.stderr


def test_cli_io_error_missing_checkpoint(tmp_path):
    out = run_cli("eval", "--method", "policy",
                  "--checkpoint", str(tmp_path / "missing.bin"),
                  "--set", "eval.duration=1", "--quiet", out_root=tmp_path)
    assert out.returncode == 3, out.stderr
    assert "error (io):" in out.stderr


def test_cli_numeric_error_exit_code(tmp_path):
    # an absurd timestep overflows the integrator, which must surface as
    # the numeric-failure exit code rather than a traceback
    out = run_cli("train", *TINY, "--set", "dyn.dt=1e80",
                  "--set", "train.horizon=8", "--quiet", out_root=tmp_path)
    assert out.returncode == 4, (out.returncode, out.stderr)
    assert "error (numeric):" in out.stderr

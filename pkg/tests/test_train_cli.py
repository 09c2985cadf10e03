"""Training loop behavior (in process) and the command line surface
(subprocess): overfit, resume, abort-on-divergence, and exit codes."""

import json
import os
from pathlib import Path
import subprocess
import sys

import numpy as np
import pytest

from conftest import replace_cfg, tiny_config
from refgrid.data import GroundingDataset
from refgrid.tensor import NumericError
from refgrid.train import (evaluate, load_model_from_checkpoint, train_model)


def _quiet(_msg):
    pass


# ---------------------------------------------------------------------------
# training loop, in process


class TestTrainModel:
    def test_memorizes_four_scenes(self, tiny_dataset, tmp_path):
        # One batch repeated: the loss must collapse and the model must hit
        # every one of the four training scenes it saw.  One step per epoch,
        # so the lr halving period must be pushed out of the way.
        root, _ = tiny_dataset
        cfg = tiny_config(max_epochs=150, patience=150, batch_size=4,
                          lr_half_every=1000)
        out = tmp_path / "overfit"
        summary = train_model(cfg, root, str(out), log=_quiet, max_train=4)
        assert summary["epochs"] == 150
        train = GroundingDataset(root, "train")
        model, _, _ = load_model_from_checkpoint(
            str(out / "last.ckpt"), len(train.vocab))
        got = evaluate(model, train, indices=np.arange(4))
        assert got["precision"] == 1.0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        first = json.loads(lines[0])
        last = json.loads(lines[-1])
        assert last["train_total"] < 0.6 * first["train_total"]

    def test_resume_continues_metrics(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        out = tmp_path / "resume"
        cfg = tiny_config(max_epochs=2)
        train_model(cfg, root, str(out), log=_quiet)
        cfg2 = tiny_config(max_epochs=4)  # schedule keys may change
        train_model(cfg2, root, str(out), log=_quiet,
                    resume=str(out / "last.ckpt"))
        epochs = [json.loads(l)["epoch"]
                  for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert epochs == [0, 1, 2, 3]

    def test_resume_rejects_model_shape_change(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        out = tmp_path / "reject"
        train_model(tiny_config(max_epochs=1), root, str(out), log=_quiet)
        changed = tiny_config(max_epochs=2, feat_ch=16)
        with pytest.raises(ValueError, match="feat_ch"):
            train_model(changed, root, str(out), log=_quiet,
                        resume=str(out / "last.ckpt"))

    def test_attention_loss_weight_zero_is_reported_not_added(
            self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        cfg = tiny_config(max_epochs=1, enable_att_loss=False)
        out = tmp_path / "noatt"
        train_model(cfg, root, str(out), log=_quiet)
        line = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert line["train_att"] > 0.0           # still measured
        assert line["train_total"] == pytest.approx(line["train_det"],
                                                    rel=1e-6)

    def test_divergence_aborts_with_checkpoints_intact(
            self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        out = tmp_path / "diverge"
        ok_cfg = tiny_config(max_epochs=1)
        train_model(ok_cfg, root, str(out), log=_quiet)
        good = (out / "last.ckpt").read_bytes()

        bad_cfg = tiny_config(max_epochs=3, lr=1e9)
        with np.errstate(over="ignore"), \
                pytest.raises(NumericError, match="non-finite"):
            train_model(bad_cfg, root, str(tmp_path / "diverge2"),
                        log=_quiet)
        # the earlier run's files were not touched by the failed run
        assert (out / "last.ckpt").read_bytes() == good

    def test_same_seed_runs_are_bitwise_identical(self, tiny_dataset,
                                                  tmp_path):
        root, _ = tiny_dataset
        cfg = tiny_config(max_epochs=2)
        a, b = tmp_path / "a", tmp_path / "b"
        train_model(cfg, root, str(a), log=_quiet)
        train_model(cfg, root, str(b), log=_quiet)
        assert (a / "metrics.jsonl").read_bytes() == \
            (b / "metrics.jsonl").read_bytes()
        assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()


# ---------------------------------------------------------------------------
# command line, subprocess


def _run_cli(*argv, env_extra=None, cwd=None):
    env = dict(os.environ, RGIN_BACKEND="numpy")
    env.update(env_extra or {})
    return subprocess.run(
        [sys.executable, "-m", "refgrid.cli", *argv],
        capture_output=True, text=True, env=env, cwd=cwd, timeout=600)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen-data + a 2-epoch training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    run = root / "run"
    r = _run_cli("gen-data", "--data-dir", str(data),
                 "--n-train", "12", "--n-val", "6", "--n-test", "6",
                 "--seed", "4")
    assert r.returncode == 0, r.stderr
    r = _run_cli("train", "--data-dir", str(data), "--out-dir", str(run),
                 "--channels", "4,6,8,8", "--feat-ch", "8",
                 "--fused-dim", "12", "--text-dim", "10", "--embed-dim", "6",
                 "--attn-dim", "6", "--num-priors", "2", "--batch-size", "4",
                 "--n-train", "12", "--n-val", "6", "--n-test", "6",
                 "--max-epochs", "2", "--seed", "4")
    assert r.returncode == 0, r.stderr
    return {"data": str(data), "run": str(run), "root": str(root)}


class TestCli:
    def test_gen_data_output(self, cli_workspace):
        assert os.path.exists(os.path.join(cli_workspace["data"],
                                           "manifest.json"))

    def test_train_artifacts(self, cli_workspace):
        run = cli_workspace["run"]
        for name in ("best.ckpt", "last.ckpt", "metrics.jsonl"):
            assert os.path.exists(os.path.join(run, name))
        lines = Path(run, "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_eval_writes_report(self, cli_workspace):
        out = os.path.join(cli_workspace["root"], "eval.json")
        r = _run_cli("eval",
                     "--checkpoint",
                     os.path.join(cli_workspace["run"], "best.ckpt"),
                     "--data-dir", cli_workspace["data"],
                     "--split", "val", "--out", out)
        assert r.returncode == 0, r.stderr
        report = json.loads(Path(out).read_text())
        assert 0.0 <= report["precision"] <= 1.0
        assert report["count"] == 6
        assert "val" in r.stdout or "precision" in r.stdout

    def test_visualize_emits_files(self, cli_workspace):
        viz = os.path.join(cli_workspace["root"], "viz")
        r = _run_cli("visualize",
                     "--checkpoint",
                     os.path.join(cli_workspace["run"], "best.ckpt"),
                     "--data-dir", cli_workspace["data"],
                     "--split", "val", "--ids", "0,2",
                     "--viz-dir", viz)
        assert r.returncode == 0, r.stderr
        names = os.listdir(viz)
        assert any(n.endswith("_boxes.png") for n in names)
        assert any("head" in n for n in names)
        assert any(n.endswith(".txt") for n in names)

    def test_bench_report(self, cli_workspace):
        out = os.path.join(cli_workspace["root"], "bench.json")
        r = _run_cli("bench", "--iterations", "2", "--batch", "2",
                     "--no-compare",
                     "--image-size", "32", "--channels", "3,4,5,5",
                     "--feat-ch", "8", "--fused-dim", "8", "--text-dim", "8",
                     "--embed-dim", "5", "--attn-dim", "4",
                     "--num-priors", "1",
                     "--out", out)
        assert r.returncode == 0, r.stderr
        report = json.loads(Path(out).read_text())
        assert report["single"]["iterations"] == 2

    def test_unknown_flag_exits_2(self):
        r = _run_cli("train", "--warp-speed", "9")
        assert r.returncode == 2

    def test_missing_checkpoint_exits_1(self, cli_workspace):
        r = _run_cli("eval", "--checkpoint", "/nonexistent.ckpt",
                     "--data-dir", cli_workspace["data"])
        assert r.returncode == 1
        assert "error:" in r.stderr

    def test_invalid_config_value_exits_1(self):
        r = _run_cli("gen-data", "--image-size", "40")
        assert r.returncode == 1
        assert "error:" in r.stderr

    def test_env_seed_respected(self, cli_workspace, tmp_path_factory):
        d = tmp_path_factory.mktemp("envseed")
        r = _run_cli("gen-data", "--data-dir", str(d / "x"),
                     "--n-train", "2", "--n-val", "2", "--n-test", "2",
                     env_extra={"RGIN_SEED": "31"})
        assert r.returncode == 0, r.stderr
        manifest = json.loads((d / "x" / "manifest.json").read_text())
        assert manifest["seed"] == 31

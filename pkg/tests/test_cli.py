import json
import os

import numpy as np
import pytest

from pnpfusion import checks, cli
from pnpfusion.autodiff import GradCheckEntry, GradCheckReport
from pnpfusion.config import ModelConfig, RunConfig, TrainConfig
from pnpfusion.metrics import METRIC_KEYS
from pnpfusion.scenesim import SimConfig, read_predictions, read_scene


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """simgen -> train -> eval once; the commands under test share artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(
        seed=5,
        model=ModelConfig(embed_dim=16, n_queries=8, depth=2, traj_hidden=32),
        sim=SimConfig(min_agents=1, max_agents=3, agent_points_per_sweep=6,
                      clutter_per_sweep=8),
        train=TrainConfig(steps=4, window=2, lr=5e-4),
    )
    cfg_path = root / "run.json"
    cfg.save(cfg_path)
    scenes = root / "scenes"
    out = root / "run"
    assert cli.main(["simgen", "--out", str(scenes), "--count", "3",
                     "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--scenes", str(scenes), "--out", str(out),
                     "--config", str(cfg_path)]) == 0
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                     "--scenes", str(scenes), "--out", str(out)]) == 0
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path, "scenes": scenes, "out": out}


class TestSimgen:
    def test_scene_files_written_and_readable(self, workspace):
        files = sorted(os.listdir(workspace["scenes"]))
        assert files == ["config.json", "scene_0000.scn", "scene_0001.scn", "scene_0002.scn"]
        scene = read_scene(workspace["scenes"] / "scene_0001.scn")
        assert len(scene.frames) == 40
        assert scene.seed == 6  # base seed + scene id

    def test_embedded_config_round_trips(self, workspace):
        saved = RunConfig.load(workspace["scenes"] / "config.json")
        assert saved.to_dict() == workspace["cfg"].to_dict()


class TestTrain:
    def test_artifacts_exist(self, workspace):
        out = workspace["out"]
        assert (out / "checkpoint.npz").exists()
        assert (out / "loss_trace.csv").exists()
        assert (out / "config.json").exists()

    def test_same_seed_reproduces_trace_bytes(self, workspace, tmp_path):
        out2 = tmp_path / "run2"
        assert cli.main(["train", "--scenes", str(workspace["scenes"]), "--out", str(out2),
                         "--config", str(workspace["cfg_path"])]) == 0
        a = (workspace["out"] / "loss_trace.csv").read_bytes()
        b = (out2 / "loss_trace.csv").read_bytes()
        assert a == b

    def test_no_lidar_switch_runs(self, workspace, tmp_path):
        out2 = tmp_path / "nolidar"
        assert cli.main(["train", "--scenes", str(workspace["scenes"]), "--out", str(out2),
                         "--config", str(workspace["cfg_path"]), "--steps", "2",
                         "--no-lidar"]) == 0


class TestEval:
    def test_metrics_document_has_exact_keys(self, workspace):
        with open(workspace["out"] / "metrics.json") as f:
            payload = json.load(f)
        assert set(payload["metrics"].keys()) == set(METRIC_KEYS)
        assert payload["config"] == workspace["cfg"].to_dict()
        assert "seed" in payload

    def test_gate_report_rows_match_predictions(self, workspace):
        records, header = read_predictions(workspace["out"] / "predictions.pred")
        lines = (workspace["out"] / "gates.csv").read_text().strip().splitlines()
        assert len(lines) - 1 == len(records)
        assert header["config"] == workspace["cfg"].to_dict()

    def test_eval_is_reproducible_via_files(self, workspace, tmp_path):
        out2 = tmp_path / "eval2"
        assert cli.main(["eval", "--checkpoint", str(workspace["out"] / "checkpoint.npz"),
                         "--scenes", str(workspace["scenes"]), "--out", str(out2)]) == 0
        a = (workspace["out"] / "predictions.pred").read_bytes()
        b = (out2 / "predictions.pred").read_bytes()
        assert a == b

    def test_ablation_flags_accepted(self, workspace, tmp_path):
        out2 = tmp_path / "ablate"
        assert cli.main(["eval", "--checkpoint", str(workspace["out"] / "checkpoint.npz"),
                         "--scenes", str(workspace["scenes"]), "--out", str(out2),
                         "--no-lidar", "--camera-noise", "4.0"]) == 0
        with open(out2 / "metrics.json") as f:
            payload = json.load(f)
        assert payload["ablation"] == {"no_lidar": True, "camera_noise": 4.0}


class TestGatesAndPlot:
    def test_gates_binning_table(self, workspace, capsys):
        assert cli.main(["gates", "--pred", str(workspace["out"] / "predictions.pred"),
                         "--out", str(workspace["out"])]) == 0
        captured = capsys.readouterr().out
        assert captured.startswith("bin,count,mean_gate")
        assert (workspace["out"] / "gate_bins.csv").exists()

    def test_plot_renders_figures(self, workspace):
        assert cli.main(["plot", "--out", str(workspace["out"]),
                         "--scenes", str(workspace["scenes"])]) == 0
        for name in ("loss_trace.png", "gate_bins.png", "scene_bev.png"):
            assert (workspace["out"] / name).exists()


class TestErrorsAndGradcheck:
    def test_missing_checkpoint_fails_with_json_error(self, workspace, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.npz"),
                         "--scenes", str(workspace["scenes"]), "--out", str(tmp_path)])
        assert code != 0
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert "error" in json.loads(err)

    def test_empty_scene_dir_fails(self, tmp_path, capsys):
        code = cli.main(["train", "--scenes", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code != 0
        json.loads(capsys.readouterr().err.strip().splitlines()[-1])

    def test_gradcheck_exit_codes(self, monkeypatch, capsys):
        ok = GradCheckReport([GradCheckEntry("x", 1e-9, 4, 0, None, True)])
        bad = GradCheckReport([GradCheckEntry("x", 1.0, 4, 0, (0,), False)])
        monkeypatch.setattr(checks, "run_all", lambda seed=0: [("fake_ok", ok)])
        assert cli.main(["gradcheck"]) == 0
        monkeypatch.setattr(checks, "run_all", lambda seed=0: [("fake_bad", bad)])
        assert cli.main(["gradcheck"]) == 1
        out = capsys.readouterr().out
        assert "FAIL fake_bad" in out

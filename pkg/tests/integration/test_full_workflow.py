"""
Integration tests for the complete LaneTopoLab workflow
Tests scene generation, training, checkpoint evaluation and ablations end to end
"""

import json
import pytest
import numpy as np
import pandas as pd
import os

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

import main
from checkpoint import file_hash
from config import load_run_config
from harness import Trainer, ablate, evaluate, evaluation_scenes, train
from scene import load_scene_dir


@pytest.mark.integration
class TestFullWorkflow:
    """Test complete LaneTopoLab workflow"""

    def setup_method(self):
        """Set up integration test fixtures"""
        self.config_path = os.path.join(os.path.dirname(__file__), '..', 'fixtures', 'test_run.cfg')
        self.cfg = load_run_config(self.config_path)

    def test_training_is_deterministic(self, tmp_path):
        """Test two runs with the same config produce identical artifacts"""
        first = train(self.cfg, tmp_path / "first", evaluate_after=False)
        second = train(self.cfg, tmp_path / "second", evaluate_after=False)

        assert first.checkpoint_hash == second.checkpoint_hash
        assert first.checkpoint_hash == file_hash(tmp_path / "first" / "checkpoint.ltck")
        assert (tmp_path / "first" / "losses.csv").read_bytes() == (tmp_path / "second" / "losses.csv").read_bytes()
        assert len(first.losses) == self.cfg.steps

    def test_run_seed_changes_initialization(self, tmp_path):
        """Test a different run seed gives a different checkpoint"""
        first = train(self.cfg, tmp_path / "seed0", seed=0, evaluate_after=False)
        second = train(self.cfg, tmp_path / "seed1", seed=1, evaluate_after=False)

        assert first.checkpoint_hash != second.checkpoint_hash

    def test_train_then_evaluate(self, tmp_path):
        """Test checkpoint evaluation reproduces the post-training report"""
        record = train(self.cfg, tmp_path)
        scenes = evaluation_scenes(self.cfg)

        first = evaluate(tmp_path / "checkpoint.ltck", scenes)
        second = evaluate(tmp_path / "checkpoint.ltck", scenes)

        assert first.to_dict() == second.to_dict()
        for key in ("det_l", "det_t", "top_ll", "top_lt", "ols"):
            assert 0.0 <= record.report[key] <= 1.0
            assert getattr(first, key) == pytest.approx(record.report[key])
        with open(tmp_path / "run.json", 'r') as f:
            saved = json.load(f)
        assert saved["checkpoint_hash"] == record.checkpoint_hash
        assert saved["parameter_count"] == record.parameter_count
        assert (tmp_path / "report.json").exists()

    @pytest.mark.parametrize("mode", ["standard", "naive_o2m", "group_o2m"])
    def test_other_modes_train(self, mode, tmp_path):
        """Test every decoder mode completes a short run"""
        cfg = self.cfg.with_overrides(mode=mode, steps=2)

        record = train(cfg, tmp_path, evaluate_after=False)

        frame = record.loss_frame()
        assert len(frame) == 2
        assert np.isfinite(frame["total"]).all()
        if mode != "standard":
            assert (frame["aux_sets"] > 0).all()

    def test_cli_workflow(self, tmp_path):
        """Test scenegen, train and eval through the command line"""
        scenes_dir = tmp_path / "scenes"
        run_dir = tmp_path / "run"
        report_path = tmp_path / "report.json"

        assert main.main(["scenegen", "--config", self.config_path, "--count", "3", "--seed", "40",
                          "--out", str(scenes_dir)]) == main.EXIT_OK
        assert len(load_scene_dir(scenes_dir)) == 3
        assert main.main(["train", "--config", self.config_path, "--out", str(run_dir)]) == main.EXIT_OK
        assert main.main(["eval", "--checkpoint", str(run_dir / "checkpoint.ltck"), "--scenes", str(scenes_dir),
                          "--out", str(report_path)]) == main.EXIT_OK

        with open(report_path, 'r') as f:
            report = json.load(f)
        assert len(report["per_scene"]) == 3
        assert len(pd.read_csv(report_path.with_suffix(".csv"))) == 3

    def test_mode_ablation(self, tmp_path):
        """Test one seed of the mode axis writes its tables and plot"""
        cfg = self.cfg.with_overrides(steps=1)

        result = ablate(cfg, "mode", seeds=[0], out_dir=tmp_path)

        out = tmp_path / "ablate_mode"
        assert list(result.medians["mode"]) == ["baseline_o2o", "naive_o2m", "group_o2m", "reordered"]
        assert len(pd.read_csv(out / "ablation.csv")) == 4
        assert (out / "medians.csv").exists()
        assert (out / "ablation_mode.svg").exists()
        assert len(result.trends) == 2


@pytest.mark.integration
@pytest.mark.slow
class TestTraining:
    """Test that optimization makes progress"""

    def test_loss_halves_on_fixed_pool(self):
        """Test 500 reordered steps on a fixed 10-scene pool halve the total loss"""
        cfg = load_run_config(os.path.join(os.path.dirname(__file__), '..', 'fixtures', 'test_run.cfg'))
        trainer = Trainer(cfg.with_overrides(mode="reordered", pool_size=10, steps=500, lr=1e-3))

        totals = [row["total"] for row in trainer.fit()]

        assert len(trainer.pool) == 10
        assert len(totals) == 500
        assert np.mean(totals[-20:]) < 0.5 * np.mean(totals[:5])

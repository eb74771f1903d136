import csv

import pytest

from rfsr.cli import main
from rfsr.config import (
    DEFAULTS,
    PRESET_NAMES,
    RunConfig,
    dataset_from_config,
    degradation_from_config,
    loss_weights_from_config,
    parse_config_text,
    schedule_from_config,
    train_config_from_config,
)
from rfsr.data import BlurStage, JpegStage
from rfsr.errors import ConfigurationError
from rfsr.imaging import write_image

from helpers import rand_image


class TestConfigParsing:
    def test_dotted_keys_and_json_values(self):
        text = """
        # comment
        run.seed = 7
        model.kind = toy
        schedule.phase_mix = [0.25, 0.75]
        reward.models = [{"id": "clipiqa", "kind": "toy"}]
        """
        values = parse_config_text(text)
        assert values["run.seed"] == 7
        assert values["model.kind"] == "toy"
        assert values["schedule.phase_mix"] == [0.25, 0.75]
        assert values["reward.models"][0]["kind"] == "toy"

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigurationError, match="expected"):
            parse_config_text("run.seed 7")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            RunConfig({"run.velocity": 3})

    def test_defaults_carry_shipped_values(self):
        cfg = RunConfig({})
        assert cfg.get("train.learning_rate") == 5e-6
        assert cfg.get("loss.lambda_dwt") == 5e-4

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigurationError, match="missing.cfg"):
            RunConfig.load(tmp_path / "missing.cfg")

    def test_resolved_round_trip(self, tmp_path):
        cfg = RunConfig({"run.seed": 9, "model.kind": "toy"})
        path = cfg.write_resolved(tmp_path)
        again = RunConfig.load(path)
        assert again.values == cfg.values
        assert again.hash() == cfg.hash()


class TestPresets:
    @pytest.mark.parametrize("name", PRESET_NAMES)
    def test_all_presets_parse_clean(self, name):
        cfg = RunConfig.load(name)
        assert set(cfg.values) == set(DEFAULTS)

    def test_seesr_preset_carries_shipped_hyperparameters(self):
        cfg = RunConfig.load("seesr_rfsr")
        assert cfg.get("train.learning_rate") == 5e-6
        assert cfg.get("train.batch_size") == 8
        assert cfg.get("train.iterations") == 10000
        assert cfg.get("train.ema_decay") == 0.999
        assert cfg.get("loss.lambda_dwt") == 5e-4
        assert cfg.get("loss.lambda_clipiqa") == 5e-5
        assert cfg.get("loss.lambda_iw") == 5e-6
        assert cfg.get("loss.lambda_r") == 5e-6
        sched = schedule_from_config(cfg)
        assert (sched.st1, sched.st2, sched.st_latest, sched.T) == (20, 40, 50, 1000)

    def test_pasd_preset_schedule(self):
        sched = schedule_from_config(RunConfig.load("pasd_rfsr"))
        assert (sched.st1, sched.st2, sched.st_latest) == (8, 17, 20)

    def test_toy_preset_builds_whole_stack(self):
        cfg = RunConfig.load("toy")
        tc = train_config_from_config(cfg, output_dir="/tmp/unused")
        assert tc.iterations == 10
        ds = dataset_from_config(cfg)
        pair = ds.pair_at(0)
        assert pair.gt.shape == (32, 32, 3)
        assert pair.caption.text == "photo"
        w = loss_weights_from_config(cfg)
        assert w.reward_weights.lambda_clipiqa == 1.0

    def test_schedule_override_beats_preset(self):
        cfg = RunConfig({"schedule.preset": "seesr", "schedule.st1": 10})
        sched = schedule_from_config(cfg)
        assert sched.st1 == 10 and sched.st2 == 40


class TestDegradationFromConfig:
    def test_stage_specs(self):
        dcfg = degradation_from_config(
            {
                "stages": [
                    {"kind": "blur", "sigma_range": [0.5, 1.5], "kernel_size": 9},
                    {"kind": "jpeg", "quality_range": [40, 90]},
                ],
                "second_order": False,
            }
        )
        assert isinstance(dcfg.stages[0], BlurStage)
        assert dcfg.stages[0].sigma_range == (0.5, 1.5)
        assert isinstance(dcfg.stages[1], JpegStage)
        assert not dcfg.second_order

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigurationError):
            degradation_from_config({"stages": [{"kind": "vignette"}]})

    def test_bad_stage_params_rejected(self):
        with pytest.raises(ConfigurationError):
            degradation_from_config({"stages": [{"kind": "blur", "radius": 3}]})

    def test_default_chain_when_unspecified(self):
        dcfg = degradation_from_config(None)
        assert len(dcfg.stages) == 4 and dcfg.second_order


class TestCli:
    def test_train_toy_preset(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", "toy", "--output", str(out)]) == 0
        assert (out / "config.resolved").exists()
        assert (out / "metrics.csv").exists()
        with open(out / "metrics.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 10
        assert (out / "checkpoints" / "iter_000010" / "params").exists()
        assert (out / "checkpoints" / "iter_000010" / "ema").exists()

    def test_missing_config_names_path(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "missing.cfg")])
        assert rc == 1
        assert "missing.cfg" in capsys.readouterr().err

    def test_analyze_without_gt_names_flag(self, capsys):
        rc = main(["analyze", "--model", "x", "--lr", "y", "--out", "z"])
        assert rc == 1
        assert "--gt" in capsys.readouterr().err

    def test_unknown_subcommand_prints_usage(self, capsys):
        rc = main(["simulate"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "usage" in err.lower()

    def test_rerun_from_resolved_config_reproduces(self, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", "toy", "--output", str(out1)]) == 0
        resolved = out1 / "config.resolved"
        assert main(["train", "--config", str(resolved), "--output", str(out2)]) == 0
        rows1 = list(csv.DictReader(open(out1 / "metrics.csv")))
        rows2 = list(csv.DictReader(open(out2 / "metrics.csv")))
        for r1, r2 in zip(rows1, rows2):
            assert r1["loss_total"] == r2["loss_total"]

    def test_full_pipeline_degrade_eval_analyze_export(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        for i in range(2):
            write_image(rand_image(40, 40, seed=i).float(), src / f"im{i}.png")
        run = tmp_path / "run"
        assert main(["train", "--config", "toy", "--output", str(run)]) == 0
        ckpt = run / "checkpoints" / "iter_000010"

        pairs = tmp_path / "pairs"
        assert main(["degrade", "--in", str(src), "--out", str(pairs), "--seed", "5"]) == 0
        with open(pairs / "manifest.csv") as fh:
            manifest = list(csv.DictReader(fh))
        assert len(manifest) == 2
        assert set(manifest[0]) == {"source_id", "seed", "lr_path", "gt_path"}

        report = tmp_path / "eval" / "report.csv"
        assert main(
            ["eval", "--model", str(ckpt), "--data", str(pairs), "--metrics", "ssim,psnr",
             "--out", str(report)]
        ) == 0
        assert report.exists()
        assert (report.parent / "config.resolved").exists()

        traj = tmp_path / "an" / "traj.csv"
        assert main(
            ["analyze", "--model", str(ckpt), "--lr", str(pairs / "lr" / "im0.png"),
             "--gt", str(pairs / "gt" / "im0.png"), "--out", str(traj)]
        ) == 0
        with open(traj) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["st", "t", "ll_ssim", "high_ssim"]
        assert len(rows) == 1 + 10

        ema_out = tmp_path / "ema_weights"
        assert main(["export-ema", "--checkpoint", str(ckpt), "--out", str(ema_out)]) == 0
        assert ema_out.exists()

    def test_degrade_deterministic_per_seed(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        write_image(rand_image(24, 24, seed=9).float(), src / "a.png")
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        assert main(["degrade", "--in", str(src), "--out", str(out1), "--seed", "11"]) == 0
        assert main(["degrade", "--in", str(src), "--out", str(out2), "--seed", "11"]) == 0
        assert (out1 / "lr" / "a.png").read_bytes() == (out2 / "lr" / "a.png").read_bytes()

    def test_resume_roundtrip(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", "toy", "--output", str(out)]) == 0
        ckpt = out / "checkpoints" / "iter_000010"
        # Extend the run from the checkpoint with a longer config.
        cfg = RunConfig.load("toy")
        cfg.override("train.iterations", 12)
        cfg.override("run.output_dir", str(out))
        cfg_path = tmp_path / "extended.cfg"
        cfg_path.write_text(cfg.resolved_text())
        assert main(["train", "--config", str(cfg_path), "--resume", str(ckpt)]) == 0
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12
        assert [int(r["iteration"]) for r in rows] == list(range(12))

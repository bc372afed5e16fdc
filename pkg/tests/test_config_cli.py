import json

import pytest
import yaml

from balagan.cli import main
from balagan.config import RunConfig
from balagan.errors import ConfigError
from balagan.modality import ModalityAssignment

from synth import two_modality_dataset


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.trainer.steps == 2000
        assert cfg.losses.lambda_reg == 10.0
        assert cfg.data.value_range == (-1.0, 1.0)

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"dataa": {}})

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"trainer": {"stepz": 5}})

    def test_hash_stable_under_key_reordering(self, tmp_path):
        a = tmp_path / "a.yaml"
        b = tmp_path / "b.yaml"
        a.write_text("name: x\ntrainer:\n  steps: 5\n  seed: 2\n")
        b.write_text("trainer:\n  seed: 2\n  steps: 5\nname: x\n")
        assert RunConfig.from_yaml(a).content_hash() == RunConfig.from_yaml(b).content_hash()

    def test_hash_sensitive_to_values(self):
        a = RunConfig.from_dict({"trainer": {"steps": 5}})
        b = RunConfig.from_dict({"trainer": {"steps": 6}})
        assert a.content_hash() != b.content_hash()

    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict({"name": "rt", "trainer": {"steps": 7},
                                   "data": {"resolution": [32, 32]}})
        path = tmp_path / "c.yaml"
        cfg.to_yaml(path)
        again = RunConfig.from_yaml(path)
        assert again.content_hash() == cfg.content_hash()
        assert again.trainer.steps == 7

    def test_apply_overrides(self):
        cfg = RunConfig().apply_overrides({"trainer.steps": "123",
                                           "losses.lambda_ce": "0",
                                           "ablation.use_dcls": "false"})
        assert cfg.trainer.steps == 123
        assert cfg.losses.lambda_ce == 0.0
        assert cfg.ablation.use_dcls is False

    def test_override_unknown_path_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().apply_overrides({"trainer.stepz": "1"})

    def test_override_k_accepts_auto(self):
        cfg = RunConfig().apply_overrides({"modalities.k": "auto"})
        assert cfg.modalities.k == "auto"

    def test_bad_yaml_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("data: [unclosed")
        with pytest.raises(ConfigError):
            RunConfig.from_yaml(path)


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-shapes")
    two_modality_dataset(root, size=16, n_per_source_style=8, n_target=6, seed=3)
    return root


class TestMakeSplits:
    def test_writes_manifest(self, cli_dataset, tmp_path):
        out = tmp_path / "s.manifest"
        code = main(["make-splits", "--source", str(cli_dataset / "A"),
                     "--target", str(cli_dataset / "B"),
                     "--n-source", "10", "--n-target", "4",
                     "--seed", "5", "--out", str(out)])
        assert code == 0
        from balagan.data import SplitManifest
        manifest = SplitManifest.load(out)
        assert manifest.n_source == 10
        assert manifest.n_target == 4

    def test_idempotent(self, cli_dataset, tmp_path):
        out = tmp_path / "s.manifest"
        args = ["make-splits", "--source", str(cli_dataset / "A"),
                "--target", str(cli_dataset / "B"),
                "--n-source", "10", "--n-target", "4", "--seed", "5",
                "--out", str(out)]
        assert main(args) == 0
        first = out.read_bytes()
        assert main(args) == 0
        assert out.read_bytes() == first

    def test_missing_target_usage_error(self, cli_dataset, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            main(["make-splits", "--source", str(cli_dataset / "A"),
                  "--n-source", "10", "--n-target", "4", "--out",
                  str(tmp_path / "x")])
        assert excinfo.value.code == 2

    def test_insufficient_data_exit_1(self, cli_dataset, tmp_path):
        code = main(["make-splits", "--source", str(cli_dataset / "A"),
                     "--target", str(cli_dataset / "B"),
                     "--n-source", "99999", "--n-target", "4",
                     "--out", str(tmp_path / "x")])
        assert code == 1

    def test_env_seed_used(self, cli_dataset, tmp_path, monkeypatch):
        out_env = tmp_path / "env.manifest"
        monkeypatch.setenv("BALAGAN_SEED", "21")
        main(["make-splits", "--source", str(cli_dataset / "A"),
              "--target", str(cli_dataset / "B"),
              "--n-source", "10", "--n-target", "4", "--out", str(out_env)])
        monkeypatch.delenv("BALAGAN_SEED")
        out_flag = tmp_path / "flag.manifest"
        main(["make-splits", "--source", str(cli_dataset / "A"),
              "--target", str(cli_dataset / "B"),
              "--n-source", "10", "--n-target", "4", "--seed", "21",
              "--out", str(out_flag)])
        assert out_env.read_text() == out_flag.read_text()

    def test_flag_wins_over_env(self, cli_dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("BALAGAN_SEED", "1")
        out = tmp_path / "w.manifest"
        main(["make-splits", "--source", str(cli_dataset / "A"),
              "--target", str(cli_dataset / "B"),
              "--n-source", "10", "--n-target", "4", "--seed", "2",
              "--out", str(out)])
        from balagan.data import SplitManifest
        assert SplitManifest.load(out).seed == 2

    def test_dry_run_no_side_effects(self, cli_dataset, tmp_path, capsys):
        out = tmp_path / "dry.manifest"
        code = main(["make-splits", "--source", str(cli_dataset / "A"),
                     "--target", str(cli_dataset / "B"),
                     "--n-source", "10", "--n-target", "4",
                     "--out", str(out), "--dry-run"])
        assert code == 0
        assert not out.exists()
        assert "dry run" in capsys.readouterr().out


@pytest.fixture(scope="module")
def pipeline_artifacts(cli_dataset, tmp_path_factory):
    """make-splits + discover once; reused by the train/evaluate CLI tests."""
    work = tmp_path_factory.mktemp("cli-pipeline")
    manifest_path = work / "split.manifest"
    assert main(["make-splits", "--source", str(cli_dataset / "A"),
                 "--target", str(cli_dataset / "B"),
                 "--n-source", "16", "--n-target", "6", "--seed", "0",
                 "--out", str(manifest_path)]) == 0
    cfg = {
        "name": "cli-run",
        "data": {"manifest": str(manifest_path), "resolution": [16, 16]},
        "modalities": {"assignment": str(work / "m.assign"), "k": 2,
                       "steps": 4, "batch_size": 4, "embedding_dim": 16,
                       "projection_dim": 8, "allow_invalid_k": True},
        "model": {"base_width": 8, "d_base_width": 8, "style_dim": 16},
        "trainer": {"steps": 2, "batch_size": 2, "seed": 0,
                    "checkpoint_every": 2},
        "eval": {"n_eval": 6, "feature_dim": 8},
    }
    config_path = work / "config.yaml"
    config_path.write_text(yaml.safe_dump(cfg))
    return {"work": work, "config": config_path, "manifest": manifest_path}


class TestPipelineCommands:
    def test_discover_writes_assignment(self, pipeline_artifacts):
        work = pipeline_artifacts["work"]
        code = main(["discover", "--config", str(pipeline_artifacts["config"]),
                     "--k", "2"])
        assert code == 0
        assignment = ModalityAssignment.load(work / "m.assign")
        assert assignment.n_source_classes == 2
        assert assignment.n_classes == 3
        assert (work / "m.encoder.pt").exists()

    def test_discover_auto_k_header(self, pipeline_artifacts, tmp_path):
        out = tmp_path / "auto.assign"
        code = main(["discover", "--config", str(pipeline_artifacts["config"]),
                     "--k", "auto", "--out", str(out)])
        assert code == 0
        # |A|=16, |B|=6 -> minimal k = ceil(16/6) = 3
        text = out.read_text()
        assert "# k=3" in text

    def test_train_translate_evaluate(self, pipeline_artifacts, tmp_path):
        work = pipeline_artifacts["work"]
        assert main(["discover", "--config", str(pipeline_artifacts["config"]),
                     "--k", "2"]) == 0
        assert main(["train", "--config", str(pipeline_artifacts["config"]),
                     "--workdir", str(work)]) == 0
        run_dir = work / "runs" / "cli-run"
        assert (run_dir / "ckpt-2").exists()
        metrics = [json.loads(line) for line in
                   (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert len(metrics) == 2

        out_dir = tmp_path / "translated"
        assert main(["translate", "--config", str(pipeline_artifacts["config"]),
                     "--checkpoint", str(run_dir / "ckpt-2"),
                     "--limit", "4", "--out", str(out_dir)]) == 0
        images = sorted(out_dir.glob("*.png"))
        assert len(images) == 4
        assert (out_dir / "pairs.tsv").exists()

        report_path = tmp_path / "fid.json"
        assert main(["evaluate", "--config", str(pipeline_artifacts["config"]),
                     "--checkpoint", str(run_dir / "ckpt-2"),
                     "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert set(report) >= {"extractor_id", "n_real", "n_fake", "fid"}

    def test_train_ablation_no_dcls_metric_log(self, pipeline_artifacts, tmp_path):
        work = pipeline_artifacts["work"]
        assert main(["discover", "--config", str(pipeline_artifacts["config"]),
                     "--k", "2"]) == 0
        assert main(["train", "--config", str(pipeline_artifacts["config"]),
                     "--run-name", "cli-ablation", "--ablation", "no-dcls",
                     "--workdir", str(work)]) == 0
        metrics = [json.loads(line) for line in
                   (work / "runs" / "cli-ablation" / "metrics.jsonl")
                   .read_text().splitlines()]
        assert all(m["L_CE"] == 0.0 for m in metrics)

    def test_train_dry_run(self, pipeline_artifacts, tmp_path, capsys):
        code = main(["train", "--config", str(pipeline_artifacts["config"]),
                     "--run-name", "dry", "--dry-run", "--workdir", str(tmp_path)])
        assert code == 0
        assert "dry run" in capsys.readouterr().out
        assert not (tmp_path / "runs" / "dry").exists()

    def test_missing_config_file_exit_1(self, tmp_path):
        code = main(["train", "--config", str(tmp_path / "nope.yaml")])
        assert code == 1

    def test_set_overrides_win(self, pipeline_artifacts, tmp_path, capsys):
        code = main(["train", "--config", str(pipeline_artifacts["config"]),
                     "--set", "trainer.steps=9", "--dry-run",
                     "--workdir", str(tmp_path)])
        assert code == 0
        assert "9 steps" in capsys.readouterr().out

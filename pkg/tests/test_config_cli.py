import json

import pytest

from fediskit.cli import main
from fediskit.config import (DEFAULT_HIDDEN_PLANS, config_hash,
                             config_to_json, parse_config)
from fediskit.errors import ConfigError


class TestParseConfig:
    def test_minimal_document_fills_defaults(self):
        cfg = parse_config(text='{"num_clients": 10, "scheme": "strong_noniid"}')
        assert cfg.alpha == 0.2
        assert cfg.threshold.quantile == 0.95
        assert cfg.rounds == 40
        assert cfg.proxy_batch == 256
        assert cfg.learner.temperature == 2.0
        assert cfg.kulsif.lam == 0.1
        assert cfg.clusters_rule == "auto"
        assert cfg.learner.hidden_layers == DEFAULT_HIDDEN_PLANS

    def test_alpha_out_of_range_names_field(self):
        with pytest.raises(ConfigError, match="alpha"):
            parse_config(text='{"alpha": 1.5}')

    def test_strong_infeasibility_caught_before_any_work(self):
        doc = {"dataset": {"kind": "synthetic", "num_classes": 10},
               "scheme": "strong_noniid", "num_clients": 12}
        with pytest.raises(ConfigError, match="infeasible"):
            parse_config(text=json.dumps(doc))

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config(text='{"gamma": 3}')

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="learner"):
            parse_config(text='{"learner": {"momentum": 0.9}}')

    def test_parse_error_reports_line(self):
        with pytest.raises(ConfigError, match="line"):
            parse_config(text='{"alpha": 0.2,\n  broken}')

    def test_threshold_must_be_exactly_one_of(self):
        with pytest.raises(ConfigError, match="threshold"):
            parse_config(text='{"threshold": {"quantile": 0.9, "raw": 1.0}}')
        cfg = parse_config(text='{"threshold": {"quantile": null, "raw": 2.5}}')
        assert cfg.threshold.raw == 2.5

    def test_single_hidden_plan_broadcast(self):
        cfg = parse_config(text='{"learner": {"hidden_layers": [64, 32]}}')
        assert cfg.learner.hidden_layers == ((64, 32),)
        assert cfg.hidden_plan_for(0) == (64, 32)
        assert cfg.hidden_plan_for(9) == (64, 32)

    def test_overrides_applied_and_validated(self):
        cfg = parse_config(text="{}", overrides={"seed": 7, "rounds": 3})
        assert cfg.seed == 7 and cfg.rounds == 3
        with pytest.raises(ConfigError):
            parse_config(text="{}", overrides={"alpha": 2.0})

    def test_canonical_json_roundtrip_and_hash(self):
        cfg = parse_config(text='{"seed": 5, "rounds": 2}')
        again = parse_config(text=config_to_json(cfg))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_idx_kind_requires_paths(self):
        with pytest.raises(ConfigError, match="images_path"):
            parse_config(text='{"dataset": {"kind": "idx"}}')


@pytest.fixture
def tiny_config_file(tmp_path):
    doc = {
        "dataset": {"kind": "synthetic", "num_classes": 5, "per_class": 60,
                    "dim": 8},
        "num_clients": 5,
        "scheme": "strong_noniid",
        "rounds": 2,
        "learner": {"distill_epochs": 4, "distill_lr": 0.2, "lr": 0.05,
                    "temperature": 1.0},
        "seed": 0,
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


class TestCli:
    def test_run_writes_outputs(self, tiny_config_file, tmp_path):
        assert main(["run", "-c", tiny_config_file]) == 0
        out = tmp_path / "out"
        for name in ("metrics.csv", "manifest.txt", "config.json", "report.md"):
            assert (out / name).exists()

    def test_run_twice_byte_identical_metrics(self, tiny_config_file, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["run", "-c", tiny_config_file, "--out", str(out_a)]) == 0
        assert main(["run", "-c", tiny_config_file, "--out", str(out_b)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()

    def test_manifest_reproduces_run(self, tiny_config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "-c", tiny_config_file]) == 0
        rerun_out = tmp_path / "rerun"
        assert main(["run", "-c", str(out / "config.json"),
                     "--out", str(rerun_out)]) == 0
        assert (out / "metrics.csv").read_bytes() == \
            (rerun_out / "metrics.csv").read_bytes()
        manifest = (out / "manifest.txt").read_text()
        assert "config_hash=sha256:" in manifest
        assert "seed=0" in manifest

    def test_unknown_command_exits_2(self, capsys):
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_arguments_exits_2(self):
        assert main([]) == 2

    def test_config_error_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"alpha": 9}')
        assert main(["run", "-c", str(bad)]) == 2

    def test_indlearn_mean_accuracy_in_csv(self, tmp_path):
        doc = {"filter_mode": "indlearn", "rounds": 2, "seed": 0,
               "output_dir": str(tmp_path / "out")}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        assert main(["run", "-c", str(path)]) == 0
        final = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[-1]
        acc = float(final.split(",")[-1])
        assert 0.08 <= acc <= 0.12

    def test_env_var_overrides_output_dir(self, tiny_config_file, tmp_path,
                                          monkeypatch):
        env_out = tmp_path / "env_out"
        monkeypatch.setenv("FEDISKIT_OUT", str(env_out))
        assert main(["run", "-c", tiny_config_file]) == 0
        assert (env_out / "metrics.csv").exists()

    def test_bench_dre_command(self, tiny_config_file, tmp_path):
        out = tmp_path / "bench_out"
        assert main(["bench-dre", "-c", tiny_config_file, "--out", str(out),
                     "--sizes", "64,128", "--dim", "8", "--clusters", "1",
                     "--repeats", "3"]) == 0
        text = (out / "scaling.csv").read_text()
        assert text.startswith("estimator,phase,size,dim,clusters,repeat,wall_s,bytes")

    def test_sweep_command(self, tiny_config_file, tmp_path):
        out = tmp_path / "sweep_out"
        assert main(["sweep", "-c", tiny_config_file, "--out", str(out),
                     "--thresholds", "q:0.9", "--alphas", "0.3",
                     "--seeds", "0"]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_report_command(self, tiny_config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "-c", tiny_config_file]) == 0
        assert main(["report", str(out)]) == 0
        assert "Final mean accuracy" in (out / "report.md").read_text()

    def test_report_on_empty_directory_fails(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", str(empty)]) == 1

    def test_filter_mode_override(self, tiny_config_file, tmp_path):
        out = tmp_path / "ovr"
        assert main(["run", "-c", tiny_config_file, "--out", str(out),
                     "--filter-mode", "none", "--rounds", "1"]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["filter_mode"] == "none"
        assert cfg["rounds"] == 1

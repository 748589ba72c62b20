import json

import numpy as np
import pytest

from beatspace.cli import main
from beatspace.config import ConfigError, load_config
from wfdbgen import build_synthetic_record


@pytest.fixture()
def synth_cache(tmp_path):
    cache = tmp_path / "cache"
    build_synthetic_record(cache, "101", n_beats=30, rr=300, gender_comment="# 40 F 0 0")
    build_synthetic_record(cache, "202", n_beats=26, rr=320, gender_comment="# 61 M 0 0")
    return cache


def write_config(path, cache, out_dir, extra=""):
    path.write_text(
        f"""
[run]
output_dir = "{out_dir}"
seed = 0

[data]
cache_dir = "{cache}"
records = ["101", "202"]
leads = ["MLII"]

[algorithms]
enabled = ["pca", "tsne", "umap"]

[tsne]
perplexity = 10.0
n_iter = 400
exaggeration_iters = 120

[umap]
n_neighbors = 8
n_epochs = 150

[evaluate]
tasks = ["patient_id", "gender", "aami", "binary"]
k_grid = [3, 5]

[clusters]
resolution = 64
dilation_radius = 1
{extra}
"""
    )
    return path


class TestConfig:
    def test_empty_algorithms_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[run]\noutput_dir = "x"\n[algorithms]\nenabled = []\n')
        with pytest.raises(ConfigError, match="algorithms"):
            load_config(p)

    def test_unknown_lead_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[run]\noutput_dir = "x"\n[data]\nleads = ["V9"]\n')
        with pytest.raises(ConfigError, match="lead"):
            load_config(p)

    def test_output_dir_required(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[run]\nseed = 1\n")
        with pytest.raises(ConfigError, match="output_dir"):
            load_config(p)

    def test_env_var_overrides_cache_dir(self, tmp_path, monkeypatch):
        p = tmp_path / "c.toml"
        p.write_text('[run]\noutput_dir = "x"\n[data]\ncache_dir = "from_file"\n')
        monkeypatch.setenv("BEATSPACE_CACHE", str(tmp_path / "from_env"))
        cfg = load_config(p)
        assert cfg.cache_dir == tmp_path / "from_env"

    def test_defaults_k_grid_by_mode(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[run]\noutput_dir = "x"\n')
        assert load_config(p).effective_k_grid() == [11, 51, 101, 201]
        p.write_text('[run]\noutput_dir = "x"\nper_record = true\n')
        assert load_config(p).effective_k_grid() == [5, 21, 41]

    def test_cli_exit_code_on_config_error(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text('[run]\noutput_dir = "x"\n[algorithms]\nenabled = []\n')
        assert main(["run", "--config", str(p)]) == 2
        assert "config error" in capsys.readouterr().err


class TestRunPipeline:
    def test_full_run_outputs_and_manifest(self, synth_cache, tmp_path, capsys):
        out = tmp_path / "run1"
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        assert main(["run", "--config", str(cfg)]) == 0

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["tool_version"]
        assert set(manifest["stages"]) == {"beats", "embed", "evaluate", "clusters"}
        for stage in manifest["stages"].values():
            for rel in stage["outputs"]:
                assert (out / rel).is_file(), rel

        # embeddings, plots, eval outputs exist for every algorithm
        for algo in ("pca", "tsne", "umap"):
            assert (out / "embeddings" / "mixed" / f"embedding_{algo}_MLII.csv").is_file()
            assert (out / "plots" / "mixed" / f"scatter_{algo}_MLII_aami.svg").is_file()
            assert (out / "clusters" / "mixed" / f"{algo}_MLII" / "clusters.csv").is_file()
        assert (out / "evaluation.csv").is_file()
        assert (out / "confusions.csv").is_file()

    def test_manifest_hashes_match_files(self, synth_cache, tmp_path):
        import hashlib

        out = tmp_path / "run1"
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        assert main(["run", "--config", str(cfg)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        for stage in manifest["stages"].values():
            for rel, digest in stage["outputs"].items():
                assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest

    def test_rerun_is_byte_identical_modulo_timing(self, synth_cache, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        cfg1 = write_config(tmp_path / "c1.toml", synth_cache, out1)
        cfg2 = write_config(tmp_path / "c2.toml", synth_cache, out2)
        assert main(["run", "--config", str(cfg1)]) == 0
        assert main(["run", "--config", str(cfg2)]) == 0

        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        for m in (m1, m2):
            m["config_echo"] = ""
            for stage in m["stages"].values():
                stage.pop("seconds")
        assert m1 == m2

    def test_report_tables(self, synth_cache, tmp_path, capsys):
        out = tmp_path / "run1"
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert "mixed population" in text
        assert "task=patient_id" in text
        assert "tsne" in text and "umap" in text and "pca" in text
        assert (out / "report.txt").is_file()

    def test_report_missing_run(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nowhere")]) == 1
        assert "missing stage output" in capsys.readouterr().err

    def test_clusters_subcommand_reextracts(self, synth_cache, tmp_path, capsys):
        out = tmp_path / "run1"
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        assert main(["run", "--config", str(cfg)]) == 0
        assert main([
            "clusters", str(out), "--algorithm", "umap", "--lead", "MLII",
            "--resolution", "32", "--dilation-radius", "2",
        ]) == 0
        assert (out / "clusters" / "mixed" / "umap_MLII_r32_d2" / "clusters.csv").is_file()

    def test_lock_file_blocks_concurrent_runs(self, synth_cache, tmp_path, capsys):
        out = tmp_path / "run1"
        out.mkdir()
        (out / ".lock").write_text("1234")
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        assert main(["run", "--config", str(cfg)]) == 1
        assert "locked" in capsys.readouterr().err

    def test_missing_cache_is_stage_tagged(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.toml", tmp_path / "empty", tmp_path / "runx")
        code = main(["run", "--config", str(cfg)])
        assert code == 1
        assert "not cached" in capsys.readouterr().err


class TestPerRecordMode:
    def test_per_record_run(self, synth_cache, tmp_path):
        out = tmp_path / "run_pr"
        cfg = write_config(
            tmp_path / "c.toml", synth_cache, out,
            extra="",
        )
        text = cfg.read_text().replace("seed = 0", "seed = 0\nper_record = true")
        text = text.replace('tasks = ["patient_id", "gender", "aami", "binary"]', 'tasks = ["binary"]')
        cfg.write_text(text)
        assert main(["run", "--config", str(cfg)]) == 0

        for record in ("101", "202"):
            assert (out / "embeddings" / record / "embedding_umap_MLII.csv").is_file()
            assert (out / "clusters" / record / "umap_MLII" / "clusters.csv").is_file()

        import csv as csvmod

        with open(out / "evaluation.csv", newline="") as f:
            rows = list(csvmod.DictReader(f))
        scopes = {r["scope"] for r in rows}
        assert scopes == {"101", "202"}
        assert all(r["task"] == "binary" for r in rows)

    def test_per_record_report_has_aggregates(self, synth_cache, tmp_path, capsys):
        out = tmp_path / "run_pr"
        cfg = write_config(tmp_path / "c.toml", synth_cache, out)
        text = cfg.read_text().replace("seed = 0", "seed = 0\nper_record = true")
        cfg.write_text(text)
        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert "per recording" in text
        assert "median" in text and "mean" in text


class TestSubsample:
    def test_subsample_stage_recorded(self, synth_cache, tmp_path):
        out = tmp_path / "run_ss"
        cfg = write_config(
            tmp_path / "c.toml", synth_cache, out,
            extra="[sample]\nsize = 30\nseed = 1\n",
        )
        assert main(["run", "--config", str(cfg)]) == 0
        lines = (out / "subsample_MLII.csv").read_text().splitlines()
        assert lines[0] == "row_index"
        assert len(lines) == 31
        emb = (out / "embeddings" / "mixed" / "embedding_pca_MLII.csv").read_text().splitlines()
        assert len(emb) == 31  # header + 30 subsampled rows

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from portspill import __version__
from portspill.cli import DEFAULT_MODELS, DEFAULT_PIPELINE, LOCK, STAGES, load_config, main
from portspill.errors import ConfigError
from portspill.outcomes import PERIODS
from portspill.report import stars

SMALL = {"n_regions": 10, "n_ports": 5, "n_products": 60, "n_years": 12, "seed": 4}


def make_world(root: Path, **extra) -> Path:
    """Generate a small synthetic dataset; returns its config path."""
    root.mkdir(parents=True, exist_ok=True)
    seed_cfg = root / "gen.yaml"
    seed_cfg.write_text(yaml.safe_dump({"synthetic": {**SMALL, **extra}}))
    assert main(["-q", "--config", str(seed_cfg), "generate", str(root / "data")]) == 0
    return root / "data" / "config.yaml"


def artifacts(out: Path) -> dict[str, bytes]:
    return {
        p.relative_to(out).as_posix(): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    config = make_world(root)
    assert main(["-q", "--config", str(config), "run"]) == 0
    return config, config.parent / "out"


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg.doc["pipeline"]["boundary_policy"] == "truncate"
        assert cfg.doc["pipeline"]["proximity_window"] is None
        assert {k: tuple(v) for k, v in cfg.doc["pipeline"]["periods"].items()} == PERIODS
        assert [m["name"] for m in cfg.doc["models"]] == [m["name"] for m in DEFAULT_MODELS]
        matched = next(m for m in cfg.doc["models"] if m["name"] == "matched")
        assert (matched["family"], matched["cluster"], matched["dummies"]) == ("probit", "product", ["year", "region"])

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("pipeline:\n  boundry_policy: truncate\n")
        with pytest.raises(ConfigError, match="boundry_policy"):
            load_config(path, environ={})

    def test_unknown_model_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("models:\n  - name: m\n    famly: logit\n")
        with pytest.raises(ConfigError):
            load_config(path, environ={})

    @pytest.mark.parametrize(
        "text",
        [
            "pipeline:\n  boundary_policy: sometimes\n",
            "pipeline:\n  edge_threshold: 2\n",
            "pipeline:\n  proximity_window: [2010]\n",
            "report:\n  style: fancy\n",
            "models: []\n",
            "threads: 0\n",
            "[1, 2\n",
        ],
    )
    def test_invalid_values(self, tmp_path, text):
        path = tmp_path / "c.yaml"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path, environ={})

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("pipeline:\n  boundary_policy: strict-skip\n  edge_threshold: 0.4\nthreads: 3\n")
        env = {"PORTSPILL_PIPELINE__BOUNDARY_POLICY": "footnote-literal", "PORTSPILL_THREADS": "2"}
        cfg = load_config(path, environ=env, threads=5)
        assert cfg.doc["pipeline"]["boundary_policy"] == "footnote-literal"
        assert cfg.doc["pipeline"]["edge_threshold"] == 0.4
        assert cfg.doc["threads"] == 5

    def test_env_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(environ={"PORTSPILL_PIPELINE__NOPE": "1"})

    def test_paper_defaults_pin(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("pipeline:\n  boundary_policy: strict-skip\nmodels:\n  - name: only\n")
        cfg = load_config(path, environ={}, paper_defaults=True)
        assert cfg.doc["pipeline"] == DEFAULT_PIPELINE
        assert len(cfg.doc["models"]) == len(DEFAULT_MODELS)

    def test_paths_relative_to_config(self, tmp_path):
        (tmp_path / "sub").mkdir()
        path = tmp_path / "sub" / "c.yaml"
        path.write_text("inputs:\n  region_file: r.csv\noutput_dir: o\n")
        cfg = load_config(path, environ={})
        assert cfg.input_path("region_file") == tmp_path / "sub" / "r.csv"
        assert cfg.output_dir == tmp_path / "sub" / "o"


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_config_error(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("nonsense: 1\n")
        assert main(["--config", str(path), "rca"]) == 2

    def test_missing_upstream(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text("output_dir: out\n")
        assert main(["--config", str(path), "regress"]) == 1
        assert "match" in capsys.readouterr().err

    def test_missing_input_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("inputs:\n  region_file: r.csv\n  port_file: p.csv\n  pci_file: x.csv\n")
        assert main(["--config", str(path), "ingest"]) == 2

    def test_validation_failure_is_domain_error(self, tmp_path, capsys):
        (tmp_path / "r.csv").write_text("region,product,year,port,value\nRA,0101,2010,,1\nRA,0101,2012,,1\n")
        (tmp_path / "p.csv").write_text("port,product,year,destination_country,value\nPUS,0101,2010,,1\n")
        (tmp_path / "pci.csv").write_text("hs2002,year,pci\n0101,2010,0.1\n")
        path = tmp_path / "c.yaml"
        path.write_text("inputs:\n  region_file: r.csv\n  port_file: p.csv\n  pci_file: pci.csv\n")
        assert main(["--config", str(path), "ingest"]) == 1
        issues = json.loads((tmp_path / "out" / "ingest" / "validation.json").read_text())
        assert [i["rule"] for i in issues] == ["YearGap"]


class TestPipeline:
    def test_every_stage_recorded(self, world):
        _, out = world
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["version"] == __version__
        assert set(manifest["stages"]) == set(STAGES)
        for entry in manifest["stages"].values():
            assert entry["tool_version"] == __version__
            assert len(entry["config_digest"]) == 64

    def test_manifest_completeness(self, world):
        _, out = world
        manifest = json.loads((out / "manifest.json").read_text())
        listed = {rel for e in manifest["stages"].values() for rel in e["artifacts"]}
        assert set(artifacts(out)) == listed
        # every non-ingest stage's inputs are artifacts of earlier stages
        for name, entry in manifest["stages"].items():
            if name != "ingest":
                assert set(entry["inputs"]) <= listed

    def test_regress_table_rows(self, world):
        _, out = world
        fit = json.loads((out / "fits" / "matched.json").read_text())
        for name in ("omega", "Omega", "k", "K", "PCI", "TRM"):
            assert name in fit["names"]
        text = (out / "report" / "tables.txt").read_text()
        for label in ("Production density (omega)", "Transport density (Omega)", "Region ubiquity (k)",
                      "Port ubiquity (K)", "PCI", "Ports used (TRM)", "Observations", "Pseudo R2",
                      "Log likelihood", "Mean VIF"):  # fmt: skip
            assert label in text
        assert "*** p<0.01, ** p<0.05, * p<0.1" in text

    def test_report_outputs(self, world):
        _, out = world
        for name in ("tables.csv", "comparisons.csv", "product_space_production.json",
                     "product_space_transport.graphml"):  # fmt: skip
            assert (out / "report" / name).stat().st_size > 0
        graph = json.loads((out / "report" / "product_space_production.json").read_text())
        assert {"id", "size", "leamer"} <= set(graph["nodes"][0])

    def test_rerun_is_noop(self, world):
        config, out = world
        before = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file()}
        assert main(["-q", "--config", str(config), "run"]) == 0
        after = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file()}
        assert before == after

    def test_single_stage_noop(self, world):
        config, _ = world
        from portspill.cli import run_stage

        assert run_stage("rca", load_config(config, environ={})) is False

    def test_config_change_reruns_downstream_only(self, world, tmp_path):
        import shutil

        config, out = world
        copy_root = tmp_path / "copy"
        shutil.copytree(config.parent, copy_root)
        cfg_path = copy_root / "config.yaml"
        from portspill.cli import run_stage

        cfg = load_config(cfg_path, environ={"PORTSPILL_PIPELINE__BOUNDARY_POLICY": "strict-skip"})
        assert run_stage("rca", cfg) is False
        assert run_stage("jumps", cfg) is True
        assert run_stage("match", cfg) is True

    def test_stale_upstream_detected(self, world, tmp_path):
        import shutil

        config, _ = world
        copy_root = tmp_path / "copy"
        shutil.copytree(config.parent, copy_root)
        (copy_root / "out" / "rca" / "region_rca.csv").write_text("tampered\n")
        assert main(["-q", "--config", str(copy_root / "config.yaml"), "density"]) == 1

    def test_plain_style(self, world, tmp_path):
        import shutil

        config, _ = world
        copy_root = tmp_path / "copy"
        shutil.copytree(config.parent, copy_root)
        assert main(["-q", "--config", str(copy_root / "config.yaml"), "report", "--style", "plain"]) == 0
        text = (copy_root / "out" / "report" / "tables.txt").read_text()
        assert "***" not in text and "p<0.01" not in text

    def test_lock_held_by_live_process(self, world, tmp_path):
        import shutil

        config, _ = world
        copy_root = tmp_path / "copy"
        shutil.copytree(config.parent, copy_root)
        (copy_root / "out" / LOCK).write_text(str(os.getpid()))
        assert main(["-q", "--config", str(copy_root / "config.yaml"), "run"]) == 1

    def test_stale_lock_is_cleared(self, world, tmp_path):
        import shutil

        config, _ = world
        copy_root = tmp_path / "copy"
        shutil.copytree(config.parent, copy_root)
        dead = subprocess.Popen([sys.executable, "-c", "pass"])
        dead.wait()
        (copy_root / "out" / LOCK).write_text(str(dead.pid))
        assert main(["-q", "--config", str(copy_root / "config.yaml"), "run"]) == 0
        assert not (copy_root / "out" / LOCK).exists()


def test_generate_writes_truth(world):
    config, _ = world
    data = config.parent
    for name in ("truth_regions.csv", "truth_ports.csv", "truth_products.csv", "regions.csv", "config.yaml"):
        assert (data / name).exists()
    doc = yaml.safe_load(config.read_text())
    assert doc["synthetic"]["seed"] == SMALL["seed"]


def test_full_pipeline_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        config = make_world(tmp_path / name)
        assert main(["-q", "--config", str(config), "--threads", "2" if name == "b" else "1", "run"]) == 0
        outs.append(config.parent)
    data_a = {p.name: p.read_bytes() for p in outs[0].iterdir() if p.is_file() and p.name != "manifest.json"}
    data_b = {p.name: p.read_bytes() for p in outs[1].iterdir() if p.is_file() and p.name != "manifest.json"}
    assert data_a == data_b
    assert artifacts(outs[0] / "out") == artifacts(outs[1] / "out")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "portspill", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout


def test_stars_thresholds():
    assert [stars(p) for p in (0.0099, 0.01, 0.0499, 0.05, 0.0999, 0.1, 0.5)] == ["***", "**", "**", "*", "*", "", ""]

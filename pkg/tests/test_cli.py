import csv
import json

import numpy as np
import pytest

from melcompress import cli
from melcompress import encoder as enc

TINY = {
    "seed": 3,
    "corpus": {"n_utts": 30, "generator": {"n_states": 5, "n_seq_classes": 3, "dim": 8, "length_range": [12, 24], "seed": 3}},
    "kmeans": {"K": 8, "iters": 5},
    "encoder": {"n_layers": 2, "d_model": 16, "n_heads": 2, "ffn_dim": 32, "masking": {"mask_prob": 0.3, "span_len": 3}},
    "pretrain": {"epochs": 2, "batch_size": 4, "learning_rate": 1e-3, "eval_every": 5},
    "compress": {"trigger_decay": 0.5, "trigger_window": 3, "trigger_tolerance": 10.0, "max_retrain_steps": 4,
                 "retrain_steps": 2, "heads_per_stage": 1, "ffn_dims_per_stage": 8,
                 "schedule": {"stages": [[20, 80], [10, 60]]}},
    "distill": {"student_layers": 1, "steps": 5, "batch_size": 4},
    "probe": {"prefixes": [None, 1], "config": {"epochs": 2}},
    "profile": {"repeats": 3, "rtf_utts": 2},
}

PIPELINE = ["gen-corpus", "kmeans", "pretrain", "prune-weights", "prune-heads", "prune-ffn", "distill", "probe",
            "profile", "export-plots"]


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run_all(config_file, run_dir, steps=PIPELINE):
    for cmd in steps:
        assert cli.run([cmd, "--config", str(config_file), "--run-dir", str(run_dir)]) == 0, cmd


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    run_all(cfg, root / "run")
    return cfg, root / "run"


def records(run_dir):
    return [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]


class TestPipeline:
    def test_all_stages_logged(self, finished):
        _, run_dir = finished
        stages = [r["stage"] for r in records(run_dir)]
        for cmd in PIPELINE[:-1]:
            assert cmd in stages
        idx = [r["stage_index"] for r in records(run_dir)]
        assert idx == list(range(len(idx)))

    def test_config_echo_resolves_defaults(self, finished):
        _, run_dir = finished
        echoed = json.loads((run_dir / "config.json").read_text())
        assert echoed["encoder"]["input_dim"] == 8 and echoed["encoder"]["n_clusters"] == 8
        assert echoed["compress"]["learning_rate"] == 1e-5
        assert echoed["output_dir"] == str(run_dir)
        assert json.loads(json.dumps(cli.load_config(str(run_dir / "config.json")).to_dict())) == echoed

    def test_pretrain_report_dense(self, finished):
        _, run_dir = finished
        rec = next(r for r in records(run_dir) if r["stage"] == "pretrain")
        assert rec["metrics"]["report"]["densities"] == {"weights": 1.0, "heads": 1.0, "ffn_dims": 1.0}
        assert "rtf" in rec["timing"] and "rtf" not in rec["metrics"]["report"]

    def test_profile_on_pretrained_is_dense(self, finished):
        _, run_dir = finished
        profs = [r for r in records(run_dir) if r["stage"] == "profile"]
        assert [p["metrics"]["variant"] for p in profs] == ["full", "first1"]
        assert profs[0]["metrics"]["report"]["densities"]["weights"] == 1.0

    def test_weight_density_trace(self, finished):
        _, run_dir = finished
        trace = [r["metrics"]["target_density_pct"] for r in records(run_dir) if r["stage"] == "prune-weights"]
        assert trace == [100.0, 80.0, 70.0, 60.0]

    def test_checkpoints_verify(self, finished):
        _, run_dir = finished
        for r in records(run_dir):
            if r["checkpoint"]:
                w = cli.checkpoint_roundtrip(run_dir / r["checkpoint"]["path"])
                assert isinstance(w, enc.EncoderWeights)

    def test_export_series(self, finished):
        _, run_dir = finished
        for series in ("rtf", "macs_per_sec", "params"):
            rows = list(csv.DictReader((run_dir / "exports" / f"{series}.csv").open()))
            techniques = {r["technique"] for r in rows}
            assert {"weights", "heads", "ffn"} <= techniques
            assert all(r[series] not in ("", "None") for r in rows)
        probe_rows = list(csv.DictReader((run_dir / "exports" / "probe.csv").open()))
        assert {r["upstream"] for r in probe_rows} == {"full", "first1"}

    def test_rerun_is_identical(self, finished, tmp_path):
        cfg, run_dir = finished
        run_all(cfg, tmp_path / "again")
        a = [cli.strip_timing(r) for r in records(run_dir)]
        b = [cli.strip_timing(r) for r in records(tmp_path / "again")]
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


class TestExitCodes:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.run(["bogus"])
        assert exc.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        assert cli.run(["gen-corpus", "--run-dir", str(tmp_path), "--set", "encoder.width=3"]) == cli.EXIT_CONFIG

    def test_invalid_value(self, tmp_path):
        assert cli.run(["gen-corpus", "--run-dir", str(tmp_path), "--set", "compress.technique=\"magic\""]) == cli.EXIT_CONFIG

    def test_missing_prerequisite(self, tmp_path, config_file):
        assert cli.run(["pretrain", "--config", str(config_file), "--run-dir", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_corrupt_checkpoint(self, finished, tmp_path):
        cfg, run_dir = finished
        src = next((run_dir / "checkpoints").glob("stage-*.mhck"))
        blob = bytearray(src.read_bytes())
        blob[100] ^= 0xFF
        bad = tmp_path / "bad.mhck"
        bad.write_bytes(bytes(blob))
        code = cli.run(["profile", "--config", str(cfg), "--run-dir", str(run_dir), "--checkpoint", str(bad)])
        assert code == cli.EXIT_IO

    def test_divergence(self, finished, tmp_path, config_file):
        run_all(config_file, tmp_path, ["gen-corpus", "kmeans"])
        with np.errstate(over="ignore"):
            code = cli.run(["pretrain", "--config", str(config_file), "--run-dir", str(tmp_path),
                            "--set", "pretrain.learning_rate=1e300"])
        assert code == cli.EXIT_NUMERIC

    def test_run_root_env(self, tmp_path, monkeypatch, config_file):
        monkeypatch.setenv("MELCOMPRESS_RUN_ROOT", str(tmp_path))
        assert cli.run(["gen-corpus", "--config", str(config_file), "--set", "run_name=\"envrun\""]) == 0
        assert (tmp_path / "envrun" / "corpus" / "manifest.txt").exists()

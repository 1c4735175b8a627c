import hashlib
import json
from pathlib import Path

import pytest

from sleepfuse.cli import main

DESK_FLAGS = [
    "--mel-rate", "200", "--mel-bins", "24", "--mel-window-s", "0.5",
    "--mel-hop-s", "0.25", "--mel-fmax", "100",
    "--model-dim", "16", "--heads", "2", "--blocks", "1",
    "--embedding-dim", "16", "--audio-patch-frames", "17",
]


def synth(tmp_path, patients=3, epochs=3, seed=0, extra=()):
    out = tmp_path / f"cohort_s{seed}_{patients}x{epochs}"
    code = main(
        [
            "synth", "--patients", str(patients), "--epochs-per-patient", str(epochs),
            "--seed", str(seed), "--out", str(out), *extra,
        ]
    )
    assert code == 0
    return out / "manifest.json"


def tree_hashes(root):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(root).iterdir())
        if p.is_file()
    }


class TestSynth:
    def test_writes_manifest_and_files(self, tmp_path):
        manifest = synth(tmp_path)
        assert manifest.is_file()
        names = {p.name for p in manifest.parent.iterdir()}
        assert {"synth000.wav", "synth000.psm", "synth000.psm.hdr", "synth000.labels"} <= names

    def test_rerun_is_hash_identical(self, tmp_path):
        a = synth(tmp_path / "a").parent
        b = synth(tmp_path / "b").parent
        assert tree_hashes(a) == tree_hashes(b)

    def test_zero_patients_is_usage_error(self, tmp_path):
        code = main(["synth", "--patients", "0", "--out", str(tmp_path / "x")])
        assert code == 1


class TestTrain:
    def _train(self, tmp_path, manifest, out_name="run", extra=()):
        out = tmp_path / out_name
        code = main(
            [
                "train", "--data", str(manifest), "--out", str(out),
                "--mode", "fused", "--regime", "fine_tune",
                "--lr", "2e-3", "--epochs", "1", "--folds", "3",
                "--threads", "1", *DESK_FLAGS, *extra,
            ]
        )
        return code, out

    def test_produces_report_and_checkpoints(self, tmp_path):
        manifest = synth(tmp_path)
        code, out = self._train(tmp_path, manifest)
        assert code == 0
        assert (out / "report.json").is_file()
        assert (out / "report.txt").is_file()
        for i in range(3):
            assert (out / f"fold{i}.ckpt").is_file()
            assert (out / f"fold{i}.ckpt.meta").is_file()
        doc = json.loads((out / "report.json").read_text())
        assert len(doc["folds"]) == 3
        assert 0.0 <= doc["mean_accuracy"] <= 1.0

    def test_deterministic_reruns_byte_identical(self, tmp_path):
        manifest = synth(tmp_path)
        _, out_a = self._train(tmp_path, manifest, "run_a")
        _, out_b = self._train(tmp_path, manifest, "run_b")
        assert tree_hashes(out_a) == tree_hashes(out_b)

    def test_fine_tune_with_embeddings_rejected(self, tmp_path):
        manifest = synth(tmp_path)
        fake = tmp_path / "e.sfeb"
        fake.write_bytes(b"SFEB" + b"\x00" * 20)
        code, _ = self._train(tmp_path, manifest, extra=["--eog-embeddings", str(fake)])
        assert code == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        code, _ = self._train(tmp_path, tmp_path / "nope.json")
        assert code == 2

    def test_sweep_reports_grid(self, tmp_path):
        manifest = synth(tmp_path, patients=3, epochs=2)
        out = tmp_path / "sweep"
        code = main(
            [
                "train", "--data", str(manifest), "--out", str(out),
                "--mode", "eog_only", "--regime", "fine_tune",
                "--lr", "1e-3", "2e-3", "--epochs", "1", "--folds", "3",
                "--threads", "1", *DESK_FLAGS,
            ]
        )
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert len(doc["sweep"]) == 2
        assert "optimistic" in (out / "report.txt").read_text()

    def test_config_file_defaults_with_flag_override(self, tmp_path):
        manifest = synth(tmp_path)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "mode": "eog_only", "regime": "fine_tune", "lr": [2e-3],
            "epochs": [1], "folds": 3, "threads": 1,
            "mel-rate": 200, "mel-bins": 24, "mel-window-s": 0.5,
            "mel-hop-s": 0.25, "mel-fmax": 100.0,
            "model-dim": 16, "heads": 2, "blocks": 1,
            "embedding-dim": 16, "audio-patch-frames": 17,
        }))
        out = tmp_path / "from_config"
        code = main([
            "train", "--data", str(manifest), "--out", str(out),
            "--config", str(cfg), "--label", "flag-wins",
        ])
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["mode"] == "eog_only"  # from config file
        assert doc["label"] == "flag-wins"  # flag override


class TestEvaluate:
    def test_checkpoint_round_trip_evaluation(self, tmp_path):
        manifest = synth(tmp_path)
        out = tmp_path / "run"
        code = main(
            [
                "train", "--data", str(manifest), "--out", str(out),
                "--mode", "eog_only", "--regime", "fine_tune",
                "--lr", "2e-3", "--epochs", "1", "--folds", "3",
                "--threads", "1", *DESK_FLAGS,
            ]
        )
        assert code == 0
        eval_out = tmp_path / "eval.json"
        code = main(
            [
                "evaluate", "--data", str(manifest),
                "--checkpoint", str(out / "fold0.ckpt"),
                "--threads", "1", "--out", str(eval_out),
            ]
        )
        assert code == 0
        doc = json.loads(eval_out.read_text())
        assert doc["n_epochs"] == 9
        assert 0.0 <= doc["accuracy"] <= 1.0

    def test_missing_checkpoint_fails(self, tmp_path):
        manifest = synth(tmp_path)
        code = main(
            ["evaluate", "--data", str(manifest), "--checkpoint", str(tmp_path / "no.ckpt")]
        )
        assert code != 0


class TestReport:
    def _report_doc(self, label, acc):
        return {
            "schema_version": 1, "label": label, "mode": "fused",
            "regime": "fine_tune", "config": {}, "fingerprint": "ab" * 8,
            "folds": [], "mean_accuracy": acc, "mean_macro_f1": acc,
            "total_confusion": [[1 if i == j else 0 for j in range(5)] for i in range(5)],
        }

    def test_two_files_give_two_rows(self, tmp_path, capsys):
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        p1.write_text(json.dumps(self._report_doc("run-a", 0.74)))
        p2.write_text(json.dumps(self._report_doc("run-b", 0.71)))
        code = main(["report", str(p1), str(p2), "--no-reference"])
        assert code == 0
        text = capsys.readouterr().out
        assert "run-a" in text and "run-b" in text
        assert "0.740" in text and "0.710" in text

    def test_json_format(self, tmp_path, capsys):
        p1 = tmp_path / "a.json"
        p1.write_text(json.dumps(self._report_doc("run-a", 0.5)))
        code = main(["report", str(p1), "--format", "json"])
        assert code == 0
        parsed = json.loads(capsys.readouterr().out)
        assert parsed[0]["label"] == "run-a"

    def test_missing_file_nonzero_exit(self, tmp_path):
        assert main(["report", str(tmp_path / "missing.json")]) == 2


class TestGradcheck:
    def test_default_suite_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert out.count("[ok]") == 7

    def test_corrupt_hook_fails(self, capsys):
        assert main(["gradcheck", "--seeds", "1", "--corrupt", "dense"]) == 3
        assert "[FAIL]" in capsys.readouterr().out

    def test_seed_sweep_flag(self):
        assert main(["gradcheck", "--seeds", "3"]) == 0


class TestExportSpectrograms:
    def test_dumps_with_documented_header(self, tmp_path):
        manifest = synth(tmp_path, patients=1, epochs=2)
        out = tmp_path / "specs"
        code = main(
            [
                "export-spectrograms", "--data", str(manifest), "--out", str(out),
                "--limit", "2", "--mel-rate", "200", "--mel-bins", "24",
                "--mel-window-s", "0.5", "--mel-hop-s", "0.25", "--mel-fmax", "100",
            ]
        )
        assert code == 0
        dumps = sorted(out.glob("*.melspec"))
        assert len(dumps) == 2
        import struct

        channels, n_mels, n_frames = struct.unpack("<III", dumps[0].read_bytes()[:12])
        assert (channels, n_mels) == (2, 24)
        assert n_frames == 1 + (30 * 200 - 100) // 50


class TestUsageErrors:
    def test_unknown_subcommand_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_bad_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--patients", "not-a-number", "--out", "x"])
        assert exc.value.code == 1

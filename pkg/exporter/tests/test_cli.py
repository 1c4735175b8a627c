import json

from sfeb_export.cli import main

from sleepfuse.encoders import load_external_embeddings


class TestCli:
    def test_stub_export_end_to_end(self, tiny_cohort, tmp_path):
        out = tmp_path / "eog.sfeb"
        code = main(
            [
                "--manifest", str(tiny_cohort), "--modality", "eog_audio",
                "--out", str(out), "--backend", "stub",
            ]
        )
        assert code == 0
        store = load_external_embeddings(out)
        assert store.dim == 1024
        assert len(store) == 6

    def test_split_channels_writes_two_files(self, tiny_cohort, tmp_path):
        out = tmp_path / "eog.sfeb"
        code = main(
            [
                "--manifest", str(tiny_cohort), "--modality", "eog_audio",
                "--out", str(out), "--backend", "stub", "--eog-channels", "split",
            ]
        )
        assert code == 0
        left = load_external_embeddings(str(out) + ".left")
        right = load_external_embeddings(str(out) + ".right")
        assert len(left) == len(right) == 6
        meta = json.loads((tmp_path / "eog.sfeb.left.meta.json").read_text())
        assert meta["channel_policy"] == "left"

    def test_imagebind_backend_without_weights_fails_cleanly(self, tiny_cohort, tmp_path):
        code = main(
            [
                "--manifest", str(tiny_cohort), "--modality", "eog_audio",
                "--out", str(tmp_path / "x.sfeb"),
            ]
        )
        assert code == 1

    def test_probe_through_primary_pipeline(self, tiny_cohort, tmp_path):
        """Exported files drive the primary's external-embedding probe."""
        eog = tmp_path / "eog.sfeb"
        psm = tmp_path / "psm.sfeb"
        assert main(["--manifest", str(tiny_cohort), "--modality", "eog_audio",
                     "--out", str(eog), "--backend", "stub"]) == 0
        assert main(["--manifest", str(tiny_cohort), "--modality", "psm_video",
                     "--out", str(psm), "--backend", "stub"]) == 0

        from sleepfuse.cli import main as sleepfuse_main

        run = tmp_path / "probe"
        code = sleepfuse_main(
            [
                "train", "--data", str(tiny_cohort), "--out", str(run),
                "--mode", "fused", "--regime", "linear_probe",
                "--lr", "0.05", "--epochs", "1", "--folds", "2", "--threads", "1",
                "--eog-embeddings", str(eog), "--psm-embeddings", str(psm),
            ]
        )
        assert code == 0
        doc = json.loads((run / "report.json").read_text())
        assert len(doc["folds"]) == 2

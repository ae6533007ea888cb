import json

import numpy as np
import pytest

from maskcal import cli, io


def run(argv):
    return cli.main([str(a) for a in argv])


class TestSynthCommand:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--out-dir", out, "--seed", 7, "--perturb"]) == 0
        for name in ("scene0000.features.udtf", "scene0000.image.udtf",
                      "scene0000.gt.udtf", "scene0000.predictions.json", "meta.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_meta_records_prng(self, tmp_path):
        assert run(["synth", "--out-dir", tmp_path, "--seed", 3]) == 0
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["prng"] == "pcg64"
        assert meta["seed"] == 3

    def test_count_emits_multiple_scenes(self, tmp_path):
        assert run(["synth", "--out-dir", tmp_path, "--count", 3]) == 0
        assert (tmp_path / "scene0002.gt.udtf").exists()


class TestSuperpixelsCommand:
    def test_labels_written(self, tmp_path):
        scene_dir = tmp_path / "scene"
        assert run(["synth", "--out-dir", scene_dir, "--seed", 1]) == 0
        out = tmp_path / "labels.udtf"
        overlay = tmp_path / "overlay.udtf"
        code = run([
            "superpixels", "--image", scene_dir / "scene0000.image.udtf",
            "--out", out, "--count", 16, "--overlay", overlay,
        ])
        assert code == 0
        labels = io.read_tensor(out)
        assert labels.dtype == np.uint32
        assert labels.shape == (32, 32)
        assert io.read_tensor(overlay).shape == (3, 32, 32)

    def test_grayscale_rank2_tensor_accepted(self, tmp_path):
        values = np.zeros((6, 8), dtype=np.float32)
        values[:, 4:] = 1.0
        src = tmp_path / "gray.udtf"
        io.write_tensor(src, values)
        out = tmp_path / "labels.udtf"
        assert run(["superpixels", "--image", src, "--out", out, "--count", 2,
                    "--compactness", 0.001]) == 0
        labels = io.read_tensor(out)
        assert labels.shape == (6, 8)
        assert len(np.unique(labels)) == 2

    def test_missing_file_is_io_error(self, tmp_path):
        code = run(["superpixels", "--image", tmp_path / "nope.udtf",
                    "--out", tmp_path / "x.udtf"])
        assert code == 5


class TestCalibrateAndEvaluate:
    @pytest.fixture()
    def scene_dir(self, tmp_path):
        out = tmp_path / "scene"
        assert run([
            "synth", "--out-dir", out, "--seed", 5, "--perturb",
            "--height", 20, "--width", 20,
        ]) == 0
        return out

    def test_pipeline_runs_and_improves_labels(self, scene_dir, tmp_path):
        calibrated = tmp_path / "calibrated.json"
        centroids = tmp_path / "centroids.json"
        code = run([
            "calibrate",
            "--features", scene_dir / "scene0000.features.udtf",
            "--image", scene_dir / "scene0000.image.udtf",
            "--masks", scene_dir / "scene0000.predictions.json",
            "--order", "RSP", "--superpixels", 12,
            "--out", calibrated, "--out-centroids", centroids,
        ])
        assert code == 0
        doc = io.read_maskset(calibrated)
        assert all(e.corrected_category is not None for e in doc.entries)
        store = io.read_centroids(centroids)
        assert store.num_valid() >= 1

    def test_evaluate_identity_gives_unit_mpq(self, scene_dir, tmp_path, capsys):
        gt = scene_dir / "scene0000.gt.udtf"
        json_out = tmp_path / "report.json"
        code = run(["evaluate", "--pred", gt, "--gt", gt, "--categories", 4,
                    "--json", json_out])
        assert code == 0
        report = json.loads(json_out.read_text())
        assert report["mpq"] == pytest.approx(1.0)
        text = capsys.readouterr().out
        assert "mean" in text

    def test_init_from_separate_prediction_file(self, scene_dir, tmp_path):
        code = run([
            "calibrate",
            "--features", scene_dir / "scene0000.features.udtf",
            "--image", scene_dir / "scene0000.image.udtf",
            "--masks", scene_dir / "scene0000.predictions.json",
            "--init-from", scene_dir / "scene0000.predictions.json",
            "--order", "R",
            "--out", tmp_path / "out.json",
        ])
        assert code == 0
        doc = io.read_maskset(tmp_path / "out.json")
        for entry in doc.entries:
            assert entry.corrected_mask.same_bits(entry.mask)  # region keeps geometry

    def test_calibrate_rejects_conflicting_centroid_flags(self, scene_dir, tmp_path):
        code = run([
            "calibrate",
            "--features", scene_dir / "scene0000.features.udtf",
            "--image", scene_dir / "scene0000.image.udtf",
            "--masks", scene_dir / "scene0000.predictions.json",
            "--centroids", tmp_path / "c.json",
            "--init-from", scene_dir / "scene0000.predictions.json",
            "--out", tmp_path / "out.json",
        ])
        assert code == 4

    def test_malformed_maskset_is_format_error(self, scene_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        code = run([
            "calibrate",
            "--features", scene_dir / "scene0000.features.udtf",
            "--image", scene_dir / "scene0000.image.udtf",
            "--masks", bad,
            "--out", tmp_path / "out.json",
        ])
        assert code == 3


class TestSelftrainCommand:
    def test_short_run_writes_reports(self, tmp_path):
        config = {
            "seeds": [0],
            "steps": 4,
            "gamma": 0.9,
            "n_source": 2,
            "n_target": 2,
            "log_every": 1,
            "scene": {"height": 16, "width": 16, "noise_sigma": 0.5,
                      "domain_shift": [2.0, -2.0, 0.0, 0.0]},
            "hmc": {"order": "RSP"},
            "slic": {"target_count": 8},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        out = tmp_path / "run"
        assert run(["selftrain", "--config", cfg_path, "--out-dir", out]) == 0
        log = (out / "log.jsonl").read_text().strip().splitlines()
        assert len(log) == 4
        assert all("loss_self" in json.loads(line) for line in log)
        for domain in ("source", "target"):
            report = json.loads((out / f"report_{domain}.json").read_text())
            assert "median_mpq" in report

    def test_invalid_config_line_reported(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text("{\n  broken\n}")
        code = run(["selftrain", "--config", cfg_path, "--out-dir", tmp_path / "o"])
        assert code == 3


class TestEnvThreads:
    def test_invalid_value_rejected(self, monkeypatch):
        monkeypatch.setenv("MASKCAL_THREADS", "lots")
        with pytest.raises(ValueError, match="MASKCAL_THREADS"):
            cli.max_workers()

    def test_cap_parsed(self, monkeypatch):
        monkeypatch.setenv("MASKCAL_THREADS", "3")
        assert cli.max_workers() == 3

    def test_synth_parallel_matches_serial(self, tmp_path, monkeypatch):
        serial, parallel = tmp_path / "s", tmp_path / "p"
        monkeypatch.setenv("MASKCAL_THREADS", "1")
        assert run(["synth", "--out-dir", serial, "--count", 3, "--seed", 9]) == 0
        monkeypatch.setenv("MASKCAL_THREADS", "4")
        assert run(["synth", "--out-dir", parallel, "--count", 3, "--seed", 9]) == 0
        for name in ("scene0000.gt.udtf", "scene0001.gt.udtf", "meta.json"):
            assert (serial / name).read_bytes() == (parallel / name).read_bytes()


class TestEvaluateMasksetPrediction:
    def test_raw_maskset_as_prediction(self, tmp_path):
        scene_dir = tmp_path / "scene"
        assert run(["synth", "--out-dir", scene_dir, "--seed", 11, "--perturb",
                    "--flip-rate", "0", "--boundary-radius", "0",
                    "--impostor-rate", "0"]) == 0
        json_out = tmp_path / "report.json"
        code = run(["evaluate", "--pred", scene_dir / "scene0000.predictions.json",
                    "--gt", scene_dir / "scene0000.gt.udtf", "--categories", 4,
                    "--json", json_out])
        assert code == 0
        report = json.loads(json_out.read_text())
        assert report["mpq"] == pytest.approx(1.0)

    def test_maskset_as_ground_truth_is_format_error(self, tmp_path):
        scene_dir = tmp_path / "scene"
        assert run(["synth", "--out-dir", scene_dir, "--seed", 12, "--perturb"]) == 0
        code = run(["evaluate", "--pred", scene_dir / "scene0000.gt.udtf",
                    "--gt", scene_dir / "scene0000.predictions.json",
                    "--categories", 4])
        assert code == 3

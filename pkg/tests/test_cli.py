"""End-to-end CLI runs on tiny datasets."""

import json

import pytest

from rovis.checkpoint import save_checkpoint
from rovis.cli import main
from rovis.dataset_io import load_dataset
from rovis.rng import Rng
from rovis.segmenter import Segmenter
from rovis.tracks import VideoResults, load_results, save_results

from conftest import tiny_config


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv("ROVIS_SEED", raising=False)


def gen(out, benchmark="reappear", seed=7, size=3, *extra):
    return main(["gen-data", "--benchmark", benchmark, "--seed", str(seed), "--size", str(size),
                 "--length", "4", "--height", "32", "--width", "32", "--out", str(out), *extra])


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert gen(out, "mixed", 1, 3) == 0
    return out


def write_gt_as_predictions(data_dir, pred_dir):
    for video in load_dataset(data_dir).videos:
        results = VideoResults(video.video_id, video.height, video.width, video.length, video.gt_tracks())
        save_results(results, pred_dir / "results" / f"{video.video_id}.json")


class TestGenData:
    def test_deterministic(self, tmp_path):
        assert gen(tmp_path / "a") == 0
        assert gen(tmp_path / "b") == 0
        for path in sorted((tmp_path / "a").rglob("*")):
            if path.is_file() and path.name != "run_manifest.json":
                twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
                assert path.read_bytes() == twin.read_bytes(), path.name

    def test_manifest_records_seed(self, tmp_path):
        gen(tmp_path / "a", "occlusion", 5, 1)
        manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 5
        assert manifest["outputs"] == ["manifest.json"]

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROVIS_SEED", "11")
        gen(tmp_path / "a", "occlusion", 5, 1)
        assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["seed"] == 11

    def test_unknown_benchmark_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            gen(tmp_path / "a", "swarm")
        assert exc.value.code == 2

    def test_size_zero_gives_empty_dataset(self, tmp_path):
        assert gen(tmp_path / "a", size=0) == 0
        assert load_dataset(tmp_path / "a").videos == []

    def test_non_empty_out_needs_force(self, tmp_path):
        assert gen(tmp_path / "a") == 0
        assert gen(tmp_path / "a") == 2
        assert gen(tmp_path / "a", "reappear", 7, 3, "--force") == 0


class TestEval:
    def test_ground_truth_scores_perfectly(self, tmp_path, data_dir, capsys):
        pred = tmp_path / "pred"
        write_gt_as_predictions(data_dir, pred)
        assert main(["eval", "--pred", str(pred), "--gt", str(data_dir), "--split", "all"]) == 0
        report = json.loads((pred / "eval_report.json").read_text())
        assert report["ap"] == pytest.approx(1.0)
        assert f"{report['ap']:.4f}" in capsys.readouterr().out

    def test_empty_prediction_dir(self, tmp_path, data_dir):
        pred = tmp_path / "pred"
        pred.mkdir()
        assert main(["eval", "--pred", str(pred), "--gt", str(data_dir), "--split", "all"]) == 0
        assert json.loads((pred / "eval_report.json").read_text())["ap"] == 0.0

    def test_unknown_video_fails(self, tmp_path, data_dir):
        pred = tmp_path / "pred"
        save_results(VideoResults("ghost", 32, 32, 4, []), pred / "results" / "ghost.json")
        assert main(["eval", "--pred", str(pred), "--gt", str(data_dir), "--split", "all"]) == 1

    def test_out_dir_and_plots(self, tmp_path, data_dir):
        pred = tmp_path / "pred"
        write_gt_as_predictions(data_dir, pred)
        args = ["eval", "--pred", str(pred), "--gt", str(data_dir), "--split", "all",
                "--out", str(tmp_path / "eval"), "--plot", str(tmp_path / "plots")]
        assert main(args) == 0
        assert (tmp_path / "eval" / "eval_report.json").exists()
        assert (tmp_path / "plots" / "pr_all.png").exists()
        manifest = json.loads((tmp_path / "eval" / "run_manifest.json").read_text())
        assert manifest["outputs"] == ["eval_report.json"]


class TestTrainAndInfer:
    def test_unknown_config_key(self, tmp_path, data_dir):
        config = tmp_path / "train.json"
        config.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
        assert main(["train", "--data", str(data_dir), "--config", str(config), "--out", str(tmp_path / "run")]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "run")]) == 1

    @pytest.fixture
    def checkpoint(self, tmp_path):
        return save_checkpoint(Segmenter(tiny_config(), Rng(60)), tmp_path / "model.rvis")

    def infer(self, checkpoint, data_dir, out, *extra):
        return main(["infer", "--checkpoint", str(checkpoint), "--data", str(data_dir), "--split", "all",
                     "--out", str(out), *extra])

    def test_reinference_is_identical(self, tmp_path, checkpoint, data_dir):
        assert self.infer(checkpoint, data_dir, tmp_path / "one") == 0
        assert self.infer(checkpoint, data_dir, tmp_path / "two", "--jobs", "2") == 0
        files = sorted((tmp_path / "one" / "results").glob("*.json"))
        assert len(files) == 3
        for path in files:
            assert path.read_bytes() == (tmp_path / "two" / "results" / path.name).read_bytes()

    def test_truncated_run_is_a_prefix(self, tmp_path, checkpoint, data_dir):
        assert self.infer(checkpoint, data_dir, tmp_path / "full") == 0
        assert self.infer(checkpoint, data_dir, tmp_path / "short", "--max-frames", "2") == 0
        for path in sorted((tmp_path / "short" / "results").glob("*.json")):
            short = load_results(path)
            full = load_results(tmp_path / "full" / "results" / path.name)
            expected = [t.restricted(1) for t in full.tracks]
            expected = [t for t in expected if t is not None]
            assert [(t.track_id, t.frames) for t in short.tracks] == [(t.track_id, t.frames) for t in expected]

    def test_baseline_and_diagnostics(self, tmp_path, checkpoint, data_dir):
        assert self.infer(checkpoint, data_dir, tmp_path / "iou", "--baseline", "iou-link", "--diagnostics") == 0
        assert (tmp_path / "iou" / "query_firing.json").exists()
        manifest = json.loads((tmp_path / "iou" / "run_manifest.json").read_text())
        assert manifest["config"]["baseline"] == "iou-link"

    def test_class_count_mismatch(self, tmp_path, data_dir):
        checkpoint = save_checkpoint(Segmenter(tiny_config(num_classes=2), Rng(61)), tmp_path / "two.rvis")
        assert self.infer(checkpoint, data_dir, tmp_path / "bad") == 2

"""CLI surface: commands, config validation, exit codes, file outputs."""

import csv

import numpy as np
import pytest

from stream4d.cli import (build_run_config, main, parse_config_file,
                          read_predictions, write_predictions)
from stream4d.model import PredictionSet, load_checkpoint
from stream4d.scenes import dataset_read
from stream4d.geometry import CameraPose

TINY = ["--set", "height=16", "--set", "width=16", "--set", "patch_size=4",
        "--set", "channels=32", "--set", "layers=2", "--set", "max_frames=8",
        "--set", "epochs=1", "--set", "steps_per_epoch=2",
        "--set", "frames_per_sample=3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen + a 2-step training run shared by the cheap CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--out", str(data), "--count", "2", "--frames", "4",
                 "--height", "16", "--width", "16", "--tracks", "4",
                 "--seed", "5"]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run)] + TINY) == 0
    return {"root": root, "data": data, "run": run,
            "ckpt": run / "final.ckpt", "scene": data / "scene_000.s4dd"}


class TestGen:
    def test_outputs_exist_and_parse(self, workspace):
        files = sorted(workspace["data"].glob("*.s4dd"))
        assert len(files) == 2
        frames = dataset_read(files[0])
        assert len(frames) == 4

    def test_deterministic(self, tmp_path, workspace):
        out = tmp_path / "again"
        assert main(["gen", "--out", str(out), "--count", "1", "--frames", "4",
                     "--height", "16", "--width", "16", "--tracks", "4",
                     "--seed", "5"]) == 0
        a = (workspace["data"] / "scene_000.s4dd").read_bytes()
        b = (out / "scene_000.s4dd").read_bytes()
        assert a == b

    def test_ply_flag(self, tmp_path):
        out = tmp_path / "plydir"
        assert main(["gen", "--out", str(out), "--count", "1", "--frames", "2",
                     "--height", "16", "--width", "16", "--tracks", "4",
                     "--seed", "1", "--ply"]) == 0
        assert (out / "scene_000.ply").exists()

    def test_bad_count_is_validation_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "x"), "--count", "0"]) == 1


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("heigth = 32\n")
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)]) == 1

    def test_file_parsing_with_comments(self, tmp_path):
        cfg = tmp_path / "ok.cfg"
        cfg.write_text("# commentary\nheight = 16\nwidth = 16  # trailing\n\npeak_lr = 0.002\n")
        pairs = parse_config_file(cfg)
        rc = build_run_config(pairs)
        assert rc.model.height == 16
        assert rc.train.peak_lr == 0.002

    def test_invalid_value_rejected(self, tmp_path):
        cfg = tmp_path / "bad2.cfg"
        cfg.write_text("channels = many\n")
        with pytest.raises(Exception):
            build_run_config(parse_config_file(cfg))

    def test_model_invariant_violation_rejected(self):
        from stream4d.cli import CliValidationError
        with pytest.raises(CliValidationError):
            build_run_config({"height": "30", "patch_size": "8"})


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "final.ckpt").exists()
        assert (run / "epoch_001.ckpt").exists()
        assert (run / "train_log.csv").exists()
        assert (run / "loss_curves.png").exists()
        model = load_checkpoint(workspace["ckpt"])
        assert model.config.height == 16

    def test_missing_data_dir(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")] + TINY) == 1

    def test_distill_requires_teacher(self, workspace, tmp_path):
        assert main(["train", "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "o"), "--distill"] + TINY) == 1


class TestStream:
    def test_stream_outputs(self, workspace, tmp_path):
        preds_path = tmp_path / "p.s4dp"
        times_path = tmp_path / "t.csv"
        ply_dir = tmp_path / "ply"
        assert main(["stream", "--checkpoint", str(workspace["ckpt"]),
                     "--dataset", str(workspace["scene"]),
                     "--out", str(preds_path), "--timings-csv", str(times_path),
                     "--emit-ply", str(ply_dir)]) == 0
        preds = read_predictions(preds_path)
        frames = dataset_read(workspace["scene"])
        assert len(preds) == len(frames)
        with open(times_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(frames)
        assert all(float(r["seconds"]) > 0 for r in rows)
        assert len(list(ply_dir.glob("*.ply"))) == len(frames)

    def test_stream_matches_offline_causal_run(self, workspace, tmp_path):
        preds_path = tmp_path / "p.s4dp"
        assert main(["stream", "--checkpoint", str(workspace["ckpt"]),
                     "--dataset", str(workspace["scene"]),
                     "--out", str(preds_path)]) == 0
        preds = read_predictions(preds_path)
        frames = dataset_read(workspace["scene"])
        model = load_checkpoint(workspace["ckpt"])
        offline = model.predict_sequence([f.image for f in frames],
                                         queries=frames[0].tracks, mode="causal")
        for got, want in zip(preds, offline):
            assert np.abs(got.point_map - want.point_map).max() < 1e-4
            assert np.abs(got.depth - want.depth).max() < 1e-4
            assert np.abs(got.pose.as_vector() - want.pose.as_vector()).max() < 1e-4
            assert np.abs(got.tracks - want.tracks).max() < 1e-4

    def test_dataset_dim_mismatch(self, workspace, tmp_path):
        other = tmp_path / "d8"
        assert main(["gen", "--out", str(other), "--count", "1", "--frames", "2",
                     "--height", "8", "--width", "8", "--tracks", "2",
                     "--seed", "0"]) == 0
        assert main(["stream", "--checkpoint", str(workspace["ckpt"]),
                     "--dataset", str(other / "scene_000.s4dd"),
                     "--out", str(tmp_path / "p.s4dp")]) == 1


class TestBench:
    def test_bench_csv_and_figure(self, workspace, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--checkpoint", str(workspace["ckpt"]),
                     "--frames", "1,2", "--reps", "1", "--out", str(out)]) == 0
        assert out.exists()
        assert (tmp_path / "bench.png").exists()
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        modes = {r["mode"] for r in rows}
        assert modes == {"streaming", "full_reprocess", "full_causal"}
        assert all(float(r["seconds"]) > 0 for r in rows)

    def test_single_frame_streaming_close_to_full(self, workspace, tmp_path):
        out = tmp_path / "bench1.csv"
        assert main(["bench", "--checkpoint", str(workspace["ckpt"]),
                     "--frames", "1", "--reps", "3", "--out", str(out),
                     "--no-figures"]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        stream = np.median([float(r["seconds"]) for r in rows
                            if r["mode"] == "streaming"])
        full = np.median([float(r["seconds"]) for r in rows
                          if r["mode"] == "full_reprocess"])
        ratio = stream / full
        assert 0.5 < ratio < 2.0

    def test_bad_frames_list(self, workspace, tmp_path):
        assert main(["bench", "--checkpoint", str(workspace["ckpt"]),
                     "--frames", "a,b", "--out", str(tmp_path / "x.csv")]) == 1


class TestEval:
    def test_ground_truth_self_evaluation_is_perfect(self, workspace, tmp_path):
        frames = dataset_read(workspace["scene"])
        preds = [PredictionSet(pose=f.pose, point_map=f.point_map,
                               point_conf=np.ones_like(f.depth),
                               depth=f.depth, depth_conf=np.ones_like(f.depth),
                               tracks=f.tracks.T.astype(np.float32),
                               visibility=f.visibility.astype(np.float32))
                 for f in frames]
        pred_path = tmp_path / "gt.s4dp"
        write_predictions(pred_path, preds)
        csv_path = tmp_path / "metrics.csv"
        report = tmp_path / "report.txt"
        assert main(["eval", "--predictions", str(pred_path),
                     "--dataset", str(workspace["scene"]),
                     "--out-csv", str(csv_path), "--report", str(report)]) == 0
        values = {}
        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                values[(row["section"], row["metric"])] = float(row["value"])
        assert values[("cloud", "acc_mean")] == 0.0
        assert values[("cloud", "comp_mean")] == 0.0
        assert values[("depth", "abs_rel")] < 1e-6
        assert values[("pose", "auc30")] == 1.0
        assert report.exists()
        assert (tmp_path / "metrics_pose.png").exists()

    def test_corrupt_predictions_is_runtime_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.s4dp"
        bad.write_bytes(b"S4DPxxxxgarbage")
        assert main(["eval", "--predictions", str(bad),
                     "--dataset", str(workspace["scene"])]) == 2

    def test_missing_file_is_validation_error(self, workspace, tmp_path):
        assert main(["eval", "--predictions", str(tmp_path / "none.s4dp"),
                     "--dataset", str(workspace["scene"])]) == 1


class TestPredictionsContainer:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        preds = [PredictionSet(
            pose=CameraPose(rng.normal(size=3), rng.normal(size=4), [1.0, 1.1]),
            point_map=rng.normal(size=(3, 4, 4)).astype(np.float32),
            point_conf=np.ones((4, 4), np.float32) + rng.random((4, 4)).astype(np.float32),
            depth=rng.normal(size=(4, 4)).astype(np.float32),
            depth_conf=np.ones((4, 4), np.float32),
            tracks=rng.normal(size=(2, 3)).astype(np.float32),
            visibility=rng.normal(size=3).astype(np.float32)) for _ in range(2)]
        path = tmp_path / "p.s4dp"
        write_predictions(path, preds)
        back = read_predictions(path)
        path2 = tmp_path / "q.s4dp"
        write_predictions(path2, back)
        assert path.read_bytes() == path2.read_bytes()
        for a, b in zip(preds, back):
            assert np.array_equal(a.point_map, b.point_map)
            assert np.array_equal(a.tracks, b.tracks)

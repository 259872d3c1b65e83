import json
import math
import subprocess
import sys

import numpy as np
import pytest

from conftest import small_detector_config, small_scene
from mvf.boxes import write_boxes
from mvf.cli import gt_path, main
from mvf.detector import Detector
from mvf.pointcloud import PointCloud, write_kitti_bin
from mvf.trainer import TrainerConfig, TrainState, train
from mvf.voxelizer import toy_cloud


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def toy_bin(tmp_path):
    path = tmp_path / "toy.bin"
    write_kitti_bin(path, toy_cloud())
    return path


def _scene_files(tmp_path, pc, gts, name="scene"):
    path = tmp_path / f"{name}.bin"
    write_kitti_bin(path, pc)
    write_boxes(gt_path(path), gts)
    return path


def test_voxelize_dynamic_toy(tmp_path, toy_bin, capsys):
    assert run("voxelize", toy_bin, "--mode", "dynamic", "--grid", "toy", "--out-dir", tmp_path / "d") == 0
    report = (tmp_path / "d" / "buffer_report.txt").read_text()
    assert "voxels: 4\n" in report and "allocated_feature_units: 13\n" in report
    assert (tmp_path / "d" / "mapping.txt").read_text().startswith("voxel 0,0,0: 0 1 2 3 4 5\n")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["subcommand"] == "voxelize" and manifest["seed"] == 0
    assert capsys.readouterr().out == report


def test_voxelize_hard_toy(tmp_path, toy_bin):
    assert run("voxelize", toy_bin, "--mode", "hard", "-K", 3, "-T", 5, "--seed", 1, "--feature-width", 64,
               "--out-dir", tmp_path / "h") == 0
    report = (tmp_path / "h" / "buffer_report.txt").read_text()
    assert "voxels: 3\n" in report and f"allocated_feature_units: {15 * 64}\n" in report
    assert "dropped_voxels: 1\n" in report
    # long spellings behave identically
    assert run("voxelize", toy_bin, "--mode", "hard", "--max-voxels", 3, "--max-points", 5, "--seed", 1,
               "--feature-width", 64, "--out-dir", tmp_path / "h2") == 0
    assert (tmp_path / "h2" / "buffer_report.txt").read_text() == report


def test_voxelize_hard_without_capacity_is_usage_error(tmp_path, toy_bin):
    assert run("voxelize", toy_bin, "--mode", "hard", "--out-dir", tmp_path / "x") == 2


def test_missing_input_exit_2(tmp_path):
    assert run("voxelize", tmp_path / "nope.bin", "--out-dir", tmp_path / "x") == 2
    assert run("eval", "--scene", tmp_path / "nope.bin", "--detections", tmp_path / "d.txt",
               "--out-dir", tmp_path / "y") == 2


def test_truncated_input_exit_2(tmp_path):
    (tmp_path / "t.bin").write_bytes(b"\0" * 17)
    assert run("voxelize", tmp_path / "t.bin", "--out-dir", tmp_path / "x") == 2


def test_unknown_flag_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("voxelize", "--bogus")
    assert e.value.code == 2


def test_bench_kt_empty_scene_list(tmp_path):
    assert run("bench-kt", "--out-dir", tmp_path / "b") == 2


def test_bench_kt_bad_pair(tmp_path, toy_bin):
    assert run("bench-kt", toy_bin, "--grid", "toy", "--configs", "3x5", "--out-dir", tmp_path / "b") == 2


def test_bench_kt_panorama(tmp_path):
    assert run("generate-scene", "--kind", "panorama", "--name", "pano", "--seed", 0, "--out-dir", tmp_path) == 0
    assert run("bench-kt", tmp_path / "pano.bin", "--out-dir", tmp_path / "b") == 0
    lines = (tmp_path / "b" / "kt_sweep.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    assert [(int(r[0]), int(r[1])) for r in rows] == [(24000, 100), (36000, 66), (48000, 50), (48000, 100)]
    for col in (2, 3):
        vals = [float(r[col]) for r in rows]
        assert vals == sorted(vals)


def test_detect_on_empty_cloud(tmp_path):
    ckpt = tmp_path / "m.mvf"
    Detector(small_detector_config()).save(ckpt)
    write_kitti_bin(tmp_path / "empty.bin", PointCloud(np.zeros((0, 4)), "empty"))
    assert run("detect", "--checkpoint", ckpt, "--input", tmp_path / "empty.bin", "--out-dir", tmp_path / "o") == 0
    assert (tmp_path / "o" / "detections.txt").read_text() == ""


def test_eval_zero_detections(tmp_path):
    pc, gts = small_scene(0)
    scene = _scene_files(tmp_path, pc, gts)
    (tmp_path / "none.txt").write_text("")
    assert run("eval", "--scene", scene, "--detections", tmp_path / "none.txt", "--out-dir", tmp_path / "e") == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["vehicle.3d.ap.overall"] == 0.0 and m["vehicle.bev.ap.overall"] == 0.0
    assert m["vehicle.3d.fn.overall"] == len(gts)


def test_eval_needs_one_detection_source(tmp_path):
    pc, gts = small_scene(0)
    scene = _scene_files(tmp_path, pc, gts)
    assert run("eval", "--scene", scene, "--out-dir", tmp_path / "e") == 2


def test_eval_config_file_with_open_bucket(tmp_path):
    pc, gts = small_scene(0)
    scene = _scene_files(tmp_path, pc, gts)
    write_boxes(tmp_path / "d.txt", gts, with_score=True)
    cfg = tmp_path / "eval.json"
    cfg.write_text(json.dumps({"iou_thresholds": {"vehicle": 0.5}, "buckets": [[0, 10], [10, None]],
                               "modes": ["bev"]}))
    assert run("eval", "--scene", scene, "--detections", tmp_path / "d.txt", "--config", cfg,
               "--out-dir", tmp_path / "e") == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["vehicle.bev.ap.overall"] == 1.0
    assert "vehicle.bev.ap.10-inf" in m and "vehicle.3d.ap.overall" not in m
    manifest = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert manifest["effective_config"]["buckets"] == [[0.0, 10.0], [10.0, None]]


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file() and p.name != "manifest.json"}


def test_outputs_reproducible(tmp_path):
    for tag in ("a", "b"):
        assert run("generate-scene", "--objects", 3, "--seed", 4, "--out-dir", tmp_path / tag) == 0
        assert run("voxelize", tmp_path / tag / "scene.bin", "--grid", "desk-bev", "--mode", "hard",
                   "-K", 500, "-T", 8, "--seed", 2, "--out-dir", tmp_path / tag / "v") == 0
    assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
    assert _outputs(tmp_path / "a" / "v") == _outputs(tmp_path / "b" / "v")


def test_train_resume_matches_straight_run(tmp_path):
    pc, gts = small_scene(0)
    scene = _scene_files(tmp_path, pc, gts)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": small_detector_config().to_dict()}))
    assert run("train", "--scene", scene, "--config", cfg, "--steps", 6, "--checkpoint-every", 3,
               "--out-dir", tmp_path / "a") == 0
    assert run("train", "--scene", scene, "--config", cfg, "--steps", 6, "--checkpoint-every", 3, "--max-steps", 3,
               "--out-dir", tmp_path / "b") == 0
    assert run("train", "--scene", scene, "--resume", tmp_path / "b" / "ckpt_3.mvf", "--out-dir", tmp_path / "b") == 0
    for name in ("last.mvf", "loss.csv", "ckpt_6.mvf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    effective = json.loads((tmp_path / "a" / "config.json").read_text())
    assert effective["trainer"]["total_epochs"] == 6


def test_train_nan_checkpoint_exit_3(tmp_path, capsys):
    pc, gts = small_scene(0)
    scene = _scene_files(tmp_path, pc, gts)
    state = TrainState(Detector(small_detector_config()), TrainerConfig(total_epochs=10))
    train(state, [(pc, gts)], max_steps=2)
    state.detector.params["fuse.weight"].data[:] = math.nan
    state.save(tmp_path / "nan.mvf")
    assert run("train", "--scene", scene, "--resume", tmp_path / "nan.mvf", "--out-dir", tmp_path / "o") == 3
    assert "step 2" in capsys.readouterr().err


def test_train_without_ground_truth_exit_2(tmp_path):
    write_kitti_bin(tmp_path / "s.bin", small_scene(0)[0])
    assert run("train", "--scene", tmp_path / "s.bin", "--out-dir", tmp_path / "o") == 2


def test_module_entry_point(tmp_path, toy_bin):
    r = subprocess.run([sys.executable, "-m", "mvf", "voxelize", str(toy_bin), "--out-dir", str(tmp_path / "m")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "voxels: 4\n" in r.stdout


def test_desk_train_then_eval_overfits(tmp_path):
    """300 steps on one desk scene, then AP on that same scene."""
    assert run("generate-scene", "--objects", 8, "--seed", 1, "--out-dir", tmp_path) == 0
    scene = tmp_path / "scene.bin"
    assert run("train", "--scene", scene, "--steps", 300, "--seed", 0, "--out-dir", tmp_path / "t") == 0
    assert run("eval", "--scene", scene, "--checkpoint", tmp_path / "t" / "last.mvf", "--out-dir", tmp_path / "e") == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["vehicle.3d.ap.overall"] >= 0.95
    assert run("detect", "--checkpoint", tmp_path / "t" / "last.mvf", "--input", scene, "--out-dir", tmp_path / "d") == 0
    assert (tmp_path / "d" / "detections.txt").read_text().count("\n") >= 8

import csv
import logging

import numpy as np
import pytest

import volsplat.commands as commands
from volsplat.exceptions import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from volsplat.main import main
from volsplat.models import Checkpoint, Scene
from volsplat.storage import storage_service

SMALL = ["--resolution", "16", "16", "--views", "4", "--test-every", "4"]


def _read_csv(path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    code = main(["make-scene", "crossed_pair", "--output", str(out), "--resolution", "16", "16", "--views", "4",
                 "--render-dataset", "--test-every", "4"])
    assert code == EXIT_OK
    return out


def test_make_scene_writes_ply_cameras_and_dataset(scene_dir):
    assert (scene_dir / "crossed_pair.ply").is_file()
    cameras = storage_service.read_json(scene_dir / "cameras.json")
    assert len(cameras) == 4
    assert (scene_dir / "dataset" / "transforms_train.json").is_file()
    assert (scene_dir / "dataset" / "transforms_test.json").is_file()
    assert (scene_dir / "dataset" / "test" / "r_0.png").is_file()


def test_render_is_reproducible(scene_dir, tmp_path):
    args = ["render", "--scene", str(scene_dir / "crossed_pair.ply"), "--variant", "ots",
            "--camera", str(scene_dir / "cameras.json"), "--view", "1"]
    assert main(args + ["--output", str(tmp_path / "a.png")]) == EXIT_OK
    assert main(args + ["--output", str(tmp_path / "b.png")]) == EXIT_OK
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    sidecar = storage_service.read_json(tmp_path / "a.json")
    assert sidecar["variant"] == "ots"
    assert sidecar["gaussian_count"] == 2
    assert (sidecar["width"], sidecar["height"]) == (16, 16)
    assert len(sidecar["options_hash"]) == 64


def test_render_synthetic_with_marcher(tmp_path):
    out = tmp_path / "single.png"
    code = main(["render", "--synthetic", "single_gaussian", "--variant", "ots-marcher", "--resolution", "12", "12",
                 "--output", str(out), "--bins-per-gaussian", "8"])
    assert code == EXIT_OK
    assert storage_service.read_image(out).shape == (12, 12, 3)


def test_empty_checkpoint_renders_background(scene_dir, tmp_path):
    checkpoint = Checkpoint(scene=Scene.empty(background=np.array([0.2, 0.4, 0.6])), iteration=0, config={}, config_hash="")
    path = storage_service.save_checkpoint(checkpoint, tmp_path / "empty.vsck")
    out = tmp_path / "bg.png"
    code = main(["render", "--scene", str(path), "--variant", "3dgs", "--camera", str(scene_dir / "cameras.json"),
                 "--output", str(out)])
    assert code == EXIT_OK
    image = storage_service.read_image(out)
    np.testing.assert_allclose(image, np.broadcast_to([51 / 255, 102 / 255, 153 / 255], image.shape))


def test_view_out_of_range(scene_dir, tmp_path):
    code = main(["render", "--scene", str(scene_dir / "crossed_pair.ply"), "--variant", "3dgs",
                 "--camera", str(scene_dir / "cameras.json"), "--view", "9", "--output", str(tmp_path / "x.png")])
    assert code == EXIT_USAGE


def test_missing_scene_is_a_data_error(tmp_path):
    code = main(["render", "--scene", str(tmp_path / "nothing.vsck"), "--variant", "3dgs", "--output", str(tmp_path / "x.png")])
    assert code == EXIT_DATA


def test_unknown_subcommand_exits_with_usage_code():
    with pytest.raises(SystemExit) as excinfo:
        main(["paint"])
    assert excinfo.value.code == EXIT_USAGE


def _fit_args(out, iterations, *extra):
    return [
        "fit", "--synthetic", "single_gaussian", *SMALL, "--variant", "3dgs", "--gaussians", "2",
        "--iterations", str(iterations), "--output", str(out),
        "--set", "eval_interval=3", "--set", "checkpoint_interval=3", "--set", "sh_degree=0",
        "--set", "learning_rates.position_final=0", "--set", "init_theta=0.3", *extra,
    ]


def test_fit_writes_outputs(tmp_path):
    out = tmp_path / "fit"
    assert main(_fit_args(out, 6)) == EXIT_OK
    for name in ("checkpoint.vsck", "scene.ply", "metrics.csv", "effective_config.json"):
        assert (out / name).is_file()
    rows = _read_csv(out / "metrics.csv")
    assert [row["iteration"] for row in rows] == ["3", "6"]
    assert float(rows[-1]["test_psnr"]) > 0
    config = storage_service.read_json(out / "effective_config.json")
    assert config["gaussian_count"] == 2
    assert config["learning_rates"]["position_final"] == 0
    assert storage_service.load_checkpoint(out / "checkpoint.vsck").iteration == 6


def test_resumed_fit_matches_uninterrupted_fit(tmp_path):
    assert main(_fit_args(tmp_path / "full", 6)) == EXIT_OK
    assert main(_fit_args(tmp_path / "half", 3)) == EXIT_OK
    resume = ["--resume", str(tmp_path / "half" / "checkpoint.vsck")]
    assert main(_fit_args(tmp_path / "resumed", 6, *resume)) == EXIT_OK
    full = storage_service.load_checkpoint(tmp_path / "full" / "checkpoint.vsck")
    resumed = storage_service.load_checkpoint(tmp_path / "resumed" / "checkpoint.vsck")
    for name, value in full.scene.parameters().items():
        np.testing.assert_array_equal(getattr(resumed.scene, name), value)


def test_small_3dgs_fit_without_initial_theta_is_rejected(tmp_path, caplog):
    args = ["fit", "--synthetic", "single_gaussian", *SMALL, "--variant", "3dgs", "--gaussians", "2",
            "--iterations", "1", "--output", str(tmp_path / "small"), "--set", "sh_degree=0"]
    with caplog.at_level(logging.ERROR):
        assert main(args) == EXIT_USAGE
    assert "init_theta" in caplog.text


def test_invalid_config_key_is_named(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        code = main(_fit_args(tmp_path / "bad", 2, "--set", "learning_rate.theta=0.1"))
    assert code == EXIT_USAGE
    assert "learning_rate" in caplog.text


def test_gradcheck_exit_codes(tmp_path):
    report = tmp_path / "report.json"
    assert main(["gradcheck", "--variant", "ots", "--report", str(report)]) == EXIT_OK
    entries = storage_service.read_json(report)
    assert len(entries) == 1 and entries[0]["passed"]
    assert main(["gradcheck", "--variant", "ots", "--corrupt", "--report", str(report)]) == EXIT_NUMERICAL
    assert not storage_service.read_json(report)[0]["passed"]


def test_compare_writes_one_row_per_pair(tmp_path):
    out = tmp_path / "compare"
    code = main([
        "compare", "--variants", "3dgs", "ots", "--counts", "1", "2", "--iterations", "2",
        "--synthetic", "single_gaussian", *SMALL, "--set", "sh_degree=0", "--set", "init_theta=0.3",
        "--output", str(out),
    ])
    assert code == EXIT_OK
    rows = _read_csv(out / "compare.csv")
    assert len(rows) == 4
    assert {(r["variant"], r["gaussian_count"]) for r in rows} == {("3dgs", "1"), ("ots", "1"), ("3dgs", "2"), ("ots", "2")}
    assert all(r["status"] == "ok" for r in rows)
    grid = storage_service.read_image(out / "grid_single_gaussian.png")
    assert grid.shape == (2 * 18 - 2, 3 * 18 - 2, 3)


def test_compare_keeps_going_after_an_unexpected_row_failure(tmp_path, monkeypatch, caplog):
    real_fit = commands.fit

    def flaky_fit(config, dataset, **kwargs):
        if config.variant.value == "ots":
            raise RuntimeError("worker crashed")
        return real_fit(config, dataset, **kwargs)

    monkeypatch.setattr(commands, "fit", flaky_fit)
    out = tmp_path / "compare"
    with caplog.at_level(logging.ERROR):
        code = main([
            "compare", "--variants", "3dgs", "ots", "--counts", "8", "--iterations", "1",
            "--synthetic", "single_gaussian", *SMALL, "--set", "sh_degree=0", "--output", str(out),
        ])
    assert code == EXIT_OK
    rows = {r["variant"]: r for r in _read_csv(out / "compare.csv")}
    assert rows["3dgs"]["status"] == "ok"
    assert rows["ots"]["status"] == "failed"
    assert "worker crashed" in rows["ots"]["error"]
    assert "Traceback" in caplog.text

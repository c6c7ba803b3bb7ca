import json
import os
import subprocess
import sys

import numpy as np
import pytest

from f3dgs.cli import content_hash, git_blob_hash, main, read_config_file
from f3dgs.io import read_png, write_ply
from f3dgs.renderer import Camera
from f3dgs.storage import load_model, storage_report
from f3dgs.toy import l_shaped_slab


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["make-toy", "--out", str(root), "--gaussians", "30", "--train-views", "3",
                 "--test-views", "2", "--size", "24", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    code = main(["train", "--scene", str(toy_dir), "--scheme", "CP", "-N", "2", "-d", "4",
                 "--num-blocks", "3", "--steps", "4", "--set", "log_every=1", "--quiet",
                 "--run-dir", str(run)])
    assert code == 0
    return run


def test_blob_hash_matches_git():
    # `printf hello | git hash-object --stdin`
    assert git_blob_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"


def test_train_writes_run_directory(trained):
    for name in ("metrics.csv", "model.f3gs", "manifest.json", "config.txt", "eval.json"):
        assert (trained / name).exists(), name
    man = json.loads((trained / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0 and man["config"]["N"] == 2
    assert list(man["inputs"].values())[0] == content_hash(man["argv"][2])
    cfg = read_config_file(trained / "config.txt")
    assert cfg["N"] == "2" and cfg["total_steps"] == "4"
    assert len((trained / "metrics.csv").read_text().splitlines()) == 5


def test_report_prints_accounting(trained, capsys):
    model_path = str(trained / "model.f3gs")
    assert main(["report", model_path]) == 0
    out = capsys.readouterr().out
    assert "stored coordinate scalars  18" in out
    assert "representable Gaussians    24" in out
    assert main(["report", model_path, "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep == storage_report(load_model(model_path))
    assert rep["bytes_on_disk"] == os.path.getsize(model_path)


def test_render_requested_size(trained, tmp_path):
    cam = Camera.look_at([0, 0, 4], [0, 0, 0], [0, 1, 0], 20, 20, 24, 24)
    (tmp_path / "cam.json").write_text(json.dumps(cam.to_dict()))
    out = tmp_path / "img.png"
    args = ["render", str(trained / "model.f3gs"), "--camera", str(tmp_path / "cam.json"),
            "--out", str(out)]
    assert main(args) == 0
    assert read_png(out).shape == (24, 24, 3)
    assert main(args + ["--width", "40", "--height", "30"]) == 0
    assert read_png(out).shape == (30, 40, 3)


def test_evaluate_and_prune(trained, toy_dir, tmp_path, capsys):
    model_path = str(trained / "model.f3gs")
    assert main(["evaluate", model_path, "--scene", str(toy_dir)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["psnr"] > 0
    pruned = tmp_path / "p.f3gs"
    assert main(["prune", model_path, "--out", str(pruned), "--alpha-min", "0.5"]) == 0
    info = json.loads(capsys.readouterr().out)
    m = load_model(pruned)
    assert m.masks.frozen and int(m.masks.flat().sum()) == info["kept"]


def test_init_and_fit_points(tmp_path, capsys):
    ply = tmp_path / "slab.ply"
    write_ply(ply, l_shaped_slab(400))
    assert main(["init", "--ply", str(ply), "--interval", "0.5", "--lambda", "5", "-N", "2",
                 "-d", "4", "--run-dir", str(tmp_path / "i")]) == 0
    m = load_model(tmp_path / "i" / "model.f3gs")
    assert m.d == 4 and all(b.n == 2 for b in m.blocks)
    assert main(["fit-points", "--ply", str(ply), "--blocks", "4", "-N", "2", "--steps", "20",
                 "--run-dir", str(tmp_path / "f")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["stored_coordinate_scalars"] == 24 and summary["points"] == 32
    losses = np.loadtxt(tmp_path / "f" / "losses.csv", skiprows=1)
    assert len(losses) == 21


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["train"]) == 2
    assert main(["train", "--scene", str(tmp_path), "--set", "nonsense"]) == 2
    assert main(["train", "--scene", str(tmp_path), "--set", "bogus_key=1"]) == 2
    assert main(["fit-points"]) == 2


def test_data_errors_exit_3(tmp_path):
    assert main(["report", str(tmp_path / "missing.f3gs")]) == 3
    (tmp_path / "junk.f3gs").write_bytes(b"junk")
    assert main(["report", str(tmp_path / "junk.f3gs")]) == 3
    assert main(["train", "--scene", str(tmp_path / "nowhere")]) == 3
    assert main(["init", "--ply", str(tmp_path / "missing.ply")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_4(toy_dir, tmp_path):
    run = tmp_path / "boom"
    code = main(["train", "--scene", str(toy_dir), "-N", "2", "-d", "4", "--num-blocks", "3",
                 "--steps", "20", "--set", "lr_factors=1e30", "--set", "lr_decoder=1e30", "--quiet",
                 "--run-dir", str(run)])
    assert code == 4
    assert (run / "last_good.f3gs").exists()


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "f3dgs.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.strip()

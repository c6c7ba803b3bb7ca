import csv

import numpy as np
import pytest

from f3dgs.masking import mask_loss
from f3dgs.metrics import psnr
from f3dgs.optim import NumericalError
from f3dgs.storage import load_model, serialize
from f3dgs.toy import make_toy_scene
from f3dgs.train import METRIC_FIELDS, TrainConfig, evaluate, init_model, total_loss, train
from fixtures import TOY_TRAIN_PSNR_STEP0, TOY_TRAIN_PSNR_STEP500


@pytest.fixture(scope="module")
def small_scene():
    scene, _ = make_toy_scene(n=30, n_train=3, n_test=2, size=24, seed=1, points_per_gaussian=20)
    return scene


def small_config(**kw):
    base = dict(total_steps=6, N=2, d=4, num_blocks=3, seed=0, log_every=1, checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


# --- loss ------------------------------------------------------------------------------------


def test_loss_of_identical_images_with_dead_masks():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    loss, comps, _ = total_loss(img, img, mask_loss(np.full((3, 3, 3), -60.0)))
    assert loss < 1e-12 and comps["l1"] == 0 and abs(comps["dssim"]) < 1e-12


def test_loss_of_constant_offset():
    a = np.full((16, 16, 3), 0.5)
    lm = mask_loss(np.zeros((2, 2, 2)))
    loss, comps, grad = total_loss(a, a - 0.1, lm, lambda_dssim=0.0, lambda_mask=5e-4)
    assert loss == pytest.approx(0.1 + 5e-4 * 4.0, abs=1e-12)
    assert comps["mask_loss"] == 4.0
    assert np.allclose(grad, 1 / a.size)
    with pytest.raises(ValueError):
        total_loss(a, a[:8])


def test_loss_components_non_negative():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    _, comps, _ = total_loss(a, b, 1.5)
    assert all(v >= 0 for v in comps.values())


# --- config ------------------------------------------------------------------------------------


def test_freeze_schedule():
    assert TrainConfig().freeze_step == 20000
    assert TrainConfig(total_steps=3000).freeze_step == 2000
    assert TrainConfig(total_steps=10).freeze_step == 7
    assert TrainConfig(total_steps=100, coordinate_freeze_step=5).freeze_step == 5


def test_config_from_strings_and_validation():
    cfg = TrainConfig.from_dict({"N": "3", "lr_coords": "0.01", "masks": "false", "num_blocks": "none",
                                 "background": "1 1 1"})
    assert cfg.N == 3 and cfg.lr_coords == 0.01 and cfg.masks is False and cfg.num_blocks is None
    assert tuple(cfg.background) == (1.0, 1.0, 1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(scheme="XY").validate()


# --- loop --------------------------------------------------------------------------------------


def test_zero_steps_leave_model_identical(small_scene, tmp_path):
    cfg = small_config(total_steps=0)
    model = init_model(small_scene.points.points, cfg)
    before = serialize(model)
    res = train(model, small_scene, cfg, tmp_path)
    assert serialize(res.model) == before and res.metrics == []
    assert serialize(load_model(tmp_path / "model.f3gs")) == serialize(model.copy().freeze_masks())


def test_coordinates_frozen_after_freeze_step(small_scene):
    cfg = small_config(total_steps=8, coordinate_freeze_step=3)
    model = init_model(small_scene.points.points, cfg)
    snaps = []
    keys = model.coordinate_keys()

    def grab(row):
        snaps.append((row["step"], {k: model.params()[k].tobytes() for k in keys},
                      {k: v.copy() for k, v in model.params().items() if k not in keys}))

    train(model, small_scene, cfg, callback=grab)
    after = [s for s in snaps if s[0] >= 3]
    assert len(after) == 6
    for _, coords, _ in after[1:]:
        assert coords == after[0][1]
    # earlier steps moved the coordinates and the other factors keep moving
    assert snaps[0][1] != after[0][1]
    assert any(np.any(after[-1][2][k] != after[0][2][k]) for k in after[0][2])


def test_training_is_deterministic(small_scene, tmp_path):
    cfg = small_config()
    runs = []
    for i in range(2):
        model = init_model(small_scene.points.points, cfg)
        train(model, small_scene, cfg, tmp_path / str(i))
        runs.append((tmp_path / str(i) / "model.f3gs").read_bytes())
    assert runs[0] == runs[1]


def test_metrics_csv(small_scene, tmp_path):
    cfg = small_config(eval_every=3)
    model = init_model(small_scene.points.points, cfg)
    train(model, small_scene, cfg, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == METRIC_FIELDS
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert rows[2]["test_psnr"] != "" and rows[0]["test_psnr"] == ""
    assert all(float(r["loss"]) >= 0 and int(r["active_gaussians"]) <= 24 for r in rows)


def test_non_finite_loss_keeps_last_good(small_scene, tmp_path):
    cfg = small_config(total_steps=10)
    model = init_model(small_scene.points.points, cfg)

    def poison(row):
        if row["step"] == 5:
            model.decoder.weights[0][0, 0] = np.nan

    with pytest.raises(NumericalError):
        train(model, small_scene, cfg, tmp_path, callback=poison)
    good = load_model(tmp_path / "last_good.f3gs")
    assert all(np.all(np.isfinite(a)) for a in good.params().values())
    assert not (tmp_path / "model.f3gs").exists()


def test_evaluate_fields_and_resolution_check(small_scene):
    cfg = small_config()
    model = init_model(small_scene.points.points, cfg)
    out = evaluate(model, small_scene.test_cameras, small_scene.test_images)
    assert set(out) == {"psnr", "ssim", "render_ms", "model_bytes", "gaussian_count"}
    assert out["gaussian_count"] <= 24 and out["model_bytes"] > 0
    manual = np.mean([psnr(model.copy().freeze_masks().render(c), im)
                      for c, im in zip(small_scene.test_cameras, small_scene.test_images)])
    assert abs(out["psnr"] - manual) < 1e-6
    with pytest.raises(ValueError):
        evaluate(model, small_scene.test_cameras, [im[:10] for im in small_scene.test_images])


def test_random_init_inside_bounds():
    cfg = small_config(init="random", num_blocks=4)
    model = init_model(None, cfg, bounds=([0, 0, 0], [1, 1, 1]))
    pos = model.expand().positions
    assert len(model.blocks) == 4 and np.all((pos >= 0) & (pos <= 1))
    with pytest.raises(ValueError):
        init_model(None, small_config())


def test_toy_training_psnr_improves_over_first_500_steps():
    from oracles.toy_reconstruction import TOY_CONFIG, mean_train_psnr
    scene, _ = make_toy_scene()
    cfg = TrainConfig(**{**TOY_CONFIG, "total_steps": 500, "eval_every": 0})
    model = init_model(scene.points.points, cfg, colors=scene.points.colors)
    start = mean_train_psnr(model, scene)
    train(model, scene, cfg)
    end = mean_train_psnr(model, scene)
    assert start == pytest.approx(TOY_TRAIN_PSNR_STEP0, abs=0.05)
    assert end > start
    assert end == pytest.approx(TOY_TRAIN_PSNR_STEP500, abs=0.05)

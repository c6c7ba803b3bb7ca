# coding: utf-8

# # Training on a rendered toy scene
#
# Ground truth comes from 200 dense Gaussians rendered from 25 views. A CP
# model with 20 blocks of 3^3 (about a quarter of the dense parameter
# count) is seeded from a sampled point cloud and trained against it.

import sys

import numpy as np

from f3dgs.io import write_png
from f3dgs.toy import make_toy_scene
from f3dgs.train import TrainConfig, evaluate, init_model, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

scene, dense = make_toy_scene()
cfg = TrainConfig(total_steps=steps, N=3, d=8, num_blocks=20, lambda_mask=1e-5,
                  log_every=100, eval_every=200)
model = init_model(scene.points.points, cfg, colors=scene.points.colors)
print("parameters:", model.count_params())


def show(row):
    test = "" if row["test_psnr"] == "" else f"  test {row['test_psnr']:.2f} dB"
    print(f"step {row['step']:5d}  loss {row['loss']:.4f}  active {row['active_gaussians']}{test}")


train(model, scene, cfg, callback=show)

# Held-out numbers come from the pruned Gaussian set with packed masks.

print(evaluate(model, scene.test_cameras, scene.test_images))

cam, target = scene.test_cameras[0], scene.test_images[0]
side = np.concatenate([target, model.copy().freeze_masks().render(cam)], axis=1)
write_png("toy_test_view.png", side)
print("wrote toy_test_view.png (target | render)")

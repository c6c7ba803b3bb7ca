"""Synthetic scenes rendered with this package's own rasterizer."""

from __future__ import annotations

import os

import numpy as np

from .decoder import C0
from .io import Scene, PlyData, write_ply, write_png, write_transforms
from .renderer import Camera, RasterSettings, render_gaussians

__all__ = [
    "DENSE_PARAMS_PER_GAUSSIAN",
    "dense_gaussians",
    "orbit_cameras",
    "render_dense",
    "sample_points",
    "make_toy_scene",
    "write_scene",
    "l_shaped_slab",
    "chair_cloud",
]

# position 3 + scale 3 + rotation 4 + SH 48 + opacity 1
DENSE_PARAMS_PER_GAUSSIAN = 59


def dense_gaussians(n=200, clusters=10, seed=0, spread=0.15, extent=0.8):
    """Clustered random Gaussians with mostly diffuse colors."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent, extent, (clusters, 3))
    owner = np.arange(n) % clusters
    pos = centers[owner] + rng.normal(0.0, spread, (n, 3))
    scales = rng.uniform(0.04, 0.12, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    base = rng.uniform(0.1, 0.9, (clusters, 3))[owner] + rng.normal(0.0, 0.05, (n, 3))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (np.clip(base, 0.0, 1.0) - 0.5) / C0
    sh[:, 1:4] = rng.normal(0.0, 0.05, (n, 3, 3))
    opac = rng.uniform(0.6, 0.95, n)
    return {"positions": pos, "scales": scales, "rotations": q, "sh": sh.reshape(n, 48),
            "opacities": opac, "colors": np.clip(base, 0.0, 1.0)}


def orbit_cameras(count, radius=4.0, size=64, fov_x=0.9, seed=0):
    """Cameras on a sphere looking at the origin (Fibonacci spacing with jitter)."""
    rng = np.random.default_rng(seed)
    focal = 0.5 * size / np.tan(0.5 * fov_x)
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(1.0 - z * z)
        phi = golden * i + rng.uniform(0, 0.3)
        eye = radius * np.array([r * np.cos(phi), z, r * np.sin(phi)])
        up = np.array([0.0, 1.0, 0.0]) if abs(z) < 0.95 else np.array([1.0, 0.0, 0.0])
        cams.append(Camera.look_at(eye, np.zeros(3), up, focal, focal, size, size))
    return cams, fov_x


def render_dense(g, camera, background=(0.0, 0.0, 0.0), settings=None):
    return render_gaussians(g["positions"], g["scales"], g["rotations"], g["sh"], g["opacities"],
                            camera, background, settings or RasterSettings()).image


def sample_points(g, per_gaussian=10, seed=0):
    """Point cloud drawn from every Gaussian (a stand-in for a sparse reconstruction)."""
    from .renderer import build_covariances
    rng = np.random.default_rng(seed)
    cov = build_covariances(g["scales"], g["rotations"])
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    z = rng.normal(size=(len(cov), per_gaussian, 3))
    pts = g["positions"][:, None] + np.einsum("nij,nkj->nki", chol, z)
    cols = np.repeat(g["colors"][:, None], per_gaussian, axis=1)
    return pts.reshape(-1, 3), cols.reshape(-1, 3)


def make_toy_scene(n=200, n_train=20, n_test=5, size=64, seed=0, points_per_gaussian=10):
    """Dense ground truth plus train/test views; returns ``(scene, dense)``."""
    g = dense_gaussians(n, seed=seed)
    pts, cols = sample_points(g, points_per_gaussian, seed + 3)
    cams, _ = orbit_cameras(n_train + n_test, size=size, seed=seed + 1)
    order = np.random.default_rng(seed + 2).permutation(len(cams))
    train = [cams[i] for i in sorted(order[:n_train])]
    test = [cams[i] for i in sorted(order[n_train:])]
    scene = Scene(train, [render_dense(g, c) for c in train], test,
                  [render_dense(g, c) for c in test], PlyData(pts, cols))
    return scene, g


def write_scene(scene: Scene, root, fov_x=0.9):
    """Write a scene folder: transforms files, PNG images and points.ply."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    for split, cams, imgs in (("train", scene.train_cameras, scene.train_images),
                              ("test", scene.test_cameras, scene.test_images)):
        paths = []
        for i, img in enumerate(imgs):
            rel = f"images/{split}_{i:03d}.png"
            write_png(os.path.join(root, rel), img)
            paths.append(rel)
        write_transforms(os.path.join(root, f"transforms_{split}.json"), cams, paths, fov_x)
    if scene.points is not None:
        write_ply(os.path.join(root, "points.ply"), scene.points.points, scene.points.colors)


def l_shaped_slab(n=2000, seed=0):
    """Points filling an L-shaped slab (two boxes sharing an edge)."""
    rng = np.random.default_rng(seed)
    a = rng.uniform([0.0, 0.0, 0.0], [1.0, 0.3, 0.2], (n // 2, 3))
    b = rng.uniform([0.0, 0.3, 0.0], [0.3, 1.0, 0.2], (n - n // 2, 3))
    return np.concatenate([a, b])


def chair_cloud(n=2488, seed=0):
    """Surface samples of a chair-like object: seat, back rest and four legs."""
    rng = np.random.default_rng(seed)
    parts = [  # (lo, hi) boxes
        ((-0.5, 0.40, -0.5), (0.5, 0.48, 0.5)),  # seat
        ((-0.5, 0.48, 0.42), (0.5, 1.30, 0.50)),  # back rest
        ((-0.5, 0.0, -0.5), (-0.42, 0.40, -0.42)),
        ((0.42, 0.0, -0.5), (0.5, 0.40, -0.42)),
        ((-0.5, 0.0, 0.42), (-0.42, 0.40, 0.5)),
        ((0.42, 0.0, 0.42), (0.5, 0.40, 0.5)),
    ]
    lo = np.array([p[0] for p in parts])
    hi = np.array([p[1] for p in parts])
    area = np.array([2 * ((h - l)[0] * (h - l)[1] + (h - l)[1] * (h - l)[2] + (h - l)[0] * (h - l)[2])
                     for l, h in zip(lo, hi)])
    owner = rng.choice(len(parts), size=n, p=area / area.sum())
    pts = rng.uniform(lo[owner], hi[owner])
    # snap one coordinate to a face so samples lie on the box surfaces
    axis = rng.integers(0, 3, n)
    side = rng.integers(0, 2, n)
    rows = np.arange(n)
    pts[rows, axis] = np.where(side == 0, lo[owner, axis], hi[owner, axis])
    return pts

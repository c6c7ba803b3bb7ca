"""Training loop, loss, evaluation and model initialization from a scene."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .io import Scene
from .metrics import l1_and_grad, psnr, ssim, ssim_and_grad
from .model import F3DGSModel
from .optim import AdamState, NumericalError, adam_step
from .renderer import RasterSettings, render_gaussians
from .seeding import build_histogram, random_blocks, seed_blocks, seed_blocks_exact
from .storage import save_model, storage_report

__all__ = [
    "TrainConfig",
    "TrainResult",
    "total_loss",
    "init_model",
    "train",
    "evaluate",
    "METRIC_FIELDS",
]

METRIC_FIELDS = ["step", "loss", "l1", "dssim", "mask_loss", "train_psnr", "test_psnr",
                 "active_gaussians", "coord_grad_norm", "wall_time"]


@dataclass
class TrainConfig:
    total_steps: int = 30000
    coordinate_freeze_step: int | None = None  # None: 20000 of 30000, else 2/3 of the run
    lr_factors: float = 0.02
    lr_decoder: float = 0.001
    lr_coords: float | None = None  # None: same as lr_factors
    lr_mask: float = 0.001
    lr_decay: bool = False
    lr_final_ratio: float = 0.01
    lambda_dssim: float = 0.2
    lambda_mask: float = 5e-4
    N: int = 5
    d: int = 16
    scheme: str = "CP"
    vm_mode: str = "per-term"
    vm_hidden: int = 128
    seed: int = 0
    init: str = "histogram"  # or "random"
    interval: float = 0.026
    lam: int = 5
    num_blocks: int | None = None  # fixed block count (exact seeding / random init)
    feature_std: float = 0.5
    masks: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        self.validate()

    @property
    def freeze_step(self) -> int:
        if self.coordinate_freeze_step is not None:
            return int(self.coordinate_freeze_step)
        if self.total_steps == 30000:
            return 20000
        return int(round(2 * self.total_steps / 3))

    def validate(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not 0 <= self.freeze_step <= self.total_steps:
            raise ValueError("coordinate_freeze_step must lie in [0, total_steps]")
        for name in ("lr_factors", "lr_decoder", "lr_mask"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_coords is not None and not self.lr_coords > 0:
            raise ValueError("lr_coords must be positive")
        if self.scheme not in ("CP", "VM"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.init not in ("histogram", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.N < 1 or self.d < 1:
            raise ValueError("N and d must be positive")
        if not 0 <= self.lambda_dssim <= 1 or self.lambda_mask < 0:
            raise ValueError("loss weights out of range")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["background"] = list(self.background)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        """Build from (possibly string-valued) key/value pairs; unknown keys raise."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, fields[key].default)
        return cls(**kwargs)


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if key == "background" else raw
    text = raw.strip()
    if key == "background":
        return tuple(float(v) for v in text.replace(",", " ").split())
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if key in ("total_steps", "coordinate_freeze_step", "N", "d", "seed", "lam", "num_blocks",
               "vm_hidden", "log_every", "eval_every", "checkpoint_every"):
        value = float(text)
        if value != int(value):
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float) or key == "lr_coords":
        return float(text)
    return text


def total_loss(rendered, target, mask_loss=0.0, lambda_dssim=0.2, lambda_mask=5e-4, need_grad=True):
    """Weighted L1 + D-SSIM + mask loss.

    Returns ``(loss, components, grad_image)``; ``mask_loss`` is the summed
    mask regularizer over all blocks.
    """
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    l1, g1 = l1_and_grad(rendered, target)
    if lambda_dssim > 0:
        s, gs = ssim_and_grad(rendered, target, need_grad)
    else:
        s, gs = 1.0, None
    loss = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s) + lambda_mask * mask_loss
    comps = {"l1": l1, "dssim": 1.0 - s, "mask_loss": float(mask_loss)}
    grad = None
    if need_grad:
        grad = (1 - lambda_dssim) * g1
        if gs is not None:
            grad = grad - lambda_dssim * gs
    return float(loss), comps, grad


def init_model(points, config: TrainConfig, colors=None, bounds=None) -> F3DGSModel:
    """Seed a model from a point cloud (histogram) or uniformly inside ``bounds``."""
    dtype = np.float32
    kw = dict(d=config.d, seed=config.seed, feature_std=config.feature_std, dtype=dtype)
    if config.init == "random":
        if bounds is None:
            if points is None:
                raise ValueError("random init needs points or explicit bounds")
            pts = np.asarray(points, dtype=np.float64)
            bounds = (pts.min(axis=0), pts.max(axis=0))
        count = config.num_blocks or 1
        blocks = random_blocks(count, config.N, config.d, bounds[0], bounds[1], config.seed,
                               config.feature_std, dtype=dtype)
    else:
        if points is None:
            raise ValueError("histogram init needs a point cloud")
        if config.num_blocks:
            blocks, _ = seed_blocks_exact(points, config.num_blocks, config.N, config.lam, colors=colors,
                                          **kw)
        else:
            hist = build_histogram(points, config.interval, colors=colors)
            blocks = seed_blocks(hist, config.lam, config.N, **kw)
        if not blocks:
            raise ValueError("no histogram bin exceeds the point threshold; lower lam or interval")
    hidden = (128,) if config.scheme == "CP" else (config.vm_hidden, config.vm_hidden)
    return F3DGSModel.create(blocks, config.scheme, hidden, config.seed, config.vm_mode,
                             with_masks=config.masks, rng_features=config.feature_std)


@dataclass
class TrainResult:
    model: F3DGSModel
    metrics: list
    state: AdamState
    steps: int


def _learning_rates(model, config, step, frozen):
    scale = 1.0
    if config.lr_decay and config.total_steps > 0:
        scale = config.lr_final_ratio ** (step / config.total_steps)
    lr_coords = config.lr_factors if config.lr_coords is None else config.lr_coords
    rates = {}
    for key in model.params():
        group = model.param_group(key)
        if group == "coords":
            rates[key] = 0.0 if frozen else lr_coords * scale
        elif group == "factors":
            rates[key] = config.lr_factors * scale
        elif group == "decoder":
            rates[key] = config.lr_decoder * scale
        else:
            rates[key] = config.lr_mask
    return rates


def _mean_psnr(model, cameras, images, background):
    if not cameras:
        return float("nan")
    return float(np.mean([psnr(model.render(c, background), im) for c, im in zip(cameras, images)]))


def train(model: F3DGSModel, scene: Scene, config: TrainConfig, run_dir=None,
          settings: RasterSettings | None = None, callback=None) -> TrainResult:
    """Optimize ``model`` in place on random training views.

    Coordinates stop receiving updates (and Adam moments) from
    ``config.freeze_step`` on. With ``run_dir`` the metrics are written to
    ``metrics.csv`` and the final model (masks frozen to packed bits) to
    ``model.f3gs``. A non-finite loss or gradient stores the last good model
    as ``last_good.f3gs`` and raises :class:`NumericalError`.
    """
    config.validate()
    if not scene.train_cameras:
        raise ValueError("scene has no training views")
    settings = settings or RasterSettings()
    bg = config.background
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    coord_keys = set(model.coordinate_keys())
    metrics = []
    last_good = model.copy()
    t_start = time.perf_counter()
    writer = fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        fh = open(os.path.join(run_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    try:
        for step in range(config.total_steps):
            frozen = step >= config.freeze_step
            view = int(rng.integers(len(scene.train_cameras)))
            image, cache = model.forward(scene.train_cameras[view], bg, settings)
            mloss = model.masks.loss() if (model.masks is not None and not model.masks.frozen) else 0.0
            loss, comps, grad_img = total_loss(image, scene.train_images[view], mloss,
                                               config.lambda_dssim, config.lambda_mask)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
            grads = model.backward(cache, grad_img, config.lambda_mask)
            coord_norm = math.sqrt(sum(float(np.sum(grads[k].astype(np.float64) ** 2))
                                       for k in coord_keys))
            if frozen:
                for k in coord_keys:
                    grads.pop(k)
            adam_step(model.params(), grads, state, _learning_rates(model, config, step, frozen))
            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                last_good = model.copy()
            log = config.log_every and (done % config.log_every == 0 or done == config.total_steps)
            test_due = config.eval_every and (done % config.eval_every == 0 or done == config.total_steps)
            if log or test_due:
                row = {"step": done, "loss": loss, **comps,
                       "train_psnr": psnr(image, scene.train_images[view]),
                       "test_psnr": _mean_psnr(model, scene.test_cameras, scene.test_images, bg)
                       if test_due else "",
                       "active_gaussians": int(np.count_nonzero(cache.mask_flat)),
                       "coord_grad_norm": coord_norm,
                       "wall_time": time.perf_counter() - t_start}
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if callback is not None:
                    callback(row)
    except NumericalError:
        if run_dir is not None:
            save_model(last_good.copy().freeze_masks(), os.path.join(run_dir, "last_good.f3gs"))
        raise
    finally:
        if fh is not None:
            fh.close()
    if run_dir is not None:
        save_model(model.copy().freeze_masks(), os.path.join(run_dir, "model.f3gs"))
    return TrainResult(model, metrics, state, config.total_steps)


def evaluate(model: F3DGSModel, cameras, images, background=(0.0, 0.0, 0.0),
             settings: RasterSettings | None = None) -> dict:
    """Held-out metrics.

    Rendering uses the pruned, decoded Gaussian set (what a viewer would
    keep in memory); ``render_ms`` is the mean time per view for projection
    and rasterization. ``model_bytes`` is the serialized size with masks
    frozen to packed bits.
    """
    if len(cameras) != len(images):
        raise ValueError("need one image per camera")
    settings = settings or RasterSettings()
    for cam, img in zip(cameras, images):
        if np.asarray(img).shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image of shape {np.asarray(img).shape[:2]} does not match "
                             f"camera resolution {(cam.height, cam.width)}")
    frozen = model.copy().freeze_masks()
    g = frozen.gaussians(prune=True)
    psnrs, ssims, times = [], [], []
    for cam, img in zip(cameras, images):
        t0 = time.perf_counter()
        out = render_gaussians(g.positions, g.scales, g.rotations, g.sh, g.opacities, cam,
                               background, settings).image
        times.append(time.perf_counter() - t0)
        psnrs.append(psnr(out, img))
        ssims.append(ssim(out, img))
    nbytes = storage_report(frozen)["bytes_on_disk"]
    return {
        "psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
        "ssim": float(np.mean(ssims)) if ssims else float("nan"),
        "render_ms": 1000.0 * float(np.mean(times)) if times else 0.0,
        "model_bytes": int(nbytes),
        "gaussian_count": int(len(g)),
    }

"""Self-supervised rotation stage.

Training never sees a ground image: the query is a satellite patch moved by a
random pose and cut down to the camera's field-of-view wedge; the regressor
learns the pose back. At test time the query is the ground view's feature map
projected onto the same overhead grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import (
    GroundCameraRig,
    OverheadGrid,
    SE2Transform,
    fov_mask,
    se2_compose,
    ground_to_overhead,
    warp_satellite,
    wrap_deg,
)
from .models import ModelBundle, image_to_tensor
from .simworld import PoseNoiseModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class UnsupportedInput(ValueError):
    pass


@dataclass
class RotationPair:
    query: np.ndarray  # fov-masked, transformed reference (H, W, C)
    reference: np.ndarray
    gt: SE2Transform


@dataclass
class RotationTrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    max_rotation_deg: float = 20.0
    max_translation_m: float = 20.0
    input_scale: float = 0.5
    hfov: float = 90.0
    near_range_m: float = 0.0  # ground closer than this is never visible to the camera
    max_range_m: Optional[float] = None  # query cells farther than this from the camera are dropped
    reference_px: Optional[int] = None  # reference size cut from the center of larger training rasters
    random_reference_heading: bool = True
    overfit: bool = False
    steps: Optional[int] = None  # caps the total number of steps when set
    final_lr_ratio: float = 1.0  # cosine decay from lr to lr * ratio over the run; 1 keeps lr constant
    head_lr_scale: Optional[float] = None  # lr factor of the regressor's first FC layer; None = 1 / tokens


def downsample(image: np.ndarray, scale: float) -> np.ndarray:
    """Box-filter an HxWxC raster by an integer factor ``1/scale``."""
    k = int(round(1 / scale))
    if k == 1:
        return image
    h, w = image.shape[:2]
    return image.reshape(h // k, k, w // k, k, -1).mean(axis=(1, 3)).astype(np.float32)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    o = (image.shape[0] - size) // 2
    if o < 0 or (image.shape[0] - size) % 2:
        raise ValueError(f"cannot center-crop {image.shape[0]} px to {size} px")
    return image[o: o + size, o: o + size]


def synthesize_rotation_pair(sat: np.ndarray, bounds: PoseNoiseModel, rng: np.random.Generator,
                             gamma: float, hfov: float = 90.0, reference_heading: float = 0.0,
                             size: Optional[int] = None) -> RotationPair:
    """Make a (query, reference, gt) triple from one satellite raster.

    The reference is the central ``size`` pixels of ``sat`` (all of it by
    default) turned by ``reference_heading`` about its center (test-time
    references are turned to the prior heading). The query is the reference
    moved by ``gt`` then masked to the FoV wedge. When ``sat`` is larger than
    the reference the query is cut from ``sat`` itself, so the wedge keeps
    seeing ground where the moved reference would have run into black padding.
    """
    size = size or sat.shape[0]
    gt = SE2Transform(
        rng.uniform(-bounds.max_rotation_deg, bounds.max_rotation_deg),
        rng.uniform(-bounds.max_translation_m, bounds.max_translation_m),
        rng.uniform(-bounds.max_translation_m, bounds.max_translation_m),
    )
    turn = SE2Transform(reference_heading)
    ref = center_crop(sat, size)
    if reference_heading != 0:
        ref = warp_satellite(ref, turn, gamma)
    if size == sat.shape[0]:
        moved = warp_satellite(ref, gt, gamma)
    else:
        moved = center_crop(warp_satellite(sat, se2_compose(gt, turn), gamma), size)
    mask = fov_mask(OverheadGrid(size, gamma), hfov)
    query = moved * (mask[..., None] if moved.ndim == 3 else mask)
    return RotationPair(query.astype(np.float32), np.asarray(ref, np.float32), gt)


def rotation_loss(pred, gt):
    """Sum of absolute pose errors (degrees + meters); angle residual wrapped.

    Accepts two SE2Transforms (returns float) or [..., 3] tensors (returns the
    per-row loss tensor).
    """
    if isinstance(pred, SE2Transform):
        return abs(wrap_deg(pred.theta - gt.theta)) + abs(pred.tx - gt.tx) + abs(pred.ty - gt.ty)
    d = pred - gt
    dth = torch.remainder(d[..., 0] + 180.0, 360.0) - 180.0
    return dth.abs() + d[..., 1].abs() + d[..., 2].abs()


def moving_average(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.r_[0.0, v])
    return (c[window:] - c[:-window]) / window


class _SatelliteCache:
    """Down-scaled satellite rasters of a dataset, held as uint8."""

    def __init__(self, dataset, scale: float):
        self.items = []
        self.gammas = []
        for i in range(len(dataset)):
            sat, gamma = _satellite_of(dataset, i)
            small = downsample(sat, scale)
            self.items.append(np.round(small * 255).astype(np.uint8))
            self.gammas.append(gamma / scale)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i].astype(np.float32) / 255.0, self.gammas[i]


def _satellite_of(dataset, i):
    if hasattr(dataset, "satellite"):
        return dataset.satellite(i)
    s = dataset[i]
    return s.positive_satellite, s.sat_gamma


def _pair_rng(seed, epoch, index):
    return np.random.default_rng([int(seed), int(epoch), int(index), 0xA0])


def _pair_batch(cache, indices, epoch, cfg: RotationTrainConfig):
    bounds = PoseNoiseModel(cfg.max_translation_m, cfg.max_rotation_deg)
    q, r, g = [], [], []
    for i in indices:
        sat, gamma = cache[i]
        rng = _pair_rng(cfg.seed, 0 if cfg.overfit else epoch, i)
        heading = rng.uniform(-180.0, 180.0) if cfg.random_reference_heading else 0.0
        size = None if cfg.reference_px is None else int(round(cfg.reference_px * cfg.input_scale))
        pair = synthesize_rotation_pair(sat, bounds, rng, gamma, cfg.hfov, heading, size)
        q.append(image_to_tensor(pair.query))
        r.append(image_to_tensor(pair.reference))
        g.append([pair.gt.theta, pair.gt.tx, pair.gt.ty])
    return torch.cat(q), torch.cat(r), torch.tensor(g, dtype=torch.float32)


def query_mask(grid: OverheadGrid, config: RotationTrainConfig) -> torch.Tensor:
    """Feature-level support of a query: FoV wedge minus the unseen near field and the far field.

    ``max_range_m`` optionally drops far cells, where a query synthesized from a
    reference-sized raster runs into black padding while a real ground view
    keeps seeing ground.
    """
    dx, dy = grid.cell_offsets()
    m = fov_mask(grid, config.hfov) * (dx >= config.near_range_m)
    if config.max_range_m is not None:
        m = m * (np.hypot(dx, dy) <= config.max_range_m)
    return torch.from_numpy(m.astype(np.float32))


def predict_pairs(bundle: ModelBundle, query: torch.Tensor, reference: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    n = query.shape[0]
    feats, _ = bundle.rot_extractor(torch.cat([query, reference]))
    return bundle.rot_regressor(feats[:n] * mask, feats[n:])


def _cosine_lr(config: RotationTrainConfig, step: int, total: int) -> float:
    lo = config.lr * config.final_lr_ratio
    return lo + 0.5 * (config.lr - lo) * (1 + math.cos(math.pi * step / max(total, 1)))


def _param_groups(bundle: ModelBundle, config: RotationTrainConfig) -> list:
    """Rotation parameters, with a reduced lr for the regressor's first FC layer.

    That layer reads every token at once and its inputs are dominated by the
    shared positional part, so Adam moves all of its weights the same way and
    each step shifts the hidden pre-activations by about lr * fan_in; at the
    base lr the ReLUs die within a few dozen steps and the output is constant.
    """
    reg = bundle.rot_regressor
    wide = list(reg.head[0].parameters())
    scale = config.head_lr_scale
    if scale is None:
        scale = 1.0 / (reg.spec.input_size // reg.spec.token_stride) ** 2
    ids = {id(p) for p in wide}
    rest = [p for p in bundle.parameters_of("rotation") if id(p) not in ids]
    return [{"params": rest, "lr_scale": 1.0}, {"params": wide, "lr_scale": scale}]


def train_rotation_stage(dataset, bundle: ModelBundle, config: RotationTrainConfig,
                         resume: Optional[dict] = None, log_csv=None, checkpoint=None) -> dict:
    """Train rotation extractor + regressor on synthesized satellite pairs.

    Only satellite rasters of ``dataset`` are read. Returns a dict with the
    loss curve and the optimizer state (what :func:`train_rotation_stage`
    needs to resume).
    """
    if bundle.frozen.get("rotation"):
        raise ValueError("rotation stage is frozen")
    trans_before = bundle.checksum("translation")
    if abs(bundle.rot_regressor.spec.max_rotation_deg - config.max_rotation_deg) > 1e-12:
        raise ValueError("regressor rotation bound differs from the training bound")
    cache = _SatelliteCache(dataset, config.input_scale)
    if len(cache) == 0:
        raise ValueError("rotation training needs at least one satellite image")
    opt = torch.optim.Adam(_param_groups(bundle, config), lr=config.lr)
    losses: list[float] = []
    step = 0
    if resume:
        opt.load_state_dict(resume["optimizer"])
        losses = list(resume["losses"])
        step = int(resume["step"])
    bundle.rot_extractor.train()
    bundle.rot_regressor.train()

    steps_per_epoch = max(1, math.ceil(len(cache) / config.batch_size))
    total = config.epochs * steps_per_epoch
    if config.steps is not None:
        total = min(total, config.steps) if config.epochs else config.steps
    writer = None
    mask = None
    if log_csv is not None:
        fresh = not Path(log_csv).exists() or step == 0
        fh = open(log_csv, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss"])
    try:
        while step < total:
            epoch, k = divmod(step, steps_per_epoch)
            order = np.random.default_rng([config.seed, epoch, 0xE0]).permutation(len(cache))
            if config.overfit:
                order = np.zeros(len(cache), dtype=int)
            idx = order[k * config.batch_size: (k + 1) * config.batch_size]
            for g in opt.param_groups:
                g["lr"] = _cosine_lr(config, step, total) * g["lr_scale"]
            q, r, gt = _pair_batch(cache, idx, epoch, config)
            if mask is None:
                n = q.shape[-1] // 4
                mask = query_mask(OverheadGrid(n, cache[0][1] * 4), config)
            pred = predict_pairs(bundle, q, r, mask)
            loss = rotation_loss(pred, gt).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"rotation loss became {loss.item()} at step {step} (epoch {epoch}); "
                    f"last finite losses {losses[-5:]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if writer is not None:
                writer.writerow([step, f"{loss.item():.6f}"])
            step += 1
            if step % 50 == 0:
                log.info("rotation step %d/%d loss %.4f", step, total, np.mean(losses[-50:]))
    finally:
        if writer is not None:
            fh.close()
    bundle.rot_extractor.eval()
    bundle.rot_regressor.eval()
    assert bundle.checksum("translation") == trans_before
    state = {"optimizer": opt.state_dict(), "losses": losses, "step": step, "config": asdict(config)}
    if checkpoint is not None:
        bundle.save_stage(checkpoint, "rotation", extra=state)
    return state


# --------------------------------------------------------------------------
# inference


def rotation_grid(sat_size_px: int, sat_gamma: float, config: RotationTrainConfig) -> OverheadGrid:
    n = int(round(sat_size_px * config.input_scale * 0.25))
    return OverheadGrid(n, sat_gamma / (config.input_scale * 0.25))


@torch.no_grad()
def evaluate_pairs(bundle: ModelBundle, pairs: list[RotationPair], gamma: float,
                   config: RotationTrainConfig = None) -> np.ndarray:
    """Regressor outputs [N, 3] for already-synthesized pairs at image resolution ``gamma``."""
    config = config or RotationTrainConfig()
    bundle.eval()
    n = pairs[0].query.shape[0] // 4
    mask = query_mask(OverheadGrid(n, gamma * 4), config)
    out = []
    for i in range(0, len(pairs), 8):
        chunk = pairs[i: i + 8]
        q = torch.cat([image_to_tensor(p.query) for p in chunk])
        r = torch.cat([image_to_tensor(p.reference) for p in chunk])
        out.append(predict_pairs(bundle, q, r, mask))
    return torch.cat(out).numpy()


@torch.no_grad()
def estimate_rotation(ground: np.ndarray, sat: np.ndarray, rig: GroundCameraRig, bundle: ModelBundle,
                      prior: SE2Transform, sat_gamma: float, config: RotationTrainConfig = None,
                      panorama: bool = False) -> float:
    """Heading correction (degrees) to add to ``prior.theta``.

    The satellite patch is turned so the prior heading points along +u, the
    ground features are projected with zero rotation in that frame, and the
    regressor's angle is converted from "transform applied to the reference"
    to "camera heading inside the reference" (a sign flip). Its translation
    output is discarded.
    """
    if panorama:
        raise UnsupportedInput("spherical panoramas are not supported; the ground projection is pin-hole only")
    config = config or RotationTrainConfig()
    bundle.eval()
    small = downsample(np.asarray(sat, np.float32), config.input_scale)
    g_small = sat_gamma / config.input_scale
    ref = warp_satellite(small, SE2Transform(-prior.theta), g_small)
    ref_feat, _ = bundle.rot_extractor(image_to_tensor(ref))
    g_feat, _ = bundle.rot_extractor(image_to_tensor(ground))
    grid = rotation_grid(np.asarray(sat).shape[0], sat_gamma, config)
    over, _ = ground_to_overhead(g_feat[0], rig, SE2Transform(0.0), grid)
    pred = bundle.rot_regressor((over * query_mask(grid, config))[None], ref_feat)[0]
    return -float(pred[0])

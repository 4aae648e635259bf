"""Translation-stage training with in-batch negatives.

The contrastive term pushes the best positive score above the best score
against every other query's satellite; the optional weak-label term asks the
positive map's global peak to fall inside a window around a noisy label.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import GroundCameraRig, OverheadGrid, SE2Transform, ground_to_overhead, wrap_deg
from .models import ModelBundle, image_to_tensor
from .registration import SimilarityMap, correlate_batch, kernel_side
from .rotation import RotationTrainConfig, TrainingDiverged, estimate_rotation

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 10.0
    lam: int = 0
    d_m: float = 5.0
    batch_size: int = 8
    epochs: int = 1
    lr: float = 1e-4
    seed: int = 0
    kernel_m: float = 40.0
    steps: Optional[int] = None  # caps the total number of steps when set
    overfit: bool = False  # reuse the first batch every step

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.lam not in (0, 1):
            raise ConfigError("lambda must be 0 or 1")
        if not self.d_m > 0:
            raise ConfigError("d_m must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 for in-batch negatives")


def _values(m):
    return m.values if isinstance(m, SimilarityMap) else m


def hard_max(s: torch.Tensor) -> torch.Tensor:
    """Max over the last two dims with the whole gradient on one cell (lowest row-major on ties)."""
    flat = s.reshape(*s.shape[:-2], -1)
    idx = flat.detach().argmax(-1, keepdim=True)
    return flat.gather(-1, idx).squeeze(-1)


def contrastive_loss(pos_maps: Sequence, neg_maps: Sequence[Sequence], alpha: float = 10.0) -> torch.Tensor:
    """Sum over (query, negative) of softplus(alpha * (max S_neg - max S_pos))."""
    if len(pos_maps) != len(neg_maps):
        raise ValueError("need one list of negatives per positive")
    total = 0.0
    for pos, negs in zip(pos_maps, neg_maps):
        if len(negs) == 0:
            raise ValueError("every query needs at least one negative")
        mp = hard_max(_values(pos))
        mn = torch.stack([hard_max(_values(n)) for n in negs])
        total = total + F.softplus(alpha * (mn - mp)).sum()
    return total


def contrastive_loss_matrix(scores: torch.Tensor, alpha: float = 10.0):
    """Batched form over an all-pairs map [B, B, H, W] whose diagonal holds the positives.

    Returns ``(loss, max_pos [B], max_neg [B, B-1])``.
    """
    b = scores.shape[0]
    peaks = hard_max(scores)
    pos = peaks.diagonal()
    off = ~torch.eye(b, dtype=torch.bool)
    neg = peaks[off].view(b, b - 1)
    return F.softplus(alpha * (neg - pos[:, None])).sum(), pos, neg


def window_bounds(label_uv, d_m: float, gamma: float, shape):
    """Closed cell window [u* - r, u* + r] x [v* - r, v* + r], r = ceil(d / gamma), clipped to the map."""
    u, v = (int(round(float(c))) for c in label_uv)
    h, w = shape
    if not (0 <= u < h and 0 <= v < w):
        raise ValueError(f"label cell {(u, v)} lies outside the {h}x{w} map")
    r = int(math.ceil(d_m / gamma - 1e-9))
    return max(0, u - r), min(h, u + r + 1), max(0, v - r), min(w, v + r + 1)


def weak_location_loss(pos_map, label_uv, d_m: float, gamma: float) -> torch.Tensor:
    """|max S - max S[window around the label]|."""
    s = _values(pos_map)
    u0, u1, v0, v1 = window_bounds(label_uv, d_m, gamma, s.shape[-2:])
    return (hard_max(s) - hard_max(s[..., u0:u1, v0:v1])).abs()


def total_loss(l2, l3, lam: int):
    if lam not in (0, 1):
        raise ConfigError("lambda must be 0 or 1")
    if lam == 0:
        return l2
    if l3 is None:
        raise ConfigError("lambda = 1 needs pose labels for the weak location term")
    return l2 + l3


# --------------------------------------------------------------------------
# batching


def footprints_disjoint(a, b, coverage_m: float) -> bool:
    return abs(a[0] - b[0]) >= coverage_m or abs(a[1] - b[1]) >= coverage_m


def make_batches(centers: Sequence, coverage_m: float, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then greedily fill batches whose satellite footprints are pairwise disjoint.

    Samples that do not fit anywhere wait for a later batch; leftovers that
    cannot form a full batch are dropped for this epoch.
    """
    pending = list(rng.permutation(len(centers)))
    batches = []
    while len(pending) >= batch_size:
        batch, rest = [], []
        for i in pending:
            if len(batch) < batch_size and all(footprints_disjoint(centers[i], centers[j], coverage_m) for j in batch):
                batch.append(i)
            else:
                rest.append(i)
        if len(batch) < batch_size:
            break
        batches.append([int(i) for i in batch])
        pending = rest
    return batches


# --------------------------------------------------------------------------
# training


def precompute_headings(dataset, rig: GroundCameraRig, bundle: ModelBundle, rot_config: RotationTrainConfig) -> np.ndarray:
    """Absolute heading estimate per sample from the frozen rotation stage."""
    out = np.empty(len(dataset))
    for i in range(len(dataset)):
        s = dataset[i]
        d = estimate_rotation(s.ground_image, s.positive_satellite, rig, bundle, s.coarse_pose_prior,
                              s.sat_gamma, rot_config)
        out[i] = wrap_deg(s.coarse_pose_prior.theta + d)
    return out


def batch_scores(samples, headings, rig: GroundCameraRig, bundle: ModelBundle, kernel_m: float):
    """All-pairs similarity maps [B, B, H, W] (row = query, column = satellite) and the map gamma."""
    ext = bundle.trans_extractor
    g_feat, g_conf = ext(torch.cat([image_to_tensor(s.ground_image) for s in samples]), want_confidence=True)
    s_feat, _ = ext(torch.cat([image_to_tensor(s.positive_satellite) for s in samples]))
    gamma = samples[0].sat_gamma / ext.spec.output_scale
    k = kernel_side(kernel_m, gamma, s_feat.shape[-1] - 1)
    grid = OverheadGrid(k, gamma)
    kernels = []
    for i, th in enumerate(headings):
        rot = SE2Transform(float(th))
        over, _ = ground_to_overhead(g_feat[i], rig, rot, grid)
        conf, _ = ground_to_overhead(g_conf[i], rig, rot, grid)
        kernels.append(over * conf)
    return correlate_batch(torch.stack(kernels), s_feat), gamma, k, s_feat.shape[-1]


def label_cell(sample, smap_like: SimilarityMap):
    lbl = sample.label_pose
    return smap_like.metric_to_cell(lbl.tx, lbl.ty)


def _coverage(dataset) -> float:
    s = dataset[0]
    return s.positive_satellite.shape[0] * s.sat_gamma


def _centers(dataset):
    if not hasattr(dataset, "sat_center"):
        return None
    cs = [dataset.sat_center(i) for i in range(len(dataset))]
    return None if any(c is None for c in cs) else cs


def train_translation_stage(dataset, bundle: ModelBundle, config: TrainConfig, rig: GroundCameraRig,
                            rot_config: RotationTrainConfig = None, headings: Optional[np.ndarray] = None,
                            log_csv=None, checkpoint=None, epoch_checkpoint: Optional[str] = None) -> dict:
    """Train the shared translation extractor; the rotation stage must be frozen.

    ``checkpoint`` (a path) receives the final weights; ``epoch_checkpoint``
    is a format string with an ``{epoch}`` field for one file per finished
    epoch. Returns the loss curves.
    """
    if not bundle.frozen.get("rotation"):
        raise ValueError("the rotation stage must be trained and frozen before translation training")
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset of {len(dataset)} is smaller than one batch of {config.batch_size}")
    rot_before = bundle.checksum("rotation")
    rot_config = rot_config or RotationTrainConfig()
    if config.lam == 1 and any(dataset[i].label_pose is None for i in range(min(len(dataset), 4))):
        raise ConfigError("lambda = 1 needs pose labels for the weak location term")
    if headings is None:
        headings = precompute_headings(dataset, rig, bundle, rot_config)
    centers = _centers(dataset)
    coverage = _coverage(dataset)
    if centers is None:
        centers = [(i * 2 * coverage, 0.0) for i in range(len(dataset))]  # unknown layout: trust the caller

    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(bundle.parameters_of("translation"), lr=config.lr)
    bundle.trans_extractor.train()
    hist = {"L2": [], "L3": [], "L": [], "max_pos": [], "max_neg": []}
    fh = writer = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L2", "L3", "L", "max_pos_mean", "max_neg_mean"])
    step = 0
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch, 0xB7])
            batches = make_batches(centers, coverage, config.batch_size, rng)
            if not batches:
                raise ValueError("could not form a single batch of disjoint satellite footprints")
            if config.overfit:
                first = make_batches(centers, coverage, config.batch_size, np.random.default_rng([config.seed, 0, 0xB7]))[0]
                batches = [first] * len(batches)
            for idx in batches:
                if config.steps is not None and step >= config.steps:
                    break
                samples = [dataset[i] for i in idx]
                scores, gamma, k, n = batch_scores(samples, headings[idx], rig, bundle, config.kernel_m)
                l2, mp, mn = contrastive_loss_matrix(scores, config.alpha)
                l3 = None
                if config.lam == 1:
                    ref = SimilarityMap(scores[0, 0], gamma, k, n)
                    l3 = sum(weak_location_loss(scores[i, i], label_cell(s, ref), config.d_m, gamma)
                             for i, s in enumerate(samples))
                loss = total_loss(l2, l3, config.lam)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"translation loss became {loss.item()} at step {step} "
                                           f"(epoch {epoch}, samples {idx})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                l3v = l3.item() if l3 is not None else 0.0
                row = [l2.item(), l3v, loss.item(), mp.mean().item(), mn.mean().item()]
                for key, val in zip(hist, row):
                    hist[key].append(val)
                if writer is not None:
                    writer.writerow([step] + [f"{v:.6f}" for v in row])
                step += 1
                if step % 25 == 0:
                    log.info("translation step %d loss %.4f", step, np.mean(hist["L"][-25:]))
            if epoch_checkpoint is not None:
                bundle.save_stage(epoch_checkpoint.format(epoch=epoch), "translation",
                                  extra={"epoch": epoch, "config": asdict(config)})
            if config.steps is not None and step >= config.steps:
                break
    finally:
        if fh is not None:
            fh.close()
    bundle.trans_extractor.eval()
    if bundle.checksum("rotation") != rot_before:
        raise RuntimeError("rotation-stage parameters changed during translation training")
    if checkpoint is not None:
        bundle.save_stage(checkpoint, "translation", extra={"config": asdict(config), "losses": hist})
    return {"losses": hist, "steps": step, "headings": headings}

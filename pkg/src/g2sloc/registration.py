"""Confidence-weighted normalized cross-correlation and the localization pipeline.

All maps are channels-first tensors. The similarity value at cell (u, v) is
the cosine between the kernel and the reference window whose top-left corner
is (u, v).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import GroundCameraRig, OverheadGrid, SE2Transform, ground_to_overhead, wrap_deg
from .models import ConfidenceMap, FeatureMap, ModelBundle, image_to_tensor
from .rotation import RotationTrainConfig, estimate_rotation

EPS = 1e-8


@dataclass
class SimilarityMap:
    """Valid-mode correlation surface over one satellite feature map.

    ``kernel_size`` and ``ref_size`` tie map cells to metric offsets: cell
    (u, v) puts the kernel center on reference cell (u + h, v + h), which
    lies at ((v + h - c) * gamma, -(u + h - c) * gamma) from the reference
    center ``c = (ref_size - 1) / 2``.
    """

    values: torch.Tensor  # [H, W]
    gamma: float
    kernel_size: int
    ref_size: int

    @property
    def shape(self):
        return tuple(self.values.shape)

    def _offset(self):
        return self.kernel_size // 2 - (self.ref_size - 1) / 2.0

    def cell_to_metric(self, u, v):
        o = self._offset()
        return (np.asarray(v) + o) * self.gamma, -(np.asarray(u) + o) * self.gamma

    def metric_to_cell(self, x, y):
        o = self._offset()
        return -np.asarray(y) / self.gamma - o, np.asarray(x) / self.gamma - o

    def argmax(self):
        """(u, v) of the maximum; ties go to the lowest row-major index."""
        flat = int(torch.argmax(self.values.detach().reshape(-1)))
        return divmod(flat, self.values.shape[1])

    def extent_m(self) -> float:
        return (min(self.values.shape) - 1) * self.gamma


# --------------------------------------------------------------------------
# primitives


def weighted_query(features: FeatureMap, confidence: ConfidenceMap) -> FeatureMap:
    f, c = features.values, confidence.values
    if f.shape[-2:] != c.shape[-2:]:
        raise ValueError(f"features {tuple(f.shape[-2:])} and confidence {tuple(c.shape[-2:])} differ in size")
    return FeatureMap(f * c, features.scale, features.gamma)


def kernel_side(coverage_m: float, gamma: float, limit: Optional[int] = None) -> int:
    """Odd cell count covering ``coverage_m``; rounds down instead of up if up would exceed ``limit``."""
    n = int(round(coverage_m / gamma))
    if limit is not None and n > limit:
        raise ValueError(f"kernel coverage {coverage_m} m ({n} cells) exceeds the {limit}-cell map")
    if n % 2 == 0:
        n = n + 1 if limit is None or n + 1 <= limit else n - 1
    if n < 1:
        raise ValueError(f"kernel coverage {coverage_m} m is below one cell")
    return n


def crop_kernel(overhead: FeatureMap, coverage_m: float) -> FeatureMap:
    """Centered square crop of an overhead map whose center cell is the camera."""
    if overhead.gamma is None:
        raise ValueError("overhead map needs a gamma")
    v = overhead.values
    size = v.shape[-1]
    if v.shape[-2] != size:
        raise ValueError("overhead map must be square")
    k = kernel_side(coverage_m, overhead.gamma, size)
    if (size - k) % 2:
        raise ValueError(f"a {k}-cell crop cannot be centered on a {size}-cell map")
    s = (size - k) // 2
    return FeatureMap(v[..., s: s + k, s: s + k], overhead.scale, overhead.gamma)


def _box_sum(x: torch.Tensor, k: int) -> torch.Tensor:
    """Valid k x k window sums over the last two dims, accumulated in float64."""
    c = torch.nn.functional.pad(x.double().cumsum(-2).cumsum(-1), (1, 0, 1, 0))
    s = c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]
    return s.clamp_min(0.0)


def correlate_batch(kernels: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Normalized correlation of every kernel with every reference.

    kernels [M, C, k, k], refs [N, C, H, W] -> [M, N, H - k + 1, W - k + 1].
    The numerator is computed in the frequency domain in float64 (near-empty
    reference windows divide by a tiny norm, which would amplify float32 FFT
    noise); wrap-around never reaches the valid region since the kernel fits
    inside the reference.
    """
    if kernels.dim() != 4 or refs.dim() != 4:
        raise ValueError("expected [M, C, k, k] kernels and [N, C, H, W] references")
    if kernels.shape[1] != refs.shape[1]:
        raise ValueError(f"channel mismatch: kernel {kernels.shape[1]} vs reference {refs.shape[1]}")
    kh, kw = kernels.shape[-2:]
    h, w = refs.shape[-2:]
    if kh != kw:
        raise ValueError("kernels must be square")
    if kh > h or kw > w or (kh, kw) == (h, w):
        raise ValueError(f"kernel {kh}x{kw} must be smaller than reference {h}x{w}")
    oh, ow = h - kh + 1, w - kw + 1
    out_dtype = torch.promote_types(kernels.dtype, refs.dtype)
    refs, kernels = refs.double(), kernels.double()
    rf = torch.fft.rfft2(refs, s=(h, w))
    kf = torch.fft.rfft2(kernels, s=(h, w))
    num = torch.fft.irfft2(torch.einsum("nchw,mchw->mnhw", rf, kf.conj()), s=(h, w))[..., :oh, :ow]
    ref_norm = torch.sqrt(_box_sum((refs * refs).sum(1), kh) + EPS)
    ker_norm = torch.sqrt((kernels * kernels).sum((1, 2, 3)) + EPS)
    return (num / (ker_norm[:, None, None, None] * ref_norm[None])).to(out_dtype)


def correlate(ref: FeatureMap, kernel: FeatureMap) -> SimilarityMap:
    r, k = ref.values, kernel.values
    if r.shape[0] != k.shape[0]:
        raise ValueError(f"channel mismatch: reference {r.shape[0]} vs kernel {k.shape[0]}")
    s = correlate_batch(k[None], r[None])[0, 0]
    gamma = ref.gamma if ref.gamma is not None else kernel.gamma
    return SimilarityMap(s, gamma, k.shape[-1], r.shape[-1])


# --------------------------------------------------------------------------
# pipeline


@dataclass
class LocalizeConfig:
    kernel_m: float = 40.0
    rotation: RotationTrainConfig = field(default_factory=RotationTrainConfig)


def translation_inputs(ground: np.ndarray, sat: np.ndarray, rig: GroundCameraRig, bundle: ModelBundle,
                       theta: float, sat_gamma: float, kernel_m: float = 40.0):
    """Weighted overhead query kernel [C, k, k] and satellite features [C, N, N] (differentiable)."""
    ext = bundle.trans_extractor
    g_feat, g_conf = ext(image_to_tensor(ground), want_confidence=True)
    s_feat, _ = ext(image_to_tensor(sat))
    scale = ext.spec.output_scale
    gamma = sat_gamma / scale
    k = kernel_side(kernel_m, gamma, s_feat.shape[-1] - 1)
    grid = OverheadGrid(k, gamma)
    rot = SE2Transform(theta)
    over, _ = ground_to_overhead(g_feat[0], rig, rot, grid)
    conf, _ = ground_to_overhead(g_conf[0], rig, rot, grid)
    q = weighted_query(FeatureMap(over, scale, gamma), ConfidenceMap(conf))
    return q.values, s_feat[0], gamma


def localize(sample, rig: GroundCameraRig, bundle: ModelBundle, config: LocalizeConfig = None,
             theta_override: Optional[float] = None):
    """Full estimate for one sample.

    Returns ``(theta_hat, similarity_map, location)`` where ``location`` is
    the camera pose relative to the satellite center in meters, with
    absolute heading ``theta_hat``. ``theta_override`` skips the rotation
    stage (oracle-heading runs).
    """
    config = config or LocalizeConfig()
    prior = sample.coarse_pose_prior
    if theta_override is None:
        delta = estimate_rotation(sample.ground_image, sample.positive_satellite, rig, bundle, prior,
                                  sample.sat_gamma, config.rotation)
        theta_hat = wrap_deg(prior.theta + delta)
    else:
        theta_hat = wrap_deg(theta_override)
    with torch.no_grad():
        q, s, gamma = translation_inputs(sample.ground_image, sample.positive_satellite, rig, bundle,
                                         theta_hat, sample.sat_gamma, config.kernel_m)
        smap = correlate(FeatureMap(s, bundle.trans_extractor.spec.output_scale, gamma),
                         FeatureMap(q, bundle.trans_extractor.spec.output_scale, gamma))
    u, v = smap.argmax()
    x, y = smap.cell_to_metric(u, v)
    return theta_hat, smap, SE2Transform(theta_hat, float(x), float(y))


# --------------------------------------------------------------------------
# diagnostics


def false_color(values: np.ndarray, vmin: float, vmax: float, cmap: str = "viridis") -> np.ndarray:
    from matplotlib import colormaps

    v = np.clip((np.asarray(values, np.float64) - vmin) / max(vmax - vmin, 1e-12), 0.0, 1.0)
    return (colormaps[cmap](v)[..., :3] * 255).round().astype(np.uint8)


def dump_diagnostics(out_dir, sample_id: int, smap: SimilarityMap, confidence: Optional[np.ndarray] = None):
    """Similarity (and confidence) map as false-color PNG plus raw ``.npy`` per sample."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = smap.values.detach().cpu().numpy()
    Image.fromarray(false_color(sim, -1.0, 1.0)).save(out / f"{sample_id:06d}_similarity.png")
    np.save(out / f"{sample_id:06d}_similarity.npy", sim)
    meta = {"similarity": {"cmap": "viridis", "vmin": -1.0, "vmax": 1.0}}
    if confidence is not None:
        conf = np.asarray(confidence, np.float32).squeeze()
        Image.fromarray(false_color(conf, 0.0, 1.0)).save(out / f"{sample_id:06d}_confidence.png")
        np.save(out / f"{sample_id:06d}_confidence.npy", conf)
        meta["confidence"] = {"cmap": "viridis", "vmin": 0.0, "vmax": 1.0}
    (out / f"{sample_id:06d}_colormap.json").write_text(json.dumps(meta, sort_keys=True))

"""Trainable components: U-shaped feature extractors and the pose regressor.

Feature maps are kept channels-first (``[C, H, W]`` per image) throughout.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import SE2Transform

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class FeatureExtractorSpec:
    levels: int = 3
    channels: int = 16
    output_scale: float = 0.25
    confidence_head: bool = False
    share_with: Optional[str] = None
    base_width: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.levels < 1:
            raise ValueError("channels and levels must be >= 1")
        if self.output_scale != 0.25:
            raise ValueError("only a 1/4 output scale is supported")

    @property
    def stride(self) -> int:
        """Input size must be a multiple of this."""
        return 4 * 2 ** (self.levels - 1)


@dataclass
class FeatureMap:
    values: torch.Tensor  # [C, H, W]
    scale: float = 0.25
    gamma: Optional[float] = None

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError("feature map has non-finite values")


@dataclass
class ConfidenceMap:
    values: torch.Tensor  # [1, H, W], strictly inside (0, 1)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class FeatureExtractor(nn.Module):
    """Small U-Net: full-res stem down to 1/4, ``levels`` encoder stages, skip decoder."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stem = nn.Sequential(_conv(spec.in_channels, w, 2), _conv(w, w, 2), _conv(w, w))
        self.down = nn.ModuleList()
        widths = [w]
        for lvl in range(1, spec.levels):
            cin, cout = widths[-1], w * 2**lvl
            self.down.append(nn.Sequential(nn.MaxPool2d(2), _conv(cin, cout), _conv(cout, cout)))
            widths.append(cout)
        self.up = nn.ModuleList()
        for lvl in range(spec.levels - 1, 0, -1):
            self.up.append(_conv(widths[lvl] + widths[lvl - 1], widths[lvl - 1]))
            widths[lvl - 1] = widths[lvl - 1]
        self.head = nn.Conv2d(w, spec.channels + int(spec.confidence_head), 1)
        # the default init shrinks activations layer by layer until the output
        # is nearly constant over space; He init keeps the spatial signal
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor, want_confidence: bool = False):
        s = self.spec.stride
        if x.shape[-1] % s or x.shape[-2] % s:
            raise ValueError(f"input {tuple(x.shape[-2:])} must be divisible by {s}")
        if want_confidence and not self.spec.confidence_head:
            raise ValueError("this extractor has no confidence head")
        skips = [self.stem(x - 0.5)]  # rasters are in [0, 1]; center them
        for blk in self.down:
            skips.append(blk(skips[-1]))
        y = skips[-1]
        for blk, skip in zip(self.up, reversed(skips[:-1])):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            y = blk(torch.cat([y, skip], dim=1))
        out = self.head(y)
        feats = out[:, : self.spec.channels]
        if not want_confidence:
            return feats, None
        conf = torch.sigmoid(out[:, self.spec.channels:]).clamp(1e-6, 1 - 1e-6)
        return feats, conf


def image_to_tensor(image) -> torch.Tensor:
    """HxWxC numpy raster (or CxHxW tensor) -> float32 [1, C, H, W]."""
    if isinstance(image, torch.Tensor):
        t = image if image.dim() == 4 else image[None]
        return t.float()
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def extract_features(image, extractor: FeatureExtractor, want_confidence: bool = False):
    """Run one image through an extractor; returns ``(FeatureMap, ConfidenceMap | None)``."""
    feats, conf = extractor(image_to_tensor(image), want_confidence)
    fmap = FeatureMap(feats[0], extractor.spec.output_scale)
    return fmap, (ConfidenceMap(conf[0]) if conf is not None else None)


# --------------------------------------------------------------------------
# pose regressor


@dataclass(frozen=True)
class PoseRegressorSpec:
    in_channels: int = 16  # per input map
    input_size: int = 64
    token_stride: int = 4
    embed_dim: int = 64
    heads: int = 4
    window: int = 8
    hidden: int = 128
    max_rotation_deg: float = 20.0
    max_translation_m: float = 20.0

    def __post_init__(self):
        tokens = self.input_size // self.token_stride
        if self.input_size % self.token_stride or tokens % self.window:
            raise ValueError("token grid must tile into attention windows")


def _window_partition(x, win):
    b, h, w, d = x.shape
    x = x.view(b, h // win, win, w // win, win, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, win * win, d)


def _window_merge(x, win, b, h, w):
    d = x.shape[-1]
    x = x.view(b, h // win, w // win, win, win, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, d)


class WindowBlock(nn.Module):
    """Pre-norm transformer block with (optionally shifted) local attention windows."""

    def __init__(self, dim, heads, window, grid, shift):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        if shift:
            # keep cyclically wrapped regions from attending to each other
            ids = torch.zeros(1, grid, grid, 1)
            cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
            k = 0
            for rs in cuts:
                for cs in cuts:
                    ids[:, rs, cs] = k
                    k += 1
            win_ids = _window_partition(ids, window).squeeze(-1)
            mask = win_ids[:, None, :] != win_ids[:, :, None]
            self.register_buffer("mask", mask, persistent=False)
        else:
            self.mask = None

    def forward(self, x):
        b, h, w, d = x.shape
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, (-self.shift, -self.shift), dims=(1, 2))
        win = _window_partition(y, self.window)
        mask = None
        if self.mask is not None:
            n = win.shape[0] // self.mask.shape[0]
            mask = self.mask.repeat(n, 1, 1).repeat_interleave(self.attn.num_heads, dim=0)
        y, _ = self.attn(win, win, win, attn_mask=mask, need_weights=False)
        y = _window_merge(y, self.window, b, h, w)
        if self.shift:
            y = torch.roll(y, (self.shift, self.shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PoseRegressor(nn.Module):
    """Query and reference overhead maps -> (theta_deg, tx_m, ty_m), range-bounded."""

    def __init__(self, spec: PoseRegressorSpec):
        super().__init__()
        self.spec = spec
        g = spec.input_size // spec.token_stride
        d = spec.embed_dim
        self.embed = nn.Conv2d(2 * spec.in_channels, d, spec.token_stride, spec.token_stride)
        self.pos = nn.Parameter(torch.zeros(1, g, g, d))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList([
            WindowBlock(d, spec.heads, spec.window, g, 0),
            WindowBlock(d, spec.heads, spec.window, g, spec.window // 2),
        ])
        self.norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(g * g * d, spec.hidden), nn.ReLU(inplace=True), nn.Linear(spec.hidden, 3))
        # start in the linear part of tanh, predicting the identity pose
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)
        bound = torch.tensor([spec.max_rotation_deg, spec.max_translation_m, spec.max_translation_m])
        self.register_buffer("bound", bound, persistent=False)

    def forward(self, query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        if query.shape != reference.shape:
            raise ValueError(f"query {tuple(query.shape)} and reference {tuple(reference.shape)} differ")
        n = self.spec.input_size
        if query.shape[-2:] != (n, n) or query.shape[1] != self.spec.in_channels:
            raise ValueError(f"regressor expects [B, {self.spec.in_channels}, {n}, {n}] maps")
        x = self.embed(torch.cat([query, reference], dim=1)).permute(0, 2, 3, 1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        raw = self.head(self.norm(x).flatten(1))
        return self.bound * torch.tanh(raw)


def regress_pose(query_overhead: FeatureMap, reference: FeatureMap, regressor: PoseRegressor) -> SE2Transform:
    out = regressor(query_overhead.values[None], reference.values[None])[0]
    return SE2Transform(*(float(v) for v in out))


# --------------------------------------------------------------------------
# bundle and checkpoints


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ModelBundle:
    """Rotation-stage extractor + regressor and the shared translation extractor.

    The translation ground and satellite branches are one module: the
    satellite branch simply never asks for confidence.
    """

    rot_extractor: FeatureExtractor
    rot_regressor: PoseRegressor
    trans_extractor: FeatureExtractor
    frozen: dict = field(default_factory=lambda: {"rotation": False, "translation": False})

    @classmethod
    def build(cls, seed: int = 0, rot_spec: FeatureExtractorSpec = None, reg_spec: PoseRegressorSpec = None,
              trans_spec: FeatureExtractorSpec = None) -> "ModelBundle":
        rot_spec = rot_spec or FeatureExtractorSpec(share_with="rotation")
        trans_spec = trans_spec or FeatureExtractorSpec(confidence_head=True, share_with="translation")
        reg_spec = reg_spec or PoseRegressorSpec(in_channels=rot_spec.channels)
        g = torch.random.fork_rng()
        with g:
            torch.manual_seed(seed)
            rot = FeatureExtractor(rot_spec)
            reg = PoseRegressor(reg_spec)
            trans = FeatureExtractor(trans_spec)
        return cls(rot, reg, trans)

    @property
    def trans_ground_extractor(self) -> FeatureExtractor:
        return self.trans_extractor

    @property
    def trans_satellite_extractor(self) -> FeatureExtractor:
        return self.trans_extractor

    def stage_modules(self, stage: str) -> dict:
        if stage == "rotation":
            return {"extractor": self.rot_extractor, "regressor": self.rot_regressor}
        if stage == "translation":
            return {"extractor": self.trans_extractor}
        raise ValueError(f"unknown stage {stage!r}")

    def parameters_of(self, stage: str):
        return [p for m in self.stage_modules(stage).values() for p in m.parameters()]

    def checksum(self, stage: str) -> str:
        h = hashlib.sha256()
        for name, m in sorted(self.stage_modules(stage).items()):
            h.update(name.encode())
            h.update(state_checksum(m).encode())
        return h.hexdigest()

    def freeze(self, stage: str, frozen: bool = True):
        self.frozen[stage] = frozen
        for p in self.parameters_of(stage):
            p.requires_grad_(not frozen)

    def eval(self):
        for m in (self.rot_extractor, self.rot_regressor, self.trans_extractor):
            m.eval()
        return self

    def stage_specs(self, stage: str) -> dict:
        return {k: asdict(m.spec) for k, m in self.stage_modules(stage).items()}

    def save_stage(self, path, stage: str, extra: Optional[dict] = None):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "stage": stage,
            "specs": self.stage_specs(stage),
            "state": {k: m.state_dict() for k, m in self.stage_modules(stage).items()},
            "extra": extra or {},
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    def load_stage(self, path, stage: str) -> dict:
        payload = load_checkpoint(path)
        if payload.get("stage") != stage:
            raise ValueError(f"{path}: checkpoint holds stage {payload.get('stage')!r}, expected {stage!r}")
        if payload["specs"] != self.stage_specs(stage):
            raise ValueError(f"{path}: checkpoint spec {payload['specs']} does not match {self.stage_specs(stage)}")
        for k, m in self.stage_modules(stage).items():
            m.load_state_dict(payload["state"][k])
        return payload.get("extra", {})


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a stage checkpoint")
    return payload


def specs_from_checkpoint(path) -> dict:
    """Rebuild the spec objects stored in a stage checkpoint."""
    payload = load_checkpoint(path)
    out = {}
    for k, d in payload["specs"].items():
        out[k] = PoseRegressorSpec(**d) if k == "regressor" else FeatureExtractorSpec(**d)
    return out

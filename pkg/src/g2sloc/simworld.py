"""Deterministic planar worlds, rendered ground views and dataset directories.

A world is one large overhead texture. Samples are drawn from it by picking a
satellite footprint, perturbing a camera pose around the footprint center and
rendering the pin-hole view of the textured plane. Every random draw for
sample ``i`` comes from a generator seeded with ``(world.seed, i)``, so any
subset of samples can be produced in any order with identical bytes.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .geometry import (
    GroundCameraRig,
    SE2Transform,
    bilinear_sample,
    ground_pixel_to_plane,
    wrap_deg,
)

DATASET_SCHEMA_VERSION = 1
SKY = np.array([0.62, 0.72, 0.85], np.float32)
HAZE_RANGE_M = 120.0


class DatasetError(ValueError):
    """Malformed dataset directory or record."""


@dataclass(frozen=True)
class PlanarWorld:
    texture: np.ndarray  # (N, N, C) float32 in [0, 1]
    gamma_w: float
    seed: int
    style: str = "roads"

    def __post_init__(self):
        if self.texture.shape[0] != self.texture.shape[1]:
            raise ValueError("world texture must be square")
        if self.gamma_w <= 0:
            raise ValueError("gamma_w must be positive")

    @property
    def size_px(self) -> int:
        return self.texture.shape[0]

    @property
    def extent_m(self) -> float:
        return self.size_px * self.gamma_w

    def metric_to_pixel(self, x, y):
        c0 = (self.size_px - 1) / 2.0
        return c0 - np.asarray(y) / self.gamma_w, np.asarray(x) / self.gamma_w + c0

    def sample(self, x, y) -> np.ndarray:
        """Bilinear texture lookup at world metric coordinates; returns (*S, C)."""
        rows, cols = self.metric_to_pixel(x, y)
        src = torch.from_numpy(self.texture).permute(2, 0, 1)
        out = bilinear_sample(src, rows, cols)
        return out.permute(*range(1, out.dim()), 0).numpy()


@dataclass(frozen=True)
class PoseNoiseModel:
    max_translation_m: float = 20.0
    max_rotation_deg: float = 20.0

    def __post_init__(self):
        if self.max_translation_m < 0 or self.max_rotation_deg < 0:
            raise ValueError("noise bounds must be non-negative")


@dataclass
class LocalizationSample:
    ground_image: np.ndarray  # (H, W, 3) float32
    positive_satellite: np.ndarray  # (S, S, 3) float32, north-up
    sat_gamma: float
    coarse_pose_prior: SE2Transform
    sample_id: int
    gt_relative_pose: Optional[SE2Transform] = None
    label_pose: Optional[SE2Transform] = None
    sat_center_m: Optional[tuple] = None  # world position of the satellite center

    @property
    def sat_coverage_m(self) -> float:
        return self.positive_satellite.shape[0] * self.sat_gamma


# --------------------------------------------------------------------------
# world texture


def _fractal_noise(rng, n, beta=2.2, lowcut=2.0):
    white = rng.standard_normal((n, n))
    f = np.fft.rfftfreq(n)[None, :] ** 2 + np.fft.fftfreq(n)[:, None] ** 2
    f = np.sqrt(f) * n
    amp = np.where(f < lowcut, 0.0, (f + 1e-9) ** (-beta / 2))
    field_ = np.fft.irfft2(np.fft.rfft2(white) * amp, s=(n, n))
    field_ -= field_.mean()
    return field_ / (field_.std() + 1e-12)


def _paint_segments(canvas, rng, n, count, width_px, color, dash=None, tile=256):
    """Straight bands crossing the world at random angles."""
    color = np.asarray(color, np.float32)
    c = (n - 1) / 2.0
    for _ in range(count):
        ang = rng.uniform(0, math.pi)
        nx, ny = math.cos(ang), math.sin(ang)
        off = rng.uniform(-0.5, 0.5) * n
        w = rng.uniform(*width_px)
        reach = w / 2 + 1 + tile * 0.7072
        # only tiles the band can touch
        for r0 in range(0, n, tile):
            for c0 in range(0, n, tile):
                tc, tr = c0 + tile / 2 - 0.5 - c, r0 + tile / 2 - 0.5 - c
                if abs(tc * nx + tr * ny - off) > reach:
                    continue
                yy = np.arange(r0, min(n, r0 + tile), dtype=np.float32)[:, None] - c
                xx = np.arange(c0, min(n, c0 + tile), dtype=np.float32)[None, :] - c
                dist = np.abs(xx * nx + yy * ny - off)
                band = np.clip(w / 2 + 0.5 - dist, 0, 1)[..., None]
                view = canvas[r0:r0 + tile, c0:c0 + tile]
                view[:] = view * (1 - band) + band * color
                if dash is not None:
                    along = -xx * ny + yy * nx
                    on = ((along // dash) % 2 == 0) & (dist < max(1.0, w * 0.06))
                    view[on] = 0.95


def _paint_blocks(canvas, rng, n, count, size_px):
    """Oriented rectangles (roofs, lots) with random tones."""
    for _ in range(count):
        h, w = rng.uniform(*size_px, size=2)
        cy, cx = rng.uniform(0, n, size=2)
        ang = rng.uniform(0, math.pi)
        r = int(math.hypot(h, w) / 2) + 2
        r0, r1 = max(0, int(cy) - r), min(n, int(cy) + r + 1)
        c0, c1 = max(0, int(cx) - r), min(n, int(cx) + r + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float32)
        du = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
        dv = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
        inside = np.clip(np.minimum(w / 2 - np.abs(du), h / 2 - np.abs(dv)) + 0.5, 0, 1)
        tone = rng.uniform(0.25, 0.95)
        color = np.clip(tone + rng.normal(0, 0.08, 3), 0, 1).astype(np.float32)
        patch = canvas[r0:r1, c0:c1]
        patch[:] = patch * (1 - inside[..., None]) + inside[..., None] * color


@functools.lru_cache(maxsize=4)
def generate_world(seed: int, size_px: int = 4096, gamma_w: float = 0.2, style: str = "roads") -> PlanarWorld:
    """Reproducible overhead texture: smooth terrain, road bands and blocks.

    Feature sizes are set in meters so that textures at different ``gamma_w``
    look alike.
    """
    if size_px < 1024:
        raise ValueError("world size must be at least 1024 px")
    if style not in ("roads", "roads+distractors"):
        raise ValueError(f"unknown world style {style!r}")
    rng = np.random.default_rng([int(seed), 0x57A7])
    n = size_px
    m = 1.0 / gamma_w  # px per meter

    terrain = _fractal_noise(rng, n, beta=2.6, lowcut=1.0)
    detail = _fractal_noise(rng, n, beta=1.6, lowcut=n * gamma_w / 8.0)
    grass = np.array([0.32, 0.45, 0.22], np.float32)
    soil = np.array([0.55, 0.47, 0.35], np.float32)
    mix = 1 / (1 + np.exp(-1.5 * terrain))
    tex = (grass * (1 - mix[..., None]) + soil * mix[..., None]).astype(np.float32)
    tex += (0.06 * detail[..., None]).astype(np.float32)

    area_km2 = (n * gamma_w / 1000.0) ** 2
    _paint_blocks(tex, rng, n, int(1400 * area_km2), (6 * m, 28 * m))
    _paint_segments(tex, rng, n, max(6, int(30 * math.sqrt(area_km2))), (5 * m, 11 * m),
                    (0.2, 0.2, 0.22), dash=3 * m)
    _paint_segments(tex, rng, n, max(3, int(10 * math.sqrt(area_km2))), (2 * m, 3.5 * m),
                    (0.7, 0.66, 0.58))

    tex = ndimage.gaussian_filter(tex, sigma=(0.35 * m, 0.35 * m, 0), mode="nearest")
    tex = np.clip(tex, 0.0, 1.0).astype(np.float32)
    return PlanarWorld(tex, float(gamma_w), int(seed), style)


# --------------------------------------------------------------------------
# samples


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


@dataclass(frozen=True)
class SampleLayout:
    """Geometry of one sample, without any rendering."""

    sat_origin_px: tuple  # world (row, col) of the satellite's top-left pixel
    sat_center_m: tuple
    heading_deg: float
    gt: SE2Transform
    prior: SE2Transform
    label: SE2Transform


def sample_layout(world: PlanarWorld, index: int, noise: PoseNoiseModel, sat_size_px: int,
                  sat_gamma: float, label_noise_m: float = 5.0, max_retries: int = 16) -> SampleLayout:
    step = sat_gamma / world.gamma_w
    if abs(step - round(step)) > 1e-9 or round(step) < 1:
        raise ValueError("sat_gamma must be an integer multiple of the world resolution")
    step = int(round(step))
    span = (sat_size_px - 1) * step
    coverage = sat_size_px * sat_gamma
    margin_px = int(math.ceil((coverage / 2 + noise.max_translation_m) / world.gamma_w))
    rng = np.random.default_rng([world.seed, int(index), 0x5A])
    for _ in range(max_retries):
        lo = margin_px - span // 2
        hi = world.size_px - margin_px - span // 2 - 1
        if hi <= lo:
            break
        r0, c0 = (int(v) for v in rng.integers(lo, hi, size=2))
        center_rc = (r0 + span / 2.0, c0 + span / 2.0)
        c = (world.size_px - 1) / 2.0
        cx, cy = (center_rc[1] - c) * world.gamma_w, -(center_rc[0] - c) * world.gamma_w
        t = rng.uniform(-noise.max_translation_m, noise.max_translation_m, size=2)
        heading = wrap_deg(rng.uniform(-180.0, 180.0))
        dtheta = rng.uniform(-noise.max_rotation_deg, noise.max_rotation_deg)
        rad = label_noise_m * math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        cam = (cx + t[0], cy + t[1])
        edge = world.extent_m / 2 - coverage / 2
        if max(abs(cam[0]), abs(cam[1])) > edge:
            continue
        gt = SE2Transform(heading, t[0], t[1])
        prior = SE2Transform(heading - dtheta, 0.0, 0.0)
        label = SE2Transform(prior.theta, t[0] + rad * math.cos(phi), t[1] + rad * math.sin(phi))
        return SampleLayout((r0, c0), (cx, cy), heading, gt, prior, label)
    raise ValueError(f"sample {index}: could not place a pose away from the world edge")


def render_ground_view(world: PlanarWorld, position_m, heading_deg: float, rig: GroundCameraRig,
                       supersample: int = 3, distractor_rng=None) -> np.ndarray:
    """Pin-hole view of the textured plane, box-filtered over each pixel."""
    k = rig.intrinsics
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    vv, uu = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64),
                         indexing="ij")
    uu = uu[..., None, None] + offs[None, None, None, :]
    vv = vv[..., None, None] + offs[None, None, :, None]
    uu, vv = np.broadcast_arrays(uu, vv)
    x, y, below = ground_pixel_to_plane(uu, vv, rig)
    th = math.radians(heading_deg)
    c, sn = math.cos(th), math.sin(th)
    wx = position_m[0] + c * x - sn * y
    wy = position_m[1] + sn * x + c * y
    col = world.sample(np.where(below, wx, 0.0), np.where(below, wy, 0.0))
    far = ~below | (x > HAZE_RANGE_M)
    haze = world.texture.reshape(-1, world.texture.shape[-1])[:: 997].mean(0)
    col = np.where(far[..., None], np.where(below[..., None], haze, SKY[: col.shape[-1]]), col)
    img = col.mean(axis=(2, 3)).astype(np.float32)
    if distractor_rng is not None:
        _paint_distractors(img, distractor_rng, rig)
    return img


def _paint_distractors(img, rng, rig: GroundCameraRig):
    """Above-ground clutter that only exists in the ground view."""
    k = rig.intrinsics
    for _ in range(int(rng.integers(2, 6))):
        dist = rng.uniform(6.0, 25.0)
        lateral = rng.uniform(-dist, dist)
        width_m, height_m = rng.uniform(1.6, 4.5), rng.uniform(1.2, 3.0)
        u0 = k.cx - k.fx * (lateral + width_m / 2) / dist
        u1 = k.cx - k.fx * (lateral - width_m / 2) / dist
        v1 = k.cy + k.fy * rig.height_m / dist
        v0 = v1 - k.fy * height_m / dist
        r0, r1 = int(max(0, v0)), int(min(k.height, v1))
        c0, c1 = int(max(0, u0)), int(min(k.width, u1))
        if r1 > r0 and c1 > c0:
            img[r0:r1, c0:c1] = rng.uniform(0.05, 1.0, size=img.shape[-1])


def _crop_satellite(world: PlanarWorld, lay: SampleLayout, sat_size_px: int, sat_gamma: float) -> np.ndarray:
    step = int(round(sat_gamma / world.gamma_w))
    r0, c0 = lay.sat_origin_px
    return world.texture[r0: r0 + sat_size_px * step: step, c0: c0 + sat_size_px * step: step]


def make_sample(world: PlanarWorld, index: int, rig: GroundCameraRig, noise: PoseNoiseModel,
                sat_size_px: int = 512, sat_gamma: float = 0.2, label_noise_m: float = 5.0) -> LocalizationSample:
    lay = sample_layout(world, index, noise, sat_size_px, sat_gamma, label_noise_m)
    sat = _crop_satellite(world, lay, sat_size_px, sat_gamma)
    cam = (lay.sat_center_m[0] + lay.gt.tx, lay.sat_center_m[1] + lay.gt.ty)
    clutter = None
    if world.style == "roads+distractors":
        clutter = np.random.default_rng([world.seed, int(index), 0xD1])
    ground = render_ground_view(world, cam, lay.heading_deg, rig, distractor_rng=clutter)
    return LocalizationSample(
        ground_image=_quantize(ground),
        positive_satellite=_quantize(sat),
        sat_gamma=float(sat_gamma),
        coarse_pose_prior=lay.prior,
        sample_id=int(index),
        gt_relative_pose=lay.gt,
        label_pose=lay.label,
        sat_center_m=lay.sat_center_m,
    )


def footprints_overlap(a: LocalizationSample, b: LocalizationSample) -> bool:
    if a.sat_center_m is None or b.sat_center_m is None:
        return False
    reach = (a.sat_coverage_m + b.sat_coverage_m) / 2
    return (abs(a.sat_center_m[0] - b.sat_center_m[0]) < reach
            and abs(a.sat_center_m[1] - b.sat_center_m[1]) < reach)


def negatives_for(batch: Sequence[LocalizationSample]) -> list[list[np.ndarray]]:
    """In-batch negatives: for query ``i`` the positives of every ``j != i``."""
    if len(batch) < 2:
        raise ValueError("in-batch negatives need a batch of at least 2")
    for i in range(len(batch)):
        for j in range(i + 1, len(batch)):
            if footprints_overlap(batch[i], batch[j]):
                raise ValueError(
                    f"samples {batch[i].sample_id} and {batch[j].sample_id} have overlapping "
                    "satellite coverage and cannot serve as negatives"
                )
    return [[b.positive_satellite for j, b in enumerate(batch) if j != i] for i in range(len(batch))]


class SyntheticDataset:
    """Lazily rendered samples ``offset .. offset + n - 1`` of one world."""

    def __init__(self, world: PlanarWorld, rig: GroundCameraRig, noise: PoseNoiseModel, n: int,
                 sat_size_px: int = 512, sat_gamma: float = 0.2, label_noise_m: float = 5.0, offset: int = 0):
        self.world = world
        self.rig = rig
        self.noise = noise
        self.n = n
        self.sat_size_px = sat_size_px
        self.sat_gamma = sat_gamma
        self.label_noise_m = label_noise_m
        self.offset = offset

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> LocalizationSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        return make_sample(self.world, self.offset + i, self.rig, self.noise, self.sat_size_px,
                           self.sat_gamma, self.label_noise_m)

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def satellite(self, i):
        """(satellite raster, gamma) of sample ``i`` without rendering the ground view."""
        lay = sample_layout(self.world, self.offset + i, self.noise, self.sat_size_px, self.sat_gamma,
                            self.label_noise_m)
        return _quantize(_crop_satellite(self.world, lay, self.sat_size_px, self.sat_gamma)), float(self.sat_gamma)

    def sat_center(self, i):
        lay = sample_layout(self.world, self.offset + i, self.noise, self.sat_size_px, self.sat_gamma,
                            self.label_noise_m)
        return lay.sat_center_m

    def meta(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "sat_gamma": self.sat_gamma,
            "sat_size_px": self.sat_size_px,
            "rig": self.rig.to_dict(),
            "noise": {"max_translation_m": self.noise.max_translation_m,
                      "max_rotation_deg": self.noise.max_rotation_deg},
            "label_noise_m": self.label_noise_m,
            "seed": self.world.seed,
            "world": {"size_px": self.world.size_px, "gamma_w": self.world.gamma_w,
                      "style": self.world.style},
        }


# --------------------------------------------------------------------------
# dataset directories


def _save_png(path: Path, img: np.ndarray):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if arr.max(initial=0) > 255 or mode.startswith("I;16") else 255.0
            arr = (arr / peak).astype(np.float32)
            return np.repeat(arr[..., None], 3, axis=2)
        if mode == "L":
            arr = np.asarray(im, dtype=np.float32) / 255.0
            return np.repeat(arr[..., None], 3, axis=2)
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def export_dataset(samples, out_dir, meta: dict):
    """Write ``meta.json`` plus one ``samples/<id>/`` folder per sample."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=False)
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    for s in samples:
        d = out / "samples" / f"{s.sample_id:06d}"
        d.mkdir()
        _save_png(d / "ground.png", s.ground_image)
        _save_png(d / "sat.png", s.positive_satellite)
        pose = {"prior": s.coarse_pose_prior.to_dict(), "sat_gamma": s.sat_gamma}
        if s.gt_relative_pose is not None:
            pose["gt"] = s.gt_relative_pose.to_dict()
        if s.label_pose is not None:
            pose["label"] = s.label_pose.to_dict()
        if s.sat_center_m is not None:
            pose["sat_center_m"] = [float(v) for v in s.sat_center_m]
        with open(d / "pose.json", "w") as f:
            json.dump(pose, f, indent=2, sort_keys=True)


def _parse_pose(d, key, rid):
    if key not in d:
        return None
    try:
        return SE2Transform.from_dict(d[key])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"record {rid}: malformed {key!r} pose ({e})") from None


class DatasetDir:
    """Random access view of a dataset directory; images load on demand."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_dir():
            raise DatasetError(f"{self.path} is not a directory")
        entries = list(self.path.iterdir())
        if not entries:
            self.meta = {}
            self.ids = []
            return
        meta_file = self.path / "meta.json"
        if not meta_file.is_file():
            raise DatasetError(f"{self.path}: missing meta.json")
        try:
            self.meta = json.loads(meta_file.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{meta_file}: invalid JSON ({e})") from None
        sdir = self.path / "samples"
        self.ids = sorted(p.name for p in sdir.iterdir() if p.is_dir()) if sdir.is_dir() else []

    def __len__(self):
        return len(self.ids)

    @property
    def rig(self) -> Optional[GroundCameraRig]:
        return GroundCameraRig.from_dict(self.meta["rig"]) if "rig" in self.meta else None

    def has_satellite_images(self) -> bool:
        return bool(self.ids) and all((self.path / "samples" / i / "sat.png").is_file() for i in self.ids)

    def __getitem__(self, i) -> LocalizationSample:
        rid = self.ids[i]
        d = self.path / "samples" / rid
        for name in ("ground.png", "sat.png", "pose.json"):
            if not (d / name).is_file():
                raise DatasetError(f"record {rid}: missing {name}")
        try:
            pose = json.loads((d / "pose.json").read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"record {rid}: invalid pose.json ({e})") from None
        if "prior" not in pose:
            raise DatasetError(f"record {rid}: pose.json lacks the 'prior' pose")
        gamma = pose.get("sat_gamma", self.meta.get("sat_gamma"))
        if gamma is None or not isinstance(gamma, (int, float)) or gamma <= 0:
            raise DatasetError(f"record {rid}: satellite gamma must be positive, got {gamma!r}")
        ground = _load_png(d / "ground.png")
        sat = _load_png(d / "sat.png")
        if sat.shape[0] != sat.shape[1]:
            raise DatasetError(f"record {rid}: satellite image is not square {sat.shape[:2]}")
        rig = self.rig
        if rig is not None and ground.shape[:2] != (rig.intrinsics.height, rig.intrinsics.width):
            raise DatasetError(
                f"record {rid}: ground image {ground.shape[:2]} does not match rig "
                f"{(rig.intrinsics.height, rig.intrinsics.width)}"
            )
        try:
            sid = int(rid)
        except ValueError:
            raise DatasetError(f"record {rid}: sample folders must be named by integer id") from None
        center = pose.get("sat_center_m")
        return LocalizationSample(
            ground_image=ground,
            positive_satellite=sat,
            sat_gamma=float(gamma),
            coarse_pose_prior=_parse_pose(pose, "prior", rid),
            sample_id=sid,
            gt_relative_pose=_parse_pose(pose, "gt", rid),
            label_pose=_parse_pose(pose, "label", rid),
            sat_center_m=tuple(center) if center is not None else None,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def satellite(self, i):
        s = self[i]
        return s.positive_satellite, s.sat_gamma

    def sat_center(self, i):
        pose = json.loads((self.path / "samples" / self.ids[i] / "pose.json").read_text())
        c = pose.get("sat_center_m")
        return tuple(c) if c is not None else None


def load_dataset_dir(path) -> Iterator[LocalizationSample]:
    return iter(DatasetDir(path))

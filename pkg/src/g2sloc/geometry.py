"""Planar pose algebra, overhead/ground projections and raster resampling.

Frame conventions used everywhere in the package:

* Overhead (satellite) frame: metric x points right/east (+column), metric y
  points up/north (-row). The origin of a raster is its geometric center,
  ``((H - 1) / 2, (W - 1) / 2)`` in pixel-center coordinates.
* Angles are degrees at every public interface, counter-clockwise positive.
* Camera frame on the ground plane: x forward, y left. A camera with heading
  ``theta`` looks along ``(cos theta, sin theta)`` in the overhead frame.
* Ground camera: pin-hole, horizontal optical axis, zero roll/pitch, mounted
  ``height_m`` above a planar ground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


def wrap_deg(angle):
    """Wrap degrees to (-180, 180]. Works on floats and arrays."""
    wrapped = -((-np.asarray(angle, dtype=np.float64) + 180.0) % 360.0 - 180.0)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class SE2Transform:
    """Yaw in degrees plus a metric translation.

    Acting on a point: ``p' = R(theta) p + t``.
    """

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_deg(float(self.theta)))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @classmethod
    def identity(cls) -> "SE2Transform":
        return cls(0.0, 0.0, 0.0)

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(math.radians(self.theta)), math.sin(math.radians(self.theta))
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SE2Transform":
        return se2_inverse(self)

    def compose(self, other: "SE2Transform") -> "SE2Transform":
        return se2_compose(self, other)

    def to_dict(self) -> dict:
        return {"theta_deg": self.theta, "tx_m": self.tx, "ty_m": self.ty}

    @classmethod
    def from_dict(cls, d: dict) -> "SE2Transform":
        return cls(d["theta_deg"], d["tx_m"], d["ty_m"])


def se2_compose(a: SE2Transform, b: SE2Transform) -> SE2Transform:
    """Transform that applies ``b`` first, then ``a``."""
    th = math.radians(a.theta)
    c, s = math.cos(th), math.sin(th)
    return SE2Transform(
        a.theta + b.theta,
        c * b.tx - s * b.ty + a.tx,
        s * b.tx + c * b.ty + a.ty,
    )


def se2_inverse(a: SE2Transform) -> SE2Transform:
    th = math.radians(a.theta)
    c, s = math.cos(th), math.sin(th)
    return SE2Transform(-a.theta, -(c * a.tx + s * a.ty), -(-s * a.tx + c * a.ty))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class GroundCameraRig:
    intrinsics: CameraIntrinsics
    height_m: float = 1.6

    def __post_init__(self):
        if self.height_m <= 0:
            raise ValueError("camera height must be positive")

    @property
    def hfov(self) -> float:
        k = self.intrinsics
        return math.degrees(2.0 * math.atan(k.width / (2.0 * k.fx)))

    @classmethod
    def default(cls, width: int = 512, height: int = 128, hfov: float = 90.0, height_m: float = 1.6):
        """Square-pixel rig with the principal point at the image center."""
        f = width / (2.0 * math.tan(math.radians(hfov) / 2.0))
        k = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
        return cls(k, height_m)

    def min_visible_range(self) -> float:
        """Forward distance where the ground leaves the bottom image row."""
        k = self.intrinsics
        return k.fy * self.height_m / (k.height - 1 - k.cy)

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height, "height_m": self.height_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundCameraRig":
        k = CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))
        return cls(k, d["height_m"])


@dataclass(frozen=True)
class OverheadGrid:
    """Square overhead raster with the ground camera at ``camera_anchor``.

    ``camera_anchor`` is (row, col) in pixel-center coordinates and may be
    fractional; the camera looks along +col ("heading_axis" = +u).
    """

    size: int
    gamma: float
    camera_anchor: tuple = field(default=None)
    heading_axis: str = "+u"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.camera_anchor is None:
            c = (self.size - 1) / 2.0
            object.__setattr__(self, "camera_anchor", (c, c))
        r, c = self.camera_anchor
        if not (0 <= r <= self.size - 1 and 0 <= c <= self.size - 1):
            raise ValueError("camera anchor outside the grid")

    def cell_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (dx, dy) of every cell relative to the anchor, overhead axes."""
        idx = np.arange(self.size, dtype=np.float64)
        rows, cols = np.meshgrid(idx, idx, indexing="ij")
        ar, ac = self.camera_anchor
        return (cols - ac) * self.gamma, -(rows - ar) * self.gamma


def fov_mask(grid: OverheadGrid, hfov: float) -> np.ndarray:
    """Binary wedge: apex at the anchor, axis along +u, half-angle hfov/2."""
    if not 0 < hfov <= 180:
        raise ValueError(f"hfov must be in (0, 180], got {hfov}")
    dx, dy = grid.cell_offsets()
    ang = np.degrees(np.arctan2(dy, dx))
    inside = np.abs(ang) <= hfov / 2.0 + 1e-9
    inside |= (dx == 0) & (dy == 0)
    return inside.astype(np.float32)


def overhead_cell_to_ground_pixel(x_m, y_m, rig: GroundCameraRig):
    """Project ground-plane points (x forward, y left, z=0) to image pixels.

    Returns ``(u, v, visible)``; arrays broadcast. Points at or behind the
    camera get ``nan`` pixels and ``visible=False``.
    """
    k = rig.intrinsics
    x = np.asarray(x_m, dtype=np.float64)
    y = np.asarray(y_m, dtype=np.float64)
    ahead = x > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(ahead, x, np.nan)
        u = k.cx - k.fx * y / safe
        v = k.cy + k.fy * rig.height_m / safe
    visible = ahead & (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    return u, v, visible


def ground_pixel_to_plane(u, v, rig: GroundCameraRig):
    """Ray/ground intersection for image pixels below the horizon.

    Returns ``(x_m, y_m, valid)``; pixels on or above the horizon are invalid.
    """
    k = rig.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    below = v > k.cy
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(below, k.fy * rig.height_m / (v - k.cy), np.nan)
        y = -(u - k.cx) * x / k.fx
    return x, y, below


# --------------------------------------------------------------------------
# resampling


def _as_chw(image):
    """Return (tensor [C,H,W], restore) for HxW, HxWxC arrays or CxHxW tensors."""
    if isinstance(image, torch.Tensor):
        if image.dim() == 2:
            return image[None], lambda t: t[0]
        return image, lambda t: t
    arr = np.asarray(image)
    if arr.ndim == 2:
        return torch.from_numpy(np.ascontiguousarray(arr))[None], lambda t: t[0].numpy()
    return (
        torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))),
        lambda t: t.permute(1, 2, 0).contiguous().numpy(),
    )


def bilinear_sample(src: torch.Tensor, rows, cols) -> torch.Tensor:
    """Sample ``src`` [C,H,W] at fractional pixel-center coordinates.

    Neighbours outside the raster contribute zero. Differentiable with
    respect to ``src``. ``rows``/``cols`` share any shape S; output is [C,*S].
    """
    rows = torch.as_tensor(rows, dtype=torch.float64)
    cols = torch.as_tensor(cols, dtype=torch.float64)
    _, h, w = src.shape
    finite = torch.isfinite(rows) & torch.isfinite(cols)
    rows = torch.where(finite, rows, torch.full_like(rows, -10.0))
    cols = torch.where(finite, cols, torch.full_like(cols, -10.0))
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    fr = (rows - r0).to(src.dtype)
    fc = (cols - c0).to(src.dtype)
    r0 = r0.long()
    c0 = c0.long()
    out = None
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            val = src[:, rr.clamp(0, h - 1), cc.clamp(0, w - 1)]
            term = val * (wr * wc * ok.to(src.dtype))
            out = term if out is None else out + term
    return out


def _snap(x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)


def warp_coordinates(size: int, transform: SE2Transform, gamma: float):
    """Source pixel coordinates for every output pixel of :func:`warp_satellite`."""
    c0 = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    rows, cols = np.meshgrid(idx, idx, indexing="ij")
    # output pixel -> metric p; source = R(-theta) (p - t)
    px = cols - c0 - transform.tx / gamma
    py = -(rows - c0) - transform.ty / gamma
    th = math.radians(transform.theta)
    c, s = math.cos(th), math.sin(th)
    sx = c * px + s * py
    sy = -s * px + c * py
    return _snap(c0 - sy), _snap(sx + c0)


def warp_satellite(image, transform: SE2Transform, gamma: float):
    """Move the scene content of a square raster by ``transform``.

    Content at metric position ``p`` ends up at ``transform.apply(p)``,
    rotation about the image center. Bilinear, zero fill. Accepts HxW or
    HxWxC numpy arrays (returned as numpy) or CxHxW tensors.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    src, restore = _as_chw(image)
    if src.shape[-1] != src.shape[-2]:
        raise ValueError(f"warp_satellite needs a square raster, got {tuple(src.shape[-2:])}")
    rows, cols = warp_coordinates(src.shape[-1], transform, gamma)
    return restore(bilinear_sample(src, rows, cols))


def warp_valid_mask(size: int, transform: SE2Transform, gamma: float) -> np.ndarray:
    """Pixels of the warped raster whose four source neighbours all exist."""
    rows, cols = warp_coordinates(size, transform, gamma)
    return (rows >= 0) & (rows <= size - 1) & (cols >= 0) & (cols <= size - 1)


def ground_points_for_grid(grid: OverheadGrid, heading_deg: float):
    """Camera-frame (forward, left) coordinates of every overhead cell."""
    dx, dy = grid.cell_offsets()
    th = math.radians(heading_deg)
    c, s = math.cos(th), math.sin(th)
    return c * dx + s * dy, -s * dx + c * dy


def ground_to_overhead(src, rig: GroundCameraRig, rotation: SE2Transform, grid: OverheadGrid):
    """Inverse perspective mapping of a ground-view raster or feature map.

    ``src`` is [C,h,w] (tensor) or HxW[xC] (numpy) at any integer down-scale
    of the rig image; the scale is read off its width. Returns
    ``(overhead, validity)`` with overhead [C,N,N] (or NxN[xC] numpy) and a
    float validity mask NxN. Gradients flow to ``src``.
    """
    assert rotation.tx == 0 and rotation.ty == 0, "ground projection takes a pure rotation"
    chw, restore = _as_chw(src)
    k = rig.intrinsics
    scale = chw.shape[-1] / k.width
    x_m, y_m = ground_points_for_grid(grid, rotation.theta)
    u, v, visible = overhead_cell_to_ground_pixel(x_m, y_m, rig)
    # pixel centers of a down-scaled map sit at (p + 0.5) * s - 0.5
    cols = np.where(visible, (u + 0.5) * scale - 0.5, np.nan)
    rows = np.where(visible, (v + 0.5) * scale - 0.5, np.nan)
    out = bilinear_sample(chw, rows, cols)
    vis = torch.from_numpy(visible).to(out.dtype)
    out = out * vis
    return restore(out), visible.astype(np.float32)

"""Static figures for one sample: inputs, confidence, similarity and an argmax overlay."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .models import image_to_tensor
from .registration import LocalizeConfig, false_color, localize

CMAP = "viridis"


def _u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _metric_to_pixel(x, y, n, gamma):
    c = (n - 1) / 2.0
    return x / gamma + c, c - y / gamma  # (col, row)


def render_sample_figures(sample, rig, bundle, cfg, out_dir) -> dict:
    """Write ``ground``, ``satellite``, ``confidence``, ``similarity`` and ``overlay`` PNGs plus ``figures.json``."""
    out = Path(out_dir)
    loc_cfg = LocalizeConfig(kernel_m=cfg.translation_train.kernel_m, rotation=cfg.rotation_config(rig))
    theta_hat, smap, est = localize(sample, rig, bundle, loc_cfg)
    with torch.no_grad():
        _, conf = bundle.trans_extractor(image_to_tensor(sample.ground_image), want_confidence=True)
    conf = conf[0, 0].numpy()
    sim = smap.values.numpy()

    Image.fromarray(_u8(sample.ground_image)).save(out / "ground.png")
    Image.fromarray(_u8(sample.positive_satellite)).save(out / "satellite.png")
    conf_img = Image.fromarray(false_color(conf, 0.0, 1.0, CMAP))
    conf_img.resize(sample.ground_image.shape[1::-1], Image.NEAREST).save(out / "confidence.png")
    Image.fromarray(false_color(sim, -1.0, 1.0, CMAP)).save(out / "similarity.png")

    # satellite with the similarity map blended over the searched region and markers at estimate / truth
    n = sample.positive_satellite.shape[0]
    over = Image.fromarray(_u8(sample.positive_satellite)).convert("RGB")
    draw = ImageDraw.Draw(over)
    marks = {"estimate": (est.tx, est.ty, (255, 40, 40))}
    if sample.gt_relative_pose is not None:
        marks["ground_truth"] = (sample.gt_relative_pose.tx, sample.gt_relative_pose.ty, (40, 220, 255))
    for x, y, color in marks.values():
        c, r = _metric_to_pixel(x, y, n, sample.sat_gamma)
        draw.ellipse([c - 5, r - 5, c + 5, r + 5], outline=color, width=2)
    heading = np.radians(theta_hat)
    c, r = _metric_to_pixel(est.tx, est.ty, n, sample.sat_gamma)
    draw.line([c, r, c + 25 * np.cos(heading), r - 25 * np.sin(heading)], fill=(255, 40, 40), width=2)
    over.save(out / "overlay.png")

    u, v = smap.argmax()
    meta = {
        "sample_id": int(sample.sample_id),
        "colormap": {
            "confidence": {"cmap": CMAP, "vmin": 0.0, "vmax": 1.0},
            "similarity": {"cmap": CMAP, "vmin": -1.0, "vmax": 1.0},
        },
        "similarity_argmax_cell": [int(u), int(v)],
        "estimate": est.to_dict(),
        "ground_truth": sample.gt_relative_pose.to_dict() if sample.gt_relative_pose is not None else None,
        "overlay_markers": {"estimate": "red circle + heading line", "ground_truth": "cyan circle"},
    }
    (out / "figures.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta

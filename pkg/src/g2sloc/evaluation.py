"""Pose error decomposition, recall tables and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import SE2Transform, wrap_deg

REPORT_SCHEMA_VERSION = 1
AXES = ("lateral", "longitudinal", "euclidean")
MODES = ("model", "oracle", "prior", "random")


@dataclass(frozen=True)
class PoseErrorRecord:
    sample_id: int
    lateral_m: float
    longitudinal_m: float
    euclidean_m: float
    azimuth_err_deg: float


@dataclass(frozen=True)
class Prediction:
    sample_id: int
    theta_deg: float
    tx_m: float
    ty_m: float

    def pose(self) -> SE2Transform:
        return SE2Transform(self.theta_deg, self.tx_m, self.ty_m)


def decompose_error(est: SE2Transform, gt: SE2Transform, heading_deg: Optional[float] = None,
                    sample_id: int = -1) -> PoseErrorRecord:
    """Split the translation error along and across the camera heading (default: gt heading)."""
    h = math.radians(gt.theta if heading_deg is None else heading_deg)
    dx, dy = est.tx - gt.tx, est.ty - gt.ty
    along = dx * math.cos(h) + dy * math.sin(h)
    across = -dx * math.sin(h) + dy * math.cos(h)
    return PoseErrorRecord(
        sample_id=int(sample_id),
        lateral_m=abs(across),
        longitudinal_m=abs(along),
        euclidean_m=math.hypot(dx, dy),
        azimuth_err_deg=abs(wrap_deg(est.theta - gt.theta)),
    )


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) - 1) // 2])


@dataclass
class MetricReport:
    count: int
    thresholds_m: list
    thresholds_deg: list
    recall_m: dict  # axis -> [recall per distance threshold]
    recall_deg: list
    mean_m: float
    median_m: float
    mean_azimuth_deg: float
    median_azimuth_deg: float
    schema_version: int = REPORT_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def recall(self, axis: str, threshold: float) -> float:
        return self.recall_m[axis][list(self.thresholds_m).index(threshold)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)


def recall_at(records: Sequence[PoseErrorRecord], thresholds_m=(1, 3, 5), thresholds_deg=(1, 3, 5)) -> MetricReport:
    if not records:
        raise ValueError("cannot compute recall over zero records")
    tm = sorted(float(t) for t in thresholds_m)
    td = sorted(float(t) for t in thresholds_deg)
    cols = {a: np.array([getattr(r, f"{a}_m") for r in records]) for a in AXES}
    az = np.array([r.azimuth_err_deg for r in records])
    return MetricReport(
        count=len(records),
        thresholds_m=tm,
        thresholds_deg=td,
        recall_m={a: [float(np.mean(cols[a] <= t)) for t in tm] for a in AXES},
        recall_deg=[float(np.mean(az <= t)) for t in td],
        mean_m=float(cols["euclidean"].mean()),
        median_m=lower_median(cols["euclidean"]),
        mean_azimuth_deg=float(az.mean()),
        median_azimuth_deg=lower_median(az),
    )


# --------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalConfig:
    mode: str = "model"
    thresholds_m: tuple = (1.0, 3.0, 5.0)
    thresholds_deg: tuple = (1.0, 3.0, 5.0)
    kernel_m: float = 40.0
    search_m: float = 20.0  # half-width of the uniform-random baseline's square
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown evaluation mode {self.mode!r}; choose from {MODES}")


def predict_sample(sample, mode: str, rig=None, bundle=None, loc_config=None, rng=None, search_m: float = 20.0,
                   return_map: bool = False):
    if mode == "oracle":
        if sample.gt_relative_pose is None:
            raise ValueError(f"sample {sample.sample_id}: oracle mode needs ground truth")
        return sample.gt_relative_pose, None
    if mode == "prior":
        return sample.coarse_pose_prior, None
    if mode == "random":
        x, y = rng.uniform(-search_m, search_m, size=2)
        return SE2Transform(sample.coarse_pose_prior.theta, float(x), float(y)), None
    from .registration import localize

    _, smap, loc = localize(sample, rig, bundle, loc_config)
    return loc, (smap if return_map else None)


def predictions_to_report(preds: Sequence[Prediction], gts: dict, config: EvalConfig):
    """Errors and recall for predictions whose sample has ground truth (None if none do)."""
    records = [decompose_error(p.pose(), gts[p.sample_id], sample_id=p.sample_id)
               for p in preds if gts.get(p.sample_id) is not None]
    report = recall_at(records, config.thresholds_m, config.thresholds_deg) if records else None
    return report, records


def evaluate_dataset(bundle, dataset, config: EvalConfig, rig=None, loc_config=None):
    """Predict every sample and aggregate. Returns ``(report | None, records, predictions)``."""
    from .registration import LocalizeConfig

    loc_config = loc_config or LocalizeConfig(kernel_m=config.kernel_m)
    rng = np.random.default_rng([config.seed, 0xE7])
    preds, gts = [], {}
    for s in dataset:
        est, _ = predict_sample(s, config.mode, rig, bundle, loc_config, rng, config.search_m)
        preds.append(Prediction(s.sample_id, float(est.theta), float(est.tx), float(est.ty)))
        gts[s.sample_id] = s.gt_relative_pose
    report, records = predictions_to_report(preds, gts, config)
    if report is not None:
        report.extra["mode"] = config.mode
    return report, records, preds


# --------------------------------------------------------------------------
# files

CSV_FIELDS = ["sample_id", "pred_theta_deg", "pred_tx_m", "pred_ty_m",
              "lateral_m", "longitudinal_m", "euclidean_m", "azimuth_err_deg"]


def write_outputs(out_dir, report: Optional[MetricReport], records, preds):
    """``report.json`` (when ground truth exists) and ``per_sample.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {r.sample_id: r for r in records}
    with open(out / "per_sample.csv", "w", newline="") as f:
        f.write(f"# schema_version={REPORT_SCHEMA_VERSION}\n")
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for p in preds:
            r = by_id.get(p.sample_id)
            errs = [r.lateral_m, r.longitudinal_m, r.euclidean_m, r.azimuth_err_deg] if r else ["", "", "", ""]
            w.writerow([p.sample_id] + [repr(float(v)) for v in (p.theta_deg, p.tx_m, p.ty_m)]
                       + [repr(float(v)) if v != "" else "" for v in errs])
    if report is not None:
        with open(out / "report.json", "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)


def read_per_sample_csv(path):
    """Inverse of :func:`write_outputs` for the CSV: ``(predictions, records)``."""
    with open(path, newline="") as f:
        head = f.readline().strip()
        if head != f"# schema_version={REPORT_SCHEMA_VERSION}":
            raise ValueError(f"{path}: unsupported per-sample schema line {head!r}")
        rows = list(csv.DictReader(f))
    preds, records = [], []
    for row in rows:
        sid = int(row["sample_id"])
        preds.append(Prediction(sid, float(row["pred_theta_deg"]), float(row["pred_tx_m"]), float(row["pred_ty_m"])))
        if row["euclidean_m"] != "":
            records.append(PoseErrorRecord(sid, float(row["lateral_m"]), float(row["longitudinal_m"]),
                                           float(row["euclidean_m"]), float(row["azimuth_err_deg"])))
    return preds, records


def read_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))

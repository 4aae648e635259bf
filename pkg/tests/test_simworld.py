import json

import numpy as np
import pytest
import torch

from g2sloc.geometry import GroundCameraRig, OverheadGrid, SE2Transform, bilinear_sample, ground_to_overhead, wrap_deg
from g2sloc.simworld import (
    DatasetError,
    PoseNoiseModel,
    SyntheticDataset,
    export_dataset,
    footprints_overlap,
    generate_world,
    load_dataset_dir,
    make_sample,
    negatives_for,
    sample_layout,
)

RIG = GroundCameraRig.default()


@pytest.fixture(scope="module")
def world():
    return generate_world(11, 2048, 0.2)


def test_world_deterministic():
    a = generate_world(3, 1024, 0.2).texture.copy()
    generate_world.cache_clear()
    b = generate_world(3, 1024, 0.2).texture
    assert a.tobytes() == b.tobytes()


def test_worlds_differ_across_seeds():
    diffs = []
    for s in range(10):
        a = generate_world(100 + s, 1024, 0.2).texture
        b = generate_world(200 + s, 1024, 0.2).texture
        diffs.append(np.abs(a - b).mean())
    assert min(diffs) > 0.05


def test_world_rejects_small_size():
    with pytest.raises(ValueError):
        generate_world(0, 512, 0.2)


def test_autocorrelation_peak_at_zero_lag():
    tex = generate_world(4, 1024, 0.4).texture.mean(axis=2)
    half = 50  # 20 m at 0.4 m/px -> 40 m window of lags
    p = 25
    rng = np.random.default_rng(0)
    for _ in range(5):
        r, c = rng.integers(half + p, 1024 - half - p, size=2)
        ref = tex[r - p: r + p, c - p: c + p]
        ref = ref - ref.mean()
        scores = np.empty((2 * half + 1, 2 * half + 1))
        for i, dr in enumerate(range(-half, half + 1)):
            for j, dc in enumerate(range(-half, half + 1)):
                win = tex[r + dr - p: r + dr + p, c + dc - p: c + dc + p]
                win = win - win.mean()
                scores[i, j] = (ref * win).sum() / np.sqrt((ref**2).sum() * (win**2).sum())
        assert scores[half, half] == pytest.approx(1.0)
        others = np.delete(scores.ravel(), half * (2 * half + 1) + half)
        assert others.max() < 1.0 - 1e-6


def test_zero_noise_prior_equals_gt(world):
    s = make_sample(world, 0, RIG, PoseNoiseModel(0, 0), label_noise_m=0.0)
    assert s.gt_relative_pose.tx == 0 and s.gt_relative_pose.ty == 0
    assert s.gt_relative_pose.theta == s.coarse_pose_prior.theta
    assert s.label_pose.tx == 0 and s.label_pose.ty == 0


def test_rotation_noise_bounded(world):
    noise = PoseNoiseModel(20, 20)
    for i in range(10_000):
        lay = sample_layout(world, i, noise, 512, 0.2)
        assert abs(wrap_deg(lay.gt.theta - lay.prior.theta)) <= 20 + 1e-9
        assert abs(lay.gt.tx) <= 20 and abs(lay.gt.ty) <= 20
        assert np.hypot(lay.label.tx - lay.gt.tx, lay.label.ty - lay.gt.ty) <= 5 + 1e-9


def test_sample_deterministic(world):
    a = make_sample(world, 7, RIG, PoseNoiseModel())
    b = make_sample(world, 7, RIG, PoseNoiseModel())
    assert a.ground_image.tobytes() == b.ground_image.tobytes()
    assert a.positive_satellite.tobytes() == b.positive_satellite.tobytes()
    assert a.gt_relative_pose == b.gt_relative_pose and a.label_pose == b.label_pose


def test_sample_shapes(world):
    s = make_sample(world, 1, RIG, PoseNoiseModel())
    assert s.ground_image.shape == (128, 512, 3)
    assert s.positive_satellite.shape == (512, 512, 3)
    assert s.sat_coverage_m == pytest.approx(102.4)


def test_gt_inside_satellite_search_region(world):
    for i in range(50):
        s = sample_layout(world, i, PoseNoiseModel(20, 20), 512, 0.2)
        assert max(abs(s.gt.tx), abs(s.gt.ty)) <= 20
    with pytest.raises(ValueError):
        sample_layout(world, 0, PoseNoiseModel(500, 0), 512, 0.2)


def _sat_lookup(sample, x, y):
    """Bilinear lookup in the positive satellite at metric offsets from its center."""
    n = sample.positive_satellite.shape[0]
    c = (n - 1) / 2.0
    src = torch.from_numpy(sample.positive_satellite).permute(2, 0, 1)
    out = bilinear_sample(src, c - y / sample.sat_gamma, x / sample.sat_gamma + c)
    return out.permute(1, 2, 0).numpy()


@pytest.mark.parametrize("index", range(6))
def test_planar_round_trip(world, index):
    s = make_sample(world, index, RIG, PoseNoiseModel())
    gt = s.gt_relative_pose
    grid = OverheadGrid(201, 0.25)
    over, valid = ground_to_overhead(s.ground_image, RIG, SE2Transform(gt.theta), grid)
    dx, dy = grid.cell_offsets()
    ref = _sat_lookup(s, gt.tx + dx, gt.ty + dy)
    sel = (valid > 0) & (np.hypot(dx, dy) <= 20)
    assert sel.sum() > 1000
    assert np.abs(over - ref)[sel].mean() < 0.05


def test_distractors_only_touch_ground_view():
    plain = generate_world(21, 1024, 0.2, "roads")
    busy = generate_world(21, 1024, 0.2, "roads+distractors")
    a = make_sample(plain, 2, RIG, PoseNoiseModel(), sat_size_px=256)
    b = make_sample(busy, 2, RIG, PoseNoiseModel(), sat_size_px=256)
    assert np.array_equal(a.positive_satellite, b.positive_satellite)
    assert not np.array_equal(a.ground_image, b.ground_image)


# -- negatives ------------------------------------------------------------------


def _far_apart(world, k, sat=512):
    ds = SyntheticDataset(world, RIG, PoseNoiseModel(), 400, sat_size_px=sat)
    chosen = []
    for i in range(len(ds)):
        c = ds.sat_center(i)
        if all(max(abs(c[0] - d[0]), abs(c[1] - d[1])) >= sat * 0.2 for d in (ds.sat_center(j) for j in chosen)):
            chosen.append(i)
        if len(chosen) == k:
            break
    return [ds[i] for i in chosen]


def test_negatives_pair(world):
    batch = _far_apart(world, 2)
    negs = negatives_for(batch)
    assert len(negs[0]) == 1 and negs[0][0] is batch[1].positive_satellite
    assert negs[1][0] is batch[0].positive_satellite


def test_negatives_batch_of_eight():
    big = generate_world(12, 4096, 0.2)
    batch = _far_apart(big, 8)
    assert len(batch) == 8
    negs = negatives_for(batch)
    assert all(len(n) == 7 for n in negs)
    # no negative footprint contains the query camera
    for i, q in enumerate(batch):
        cam = (q.sat_center_m[0] + q.gt_relative_pose.tx, q.sat_center_m[1] + q.gt_relative_pose.ty)
        for j, other in enumerate(batch):
            if j == i:
                continue
            half = other.sat_coverage_m / 2
            inside = abs(cam[0] - other.sat_center_m[0]) < half and abs(cam[1] - other.sat_center_m[1]) < half
            assert not inside


def test_negatives_reject_overlap(world):
    ds = SyntheticDataset(world, RIG, PoseNoiseModel(), 2)
    a = ds[0]
    with pytest.raises(ValueError, match="overlapping"):
        negatives_for([a, a])
    assert footprints_overlap(a, a)


def test_negatives_need_two(world):
    with pytest.raises(ValueError):
        negatives_for([make_sample(world, 0, RIG, PoseNoiseModel())])


# -- dataset directories -----------------------------------------------------------


def test_empty_directory(tmp_path):
    assert list(load_dataset_dir(tmp_path)) == []


def test_export_reload_round_trip(world, tmp_path):
    ds = SyntheticDataset(world, RIG, PoseNoiseModel(), 4, sat_size_px=256)
    export_dataset(ds, tmp_path / "d", ds.meta())
    back = list(load_dataset_dir(tmp_path / "d"))
    assert len(back) == 4
    for a, b in zip(ds, back):
        assert np.array_equal(a.ground_image, b.ground_image)
        assert np.array_equal(a.positive_satellite, b.positive_satellite)
        assert a.sat_gamma == b.sat_gamma
        assert a.sample_id == b.sample_id
        for f in ("gt_relative_pose", "coarse_pose_prior", "label_pose"):
            assert getattr(a, f) == getattr(b, f)
        assert tuple(a.sat_center_m) == tuple(b.sat_center_m)


@pytest.fixture
def exported(world, tmp_path):
    ds = SyntheticDataset(world, RIG, PoseNoiseModel(), 2, sat_size_px=128)
    export_dataset(ds, tmp_path / "d", ds.meta())
    return tmp_path / "d"


def _edit_pose(root, rid, fn):
    p = root / "samples" / rid / "pose.json"
    d = json.loads(p.read_text())
    fn(d)
    p.write_text(json.dumps(d))


def test_rejects_nonpositive_gamma(exported):
    _edit_pose(exported, "000001", lambda d: d.update(sat_gamma=0.0))
    with pytest.raises(DatasetError, match="000001"):
        list(load_dataset_dir(exported))


def test_missing_meta(exported):
    (exported / "meta.json").unlink()
    with pytest.raises(DatasetError, match="meta.json"):
        list(load_dataset_dir(exported))


def test_malformed_record(exported):
    _edit_pose(exported, "000000", lambda d: d["prior"].pop("tx_m"))
    with pytest.raises(DatasetError, match="000000"):
        list(load_dataset_dir(exported))


def test_image_metadata_mismatch(exported):
    from PIL import Image

    Image.new("RGB", (100, 40)).save(exported / "samples" / "000001" / "ground.png")
    with pytest.raises(DatasetError, match="000001"):
        list(load_dataset_dir(exported))


def test_missing_file_named(exported):
    (exported / "samples" / "000000" / "sat.png").unlink()
    with pytest.raises(DatasetError, match="000000.*sat.png"):
        list(load_dataset_dir(exported))


def test_gt_optional(exported):
    _edit_pose(exported, "000000", lambda d: (d.pop("gt"), d.pop("label")))
    s = next(load_dataset_dir(exported))
    assert s.gt_relative_pose is None and s.label_pose is None


def test_sixteen_bit_grayscale(exported):
    from PIL import Image

    arr = (np.arange(128 * 128).reshape(128, 128) * 3).astype(np.uint16)
    Image.fromarray(arr).save(exported / "samples" / "000000" / "sat.png")
    s = next(load_dataset_dir(exported))
    assert s.positive_satellite.shape == (128, 128, 3)
    assert s.positive_satellite.max() <= 1.0
    assert s.positive_satellite[0, 1, 0] == pytest.approx(3 / 65535)

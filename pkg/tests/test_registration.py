import math

import numpy as np
import pytest
import torch

from g2sloc.geometry import GroundCameraRig
from g2sloc.models import ConfidenceMap, FeatureMap, ModelBundle
from g2sloc.registration import (
    SimilarityMap,
    correlate,
    correlate_batch,
    crop_kernel,
    dump_diagnostics,
    kernel_side,
    localize,
    weighted_query,
)
from g2sloc.simworld import PoseNoiseModel, generate_world, make_sample


def brute_force(ref: np.ndarray, ker: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Triple loop over output cells and kernel taps, float64."""
    c, h, w = ref.shape
    _, k, _ = ker.shape
    out = np.empty((h - k + 1, w - k + 1))
    kn = math.sqrt(float((ker.astype(np.float64) ** 2).sum()) + eps)
    for u in range(h - k + 1):
        for v in range(w - k + 1):
            num = 0.0
            rn = 0.0
            for i in range(k):
                for j in range(k):
                    a = ref[:, u + i, v + j].astype(np.float64)
                    num += float(a @ ker[:, i, j].astype(np.float64))
                    rn += float(a @ a)
            out[u, v] = num / (kn * math.sqrt(rn + eps))
    return out


def _fm(x, gamma=0.8):
    return FeatureMap(torch.as_tensor(x), 0.25, gamma)


@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force_small(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 9))
    h = int(rng.integers(6, 17))
    k = int(rng.integers(1, h))
    ref = rng.standard_normal((c, h, h)).astype(np.float32)
    ker = rng.standard_normal((c, k, k)).astype(np.float32)
    got = correlate(_fm(ref), _fm(ker)).values.numpy()
    assert np.abs(got - brute_force(ref, ker)).max() < 1e-5


def test_values_in_unit_range():
    rng = np.random.default_rng(1)
    s = correlate(_fm(rng.random((4, 20, 20), dtype=np.float32)), _fm(rng.random((4, 5, 5), dtype=np.float32)))
    assert s.values.abs().max() <= 1.0 + 1e-6


def test_scale_invariance():
    rng = np.random.default_rng(2)
    ref = _fm(rng.standard_normal((3, 16, 16)).astype(np.float32))
    ker = rng.standard_normal((3, 7, 7)).astype(np.float32)
    a = correlate(ref, _fm(ker)).values
    b = correlate(ref, _fm(ker * 37.5)).values
    assert torch.allclose(a, b, atol=1e-6)


def test_zero_reference_window_is_guarded():
    ref = torch.zeros(2, 10, 10)
    ref[:, :3, :3] = 1
    s = correlate(_fm(ref), _fm(torch.ones(2, 3, 3))).values
    assert torch.isfinite(s).all()
    assert abs(float(s[5, 5])) < 1e-6


def test_batch_all_pairs_matches_single():
    rng = np.random.default_rng(3)
    refs = torch.as_tensor(rng.standard_normal((3, 4, 12, 12)).astype(np.float32))
    kers = torch.as_tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    allp = correlate_batch(kers, refs)
    assert allp.shape == (2, 3, 8, 8)
    for m in range(2):
        for n in range(3):
            assert torch.allclose(allp[m, n], correlate(_fm(refs[n]), _fm(kers[m])).values, atol=1e-6)


def test_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        correlate(_fm(torch.zeros(3, 10, 10)), _fm(torch.zeros(2, 3, 3)))


def test_kernel_not_smaller():
    with pytest.raises(ValueError):
        correlate(_fm(torch.zeros(3, 10, 10)), _fm(torch.zeros(3, 10, 10)))
    with pytest.raises(ValueError):
        correlate(_fm(torch.zeros(3, 10, 10)), _fm(torch.zeros(3, 11, 11)))


def test_gradients_finite_difference():
    rng = np.random.default_rng(4)
    ref = torch.tensor(rng.standard_normal((2, 7, 7)), requires_grad=True)
    ker = torch.tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    assert torch.autograd.gradcheck(lambda r, k: correlate_batch(k[None], r[None]).sum(), (ref, ker),
                                    eps=1e-4, atol=1e-6, rtol=1e-4)


# -- weighting and cropping -------------------------------------------------------


def test_weighted_query_identity_and_half():
    f = _fm(torch.randn(4, 6, 6))
    assert torch.equal(weighted_query(f, ConfidenceMap(torch.ones(1, 6, 6))).values, f.values)
    assert torch.allclose(weighted_query(f, ConfidenceMap(torch.full((1, 6, 6), 0.5))).values, 0.5 * f.values)


def test_zero_confidence_pixel_contributes_nothing():
    rng = np.random.default_rng(5)
    ref = _fm(rng.standard_normal((3, 12, 12)).astype(np.float32))
    f = torch.as_tensor(rng.standard_normal((3, 5, 5)).astype(np.float32))
    conf = torch.ones(1, 5, 5)
    conf[0, 2, 3] = 0
    a = correlate(ref, weighted_query(_fm(f), ConfidenceMap(conf))).values
    f2 = f.clone()
    f2[:, 2, 3] = 1e3  # whatever sits under a zero weight is irrelevant
    b = correlate(ref, weighted_query(_fm(f2), ConfidenceMap(conf))).values
    assert torch.allclose(a, b, atol=1e-6)


def test_weighted_query_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_query(_fm(torch.zeros(2, 4, 4)), ConfidenceMap(torch.zeros(1, 5, 5)))


def test_kernel_side_rules():
    assert kernel_side(40, 0.8) == 51
    assert kernel_side(41, 1.0) == 41
    assert kernel_side(40, 1.0, limit=40) == 39


def test_crop_identity_and_center():
    v = torch.arange(9 * 9, dtype=torch.float32).reshape(1, 9, 9)
    assert torch.equal(crop_kernel(FeatureMap(v, gamma=1.0), 9.0).values, v)
    big = torch.zeros(1, 101, 101)
    big[0, 50, 50] = 1
    k = crop_kernel(FeatureMap(big, gamma=0.8), 40.0).values
    assert k.shape[-1] == 51 and k[0, 25, 25] == 1


def test_crop_too_large():
    with pytest.raises(ValueError):
        crop_kernel(FeatureMap(torch.zeros(1, 9, 9), gamma=1.0), 12.0)


# -- similarity-map geometry -----------------------------------------------------


def test_self_similarity_peak_at_center():
    rng = np.random.default_rng(6)
    ref = rng.standard_normal((8, 33, 33)).astype(np.float32)
    ker = ref[:, 8:25, 8:25]
    s = correlate(_fm(ref), _fm(ker))
    u, v = s.argmax()
    assert (u, v) == (8, 8)
    assert abs(float(s.values[8, 8]) - 1) < 1e-5
    assert (s.values > s.values[8, 8] - 1e-4).sum() == 1
    x, y = s.cell_to_metric(u, v)
    assert abs(x) < 1e-9 and abs(y) < 1e-9


def test_cell_metric_round_trip():
    s = SimilarityMap(torch.zeros(78, 78), 0.8, 51, 128)
    x, y = s.cell_to_metric(10, 60)
    u, v = s.metric_to_cell(x, y)
    assert (u, v) == pytest.approx((10, 60))
    # north (+y) is up the rows, east (+x) along the columns
    assert s.cell_to_metric(0, 0)[1] > s.cell_to_metric(1, 0)[1]
    assert s.cell_to_metric(0, 1)[0] > s.cell_to_metric(0, 0)[0]
    assert s.extent_m() >= 40.0


@pytest.mark.parametrize("delta", [1, 2, 3, 4])
def test_shift_equivariance(delta):
    rng = np.random.default_rng(7)
    big = rng.standard_normal((4, 40, 40)).astype(np.float32)
    ker = _fm(big[:, 10:19, 12:21])
    a = correlate(_fm(big[:, 4:36, 4:36]), ker)
    b = correlate(_fm(big[:, 4 + delta: 36 + delta, 4 + delta: 36 + delta]), ker)
    ua, va = a.argmax()
    ub, vb = b.argmax()
    assert (ua - ub, va - vb) == (delta, delta)
    assert torch.allclose(a.values[delta:, delta:], b.values[:-delta, :-delta], atol=1e-6)


def test_argmax_tie_breaks_row_major():
    v = torch.zeros(5, 5)
    v[3, 1] = v[1, 4] = v[1, 2] = 1.0
    assert SimilarityMap(v, 1.0, 3, 7).argmax() == (1, 2)


# -- pipeline --------------------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    return generate_world(31, 1024, 0.2)


def test_localize_zero_noise_lands_at_center(world):
    rig = GroundCameraRig.default()
    s = make_sample(world, 0, rig, PoseNoiseModel(0, 0), sat_size_px=256, label_noise_m=0)
    bundle = ModelBundle.build(0).eval()
    bundle.trans_extractor = _IdentityExtractor()
    theta, smap, loc = localize(s, rig, bundle, theta_override=s.gt_relative_pose.theta)
    n = smap.values.shape[0]
    u, v = smap.argmax()
    # the true center sits between four cells for an even-sized reference
    assert u in ((n - 1) // 2, n // 2) and v in ((n - 1) // 2, n // 2)
    assert math.hypot(loc.tx, loc.ty) <= 0.8
    assert theta == s.gt_relative_pose.theta


class _IdentityExtractor(torch.nn.Module):
    """Box-filtered image at 1/4 scale plus a constant confidence."""

    class spec:
        output_scale = 0.25

    def forward(self, x, want_confidence=False):
        f = torch.nn.functional.avg_pool2d(x, 4)
        f = f - f.mean(dim=(2, 3), keepdim=True)
        return f, (torch.full_like(f[:, :1], 0.5) if want_confidence else None)


def test_shifted_satellite_shifts_argmax(world):
    """Moving the satellite content by one deepest-stride step (16 px = 4 cells) moves the peak by 4 cells."""
    rig = GroundCameraRig.default()
    s = make_sample(world, 3, rig, PoseNoiseModel(8, 0), sat_size_px=512)
    bundle = ModelBundle.build(0).eval()
    big = np.pad(s.positive_satellite, ((16, 16), (16, 16), (0, 0)), mode="reflect")
    s1 = type(s)(**{**s.__dict__, "positive_satellite": big[16:-16, 16:-16]})
    s2 = type(s)(**{**s.__dict__, "positive_satellite": big[:-32, :-32]})
    theta = s.gt_relative_pose.theta
    _, a, _ = localize(s1, rig, bundle, theta_override=theta)
    _, b, _ = localize(s2, rig, bundle, theta_override=theta)
    # away from the feature-map border both maps agree exactly after the shift
    m = 24
    inner_a = a.values[m:-m - 4, m:-m - 4]
    inner_b = b.values[m + 4:-m, m + 4:-m]
    assert torch.allclose(inner_a, inner_b, atol=1e-4)
    ua, va = np.unravel_index(int(torch.argmax(inner_a)), inner_a.shape)
    ub, vb = np.unravel_index(int(torch.argmax(inner_b)), inner_b.shape)
    assert (ua, va) == (ub, vb)


def test_dump_diagnostics(tmp_path):
    s = SimilarityMap(torch.linspace(-1, 1, 36).reshape(6, 6), 0.8, 3, 8)
    dump_diagnostics(tmp_path, 12, s, np.full((4, 4), 0.3))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["000012_colormap.json", "000012_confidence.npy", "000012_confidence.png",
                     "000012_similarity.npy", "000012_similarity.png"]
    assert np.array_equal(np.load(tmp_path / "000012_similarity.npy"), s.values.numpy())

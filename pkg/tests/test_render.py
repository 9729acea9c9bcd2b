import math

import numpy as np
import pytest
import torch

from gsnerf.geometry import CameraView, Ray, look_at
from gsnerf.model import GSNeRF, ModelConfig
from gsnerf.reasoner import ReasonerOutput, plane_depths
from gsnerf.render import (AggregatedFeature, SemanticRenderer, VolumeRenderer, aggregate_features,
                           aggregate_semantic, composite, masked_moments, view_geometry)

import oracles
from conftest import fd_relative_errors

D, L, H, W = 4, 4, 16, 16


def rig(n=3):
    cams = []
    for k in range(n):
        eye = np.array([0.3 * (k - (n - 1) / 2), 0.1 * k, 0.0])
        cams.append(CameraView.from_params(16.0, 16.0, 8.0, 8.0, W, H, 1.0, 4.0, look_at(eye, [0.0, 0.0, 2.5])))
    return cams


def fake_output(cams, seed=0, depth=4.0, identical=False):
    g = torch.Generator().manual_seed(seed)
    K = len(cams)

    def rand(*shape):
        x = torch.rand(1 if identical else K, *shape, dtype=torch.float64, generator=g)
        return x.expand(K, *shape).clone()

    planes = torch.tensor(np.stack([plane_depths(c.near, c.far, L) for c in cams]))
    prob = torch.full((K, L, H, W), 1.0 / L, dtype=torch.float64)
    return ReasonerOutput(rand(D, H, W), rand(D, H, W), rand(D, L, H, W), prob, planes,
                          torch.full((K, H, W), depth, dtype=torch.float64))


def permute_output(out, perm):
    return ReasonerOutput(out.f_image[perm], out.f_sem[perm], out.volume[perm], out.prob[perm], out.planes[perm],
                          out.depth[perm])


POINT = torch.tensor([[0.02, -0.03, 2.0]], dtype=torch.float64)


# compositing

def test_composite_vacuum():
    rgb, res, w = composite(torch.tensor([0.5, 1.0, 2.0]), torch.zeros(3), torch.rand(3, 3), 4.0)
    assert torch.count_nonzero(rgb) == 0 and float(res) == 1.0


def test_composite_ln2():
    ts = torch.tensor([1.0, 2.0], dtype=torch.float64)
    # delta_1 = 1 and delta_2 = far - t_2 = 1
    sig = torch.full((2,), math.log(2.0), dtype=torch.float64)
    c = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    rgb, res, w = composite(ts, sig, c, 3.0)
    np.testing.assert_allclose(w, [0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(rgb, [0.5, 0.25, 0.0], atol=1e-15)
    assert float(res) == pytest.approx(0.25, abs=1e-15)


def test_composite_opaque():
    c = torch.tensor([[0.2, 0.7, 0.4]], dtype=torch.float64)
    rgb, res, _ = composite(torch.tensor([1.0], dtype=torch.float64), torch.tensor([10.0], dtype=torch.float64), c, 3.0)
    np.testing.assert_allclose(rgb, c[0], atol=1e-8)


def test_composite_unsorted_rejected():
    with pytest.raises(ValueError):
        composite(torch.tensor([1.0, 0.5]), torch.ones(2), torch.ones(2, 3), 2.0)


def test_composite_partition_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        far = 5.0
        ts = np.sort(rng.uniform(0.5, far, n))
        sig = rng.exponential(2.0, n) * rng.integers(0, 2, n)
        cols = rng.random((n, 3))
        rgb, res, w = composite(torch.tensor(ts), torch.tensor(sig), torch.tensor(cols), far)
        assert float(w.sum() + res) == pytest.approx(1.0, abs=1e-6)
        trans = 1.0 - np.concatenate([[0.0], np.cumsum(w.numpy())])
        assert np.all(np.diff(trans) <= 1e-15)
        assert torch.all((rgb >= 0) & (rgb <= 1))
        ref_rgb, ref_res, ref_w = oracles.composite(ts.tolist(), sig.tolist(), cols.tolist(), far)
        np.testing.assert_allclose(rgb, ref_rgb, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, atol=1e-12)
        assert float(res) == pytest.approx(ref_res, abs=1e-12)


def test_opaque_surface_with_oracle_field():
    """Density that switches on at a known surface returns the surface albedo."""
    rng = np.random.default_rng(1)
    albedo = np.array([0.8, 0.3, 0.1])
    t_surf, near, far = 2.0, 0.5, 4.0
    from gsnerf.sampling import depth_guided
    ts = depth_guided(np.full(64, t_surf), near, far, 16, rng)
    sig = np.where(ts >= t_surf, 1e3, 0.0)
    cols = np.broadcast_to(albedo, ts.shape + (3,))
    rgb, res, _ = composite(torch.tensor(ts), torch.tensor(sig), torch.tensor(cols), far)
    np.testing.assert_allclose(rgb.numpy(), np.broadcast_to(albedo, (64, 3)), atol=1e-2)


# aggregation and masks

def test_masked_moments_match_oracle():
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(40, 5, 3))
    mask = rng.random((40, 5)) < 0.5
    mask[0] = False
    mean, var, eff, fb = masked_moments(torch.tensor(rows), torch.tensor(mask))
    for p in range(40):
        m, v = oracles.masked_moments(rows[p].tolist(), mask[p].tolist())
        np.testing.assert_allclose(mean[p], m, atol=1e-12)
        np.testing.assert_allclose(var[p], v, atol=1e-12)
    assert bool(fb[0]) and bool(eff[0].all())
    np.testing.assert_array_equal(fb[1:].numpy(), ~mask[1:].any(axis=1))


def test_all_views_visible():
    cams = rig()
    out = fake_output(cams)
    feat = aggregate_features(POINT, out, cams)
    assert bool(feat.mask.all()) and not bool(feat.fallback.any())
    assert bool(feat.full_mask[:, 0].all()) and feat.full_mask.shape == (1, 4)
    np.testing.assert_allclose(feat.global_[0, :2 * D], feat.rows[0].mean(dim=0), atol=1e-12)


def test_occluded_view_dropped():
    cams = rig()
    out = fake_output(cams)
    out.depth[2] = 1.2  # a surface in front of the point, in view 2 only
    geom = view_geometry(POINT, out, cams)
    assert geom.visible[:, 0].tolist() == [True, True, False]
    feat = aggregate_features(POINT, out, cams, geom)
    full = aggregate_features(POINT, fake_output(cams), cams)
    rows = full.rows[0].numpy()
    m, v = oracles.masked_moments(rows.tolist(), [True, True, False])
    np.testing.assert_allclose(feat.global_[0].numpy(), np.concatenate([m, v]), atol=1e-12)
    assert torch.count_nonzero(feat.rows[0, 2]) == 0


def test_occlusion_tolerance():
    cams = rig()
    z = view_geometry(POINT, fake_output(cams), cams).z[:, 0]
    eps = 0.02 * (cams[0].far - cams[0].near)
    out = fake_output(cams)
    out.depth[0] = float(z[0]) - 0.5 * eps  # point slightly behind the surface: still visible
    out.depth[1] = float(z[1]) - 2.0 * eps  # clearly behind
    vis = view_geometry(POINT, out, cams).visible[:, 0]
    assert vis.tolist() == [True, False, True]


def test_out_of_frame_masked():
    cams = rig()
    out = fake_output(cams)
    far_left = torch.tensor([[-5.0, 0.0, 2.0]], dtype=torch.float64)
    feat = aggregate_features(far_left, out, cams)
    assert bool(feat.fallback[0])


def test_identical_views_zero_variance():
    cams = rig()
    out = fake_output(cams, identical=True)
    same = [cams[1]] * 3  # identical cameras so every view samples the same location
    feat = aggregate_features(POINT, out, same)
    assert float(feat.global_[0, 2 * D:].abs().max()) == 0.0
    sfeat = aggregate_semantic(POINT, out, same)
    assert float(sfeat.global_[0, D:].abs().max()) == 0.0


def test_all_masked_fallback():
    cams = rig()
    out = fake_output(cams, depth=1.0)  # every view sees a surface in front of the point
    feat = aggregate_features(POINT, out, cams)
    assert bool(feat.fallback[0]) and bool(feat.mask.all())
    rows = aggregate_features(POINT, fake_output(cams), cams).rows[0]
    np.testing.assert_allclose(feat.global_[0, :2 * D], rows.mean(dim=0), atol=1e-12)
    sfeat = aggregate_semantic(POINT, out, cams)
    assert bool(sfeat.fallback[0])
    torch.manual_seed(0)
    logits = SemanticRenderer(D, 6, 16).double()(POINT, sfeat)
    assert torch.all(torch.isfinite(logits))


# renderers

def random_feature(n, k, c, seed, mask_p=0.3):
    g = torch.Generator().manual_seed(seed)
    rows = torch.randn(n, k, c, dtype=torch.float64, generator=g)
    mask = torch.rand(n, k, generator=g) > mask_p
    mean, var, eff, fb = masked_moments(rows, mask)
    return AggregatedFeature(rows * eff.unsqueeze(-1), torch.cat([mean, var], -1), eff, fb)


def test_volume_renderer_codomain():
    torch.manual_seed(3)
    vr = VolumeRenderer(D, 16).double()
    feat = random_feature(10_000, 3, 2 * D, 4)
    x = torch.randn(10_000, 3, dtype=torch.float64) * 5
    d = torch.nn.functional.normalize(torch.randn(10_000, 3, dtype=torch.float64), dim=-1)
    with torch.no_grad():
        sigma, rgb = vr(x, d, feat)
    assert torch.all(sigma >= 0) and torch.all((rgb >= 0) & (rgb <= 1))
    with torch.no_grad():
        assert torch.equal(vr(x, d, feat)[0], sigma)


def test_volume_renderer_masked_rows_have_no_influence():
    torch.manual_seed(5)
    vr = VolumeRenderer(D, 16).double()
    feat = random_feature(200, 3, 2 * D, 6)
    x = torch.randn(200, 3, dtype=torch.float64)
    d = torch.nn.functional.normalize(torch.randn(200, 3, dtype=torch.float64), dim=-1)
    noisy = feat.rows + torch.randn_like(feat.rows) * 10.0 * (~feat.mask).unsqueeze(-1)
    with torch.no_grad():
        a = vr(x, d, feat)
        b = vr(x, d, AggregatedFeature(noisy, feat.global_, feat.mask, feat.fallback))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_masked_view_input_has_no_influence():
    """Changing an occluded view's source features leaves both renderers' outputs unchanged."""
    cams = rig()
    out = fake_output(cams)
    out.depth[2] = 1.2
    other = fake_output(cams, seed=99)
    other.depth[2] = 1.2
    for name in ("f_image", "f_sem", "volume"):
        getattr(other, name)[:2] = getattr(out, name)[:2]
    torch.manual_seed(7)
    vr, sr = VolumeRenderer(D, 16).double(), SemanticRenderer(D, 6, 16).double()
    d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    with torch.no_grad():
        a = vr(POINT, d, aggregate_features(POINT, out, cams))
        b = vr(POINT, d, aggregate_features(POINT, other, cams))
        sa = sr(POINT, aggregate_semantic(POINT, out, cams))
        sb = sr(POINT, aggregate_semantic(POINT, other, cams))
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-14)
    np.testing.assert_allclose(sa, sb, atol=1e-14)


def test_permutation_invariance():
    cams = rig()
    out = fake_output(cams, seed=8)
    out.depth[0] = 1.2
    perm = [2, 0, 1]
    pout = permute_output(out, perm)
    pcams = [cams[i] for i in perm]
    pts = POINT + torch.tensor([[0.0, 0.0, 0.0], [0.05, 0.02, 0.3], [-0.04, 0.01, -0.5]], dtype=torch.float64)
    torch.manual_seed(9)
    vr, sr = VolumeRenderer(D, 16).double(), SemanticRenderer(D, 6, 16).double()
    d = torch.nn.functional.normalize(pts, dim=-1)
    with torch.no_grad():
        fa, fb = aggregate_features(pts, out, cams), aggregate_features(pts, pout, pcams)
        np.testing.assert_allclose(fa.global_, fb.global_, atol=1e-12)
        for x, y in zip(vr(pts, d, fa), vr(pts, d, fb)):
            np.testing.assert_allclose(x, y, atol=1e-12)
        sa, sb = aggregate_semantic(pts, out, cams), aggregate_semantic(pts, pout, pcams)
        np.testing.assert_allclose(sa.global_, sb.global_, atol=1e-12)
        np.testing.assert_allclose(sr(pts, sa), sr(pts, sb), atol=1e-12)


def test_volume_renderer_gradients():
    torch.manual_seed(10)
    vr = VolumeRenderer(D, 8).double()
    feat = random_feature(6, 3, 2 * D, 11)
    x = torch.randn(6, 3, dtype=torch.float64)
    d = torch.nn.functional.normalize(torch.randn(6, 3, dtype=torch.float64), dim=-1)
    w = torch.randn(6, 4, dtype=torch.float64)

    def loss():
        s, c = vr(x, d, feat)
        return (torch.cat([s[:, None], c], -1) * w).sum()

    vr.zero_grad()
    loss().backward()
    params = dict(vr.named_parameters())
    errors = fd_relative_errors(loss, params, {n: p.grad for n, p in params.items()})
    assert max(errors.values()) < 1e-4, errors


def test_semantic_renderer_gradients():
    torch.manual_seed(12)
    sr = SemanticRenderer(D, 6, 8).double()
    feat = random_feature(6, 3, D, 13)
    x = torch.randn(6, 3, dtype=torch.float64)
    w = torch.randn(6, 6, dtype=torch.float64)

    def loss():
        return (sr(x, feat) * w).sum()

    sr.zero_grad()
    loss().backward()
    params = dict(sr.named_parameters())
    errors = fd_relative_errors(loss, params, {n: p.grad for n, p in params.items()})
    assert max(errors.values()) < 1e-4, errors


# assembled pixel rendering

def test_render_pixel_reproducible(tiny_bundle):
    torch.manual_seed(14)
    model = GSNeRF(ModelConfig(d=4, n_planes=4, hidden=8)).double()
    images = torch.tensor(np.stack([v.image for v in tiny_bundle.sources])).permute(0, 3, 1, 2)
    cams = [v.cam for v in tiny_bundle.sources]
    cam = tiny_bundle.target.cam
    ray = Ray(cam.center, cam.forward, cam.near, cam.far, (4, 4))
    with torch.no_grad():
        out = model.reason(images, cams)
        a, aux_a = model.render_pixel(ray, 2.0, out, cams, 8, "uniform", np.random.default_rng(3))
        b, aux_b = model.render_pixel(ray, 2.0, out, cams, 8, "uniform", np.random.default_rng(3))
    assert torch.equal(a, b) and torch.equal(aux_a["ts"], aux_b["ts"])
    assert torch.all((a >= 0) & (a <= 1))
    assert float(aux_a["weights"].sum() + aux_a["residual"]) == pytest.approx(1.0, abs=1e-6)
    logits, flag = model.semantic_forward(ray, 2.0, out, cams)
    assert logits.shape == (6,) and torch.all(torch.isfinite(logits)) and isinstance(flag, bool)

import numpy as np
import pytest
import torch

from shapeminer.cameras import AnnealSchedule, PerspectiveCamera
from shapeminer.field import (
    BCE_EPS,
    CameraParams,
    EncodingSchedule,
    OccupancyField,
    TrainConfig,
    compute_gradients,
    depth_smoothness_loss,
    expected_depth,
    load_state,
    positional_encoding,
    ray_occupancy,
    render_occupancy,
    save_state,
    silhouette_loss,
    silhouette_loss_from_sums,
    train_cluster,
    TrainResult,
)


def _cam(M_free=None, T=(0, 0, 5.0), f=64.0, size=8, cid="c"):
    if M_free is None:
        M_free = np.eye(3)[:2]
    return PerspectiveCamera(id=cid, M_free=M_free, T=np.asarray(T, float),
                             f=f, width=size, height=size)


class TestEncoding:
    def test_alpha_zero_gates_everything(self):
        x = torch.rand(5, 3, dtype=torch.float64)
        enc = positional_encoding(x, alpha=0.0, L=4)
        assert enc.shape == (5, 3 + 24)
        torch.testing.assert_close(enc[:, :3], x)
        assert enc[:, 3:].abs().max() == 0.0

    def test_alpha_full_no_gating(self):
        x = torch.rand(4, 3, dtype=torch.float64)
        L = 3
        enc = positional_encoding(x, alpha=float(L), L=L)
        ang = x[:, None, :] * (2.0 ** torch.arange(L, dtype=x.dtype))[:, None] * torch.pi
        ref = torch.cat([x, torch.cat([ang.cos(), ang.sin()], -1).flatten(1)], 1)
        torch.testing.assert_close(enc, ref)

    def test_half_open_band_cosine_ramp(self):
        # alpha = 0.5 gates band 0 by (1 - cos(pi/2)) / 2 = 1/2
        x = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        enc = positional_encoding(x, alpha=0.5, L=2)
        # band 0 cos term for coordinate 0: cos(pi * 1) * 0.5 = -0.5
        assert enc[0, 3].item() == pytest.approx(-0.5)
        # band 1 fully gated off
        assert enc[0, 9:].abs().max() == 0.0

    def test_schedule(self):
        s = EncodingSchedule()
        assert s.alpha_at(0) == 1.0
        assert s.alpha_at(20) == 2.0
        assert s.alpha_at(30) == 2.5
        assert s.alpha_at(500) == 10.0

    def test_field_shapes_and_positivity(self):
        net = OccupancyField(L=10, dtype=torch.float64, seed=0)
        pts = torch.rand(7, 5, 3, dtype=torch.float64)
        sigma = net.density(pts, alpha=3.0)
        assert sigma.shape == (7, 5)
        assert (sigma >= 0).all()

    def test_field_starts_near_transparent(self):
        net = OccupancyField(dtype=torch.float64, seed=1)
        pts = torch.rand(64, 3, dtype=torch.float64) * 2 - 1
        sigma = net.density(pts, alpha=10.0)
        # final bias is pushed down so initial densities sit well below 1
        assert sigma.mean().item() < 0.5


class TestLosses:
    def test_ray_occupancy_ln2(self):
        sig = torch.full((1, 2), np.log(2.0) / 2, dtype=torch.float64)
        assert ray_occupancy(sig).item() == pytest.approx(0.5)

    def test_ray_occupancy_empty(self):
        assert ray_occupancy(torch.zeros(3, 4)).abs().max() == 0.0

    def test_bce_half(self):
        p = torch.tensor([0.5], dtype=torch.float64)
        for t in (0.0, 1.0):
            got = silhouette_loss(p, torch.tensor([t], dtype=torch.float64))
            assert got.item() == pytest.approx(np.log(2.0))

    def test_bce_clamped_at_extremes(self):
        p = torch.tensor([0.0, 1.0], dtype=torch.float64)
        t = torch.tensor([1.0, 0.0], dtype=torch.float64)
        got = silhouette_loss(p, t)
        assert torch.isfinite(got).all()
        assert got[0].item() == pytest.approx(-np.log(BCE_EPS))

    def test_loss_from_sums_matches_occupancy_form(self):
        torch.manual_seed(0)
        sig = torch.rand(50, 8, dtype=torch.float64)
        target = (torch.rand(50) > 0.5).double()
        via_occ = silhouette_loss(ray_occupancy(sig), target)
        via_sum = silhouette_loss_from_sums(sig.sum(-1), target)
        torch.testing.assert_close(via_sum, via_occ)

    def test_loss_from_sums_keeps_background_gradient_when_opaque(self):
        S = torch.tensor([100.0], dtype=torch.float64, requires_grad=True)
        loss = silhouette_loss_from_sums(S, torch.zeros(1, dtype=torch.float64))
        loss.backward()
        assert S.grad.item() == 1.0  # -log(1 - occ) = S, slope 1 everywhere

    def test_expected_depth_single_opaque_sample(self):
        t = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
        sig = torch.tensor([[0.0, 50.0, 0.0, 0.0]], dtype=torch.float64)
        d = expected_depth(t, sig)
        assert d.item() == pytest.approx(2.0, abs=1e-6)

    def test_expected_depth_empty_ray_zero(self):
        t = torch.linspace(1, 2, 8, dtype=torch.float64)[None]
        d = expected_depth(t, torch.zeros_like(t))
        assert d.item() == 0.0

    def test_expected_depth_requires_sorted(self):
        t = torch.tensor([[2.0, 1.0, 3.0]])
        with pytest.raises(ValueError):
            expected_depth(t, torch.ones_like(t))

    def test_smoothness_worked_example(self):
        patch = torch.tensor([[1.0, 1.0], [1.0, 2.0]], dtype=torch.float64)
        # pairs: (1,1)=0, (1,2)=1, (1,1)=0, (1,2)=1 -> mean 0.5
        assert depth_smoothness_loss(patch).item() == pytest.approx(0.5)

    def test_smoothness_flat_zero(self):
        assert depth_smoothness_loss(torch.full((3, 3), 7.0)).item() == 0.0

    def test_smoothness_needs_2x2(self):
        with pytest.raises(ValueError):
            depth_smoothness_loss(torch.ones(1, 5))


def _fd_grad(fn, param, eps):
    """Central finite differences for a scalar function of one tensor."""
    g = torch.zeros_like(param)
    flat = param.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


class TestGradients:
    def test_unused_parameter_gets_zeros(self):
        a = torch.tensor([1.0], requires_grad=True)
        b = torch.tensor([2.0], requires_grad=True)
        grads = compute_gradients((a * 3).sum(), {"a": a, "b": b})
        assert grads["a"].item() == 3.0
        assert grads["b"].item() == 0.0

    def test_non_finite_named(self):
        a = torch.tensor([0.0], requires_grad=True)
        loss = torch.log(a).sum()
        with pytest.raises(FloatingPointError, match="'a'"):
            compute_gradients(loss, {"a": a})

    def test_field_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        net = OccupancyField(L=2, hidden=8, depth=2, dtype=torch.float64, seed=2)
        pts = torch.rand(6, 4, 3, dtype=torch.float64)
        target = torch.tensor([1.0, 0, 1, 0, 1, 0], dtype=torch.float64)

        def loss_fn():
            occ = ray_occupancy(net.density(pts, alpha=1.5))
            return silhouette_loss(occ, target).mean()

        params = dict(net.named_parameters())
        grads = compute_gradients(loss_fn(), params)
        for name in ["layers.0.weight", "layers.2.bias"]:
            with torch.no_grad():
                fd = _fd_grad(lambda: loss_fn().item(), params[name], 1e-6)
            rel = (grads[name] - fd).norm() / (fd.norm() + 1e-12)
            assert rel < 1e-6, name

    def test_full_scene_camera_gradients_match_fd(self):
        """End-to-end: BCE + smoothness through rays, encoding, and field;
        analytic gradients vs central differences in float64."""
        torch.manual_seed(1)
        cams = [_cam(M_free=np.array([[1.0, 0.1, 0], [0, 1.0, 0.1]]),
                     T=(0.1, -0.2, 5.0), size=4, cid=f"v{k}") for k in range(2)]
        cam_params = CameraParams(cams, dtype=torch.float64)
        net = OccupancyField(L=2, hidden=8, depth=2, dtype=torch.float64, seed=3)
        idx = torch.tensor([0, 0, 1, 1])
        rows = torch.tensor([0, 1, 2, 3])
        cols = torch.tensor([3, 2, 1, 0])
        t_vals = torch.linspace(4.5, 5.5, 5, dtype=torch.float64).expand(4, 5)
        target = torch.tensor([1.0, 0, 1, 0], dtype=torch.float64)

        def loss_fn():
            o, d = cam_params.rays(idx, rows, cols)
            pts = o[:, None, :] + t_vals[..., None] * d[:, None, :]
            sig = net.density(pts, alpha=1.5)
            bce = silhouette_loss(ray_occupancy(sig), target).mean()
            depths = expected_depth(t_vals, sig + 0.3).reshape(2, 2)
            return bce + 0.01 * depth_smoothness_loss(depths)

        params = {"M_free": cam_params.M_free, "T": cam_params.T,
                  "f": cam_params.f}
        grads = compute_gradients(loss_fn(), params)
        for name, p in params.items():
            with torch.no_grad():
                fd = _fd_grad(lambda: loss_fn().item(), p.data, 1e-5)
            rel = (grads[name] - fd).norm() / (fd.norm() + 1e-12)
            assert rel < 1e-3, f"{name}: rel err {rel:.2e}"


class TestCameraParams:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        cams = [_cam(M_free=rng.normal(size=(2, 3)), T=rng.normal(size=3),
                     f=50 + 10 * k, cid=f"v{k}") for k in range(3)]
        back = CameraParams(cams, dtype=torch.float64).to_cameras()
        for a, b in zip(cams, back):
            assert a.id == b.id
            np.testing.assert_allclose(a.M_free, b.M_free)
            np.testing.assert_allclose(a.T, b.T)
            assert a.f == pytest.approx(b.f)

    def test_rotations_match_reference(self):
        from shapeminer.cameras import gram_schmidt_rows

        rng = np.random.default_rng(1)
        cams = [_cam(M_free=rng.normal(size=(2, 3)), cid=f"v{k}")
                for k in range(4)]
        cp = CameraParams(cams, dtype=torch.float64)
        R = cp.rotations(torch.arange(4)).detach().numpy()
        for k in range(4):
            np.testing.assert_allclose(
                R[k], gram_schmidt_rows(cams[k].M_free), atol=1e-12
            )

    def test_rays_match_cast_rays(self):
        from shapeminer.cameras import cast_rays

        rng = np.random.default_rng(2)
        cam = _cam(M_free=rng.normal(size=(2, 3)), T=rng.normal(size=3),
                   f=40.0, size=16)
        cp = CameraParams([cam], dtype=torch.float64)
        pix = rng.integers(0, 16, size=(10, 2))
        o_t, d_t = cp.rays(torch.zeros(10, dtype=torch.long),
                           torch.tensor(pix[:, 0]), torch.tensor(pix[:, 1]))
        o_n, d_n = cast_rays(cam, pix.astype(float))
        np.testing.assert_allclose(o_t.detach().numpy(), o_n, atol=1e-12)
        np.testing.assert_allclose(d_t.detach().numpy(), d_n, atol=1e-12)


def _tiny_config(**kw):
    base = dict(rays_per_iter=8, samples_per_ray=8, epochs=2,
                iters_per_epoch=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTraining:
    def test_deterministic(self):
        rng = np.random.default_rng(3)
        sils = [(rng.random((8, 8)) > 0.6).astype(np.uint8) for _ in range(3)]
        cams = [_cam(cid=f"v{k}") for k in range(3)]
        a = train_cluster(sils, cams, _tiny_config())
        b = train_cluster(sils, cams, _tiny_config())
        assert a.loss_history == b.loss_history
        for pa, pb in zip(a.field.parameters(), b.field.parameters()):
            assert torch.equal(pa, pb)

    def test_cameras_frozen_when_disabled(self):
        rng = np.random.default_rng(4)
        sils = [(rng.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(2)]
        cams = [_cam(cid=f"v{k}") for k in range(2)]
        res = train_cluster(sils, cams, _tiny_config(optimize_cameras=False))
        for a, b in zip(cams, res.cameras):
            np.testing.assert_array_equal(a.M_free, b.M_free)
            np.testing.assert_array_equal(a.T, b.T)
            assert a.f == b.f

    def test_empty_silhouettes_flagged_degenerate(self):
        sils = [np.zeros((8, 8), np.uint8)] * 2
        cams = [_cam(cid=f"v{k}") for k in range(2)]
        res = train_cluster(sils, cams, _tiny_config())
        assert res.degenerate

    def test_loss_decreases_on_simple_target(self):
        # A centered disk seen from a ring of cameras; short run must improve.
        from shapeminer import synth

        shape = synth.ShapeSpec(primitives=(synth.Primitive("sphere", radius=0.7),))
        cams = synth.camera_ring(4, size=16, focal=16, seed=0)
        sils = [synth.render_silhouette(shape, c) for c in cams]
        cfg = _tiny_config(rays_per_iter=32, samples_per_ray=16, epochs=10,
                           iters_per_epoch=8, optimize_cameras=False)
        res = train_cluster(sils, cams, cfg)
        assert res.loss_history[-1] < res.loss_history[0]

    def test_mismatched_inputs(self):
        with pytest.raises(ValueError):
            train_cluster([np.zeros((4, 4))], [], _tiny_config())


class TestStateSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        sils = [(rng.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(2)]
        cams = [_cam(cid=f"v{k}") for k in range(2)]
        enc = EncodingSchedule()
        res = train_cluster(sils, cams, _tiny_config())
        path = tmp_path / "state.bin"
        save_state(res, enc, path)
        field2, cams2, header = load_state(path)
        for a, b in zip(res.field.parameters(), field2.parameters()):
            np.testing.assert_array_equal(
                a.detach().numpy(), b.detach().numpy()
            )
        assert [c.id for c in cams2] == [c.id for c in res.cameras]
        assert header["alpha_max"] == enc.alpha_max
        # loaded field renders identically
        img_a = render_occupancy(res.field, res.cameras[0], 10.0, 4.0, 6.0, 16)
        img_b = render_occupancy(field2, cams2[0], 10.0, 4.0, 6.0, 16)
        np.testing.assert_array_equal(img_a, img_b)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_state(p)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(6)
        sils = [(rng.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(2)]
        cams = [_cam(cid=f"v{k}") for k in range(2)]
        res = train_cluster(sils, cams, _tiny_config(epochs=1, iters_per_epoch=1))
        path = tmp_path / "state.bin"
        save_state(res, EncodingSchedule(), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 8])
        with pytest.raises(ValueError):
            load_state(path)

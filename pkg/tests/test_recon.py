"""Blur kernels, similarity losses, and the two decoder architectures."""

import numpy as np
import pytest

from vlbidesign import autodiff as ad
from vlbidesign import recon, vlbi


def small_geometry(n_times=2):
    names = ["AA", "BB", "CC"]
    pos = np.array([[6378137.0, 0.0, 0.0], [0.0, 6378137.0, 0.0],
                    [4000000.0, 4000000.0, 2000000.0]])
    sites = vlbi.SiteTable(names, pos, np.full(3, 1000.0))
    return vlbi.uv_coverage(sites, vlbi.Target(ra_hours=5.0, dec_deg=20.0),
                            vlbi.default_schedule(n_times, -90.0))


def bump_image(cx=10.0, cy=-6.0, s=32):
    c = np.linspace(-1.0, 1.0, s) * 16.0
    xx, yy = np.meshgrid(c, c)
    img = np.exp(-0.5 * ((xx - cx) ** 2 + (yy - cy) ** 2) / 9.0)
    return img / img.sum()


class TestKernel:
    def test_normalized_and_centered(self):
        k = recon.make_kernel(0.75)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        assert k.shape[0] % 2 == 1
        assert np.array_equal(k, k.T)
        assert np.array_equal(k, k[::-1, ::-1])
        assert k.max() == k[k.shape[0] // 2, k.shape[1] // 2]

    def test_fwhm_scales_with_fraction(self):
        # full width at half maximum measured from the center row
        def measured_fwhm(k):
            row = k[k.shape[0] // 2]
            half = row.max() / 2.0
            above = np.flatnonzero(row >= half)
            return above[-1] - above[0] + 1

        assert measured_fwhm(recon.make_kernel(1.0)) >= \
            measured_fwhm(recon.make_kernel(0.5)) >= \
            measured_fwhm(recon.make_kernel(0.25))

    def test_invalid_fraction(self):
        with pytest.raises(recon.ReconError):
            recon.make_kernel(0.0)


class TestBlur:
    def test_preserves_flux_interior(self):
        img = bump_image(cx=0.0, cy=0.0)    # compact centered bump
        out = recon.blur(img, recon.make_kernel(0.5))
        assert out.sum() == pytest.approx(img.sum(), rel=1e-5)

    def test_wrap_preserves_flux_exactly(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32))
        out = recon.blur(img, recon.make_kernel(0.75), boundary="wrap")
        assert out.sum() == pytest.approx(img.sum(), rel=1e-12)

    def test_zero_padding_loses_border_flux(self):
        img = np.zeros((32, 32))
        img[0, 0] = 1.0
        out = recon.blur(img, recon.make_kernel(1.0))
        assert out.sum() < 1.0

    def test_delta_reproduces_kernel(self):
        img = np.zeros((32, 32))
        img[16, 16] = 1.0
        k = recon.make_kernel(0.5)
        out = recon.blur(img, k)
        r = k.shape[0] // 2
        assert np.allclose(out[16 - r:16 + r + 1, 16 - r:16 + r + 1], k,
                           atol=1e-15)

    def test_bad_inputs(self):
        with pytest.raises(recon.ReconError):
            recon.blur(np.zeros(5), recon.make_kernel(0.5))
        with pytest.raises(recon.ReconError):
            recon.blur(np.zeros((4, 4)), recon.make_kernel(0.5),
                       boundary="mirror")


class TestNumpyLosses:
    def test_l1_zero_at_blurred_target(self):
        img = bump_image()
        k = recon.make_kernel(0.75)
        assert recon.l1_blurred_loss(recon.blur(img, k), img, k) == 0.0

    def test_l1_reductions_ratio(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        k = recon.make_kernel(0.5)
        s = recon.l1_blurred_loss(a, b, k, reduction="sum")
        m = recon.l1_blurred_loss(a, b, k, reduction="mean")
        assert s == pytest.approx(m * 32 * 32, rel=1e-12)
        with pytest.raises(recon.ReconError):
            recon.l1_blurred_loss(a, b, k, reduction="max")

    def test_best_cyclic_shift_recovers_roll(self):
        rng = np.random.default_rng(2)
        img = rng.random((32, 32))
        shifted = np.roll(img, (5, -7), axis=(0, 1))
        dy, dx = recon.best_cyclic_shift(img, shifted)
        assert (dy, dx) == (5, 32 - 7)

    def test_shift_invariant_zero_at_any_roll(self):
        img = bump_image()
        k = recon.make_kernel(0.75)
        bt = recon.blur(img, k, boundary="wrap")
        for shift in ((0, 0), (3, 4), (-5, 11)):
            rolled = np.roll(bt, shift, axis=(0, 1))
            assert recon.shift_invariant_loss(rolled, img, k) < 1e-12

    def test_shift_invariant_positive_for_mismatch(self):
        a = bump_image(cx=10.0)
        b = bump_image(cx=-10.0, cy=8.0) + bump_image(cx=0.0, cy=0.0)
        k = recon.make_kernel(0.75)
        assert recon.shift_invariant_loss(a, b, k) > 0.01

    def test_zero_images_rejected(self):
        with pytest.raises(recon.ReconError):
            recon.shift_invariant_loss(np.zeros((32, 32)), bump_image(),
                                       recon.make_kernel(0.5))


class TestGraphLosses:
    def test_l1_graph_matches_numpy(self):
        rng = np.random.default_rng(3)
        k = recon.make_kernel(0.75)
        truth = np.stack([bump_image(), bump_image(cx=-4.0)])
        bt = np.stack([recon.blur(t, k) for t in truth])
        rec = rng.random((2, 32, 32))
        got = recon.l1_loss_graph(ad.as_tensor(rec), bt, reduction="sum")
        want = np.mean([np.abs(rec[i] - bt[i]).sum() for i in range(2)])
        assert float(got.data) == pytest.approx(want, rel=1e-14)

    def test_l1_graph_gradient(self):
        rng = np.random.default_rng(4)
        bt = rng.random((2, 8, 8))
        t = ad.Tensor(rng.random((2, 8, 8)) + 2.0, requires_grad=True)
        rep = ad.finite_diff_check(
            lambda: recon.l1_loss_graph(t, bt, reduction="sum"), [t])
        assert rep.max_rel_error < 1e-4

    def test_shift_graph_matches_numpy_value(self):
        k = recon.make_kernel(0.75)
        truth = np.stack([bump_image(), bump_image(cx=-4.0, cy=2.0)])
        btw = np.stack([recon.blur(t, k, boundary="wrap") for t in truth])
        rng = np.random.default_rng(5)
        rec = rng.random((2, 32, 32)) + 0.1
        got = recon.shift_invariant_loss_graph(ad.as_tensor(rec), btw)
        want = np.mean([recon.shift_invariant_loss(rec[i], truth[i], k)
                        for i in range(2)])
        assert float(got.data) == pytest.approx(want, rel=1e-12)

    def test_shift_graph_gradient(self):
        rng = np.random.default_rng(6)
        btw = rng.random((2, 8, 8)) + 0.5
        t = ad.Tensor(rng.random((2, 8, 8)) + 0.5, requires_grad=True)
        rep = ad.finite_diff_check(
            lambda: recon.shift_invariant_loss_graph(t, btw), [t],
            max_entries_per_param=40, rng=np.random.default_rng(0))
        assert rep.max_rel_error < 1e-4

    def test_shape_mismatch_rejected(self):
        with pytest.raises(recon.ReconError):
            recon.l1_loss_graph(ad.as_tensor(np.zeros((1, 8, 8))),
                                np.zeros((1, 4, 4)))


class TestDecoderA:
    def test_output_shape_and_nonnegative(self):
        rng = np.random.default_rng(7)
        params = ad.ParameterSet()
        dec = recon.DecoderA(20, params, rng, image_size=16, levels=2,
                             base_width=4)
        vec = ad.as_tensor(rng.normal(size=(3, 20)))
        out = dec(vec)
        assert out.shape == (3, 16, 16)
        assert np.all(out.data >= 0.0)

    def test_gradients_reach_every_parameter(self):
        rng = np.random.default_rng(8)
        params = ad.ParameterSet()
        dec = recon.DecoderA(10, params, rng, image_size=8, levels=2,
                             base_width=3)
        vec = ad.as_tensor(rng.normal(size=(2, 10)))
        loss = ad.tsum(dec(vec))
        tensors = [t for _, t in params.items()]
        ad.backward(loss, tensors)
        for name, t in params.items():
            assert t.grad is not None, name
            assert np.any(t.grad != 0.0) or t.size <= 1, name

    def test_incompatible_size_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(recon.ReconError):
            recon.DecoderA(10, ad.ParameterSet(), rng, image_size=12,
                           levels=3)

    def test_wrong_input_width_rejected(self):
        rng = np.random.default_rng(10)
        dec = recon.DecoderA(10, ad.ParameterSet(), rng, image_size=8,
                             levels=1, base_width=2)
        with pytest.raises(recon.ReconError):
            dec(ad.as_tensor(np.zeros((2, 11))))


class TestDecoderB:
    def test_output_shape(self):
        rng = np.random.default_rng(11)
        g = small_geometry()
        params = ad.ParameterSet()
        dec = recon.build_decoder("b", g, params, rng, image_size=8,
                                  levels=2, base_width=3, hidden=16)
        n_in = g.T * g.P + 2 * g.T * g.n_triangles
        assert dec.input_len == n_in
        out = dec(ad.as_tensor(rng.normal(size=(2, n_in))))
        assert out.shape == (2, 8, 8)
        assert np.all(out.data >= 0.0)

    def test_phase_head_shape(self):
        rng = np.random.default_rng(12)
        g = small_geometry()
        dec = recon.build_decoder("b", g, ad.ParameterSet(), rng,
                                  image_size=8, levels=2, base_width=3,
                                  hidden=16)
        ph = dec.estimate_phases(ad.as_tensor(rng.normal(size=(4, dec.input_len))))
        assert ph.shape == (4, g.T * g.P)

    def test_phase_gradient_flows(self):
        rng = np.random.default_rng(13)
        g = small_geometry()
        params = ad.ParameterSet()
        dec = recon.build_decoder("b", g, params, rng, image_size=8,
                                  levels=2, base_width=3, hidden=16)
        out = dec(ad.as_tensor(rng.normal(size=(2, dec.input_len))))
        ad.backward(ad.tsum(out), [params["dec.phase1.w"]])
        assert np.any(params["dec.phase1.w"].grad != 0.0)


class TestBuildDecoder:
    def test_mode_a_input_length(self):
        rng = np.random.default_rng(14)
        g = small_geometry()
        dec = recon.build_decoder("a", g, ad.ParameterSet(), rng,
                                  image_size=8, levels=2, base_width=3)
        assert dec.input_len == 2 * g.T * g.P

    def test_unknown_mode(self):
        with pytest.raises(recon.ReconError):
            recon.build_decoder("c", small_geometry(), ad.ParameterSet(),
                                np.random.default_rng(0))

    def test_deterministic_init_from_seed(self):
        g = small_geometry()
        p1, p2 = ad.ParameterSet(), ad.ParameterSet()
        recon.build_decoder("a", g, p1, np.random.default_rng(42),
                            image_size=8, levels=2, base_width=3)
        recon.build_decoder("a", g, p2, np.random.default_rng(42),
                            image_size=8, levels=2, base_width=3)
        for (n1, t1), (n2, t2) in zip(p1.items(), p2.items()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

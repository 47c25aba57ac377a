"""TV norm analytics, gradient correctness and the regularized solver."""

import numpy as np
import pytest

from umri.decoders import DecoderConfig, init_decoder
from umri.fitting import FitDivergenceError, loss_sensmap
from umri.mri import CoilMeasurement, Mask, channels_to_complex, forward_multicoil, zero_filled
from umri.phantom import MaskSpec, PhantomSpec, make_mask, make_phantom, make_sens_maps, simulate
from umri.tv import TVConfig, tv_norm, tv_norm_grad, tv_reconstruct, objective

from conftest import norm_maps, smooth_image


class TestTvNorm:
    def test_constant_image_is_zero(self):
        assert tv_norm(np.full((5, 7), 2.3 + 1.1j), 1e-8) == 0.0

    def test_vertical_step_counts_one_jump_per_row(self):
        h = 8
        img = np.zeros((h, 6), dtype=np.complex128)
        img[:, 3:] = 1.0
        assert tv_norm(img, 1e-8) == pytest.approx(h, abs=1e-6)

    def test_hand_computed_two_by_two(self):
        # [[0, 1], [0, 0]]: one horizontal and one vertical unit jump
        img = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert tv_norm(img, 1e-8) == pytest.approx(2.0, abs=1e-6)

    def test_global_phase_invariant(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
        a = tv_norm(x, 1e-4)
        b = tv_norm(x * np.exp(0.7j), 1e-4)
        assert a == pytest.approx(b, rel=1e-12)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError):
            tv_norm(np.zeros((4, 4)), 0.0)


class TestTvNormGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 5)) + 1j * rng.standard_normal((6, 5))
        eps = 1e-3
        g = tv_norm_grad(x, eps)
        step = 1e-6
        worst = 0.0
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                for direction in (1.0, 1j):
                    xp = x.copy()
                    xm = x.copy()
                    xp[i, j] += direction * step
                    xm[i, j] -= direction * step
                    fd = (tv_norm(xp, eps) - tv_norm(xm, eps)) / (2 * step)
                    analytic = g[i, j].real if direction == 1.0 else g[i, j].imag
                    worst = max(worst, abs(fd - analytic) / max(1e-12, abs(fd), abs(analytic)))
        assert worst < 1e-5

    def test_constant_image_has_zero_gradient(self):
        g = tv_norm_grad(np.full((4, 4), 3.0 + 2.0j), 1e-6)
        np.testing.assert_array_equal(g, np.zeros((4, 4), dtype=complex))


class TestObjective:
    def test_lam_zero_equals_fitter_loss_on_same_image(self, small_problem):
        y = small_problem["y"]
        maps = small_problem["maps"]
        h, w = y.data.shape[1:]
        config = DecoderConfig(
            arch="convdecoder",
            n_layers=3,
            channels=6,
            input_shape=(8, 8, 6),
            output_shape=(h, w),
            out_channels=2,
            seed=5,
        )
        state = init_decoder(config)
        fitter_loss = float(loss_sensmap(state, y, maps).data)
        from umri.fitting import forward

        x = channels_to_complex(forward(state).data)[0]
        tv_objective = objective(x, y, TVConfig(lam=0.0), maps)
        assert tv_objective == pytest.approx(fitter_loss, abs=1e-12)

    def test_positive_lam_adds_weighted_tv(self, small_problem):
        y = small_problem["y"]
        maps = small_problem["maps"]
        x = small_problem["x"].astype(np.complex128)
        base = objective(x, y, TVConfig(lam=0.0), maps)
        cfg = TVConfig(lam=0.25)
        assert objective(x, y, cfg, maps) == pytest.approx(base + 0.25 * tv_norm(x, cfg.eps), rel=1e-12)


class TestTvReconstruct:
    def test_fully_sampled_lam_zero_recovers_zero_filled(self):
        h, w, n_c = 16, 12, 2
        x = smooth_image(h, w, seed=11)
        maps = norm_maps(n_c, h, w, seed=12)
        mask = Mask(w, tuple(range(w)), w // 2 - 1, w // 2 + 1)
        y = forward_multicoil(x, maps, mask)
        res = tv_reconstruct(y, TVConfig(lam=0.0, iterations=5), maps)
        zf = zero_filled(y)
        assert np.max(np.abs(res.image - zf)) / np.max(zf) < 1e-6

    def test_huge_lam_flattens_image(self, small_problem):
        cfg = TVConfig(lam=1e6, iterations=300, dc=False)
        res = tv_reconstruct(small_problem["y"], cfg, small_problem["maps"])
        spread = np.std(res.complex_image)
        scale = np.mean(np.abs(res.complex_image)) + 1e-12
        assert spread / scale < 0.05

    def test_deterministic(self, small_problem):
        cfg = TVConfig(iterations=30)
        a = tv_reconstruct(small_problem["y"], cfg, small_problem["maps"])
        b = tv_reconstruct(small_problem["y"], cfg, small_problem["maps"])
        np.testing.assert_array_equal(a.image, b.image)

    def test_image_is_magnitude_of_complex_result(self, small_problem):
        res = tv_reconstruct(small_problem["y"], TVConfig(iterations=20), small_problem["maps"])
        np.testing.assert_array_equal(res.image, np.abs(res.complex_image))
        assert res.objective_trace[-1][0] == 20

    def test_works_without_maps(self, small_problem):
        res = tv_reconstruct(small_problem["y"], TVConfig(iterations=20))
        assert res.image.shape == small_problem["x"].shape
        assert np.all(np.isfinite(res.image))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_measurement_raises(self, small_problem):
        data = small_problem["y"].data.copy()
        data[0, 0, list(small_problem["mask"].sampled_columns)[0]] = np.nan
        bad = CoilMeasurement(data, small_problem["mask"])
        with pytest.raises(FitDivergenceError) as err:
            tv_reconstruct(bad, TVConfig(iterations=5), small_problem["maps"])
        assert err.value.iteration == 0

    def test_maps_shape_mismatch_rejected(self, small_problem):
        wrong = norm_maps(2, 32, 24, seed=13)
        with pytest.raises(ValueError):
            tv_reconstruct(small_problem["y"], TVConfig(iterations=5), wrong)


class TestConfigValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            TVConfig(lam=-1.0)
        with pytest.raises(ValueError):
            TVConfig(iterations=0)
        with pytest.raises(ValueError):
            TVConfig(eps=0.0)
        with pytest.raises(ValueError):
            TVConfig(stepsize=0.0)


class TestShippedPhantomTrace:
    def test_objective_nonincreasing_at_defaults(self):
        spec = PhantomSpec(seed=1234)
        img, support = make_phantom(spec)
        maps = make_sens_maps(spec.n_coils, spec.height, spec.width, support)
        mask = make_mask(MaskSpec(width=spec.width, acceleration=4, seed=1234))
        y = simulate(img, maps, mask)
        res = tv_reconstruct(y, TVConfig(), maps)
        values = [v for _, v in res.objective_trace]
        drops = [b <= a for a, b in zip(values, values[1:])]
        assert all(drops)
        assert values[-1] < 0.15 * values[0]

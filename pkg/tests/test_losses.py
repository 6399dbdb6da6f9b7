import csv

import numpy as np
import pytest

from opinet import neural
from opinet.deeponet import DeepONetModel, ReceiverSet, SourceSpec
from opinet.errors import DimensionError, NumericError, ParameterError
from opinet.losses import (
    LossComponents,
    LossWeights,
    PhysicsConfig,
    data_loss,
    data_loss_grad,
    extract_features,
    feature_extractor,
    fd_laplacian,
    field_from_model,
    match_sources,
    mollified_source_field,
    mollified_source_field_grad,
    perceptual_loss,
    perceptual_loss_grad,
    physics_loss,
    physics_residuals,
    source_loss,
    source_loss_grad,
    stencil_points,
    total_loss,
    write_loss_report,
)
from opinet.tensorcore import Rng


def interior_receivers(n=9):
    xs = np.linspace(0.2, 0.8, int(np.sqrt(n)))
    pts = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    return ReceiverSet(pts)


class TestDataLoss:
    def test_identity_is_zero(self):
        v = np.array([1.0, -2.0, 3.0])
        assert data_loss(v, v) == 0.0

    def test_unit_offset(self):
        obs = np.linspace(0, 1, 10)
        assert data_loss(obs + 1.0, obs) == pytest.approx(1.0, rel=1e-15)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(5)
        pred = rng.normal(size=5)
        obs = rng.normal(size=5)
        want = sum((p - o) ** 2 for p, o in zip(pred, obs)) / 5
        assert data_loss(pred, obs) == pytest.approx(want, rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            data_loss(np.zeros(3), np.zeros(4))

    def test_gradient_formula(self):
        rng = np.random.default_rng(6)
        pred = rng.normal(size=7)
        obs = rng.normal(size=7)
        loss, grad = data_loss_grad(pred, obs)
        assert loss == pytest.approx(data_loss(pred, obs))
        assert np.allclose(grad, 2.0 * (pred - obs) / 7, rtol=1e-15)


class TestPhysicsLoss:
    def cfg(self, **kw):
        return PhysicsConfig(**kw)

    def test_helmholtz_eigenfunction_residual_small(self):
        k = 1.0
        cfg = self.cfg(wavenumber=k, fd_step=1e-3)

        def field(pts):
            return np.sin(k * pts[:, 0])

        loss = physics_loss(field, [], interior_receivers(), cfg)
        assert loss <= 1e-5

    def test_zero_field_zero_forcing(self):
        def field(pts):
            return np.zeros(pts.shape[0])

        assert physics_loss(field, [], interior_receivers(), self.cfg()) == 0.0

    def test_quadratic_with_zero_wavenumber(self):
        cfg = self.cfg(wavenumber=0.0, fd_step=1e-3)

        def field(pts):
            return pts[:, 0] ** 2

        r = physics_residuals(field, [], interior_receivers(), cfg)
        assert np.all(np.abs(r - 2.0) < 1e-6)
        assert physics_loss(field, [], interior_receivers(), cfg) == pytest.approx(
            4.0, abs=1e-5
        )

    def test_laplacian_converges_at_second_order(self):
        pts = interior_receivers(9).points

        def field(p):
            return np.sin(p[:, 0]) * np.sin(p[:, 1])

        analytic = -2.0 * np.sin(pts[:, 0]) * np.sin(pts[:, 1])

        def fd_err(h):
            vals = field(stencil_points(pts, h))
            return np.max(np.abs(fd_laplacian(vals, pts.shape[0], h) - analytic))

        assert fd_err(2e-2) / fd_err(1e-2) >= 3.5

    def test_boundary_proximity_rejected_with_offenders(self):
        cfg = self.cfg(fd_step=1e-2)
        pts = np.array([[0.5, 0.5], [0.015, 0.5], [0.5, 0.999]])
        with pytest.raises(ParameterError) as err:
            physics_loss(lambda p: np.zeros(p.shape[0]), [], ReceiverSet(pts), cfg)
        assert "1" in str(err.value) and "2" in str(err.value)

    def test_fd_step_must_resolve_receiver_spacing(self):
        cfg = self.cfg(fd_step=0.3)
        pts = np.array([[0.7, 0.7], [0.7, 0.8]])
        with pytest.raises(ParameterError):
            physics_loss(lambda p: np.zeros(p.shape[0]), [], ReceiverSet(pts), cfg)

    def test_forcing_shifts_residual(self):
        cfg = self.cfg(wavenumber=0.0, sigma=0.05)
        src = SourceSpec((0.5, 0.5), (2.0, 0.0))
        rec = ReceiverSet(np.array([[0.5, 0.5]]))
        r = physics_residuals(lambda p: np.zeros(p.shape[0]), [src], rec, cfg)
        peak = 2.0 / (2.0 * np.pi * 0.05**2)
        assert r[0] == pytest.approx(-peak, rel=1e-12)

    def test_model_backed_field_runs(self):
        rng = Rng(3)
        branch = neural.mlp(neural.dense_stack([4, 8, 4]), rng)
        trunk = neural.mlp(neural.dense_stack([2, 8, 4]), rng)
        head = neural.mlp(neural.dense_stack([3, 8, 8]), rng)
        model = DeepONetModel(branch, trunk, head, latent_dim=4, n_max=2)
        src = [SourceSpec((0.4, 0.6), (1.0, 0.0))]
        loss = physics_loss(field_from_model(model, src), src, interior_receivers(4), self.cfg())
        assert np.isfinite(loss) and loss >= 0.0

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            PhysicsConfig(wavenumber=-1.0)
        with pytest.raises(ParameterError):
            PhysicsConfig(fd_step=0.0)
        with pytest.raises(ParameterError):
            PhysicsConfig(sigma=-0.1)


class TestMollifier:
    def test_mass_matches_amplitude_by_quadrature(self):
        sigma = 0.03
        src = SourceSpec((0.5, 0.5), (1.7, 0.3))
        n = 401
        xs = np.linspace(0.0, 1.0, n)
        grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        f = mollified_source_field(grid, [src], sigma)
        cell = (xs[1] - xs[0]) ** 2
        mass = float(np.sum(f) * cell)
        assert mass == pytest.approx(1.7, rel=0.01)

    def test_empty_sources_give_zero(self):
        pts = interior_receivers(4).points
        assert np.array_equal(mollified_source_field(pts, [], 0.05), np.zeros(4))

    def test_source_order_irrelevant_bitwise(self):
        pts = interior_receivers(9).points
        a = SourceSpec((0.3, 0.3), (1.0, 0.0))
        b = SourceSpec((0.7, 0.6), (-0.5, 0.0))
        assert np.array_equal(
            mollified_source_field(pts, [a, b], 0.05),
            mollified_source_field(pts, [b, a], 0.05),
        )

    def test_gradients_match_central_differences(self):
        pts = interior_receivers(4).points
        locs = np.array([[0.35, 0.55], [0.65, 0.4]])
        amps = np.array([1.2, -0.7])
        sigma = 0.08
        f, df_dloc, df_damp = mollified_source_field_grad(pts, locs, amps, sigma)
        assert np.allclose(
            f,
            mollified_source_field(
                pts,
                [SourceSpec(tuple(locs[j]), (amps[j], 0.0)) for j in range(2)],
                sigma,
            ),
            rtol=1e-12,
        )

        h = 1e-6
        for j in range(2):
            for axis in range(2):
                lp, lm = locs.copy(), locs.copy()
                lp[j, axis] += h
                lm[j, axis] -= h
                fp = mollified_source_field_grad(pts, lp, amps, sigma)[0]
                fm = mollified_source_field_grad(pts, lm, amps, sigma)[0]
                num = (fp - fm) / (2 * h)
                assert np.allclose(df_dloc[:, j, axis], num, rtol=1e-6, atol=1e-8)
            ap, am = amps.copy(), amps.copy()
            ap[j] += h
            am[j] -= h
            num = (
                mollified_source_field_grad(pts, locs, ap, sigma)[0]
                - mollified_source_field_grad(pts, locs, am, sigma)[0]
            ) / (2 * h)
            assert np.allclose(df_damp[:, j], num, rtol=1e-6, atol=1e-10)


class TestSourceLoss:
    def test_identity_is_zero(self):
        specs = [SourceSpec((0.2, 0.3), (1.0, -0.5)), SourceSpec((0.8, 0.1), (0.0, 2.0))]
        assert source_loss(specs, specs) == 0.0

    def test_three_four_five_location_offset(self):
        truth = [SourceSpec((0.1, 0.2), (1.0, 1.0))]
        pred = [SourceSpec((0.4, 0.6), (1.0, 1.0))]
        assert source_loss(pred, truth) == pytest.approx(0.25, rel=1e-12)

    def test_swapped_lists_match_unswapped(self):
        truth = [SourceSpec((0.2, 0.2), (1.0, 0.0)), SourceSpec((0.8, 0.8), (0.5, 0.5))]
        pred = [SourceSpec((0.25, 0.2), (0.9, 0.0)), SourceSpec((0.75, 0.8), (0.6, 0.5))]
        assert source_loss(pred, truth) == pytest.approx(
            source_loss(pred[::-1], truth), rel=1e-12
        )
        assert source_loss(pred, truth) == pytest.approx(
            source_loss(pred, truth[::-1]), rel=1e-12
        )

    def test_assignment_resolves_crossed_labels(self):
        truth = [SourceSpec((0.0, 0.0), (1.0, 0.0)), SourceSpec((1.0, 1.0), (2.0, 0.0))]
        pred = [truth[1], truth[0]]
        assert source_loss(pred, truth) == 0.0
        assert list(match_sources(pred, truth)) == [1, 0]

    def test_count_mismatch(self):
        with pytest.raises(DimensionError):
            source_loss([SourceSpec((0.5, 0.5), (1.0, 0.0))], [])

    def test_gradients_match_central_differences(self):
        truth = [SourceSpec((0.2, 0.2), (1.0, -1.0)), SourceSpec((0.8, 0.7), (0.5, 0.5))]
        locs = np.array([[0.3, 0.25], [0.7, 0.75]])
        strs = np.array([[0.8, -0.9], [0.6, 0.4]])

        def loss_of(lc, st):
            pred = [SourceSpec(tuple(lc[j]), tuple(st[j])) for j in range(2)]
            return source_loss(pred, truth)

        pred = [SourceSpec(tuple(locs[j]), tuple(strs[j])) for j in range(2)]
        _, dloc, dstr = source_loss_grad(pred, truth)
        h = 1e-7
        for j in range(2):
            for a in range(2):
                lp, lm = locs.copy(), locs.copy()
                lp[j, a] += h
                lm[j, a] -= h
                num = (loss_of(lp, strs) - loss_of(lm, strs)) / (2 * h)
                assert dloc[j, a] == pytest.approx(num, rel=1e-6, abs=1e-9)
                sp, sm = strs.copy(), strs.copy()
                sp[j, a] += h
                sm[j, a] -= h
                num = (loss_of(locs, sp) - loss_of(locs, sm)) / (2 * h)
                assert dstr[j, a] == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestPerceptualLoss:
    def test_identity_is_zero(self):
        fx = feature_extractor(1)
        img = np.random.default_rng(0).uniform(0.2, 0.8, size=(8, 8))
        assert perceptual_loss(img, img, fx) == 0.0

    def test_zero_vs_one_strictly_positive(self):
        fx = feature_extractor(1)
        assert perceptual_loss(np.zeros((8, 8)), np.ones((8, 8)), fx) > 0.0

    def test_gradient_matches_central_differences(self):
        fx = feature_extractor(1)
        rng = np.random.default_rng(1)
        pred = rng.uniform(0.2, 0.8, size=(8, 8))
        obs = rng.uniform(0.2, 0.8, size=(8, 8))
        _, grad = perceptual_loss_grad(pred, obs, fx)

        h = 1e-4
        num = np.zeros_like(pred)
        for i in range(8):
            for j in range(8):
                up, dn = pred.copy(), pred.copy()
                up[i, j] += h
                dn[i, j] -= h
                num[i, j] = (
                    perceptual_loss(up, obs, fx) - perceptual_loss(dn, obs, fx)
                ) / (2 * h)
        assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-4

    def test_rgb_path_and_feature_shape(self):
        fx = feature_extractor(3)
        img = np.random.default_rng(2).uniform(0.2, 0.8, size=(3, 8, 8))
        feats = extract_features(fx, img)
        assert feats.shape == (64, 1, 1)
        assert perceptual_loss(img, img, fx) == 0.0

    def test_shape_mismatch(self):
        fx = feature_extractor(1)
        with pytest.raises(DimensionError):
            perceptual_loss(np.zeros((8, 8)), np.zeros((16, 16)), fx)

    def test_channel_mismatch(self):
        fx = feature_extractor(3)
        with pytest.raises(DimensionError):
            perceptual_loss(np.zeros((8, 8)), np.zeros((8, 8)), fx)

    def test_weights_frozen_and_reproducible(self):
        a = feature_extractor(1)
        b = feature_extractor(1)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        with pytest.raises(ValueError):
            a.weights[0][0, 0, 0, 0] = 1.0

    def test_unsupported_channel_count(self):
        with pytest.raises(ParameterError):
            feature_extractor(2)


class TestTotalLoss:
    def test_published_weights_on_unit_components(self):
        total, report = total_loss(LossComponents(1.0, 1.0, 1.0, 1.0))
        assert total == pytest.approx(2.0, rel=1e-15)
        assert report["phys"]["weighted"] == pytest.approx(0.5)

    def test_all_zero(self):
        total, _ = total_loss(LossComponents(0.0, 0.0, 0.0, 0.0))
        assert total == 0.0

    def test_projection_onto_data(self):
        w = LossWeights(1.0, 0.0, 0.0, 0.0)
        total, _ = total_loss(LossComponents(0.7, 5.0, 5.0, 5.0), w)
        assert total == pytest.approx(0.7, rel=1e-15)

    def test_disabled_components_report_and_contribute_zero(self):
        total, report = total_loss(LossComponents(data=0.5, phys=0.25))
        assert total == pytest.approx(1.0 * 0.5 + 0.5 * 0.25, rel=1e-15)
        assert report["perceptual"]["enabled"] is False
        assert report["perceptual"]["weighted"] == 0.0
        assert report["source"]["enabled"] is False

    def test_non_finite_component_named(self):
        with pytest.raises(NumericError) as err:
            total_loss(LossComponents(1.0, float("nan"), 0.0, 0.0))
        assert "phys" in str(err.value)
        with pytest.raises(NumericError) as err:
            total_loss(LossComponents(1.0, 0.0, float("inf"), 0.0))
        assert "source" in str(err.value)

    def test_linear_in_each_component(self):
        base = LossComponents(0.3, 0.4, 0.5, 0.6)
        t0, _ = total_loss(base)
        t1, _ = total_loss(LossComponents(0.3, 0.4 + 2.0, 0.5, 0.6))
        assert t1 - t0 == pytest.approx(0.5 * 2.0, rel=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ParameterError):
            LossWeights(alpha=-0.1)

    def test_default_weights_are_published_values(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.gamma, w.delta) == (1.0, 0.5, 0.2, 0.3)

    def test_report_csv_roundtrip(self, tmp_path):
        rows = [
            {
                "step": 0,
                "L_data": 1.0,
                "L_phys": 0.5,
                "L_source": 0.2,
                "L_perceptual": 0.0,
                "L_ntk": 0.01,
                "total": 1.85,
            }
        ]
        path = tmp_path / "loss.csv"
        write_loss_report(path, rows)
        with open(path, newline="") as f:
            back = list(csv.DictReader(f))
        assert list(back[0].keys()) == [
            "step",
            "L_data",
            "L_phys",
            "L_source",
            "L_perceptual",
            "L_ntk",
            "total",
        ]
        assert float(back[0]["total"]) == pytest.approx(1.85)


class TestStencil:
    def test_layout(self):
        pts = np.array([[0.5, 0.5], [0.3, 0.7]])
        s = stencil_points(pts, 0.1)
        assert s.shape == (10, 2)
        assert np.allclose(s[2], [0.6, 0.5])
        assert np.allclose(s[4], [0.4, 0.5])
        assert np.allclose(s[7], [0.3, 0.8])
        assert np.allclose(s[9], [0.3, 0.6])

    def test_laplacian_of_programmed_values(self):
        # u0=1 at both points; neighbors 2,0,3,-1 -> (2+0+3-1-4)/h^2 = 0
        vals = np.array([1.0, 1.0, 2.0, 2.0, 0.0, 0.0, 3.0, 3.0, -1.0, -1.0])
        lap = fd_laplacian(vals, 2, 0.5)
        assert np.allclose(lap, [0.0, 0.0])

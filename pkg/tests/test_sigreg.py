"""Tests for sigreg.py: knots, directions, SIGReg, invariance, combined objectives."""

from __future__ import annotations

import numpy as np
import pytest

from fusejepa import gradcore as gc
from fusejepa.errors import ConfigError, ShapeError
from fusejepa.gradcore import DiffArray
from fusejepa.sigreg import (
    SigRegConfig,
    collapsed_loss,
    combined_loss,
    combined_terms,
    directions_for_step,
    empirical_cf,
    invariance_loss,
    make_knots,
    sample_directions,
    sampling_floor,
    sigreg_loss,
    three_pass_sigreg,
    three_pass_terms,
)
from fusejepa.types import ViewBatch


def _views(seed: int = 0, batch: int = 6, dim: int = 4) -> ViewBatch:
    rng = np.random.default_rng(seed)
    return ViewBatch(
        globals=[DiffArray(rng.standard_normal((batch, dim))) for _ in range(2)],
        locals=[DiffArray(rng.standard_normal((batch, dim))) for _ in range(3)],
    )


class TestKnots:
    def test_trapezoid_weights(self):
        knots, weights = make_knots(3, 3.0)
        np.testing.assert_allclose(knots, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(weights, [0.75, 1.5, 0.75])

    def test_weights_sum_to_t_max(self):
        knots, weights = make_knots(64, 4.0)
        assert weights.sum() == pytest.approx(4.0)
        assert knots[0] > 0.0
        assert knots[-1] == pytest.approx(4.0)

    @pytest.mark.parametrize("num_knots", [64, 128])
    def test_quadrature_converges(self, num_knots):
        fine = collapsed_loss(SigRegConfig.create(num_knots=1024, dim=4))
        coarse = collapsed_loss(SigRegConfig.create(num_knots=num_knots, dim=4))
        assert coarse == pytest.approx(fine, rel=0.02)

    def test_too_few_knots(self):
        with pytest.raises(ConfigError):
            make_knots(1, 4.0)

    def test_nonpositive_t_max(self):
        with pytest.raises(ConfigError):
            make_knots(8, 0.0)


class TestConfig:
    def test_lambda_range(self):
        with pytest.raises(ConfigError):
            SigRegConfig.create(lam=1.5)

    def test_policy_checked(self):
        with pytest.raises(ConfigError):
            SigRegConfig.create(direction_policy="sometimes")

    def test_from_run(self, tiny_run):
        cfg = SigRegConfig.from_run(tiny_run)
        assert cfg.num_directions == 4
        assert cfg.num_knots == 8
        assert cfg.dim == 4
        assert cfg.lam == pytest.approx(0.1)


class TestDirections:
    def test_unit_norm_and_deterministic(self):
        a = sample_directions(8, 16, [0, 3])
        b = sample_directions(8, 16, [0, 3])
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)

    def test_resampled_per_step(self):
        cfg = SigRegConfig.create(num_directions=8, dim=16)
        assert not np.array_equal(directions_for_step(cfg, 0, 1), directions_for_step(cfg, 0, 2))

    def test_fixed_policy(self):
        cfg = SigRegConfig.create(num_directions=8, dim=16, direction_policy="fixed")
        np.testing.assert_array_equal(directions_for_step(cfg, 0, 1), directions_for_step(cfg, 0, 50))

    def test_isotropic(self):
        # uniform on S^7: E[u] = 0, E[u u^T] = I/8, E[u_i^4] = 3/(8 * 10)
        dirs = sample_directions(10_000, 8, 0)
        np.testing.assert_allclose(dirs.mean(axis=0), 0.0, atol=0.02)
        np.testing.assert_allclose(dirs.T @ dirs / 10_000, np.eye(8) / 8, atol=0.01)
        assert np.mean(dirs**4) == pytest.approx(3 / 80, abs=0.002)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            sample_directions(0, 4, 0)


class TestSigRegLoss:
    def test_collapsed_matches_closed_form(self):
        cfg = SigRegConfig.create(num_directions=1, dim=4)
        dirs = sample_directions(1, 4, 0)
        loss = sigreg_loss(DiffArray(np.zeros((8, 4))), dirs, cfg).item()
        assert abs(loss - collapsed_loss(cfg)) < 1e-9

    def test_collapsed_closed_form_any_k(self):
        cfg = SigRegConfig.create(num_directions=5, dim=4)
        loss = sigreg_loss(DiffArray(np.zeros((8, 4))), sample_directions(5, 4, 1), cfg).item()
        assert loss == pytest.approx(collapsed_loss(cfg), abs=1e-9)

    def test_gaussian_near_floor(self):
        cfg = SigRegConfig.create(num_directions=16, num_knots=64, dim=16)
        dirs = sample_directions(16, 16, 0)
        floor = sampling_floor(4096, cfg, dirs, draws=50)
        z = DiffArray(np.random.default_rng(123).standard_normal((4096, 16)))
        with gc.no_grad():
            loss = sigreg_loss(z, dirs, cfg).item()
        assert loss <= 5.0 * floor
        assert loss < 0.01 * collapsed_loss(cfg)

    def test_batch_order_irrelevant(self):
        cfg = SigRegConfig.create(num_directions=5, num_knots=16, dim=4)
        dirs = sample_directions(5, 4, 0)
        z = np.random.default_rng(3).standard_normal((12, 4))
        perm = np.random.default_rng(4).permutation(12)
        loss = sigreg_loss(DiffArray(z), dirs, cfg).item()
        assert sigreg_loss(DiffArray(z[perm]), dirs, cfg).item() == pytest.approx(loss, rel=1e-12)

    def test_direction_order_irrelevant(self):
        cfg = SigRegConfig.create(num_directions=5, num_knots=16, dim=4)
        dirs = sample_directions(5, 4, 0)
        z = DiffArray(np.random.default_rng(3).standard_normal((12, 4)))
        loss = sigreg_loss(z, dirs, cfg).item()
        assert sigreg_loss(z, dirs[::-1], cfg).item() == pytest.approx(loss, rel=1e-12)
        assert sigreg_loss(z, dirs[[2, 0, 4, 1, 3]], cfg).item() == pytest.approx(loss, rel=1e-12)

    def test_constant_batch_cf(self):
        cfg = SigRegConfig.create(num_directions=3, num_knots=16, dim=4)
        dirs = sample_directions(3, 4, 7)
        c = np.array([0.3, -0.2, 0.5, 0.1])
        z = DiffArray(np.tile(c, (8, 1)))
        c_hat, s_hat = empirical_cf(z, dirs, cfg.knots)
        arg = (dirs @ c)[:, None] * cfg.knots[None, :]
        np.testing.assert_allclose(s_hat.values, np.sin(arg), atol=1e-12)
        np.testing.assert_allclose(c_hat.values, np.cos(arg), atol=1e-12)
        expected = np.sum(cfg.weights * ((np.cos(arg) - np.exp(-0.5 * cfg.knots**2)) ** 2 + np.sin(arg) ** 2)) / 3
        assert sigreg_loss(z, dirs, cfg).item() == pytest.approx(expected, rel=1e-10)

    def test_nonnegative(self):
        cfg = SigRegConfig.create(num_directions=4, dim=3)
        z = DiffArray(np.random.default_rng(0).uniform(-5, 5, (10, 3)))
        assert sigreg_loss(z, sample_directions(4, 3, 0), cfg).item() >= 0.0

    def test_rejects_single_row(self):
        cfg = SigRegConfig.create(num_directions=2, dim=3)
        with pytest.raises(ShapeError):
            sigreg_loss(DiffArray(np.zeros((1, 3))), sample_directions(2, 3, 0), cfg)

    def test_rejects_flat_input(self):
        cfg = SigRegConfig.create(num_directions=2, dim=3)
        with pytest.raises(ShapeError):
            sigreg_loss(DiffArray(np.zeros(3)), sample_directions(2, 3, 0), cfg)

    def test_rejects_dim_mismatch(self):
        cfg = SigRegConfig.create(num_directions=2, dim=3)
        with pytest.raises(ShapeError):
            sigreg_loss(DiffArray(np.zeros((4, 3))), sample_directions(2, 5, 0), cfg)


class TestInvarianceLoss:
    def test_distance_to_global_center(self):
        views = ViewBatch(
            globals=[DiffArray([[1.0, 0.0], [1.0, 0.0]]), DiffArray([[-1.0, 0.0], [-1.0, 0.0]])],
            locals=[DiffArray([[0.0, 2.0], [0.0, 2.0]])],
        )
        assert invariance_loss(views).item() == pytest.approx(2.0)

    def test_identical_views_give_zero(self):
        z = np.random.default_rng(0).standard_normal((4, 3))
        views = ViewBatch([DiffArray(z), DiffArray(z)], [DiffArray(z)])
        assert invariance_loss(views).item() == pytest.approx(0.0, abs=1e-15)

    def test_view_at_center_lowers_loss(self):
        views = _views()
        center = np.mean([g.values for g in views.globals], axis=0)
        before = invariance_loss(views).item()
        after = invariance_loss(ViewBatch(views.globals, [*views.locals, DiffArray(center)])).item()
        assert after < before

    def test_shape_disagreement(self):
        views = ViewBatch([DiffArray(np.zeros((4, 3)))], [DiffArray(np.zeros((4, 2)))])
        with pytest.raises(ShapeError):
            invariance_loss(views)

    def test_needs_global_view(self):
        with pytest.raises(ValueError):
            invariance_loss(ViewBatch([], [DiffArray(np.zeros((4, 3)))]))


class TestCombined:
    def test_lambda_zero_is_invariance(self):
        cfg = SigRegConfig.create(lam=0.0, num_directions=4, dim=4)
        views = _views()
        dirs = sample_directions(4, 4, 0)
        assert combined_loss(views, dirs, cfg).item() == invariance_loss(views).item()

    def test_lambda_one_is_sigreg(self):
        cfg = SigRegConfig.create(lam=1.0, num_directions=4, dim=4)
        views = _views()
        dirs = sample_directions(4, 4, 0)
        terms = combined_terms(views, dirs, cfg)
        assert terms.total.item() == terms.sigreg.item()

    def test_mixture(self):
        cfg = SigRegConfig.create(lam=0.25, num_directions=4, dim=4)
        terms = combined_terms(_views(), sample_directions(4, 4, 0), cfg)
        expected = 0.25 * terms.sigreg.item() + 0.75 * terms.inv.item()
        assert terms.total.item() == pytest.approx(expected, rel=1e-12)

    def test_sigreg_sees_all_views(self):
        cfg = SigRegConfig.create(num_directions=4, dim=4)
        views = _views(batch=6)
        dirs = sample_directions(4, 4, 0)
        stacked = gc.concat(views.all_views(), axis=0)
        assert stacked.shape == (30, 4)
        expected = sigreg_loss(stacked, dirs, cfg).item()
        assert combined_terms(views, dirs, cfg).sigreg.item() == expected


class TestThreePass:
    def test_mean_of_three(self):
        cfg = SigRegConfig.create(num_directions=4, dim=4)
        dirs = sample_directions(4, 4, 0)
        rng = np.random.default_rng(1)
        zs = [DiffArray(rng.standard_normal((8, 4))) for _ in range(3)]
        singles = [sigreg_loss(z, dirs, cfg).item() for z in zs]
        assert three_pass_sigreg(*zs, dirs, cfg).item() == pytest.approx(np.mean(singles), abs=1e-12)

    def test_identical_inputs(self):
        cfg = SigRegConfig.create(num_directions=4, dim=4)
        dirs = sample_directions(4, 4, 0)
        z = DiffArray(np.random.default_rng(2).standard_normal((8, 4)))
        single = sigreg_loss(z, dirs, cfg).item()
        assert three_pass_sigreg(z, z, z, dirs, cfg).item() == single

    def test_grad_check(self):
        cfg = SigRegConfig.create(num_directions=3, num_knots=8, dim=4)
        dirs = sample_directions(3, 4, 0)
        rng = np.random.default_rng(5)
        rgb, mod = DiffArray(rng.standard_normal((6, 4))), DiffArray(rng.standard_normal((6, 4)))
        z = DiffArray(rng.standard_normal((6, 4)), requires_grad=True)
        report = gc.grad_check(lambda v: three_pass_sigreg(v, rgb, mod, dirs, cfg), z)
        assert report.passed, report.max_rel_error

    def test_shape_mismatch(self):
        cfg = SigRegConfig.create(num_directions=4, dim=4)
        dirs = sample_directions(4, 4, 0)
        a, b = DiffArray(np.zeros((8, 4))), DiffArray(np.zeros((6, 4)))
        with pytest.raises(ShapeError):
            three_pass_sigreg(a, a, b, dirs, cfg)

    def test_collapsed_single_modality_passes(self):
        cfg = SigRegConfig.create(lam=0.5, num_directions=4, dim=4)
        dirs = sample_directions(4, 4, 0)
        joint = _views(0)
        collapsed = ViewBatch(
            globals=[DiffArray(np.zeros((6, 4))) for _ in range(2)],
            locals=[DiffArray(np.zeros((6, 4))) for _ in range(3)],
        )
        terms = three_pass_terms(joint, collapsed, collapsed, dirs, cfg)
        joint_sig = sigreg_loss(gc.concat(joint.all_views(), axis=0), dirs, cfg).item()
        expected = (joint_sig + 2 * collapsed_loss(cfg)) / 3
        assert terms.sigreg.item() == pytest.approx(expected, rel=1e-12)

    def test_invariance_from_joint_only(self):
        cfg = SigRegConfig.create(lam=0.5, num_directions=4, dim=4)
        dirs = sample_directions(4, 4, 0)
        joint, rgb, mod = _views(0), _views(1), _views(2)
        terms = three_pass_terms(joint, rgb, mod, dirs, cfg)
        assert terms.inv.item() == invariance_loss(joint).item()

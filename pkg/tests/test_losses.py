import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emma_fusion.errors import InputError, ShapeError
from emma_fusion.losses import (
    LossWeights,
    composite_distance,
    emma_total_loss,
    sensing_reconstruction_loss,
    sobel,
    traditional_fusion_loss,
)
from emma_fusion.transforms import TransformSpec, apply
from emma_fusion.verification import (
    reference_composite_distance,
    reference_mse,
    reference_sobel,
    reference_traditional_loss,
)

images = st.tuples(st.integers(3, 9), st.integers(3, 9)).flatmap(
    lambda hw: arrays(np.float64, hw, elements=st.floats(0, 1))
)


class TestSobel:
    def test_constant_image_has_no_gradient(self):
        assert np.all(sobel(np.full((6, 5), 0.25)) == 0)
        np.testing.assert_allclose(sobel(np.full((6, 5), 0.3)), 0, atol=1e-15)

    def test_vertical_step(self):
        x = np.zeros((6, 8))
        x[:, 4:] = 1.0
        gx, gy = sobel(x)
        peak = np.abs(gx).max()
        assert set(np.argwhere(np.abs(gx) == peak)[:, 1]) == {3, 4}
        assert np.all(gy[1:-1] == 0)

    def test_random_5x5_matches_sliding_window(self, rng):
        x = rng.random((5, 5))
        np.testing.assert_allclose(sobel(x), reference_sobel(x), atol=1e-12)

    def test_flip_equivariance_up_to_sign(self, rng):
        x = rng.random((7, 7))
        fh = TransformSpec(flip_h=True)
        gx, gy = sobel(x)
        gx_f, gy_f = sobel(apply(fh, x))
        np.testing.assert_allclose(gx_f, -apply(fh, gx), atol=1e-12)
        np.testing.assert_allclose(gy_f, apply(fh, gy), atol=1e-12)

    def test_batched_torch_shape(self):
        assert sobel(torch.zeros(2, 1, 8, 8)).shape == (2, 1, 2, 8, 8)

    def test_too_few_dims(self):
        with pytest.raises(ShapeError):
            sobel(np.zeros(4))


class TestCompositeDistance:
    def test_identity(self, rng):
        x = rng.random((6, 6))
        assert composite_distance(x, x) == 0.0

    def test_constant_images(self):
        assert composite_distance(np.zeros((4, 4)), np.ones((4, 4))) == 1.0

    def test_random_8x8_against_loops(self, rng):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        assert composite_distance(x, y) == pytest.approx(reference_composite_distance(x, y), abs=1e-12)

    @given(images)
    def test_nonnegative_and_symmetric(self, x):
        y = x[::-1].copy()
        d = composite_distance(x, y)
        assert d >= 0
        assert d == pytest.approx(composite_distance(y, x), abs=1e-12)

    @given(images, st.floats(0.01, 1))
    def test_zero_only_for_equal_images(self, x, delta):
        y = x.copy()
        y[0, 0] = x[0, 0] + delta
        assert composite_distance(x, y) > 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            composite_distance(np.zeros((3, 3)), np.zeros((3, 4)))


class TestSimpleLosses:
    def test_mse_trivial_cases(self):
        assert sensing_reconstruction_loss(np.ones((3, 3)), np.ones((3, 3))) == 0
        assert sensing_reconstruction_loss(np.zeros((3, 3)), np.ones((3, 3))) == 1

    def test_mse_against_loops(self, rng):
        a, b = rng.random((7, 5)), rng.random((7, 5))
        assert sensing_reconstruction_loss(a, b) == pytest.approx(reference_mse(a, b), abs=1e-12)

    def test_traditional_trivial_cases(self):
        x = np.full((2, 2), 0.4)
        assert traditional_fusion_loss(x, x, x) == 0
        assert traditional_fusion_loss(np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2))) == 2

    def test_traditional_against_loops(self, rng):
        f, i, v = rng.random((3, 6, 6))
        assert traditional_fusion_loss(f, i, v) == pytest.approx(reference_traditional_loss(f, i, v), abs=1e-12)


class TestTotalLoss:
    def test_all_identical_is_zero(self, rng):
        x = rng.random((6, 6))
        total, terms = emma_total_loss(x, x, x, x, x, x, x, LossWeights())
        assert total == 0 and set(terms) == {"sensing_i", "sensing_v", "equivariance"}

    def test_termwise_reference(self, rng):
        f, ft, fht, i, v, si, sv = rng.random((7, 8, 8))
        total, terms = emma_total_loss(f, ft, fht, i, v, si, sv, LossWeights(1.0, 0.1))
        ref_i = reference_composite_distance(si, i)
        ref_v = reference_composite_distance(sv, v)
        ref_e = reference_composite_distance(ft, fht)
        assert terms["sensing_i"] == pytest.approx(ref_i, abs=1e-12)
        assert terms["equivariance"] == pytest.approx(ref_e, abs=1e-12)
        assert total == pytest.approx(ref_i + ref_v + 0.1 * ref_e, abs=1e-12)

    def test_alpha2_zero_ignores_equivariance_pair(self, rng):
        f, i, v, si, sv = rng.random((5, 6, 6))
        w = LossWeights(1.0, 0.0)
        a, _ = emma_total_loss(f, f, f, i, v, si, sv, w)
        b, _ = emma_total_loss(f, rng.random((6, 6)), rng.random((6, 6)), i, v, si, sv, w)
        assert a == b

    def test_linear_in_weights(self, rng):
        args = rng.random((7, 5, 5))
        vals = {w: emma_total_loss(*args, LossWeights(*w))[0] for w in [(0, 0), (1, 0), (0, 1), (2, 3)]}
        base = vals[(0, 0)]
        pred = base + 2 * (vals[(1, 0)] - base) + 3 * (vals[(0, 1)] - base)
        assert vals[(2, 3)] == pytest.approx(pred, abs=1e-12)

    def test_torch_inputs_keep_graph(self):
        x = torch.rand(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
        y = torch.rand(1, 1, 6, 6, dtype=torch.float64)
        total, _ = emma_total_loss(x, x, y, y, y, x, x, LossWeights())
        total.backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()

    @pytest.mark.parametrize("bad", [(-1.0, 0.1), (1.0, float("nan")), (1.0, float("inf"))])
    def test_bad_weights(self, bad):
        with pytest.raises(InputError):
            LossWeights(*bad)

    def test_shape_mismatch(self, rng):
        args = list(rng.random((7, 4, 4)))
        args[3] = np.zeros((4, 5))
        with pytest.raises(ShapeError):
            emma_total_loss(*args, LossWeights())

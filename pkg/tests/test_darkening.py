import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from duskforge.autodiff import Tensor, backward, default_dtype, ops
from duskforge.darkening import (AdjustmentMaps, CurveFamily, DarkeningError, MappingEstimator, MappingEstimatorSpec,
                                 curve_f, darken, darken_image, estimate_maps, heuristic_darken)
from duskforge.diagnostics import gradcheck

LEARNABLE = ["iterative_quadratic", "gamma_curve", "reciprocal_curve"]
IDENTITY_ALPHA = {"iterative_quadratic": 0.0, "gamma_curve": 1.0, "reciprocal_curve": 0.0}

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
unit_arrays = hnp.arrays(np.float32, (3, 4, 4), elements=unit)


def test_quadratic_fixed_point_at_one():
    out = curve_f(np.ones(5, np.float32), np.linspace(0, 1, 5, dtype=np.float32))
    np.testing.assert_array_equal(out.data, 1.0)


def test_quadratic_zero_alpha_is_identity():
    x = np.linspace(0, 1, 11, dtype=np.float32)
    np.testing.assert_array_equal(curve_f(x, np.zeros_like(x)).data, x)


def test_quadratic_full_alpha_is_power_256():
    with default_dtype(np.float64):
        out = curve_f(np.array([0.9]), np.array([1.0])).item()
    assert out == pytest.approx(0.9 ** 256, rel=1e-9)
    assert out == pytest.approx(1.93e-12, rel=1e-2)


def test_gamma_unit_alpha_is_identity():
    x = np.linspace(0, 1, 11, dtype=np.float64)
    with default_dtype(np.float64):
        out = curve_f(x, np.ones_like(x), CurveFamily("gamma_curve")).data
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_darken_identity_maps_exact(rng):
    img = rng.uniform(0, 1, (3, 5, 5)).astype(np.float32)
    out = darken(img, AdjustmentMaps(np.zeros_like(img), np.ones_like(img))).data
    np.testing.assert_array_equal(out, img)


def test_darken_black_stays_black(rng):
    z = np.zeros((3, 4, 4), np.float32)
    maps = AdjustmentMaps(rng.uniform(0, 1, z.shape).astype(np.float32),
                          rng.uniform(0.05, 1, z.shape).astype(np.float32))
    np.testing.assert_array_equal(darken(z, maps).data, 0.0)


def test_darken_underflows_to_zero_in_f32():
    one = np.ones(1, np.float32)
    assert darken(np.array([0.5], np.float32), AdjustmentMaps(one, one)).item() == 0.0


def test_out_of_range_inputs_are_errors():
    with pytest.raises(DarkeningError):
        curve_f(np.array([1.5], np.float32), np.array([0.5], np.float32))
    with pytest.raises(DarkeningError):
        curve_f(np.array([0.5], np.float32), np.array([-0.1], np.float32))
    with pytest.raises(DarkeningError):
        CurveFamily("sepia")


def test_shape_mismatch_is_reported():
    with pytest.raises(ops.ShapeError):
        darken(np.zeros((3, 4, 4), np.float32), AdjustmentMaps(np.zeros((3, 4, 4)), np.ones((3, 2, 2))))


@pytest.mark.parametrize("tag", LEARNABLE)
@given(x=unit_arrays, a=unit_arrays, b=hnp.arrays(np.float32, (3, 4, 4), elements=st.floats(0.0625, 1.0, width=32)))
def test_darkening_range_and_bound(tag, x, a, b):
    out = darken(x, AdjustmentMaps(a, b), CurveFamily(tag)).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(out <= x + 1e-6)


@pytest.mark.parametrize("tag", LEARNABLE)
@given(x=unit_arrays)
def test_identity_parameter(tag, x):
    a = np.full_like(x, IDENTITY_ALPHA[tag])
    out = darken(x, AdjustmentMaps(a, np.ones_like(x)), CurveFamily(tag)).data
    np.testing.assert_allclose(out, x, atol=1e-6)


@pytest.mark.parametrize("tag", LEARNABLE)
@given(a=st.floats(0, 1), b=st.floats(0.05, 1))
def test_monotone_in_intensity(tag, a, b):
    x = np.linspace(0, 1, 257, dtype=np.float32)
    out = darken(x, AdjustmentMaps(np.full_like(x, a), np.full_like(x, b)), CurveFamily(tag)).data
    assert np.all(np.diff(out) >= -1e-7)


def test_per_iteration_maps_reduce_to_shared(rng):
    fam = CurveFamily(per_iteration_maps=True)
    x = rng.uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
    a = rng.uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
    stacked = np.concatenate([a] * fam.iterations, axis=1)
    np.testing.assert_allclose(curve_f(x, stacked, fam).data, curve_f(x, a).data, rtol=1e-6)


def test_heuristic_darkeners(rng):
    img = rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(heuristic_darken(img, CurveFamily("brightness")).data, 0.2 * img, rtol=1e-6)
    np.testing.assert_allclose(heuristic_darken(img, CurveFamily("gamma_correction")).data, img ** 3, rtol=1e-5)
    with pytest.raises(DarkeningError):
        curve_f(img, img, CurveFamily("brightness"))


# -- mapping estimator -----------------------------------------------------------------

def _net(seed=0, widths=(4, 4)):
    return MappingEstimator(MappingEstimatorSpec(list(widths)), CurveFamily(), np.random.default_rng(seed))


def test_estimated_maps_are_in_range(rng):
    net = _net()
    # push the heads hard in both directions
    net.head_a.bias.data[:] = 40.0
    net.head_b.bias.data[:] = -40.0
    img = rng.uniform(0, 1, (2, 3, 6, 6)).astype(np.float32)
    maps = estimate_maps(img, np.full((6, 6), 0.3, np.float32), net)
    assert maps.A.shape == img.shape and maps.B.shape == img.shape
    assert maps.A.data.min() >= 0 and maps.A.data.max() <= 1
    assert maps.B.data.min() >= 0.05 - 1e-7


def test_estimate_is_deterministic(rng):
    img = rng.uniform(0, 1, (3, 6, 6)).astype(np.float32)
    e = np.full((6, 6), 0.2, np.float32)
    m1, m2 = estimate_maps(img, e, _net(3)), estimate_maps(img, e, _net(3))
    assert m1.A.data.tobytes() == m2.A.data.tobytes() and m1.B.data.tobytes() == m2.B.data.tobytes()


def test_estimate_rejects_missing_network():
    with pytest.raises(DarkeningError):
        estimate_maps(np.zeros((3, 4, 4), np.float32), np.zeros((4, 4)), None)


def test_estimate_rejects_exposure_size_mismatch():
    with pytest.raises(ops.ShapeError):
        estimate_maps(np.zeros((3, 4, 4), np.float32), np.zeros((5, 5)), _net())


def test_mean_a_gradient_matches_finite_differences(rng):
    net = _net(1)
    img = rng.uniform(0, 1, (1, 3, 6, 6))
    e = np.full((6, 6), 0.25)

    def fn(k):
        net.body[0].weight = k
        return ops.mean(estimate_maps(img, e, net).A)

    with default_dtype(np.float64):
        result = gradcheck(fn, [net.body[0].weight.data.astype(np.float64)], name="mean_A")
    assert result.passed, result.as_dict()


def test_untrained_darken_image_is_valid(rng):
    img = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    out = darken_image(img, np.full((8, 8), 0.1, np.float32), _net(5)).data
    assert out.min() >= 0 and out.max() <= 1 and np.all(out <= img + 1e-6)


def test_initial_darkener_is_near_identity(rng):
    img = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
    out = darken_image(img, np.zeros((8, 8), np.float32), _net(5)).data
    assert np.abs(out - img).max() < 0.2


def test_darken_gradient_flows_to_maps(rng):
    x = rng.uniform(0.1, 0.9, (3, 4, 4))
    with default_dtype(np.float64):
        a = Tensor(rng.uniform(0, 1, x.shape), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 1, x.shape), requires_grad=True)
        backward(ops.sum(darken(x, AdjustmentMaps(a, b))))
    # more darkening can only lower the output
    assert np.all(a.grad <= 1e-12)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from duskforge.autodiff import Tensor, default_dtype
from duskforge.losses import (CollapseError, LossWeights, byol_loss, color_loss, cosine_similarity, exposure_loss,
                              flex_loss, ltv_loss, sim_loss_D, sim_loss_F, task_loss, total_loss_D, total_loss_F)
from duskforge.models import AdaptationModel, FeatureExtractorSpec, HeadSpec


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# -- similarity ----------------------------------------------------------------------

@pytest.mark.parametrize("a,b,expected", [
    ([1.0, 2.0], [1.0, 2.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, -3.0], [-1.0, 3.0], -1.0),
])
def test_sim_loss_d_examples(a, b, expected):
    assert sim_loss_D(t64([a]), t64([b])).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("z,expected", [([2.0, 0.0], 0.0), ([0.0, 5.0], 2.0), ([-1.0, 0.0], 4.0)])
def test_byol_examples(z, expected):
    assert byol_loss(t64([[3.0, 0.0]]), t64([z])).item() == pytest.approx(expected, abs=1e-12)


def test_zero_features_raise_collapse():
    with pytest.raises(CollapseError):
        sim_loss_D(t64([[0.0, 0.0]]), t64([[1.0, 0.0]]))
    with pytest.raises(CollapseError):
        byol_loss(t64([[1.0, 0.0]]), t64([[0.0, 0.0]]))


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-5, 5)), st.floats(0.1, 10))
def test_cosine_scale_invariant_and_bounded(a, s):
    if np.any(np.linalg.norm(a, axis=1) < 1e-3):
        return
    b = np.roll(a, 1, axis=1)
    c1 = cosine_similarity(t64(a), t64(b)).data
    c2 = cosine_similarity(t64(a * s), t64(b)).data
    np.testing.assert_allclose(c1, c2, atol=1e-12)
    assert np.all(np.abs(c1) <= 1 + 1e-12)


# -- exposure control ----------------------------------------------------------------

def test_exposure_examples():
    assert exposure_loss(np.full((3, 4, 4), 0.3), np.full((4, 4), 0.3)).item() == pytest.approx(0.0, abs=1e-7)
    assert exposure_loss(np.full((3, 4, 4), 0.1), np.full((4, 4), 0.4)).item() == pytest.approx(0.3, abs=1e-6)


def test_exposure_matches_double_loop(rng):
    d, e = rng.uniform(0, 1, (2, 3, 5, 6)), rng.uniform(0, 0.5, (2, 5, 6))
    total = 0.0
    for n in range(2):
        for i in range(5):
            for j in range(6):
                total += abs(sum(d[n, c, i, j] for c in range(3)) / 3 - e[n, i, j])
    with default_dtype(np.float64):
        assert exposure_loss(d, e).item() == pytest.approx(total / 60, abs=1e-6)


# -- loose total variation -------------------------------------------------------------

def test_ltv_constant_is_zero():
    assert ltv_loss(np.full((1, 3, 4, 4), 0.7)).item() == 0.0


def _pair_map(diff):
    a = np.zeros((1, 1, 2, 2))
    a[..., :, 1] = diff  # one horizontal difference per row, none vertically
    return a


@pytest.mark.parametrize("factor,expected", [(0.0, 0.0), (1.0, 0.01), (2.0, 0.0)])
def test_ltv_pair_contributions(factor, expected):
    alpha = 0.1
    with default_dtype(np.float64):
        # both horizontal pairs carry the same difference, so their mean is the per-pair value;
        # the two vertical pairs differ by zero
        value = ltv_loss(_pair_map(factor * alpha), alpha).item()
    assert value == pytest.approx(expected, abs=1e-12)


def _ltv_oracle(a, alpha):
    def h(x):
        return max(alpha - abs(abs(x) - alpha), 0.0)

    n, c, hh, ww = a.shape
    total = 0.0
    for b in range(n):
        for ch in range(c):
            sx = sum(h(a[b, ch, i, j + 1] - a[b, ch, i, j]) ** 2 for i in range(hh) for j in range(ww - 1))
            sy = sum(h(a[b, ch, i + 1, j] - a[b, ch, i, j]) ** 2 for i in range(hh - 1) for j in range(ww))
            total += sx / (hh * (ww - 1)) + sy / ((hh - 1) * ww)
    return total / n


def test_ltv_matches_nested_loops(rng):
    a = rng.uniform(0, 0.4, (2, 3, 5, 4))
    with default_dtype(np.float64):
        assert ltv_loss(a, 0.1).item() == pytest.approx(_ltv_oracle(a, 0.1), abs=1e-6)


def test_ltv_needs_two_pixels():
    from duskforge.autodiff import ShapeError
    with pytest.raises(ShapeError):
        ltv_loss(np.zeros((1, 1, 1, 4)))


# -- flex and colour -------------------------------------------------------------------

@pytest.mark.parametrize("b,expected", [(np.ones((3, 2, 2)), 0.0), (np.full((3, 2, 2), 0.5), 0.5),
                                        (np.array([0.25, 0.75] * 6).reshape(3, 2, 2), 0.5)])
def test_flex_examples(b, expected):
    assert flex_loss(t64(b)).item() == pytest.approx(expected, abs=1e-12)


def test_color_examples(rng):
    gray = np.repeat(rng.uniform(0, 1, (1, 1, 4, 4)), 3, axis=1)
    assert color_loss(gray).item() == pytest.approx(0.0, abs=1e-12)
    red = np.zeros((1, 3, 4, 4))
    red[:, 0] = 1.0
    assert color_loss(red).item() == pytest.approx(2.0, abs=1e-6)


def test_color_matches_direct_pairs(rng):
    d = rng.uniform(0, 1, (2, 3, 4, 4))
    m = d.mean(axis=(2, 3))
    expected = np.mean((m[:, 0] - m[:, 1]) ** 2 + (m[:, 0] - m[:, 2]) ** 2 + (m[:, 1] - m[:, 2]) ** 2)
    with default_dtype(np.float64):
        assert color_loss(d).item() == pytest.approx(expected, abs=1e-7)


def test_color_needs_three_channels():
    from duskforge.autodiff import ShapeError
    with pytest.raises(ShapeError):
        color_loss(np.zeros((1, 2, 4, 4)))


# -- weighted totals ---------------------------------------------------------------------

PARTS = ("l_sim_d", "l_c_exp", "l_col", "l_ltv", "l_flex")


def test_total_d_zero_weights():
    parts = {k: t64(1.5) for k in PARTS}
    zero = LossWeights(0, 0, 0, 0, 0, 0, 0)
    assert total_loss_D(parts, zero)[0].item() == 0.0


def test_total_d_single_weight():
    parts = {k: t64(3.0) for k in PARTS}
    w = LossWeights(0, 0, 2.0, 0, 0, 0, 0)
    assert total_loss_D(parts, w)[0].item() == pytest.approx(6.0)


def test_total_d_matches_logged_parts(rng):
    parts = {k: t64(v) for k, v in zip(PARTS, rng.uniform(0, 1, 5))}
    w = LossWeights()
    total, record = total_loss_D(parts, w)
    expected = (w.lambda_sim_D * record["l_sim_d"] + w.lambda_c_exp * record["l_c_exp"] + w.lambda_col * record["l_col"]
                + w.lambda_ltv * record["l_ltv"] + w.lambda_flex * record["l_flex"])
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert record["total"] == total.item()


def test_total_f_examples():
    sim, task = t64(0.7), t64(2.0)
    assert total_loss_F(sim, task, LossWeights(lambda_sim_F=3.0, lambda_task=0.0))[0].item() == pytest.approx(2.1)
    total, rec = total_loss_F(sim, task, LossWeights())
    assert total.item() == pytest.approx(rec["l_sim_f"] + rec["l_task"])


def test_uniform_logits_task_loss_is_log_classes():
    z = t64(np.zeros((4, 10)))
    assert task_loss(z, z, np.arange(4)).item() == pytest.approx(math.log(10), abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_col=-1)
    with pytest.raises(ValueError):
        LossWeights(alpha_ltv=0)


# -- symmetric BYOL on a real model -----------------------------------------------------------

def _model():
    return AdaptationModel(3, FeatureExtractorSpec([4, 6], 8, 3), HeadSpec(8, 5), 0.9, seed=2)


def test_sim_loss_f_symmetric(rng):
    model = _model()
    model.eval()
    a, b = rng.uniform(0, 1, (2, 3, 8, 8)), rng.uniform(0, 0.2, (2, 3, 8, 8))
    assert sim_loss_F(a, b, model, model.target).item() == pytest.approx(sim_loss_F(b, a, model, model.target).item(),
                                                                        rel=1e-6)


def test_sim_loss_f_zero_when_prediction_matches_target(rng):
    model = AdaptationModel(3, FeatureExtractorSpec([4, 6], 8, 3), HeadSpec(10, 5), 0.9, seed=2)
    model.eval()
    # relu(q) - relu(-q) = q, so this predictor is an exact identity
    eye = np.eye(5)
    model.head_z.fc1.weight.data[:] = np.hstack([eye, -eye])
    model.head_z.fc2.weight.data[:] = np.vstack([eye, -eye])
    model.head_z.fc1.bias.data[:] = 0.0
    model.head_z.fc2.bias.data[:] = 0.0
    x = rng.uniform(0, 1, (2, 3, 8, 8))
    assert sim_loss_F(x, x, model, model.target).item() == pytest.approx(0.0, abs=1e-5)

"""Registered finite-difference gradient checks for ops, losses and the two
composite training graphs. Inputs are at most 3x8x8 per image."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .autodiff import Tensor, default_dtype, ops
from .darkening import AdjustmentMaps, CurveFamily, MappingEstimator, MappingEstimatorSpec, curve_f, darken
from .diagnostics import GradcheckResult, gradcheck
from .models import AdaptationModel, FeatureExtractorSpec, HeadSpec


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator, np.dtype], tuple[Callable, list[np.ndarray]]]


def _u(rng, shape, dtype, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, size=shape).astype(dtype)


def _n(rng, shape, dtype):
    return rng.normal(size=shape).astype(dtype)


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection so that every output element matters
    return ops.sum(ops.mul(t, Tensor(w, dtype=t.dtype)))


def _elementwise(fn, lo=-2.0, hi=2.0):
    def build(rng, dt):
        x = rng.uniform(lo, hi, size=(3, 4)).astype(dt)
        w = _n(rng, fn(Tensor(x, dtype=dt)).shape, dt)
        return (lambda a: _weighted_sum(fn(a), w)), [x]
    return build


def _binary(fn, lo=0.5, hi=2.0):
    def build(rng, dt):
        a, b = rng.uniform(lo, hi, (3, 4)).astype(dt), rng.uniform(lo, hi, (1, 4)).astype(dt)
        w = _n(rng, (3, 4), dt)
        return (lambda x, y: _weighted_sum(fn(x, y), w)), [a, b]
    return build


def _conv(rng, dt):
    x, k, b = _n(rng, (2, 3, 6, 6), dt), _n(rng, (4, 3, 3, 3), dt), _n(rng, (4,), dt)
    w = _n(rng, (2, 4, 3, 3), dt)
    return (lambda x_, k_, b_: _weighted_sum(ops.conv2d(x_, k_, b_, stride=2, padding=1), w)), [x, k, b]


def _batch_norm(rng, dt):
    x, g, b = _n(rng, (4, 3, 2, 2), dt), _u(rng, (3,), dt, 0.5, 1.5), _n(rng, (3,), dt)
    w = _n(rng, x.shape, dt)
    return (lambda x_, g_, b_: _weighted_sum(ops.batch_norm(x_, g_, b_)[0], w)), [x, g, b]


def _cross_entropy(rng, dt):
    logits = _n(rng, (4, 5), dt)
    labels = rng.integers(0, 5, size=4)
    return (lambda z: ops.cross_entropy(z, labels)), [logits]


def _matmul(rng, dt):
    a, b = _n(rng, (3, 4), dt), _n(rng, (4, 2), dt)
    w = _n(rng, (3, 2), dt)
    return (lambda x, y: _weighted_sum(ops.matmul(x, y), w)), [a, b]


def _avgpool(rng, dt):
    x, w = _n(rng, (1, 2, 4, 4), dt), _n(rng, (1, 2, 2, 2), dt)
    return (lambda a: _weighted_sum(ops.avgpool2d(a, 2), w)), [x]


def _sim_d(rng, dt):
    return (lambda a, b: losses.sim_loss_D(a, b)), [_n(rng, (3, 6), dt), _n(rng, (3, 6), dt)]


def _exposure(rng, dt):
    d = _u(rng, (2, 3, 8, 8), dt)
    e = rng.uniform(0.0, 0.2, size=(2, 8, 8)).astype(dt)
    return (lambda x: losses.exposure_loss(x, e)), [d]


def _ltv(rng, dt):
    a = _u(rng, (1, 3, 8, 8), dt, 0.0, 0.3)
    return (lambda x: losses.ltv_loss(x, 0.1)), [a]


def _flex(rng, dt):
    return (lambda b: losses.flex_loss(b)), [_u(rng, (3, 8, 8), dt)]


def _color(rng, dt):
    return (lambda d: losses.color_loss(d)), [_u(rng, (2, 3, 8, 8), dt)]


def _byol(rng, dt):
    # the target side is detached, so only the online prediction is an input
    z = _n(rng, (3, 5), dt)
    return (lambda p: losses.byol_loss(p, z)), [_n(rng, (3, 5), dt)]


def _task(rng, dt):
    labels = rng.integers(0, 4, size=3)
    return (lambda a, b: losses.task_loss(a, b, labels)), [_n(rng, (3, 4), dt), _n(rng, (3, 4), dt)]


def _curve(tag):
    def build(rng, dt):
        fam = CurveFamily(tag)
        x, a = _u(rng, (3, 8, 8), dt), _u(rng, (3, 8, 8), dt)
        w = _n(rng, x.shape, dt)
        return (lambda x_, a_: _weighted_sum(curve_f(x_, a_, fam), w)), [x, a]
    return build


def _darken(rng, dt):
    x, a = _u(rng, (3, 8, 8), dt), _u(rng, (3, 8, 8), dt)
    b = _u(rng, (3, 8, 8), dt, 0.3, 1.0)
    w = _n(rng, x.shape, dt)
    return (lambda x_, a_, b_: _weighted_sum(darken(x_, AdjustmentMaps(a_, b_)), w)), [x, a, b]


def _tiny_model(seed: int) -> AdaptationModel:
    return AdaptationModel(4, FeatureExtractorSpec([4, 6], 8, 3), HeadSpec(8, 5), 0.9, seed)


def _tiny_darkener(seed: int) -> MappingEstimator:
    net = MappingEstimator(MappingEstimatorSpec([4, 4]), CurveFamily(), np.random.default_rng(seed))
    # move away from the near-identity start so the curve term carries gradient
    net.head_a.bias.data[:] = 0.0
    net.head_b.bias.data[:] = 1.0
    return net


def _stage1_composite(rng, dt):
    """Full darkener objective w.r.t. the image batch and the first conv kernel."""
    model = _tiny_model(1)
    model.eval()
    model.requires_grad_(False)
    net = _tiny_darkener(2)
    images = _u(rng, (2, 3, 8, 8), dt)
    exposure = rng.uniform(0.0, 0.5, size=(2, 8, 8)).astype(dt)
    kernel = net.body[0].weight.data.copy()
    weights = losses.LossWeights()

    def fn(x, k):
        net.body[0].weight = k
        feat_day = model.features(x)
        maps = net(x, exposure)
        dark = darken(x, maps)
        parts = {"l_sim_d": losses.sim_loss_D(feat_day, model.features(dark)),
                 "l_c_exp": losses.exposure_loss(dark, exposure), "l_col": losses.color_loss(dark),
                 "l_ltv": losses.ltv_loss(maps.A, weights.alpha_ltv), "l_flex": losses.flex_loss(maps.B)}
        return losses.total_loss_D(parts, weights)[0]
    return fn, [images, kernel]


def _stage2_composite(rng, dt):
    """Symmetric BYOL plus task loss w.r.t. online parameters.

    The images also feed the detached target branch, so they are held fixed;
    the first conv kernel and the predictor's last layer are checked instead.
    """
    model = _tiny_model(3)
    model.train()
    images, dark = _u(rng, (3, 3, 8, 8), dt), _u(rng, (3, 3, 8, 8), dt, 0.0, 0.2)
    labels = rng.integers(0, 4, size=3)
    conv = model.extractor.blocks[0].conv
    kernel, head = conv.weight.data.copy(), model.head_z.fc2.weight.data.copy()
    weights = losses.LossWeights()

    def fn(k, wz):
        conv.weight = k
        model.head_z.fc2.weight = wz
        sim = losses.sim_loss_F(images, dark, model, model.target)
        task = losses.task_loss(model.logits(images), model.logits(dark), labels)
        return losses.total_loss_F(sim, task, weights)[0]
    return fn, [kernel, head]


CASES: list[GradCase] = [
    GradCase("add", _binary(ops.add)),
    GradCase("mul", _binary(ops.mul)),
    GradCase("div", _binary(ops.div)),
    GradCase("pow", _binary(ops.pow)),
    GradCase("exp", _elementwise(ops.exp)),
    GradCase("log", _elementwise(ops.log, 0.5, 2.0)),
    GradCase("sigmoid", _elementwise(ops.sigmoid)),
    GradCase("tanh", _elementwise(ops.tanh)),
    GradCase("relu", _elementwise(ops.relu)),
    GradCase("abs", _elementwise(ops.abs)),
    GradCase("l2norm", _elementwise(lambda a: ops.l2norm(a, axis=1))),
    GradCase("log_softmax", _elementwise(lambda a: ops.log_softmax(a, axis=1))),
    GradCase("matmul", _matmul),
    GradCase("conv2d", _conv),
    GradCase("avgpool2d", _avgpool),
    GradCase("batch_norm", _batch_norm),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("curve_iterative_quadratic", _curve("iterative_quadratic")),
    GradCase("curve_gamma", _curve("gamma_curve")),
    GradCase("curve_reciprocal", _curve("reciprocal_curve")),
    GradCase("darken", _darken),
    GradCase("sim_loss_D", _sim_d),
    GradCase("exposure_loss", _exposure),
    GradCase("ltv_loss", _ltv),
    GradCase("flex_loss", _flex),
    GradCase("color_loss", _color),
    GradCase("byol_loss", _byol),
    GradCase("task_loss", _task),
    GradCase("stage1_composite", _stage1_composite),
    GradCase("stage2_composite", _stage2_composite),
]


def run_case(case: GradCase, dtype=np.float32, seed: int = 0) -> GradcheckResult:
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    with default_dtype(dtype):
        fn, inputs = case.build(rng, dtype)
    reference = None
    if dtype != np.float64:
        with default_dtype(np.float64):
            reference, _ = case.build(np.random.default_rng(seed), np.dtype(np.float64))
    with default_dtype(dtype):
        # analytic pass in the requested precision, numeric pass on the float64 twin
        result = gradcheck(fn, inputs, name=case.name, reference=reference)
    return result


def run_all(dtype=np.float32, names=None, seed: int = 0) -> list[GradcheckResult]:
    selected = [c for c in CASES if names is None or c.name in names]
    if names is not None:
        unknown = set(names) - {c.name for c in selected}
        if unknown:
            raise KeyError(f"unknown gradcheck cases: {', '.join(sorted(unknown))}")
    return [run_case(c, dtype, seed) for c in selected]

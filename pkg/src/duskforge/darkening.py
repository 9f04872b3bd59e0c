"""Exposure-guided pixel-wise darkening.

The darkened image is ``B * f(clamp(I / B, 0, 1), A)`` where ``f`` is a
monotone, darkening tone curve driven by the per-pixel map ``A`` and ``B`` is
an auxiliary divisor map. Both maps come from a small convolutional mapping
estimator that also sees a target exposure map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Conv2d, Module, Tensor, as_tensor, ops

B_MIN = 0.05
CURVE_EPS = 1e-3

LEARNABLE_FAMILIES = ("iterative_quadratic", "gamma_curve", "reciprocal_curve")
HEURISTIC_FAMILIES = ("brightness", "gamma_correction")


class DarkeningError(ValueError):
    pass


@dataclass(frozen=True)
class CurveFamily:
    tag: str = "iterative_quadratic"
    iterations: int = 8
    per_iteration_maps: bool = False
    # parameters of the fixed heuristic darkeners
    brightness_factor: float = 0.2
    gamma: float = 3.0

    def __post_init__(self):
        if self.tag not in LEARNABLE_FAMILIES + HEURISTIC_FAMILIES:
            raise DarkeningError(f"unknown curve family {self.tag!r}")
        if self.iterations < 1:
            raise DarkeningError("iterations must be a positive integer")
        if not 0 < self.brightness_factor <= 1:
            raise DarkeningError("brightness_factor must be in (0, 1]")
        if self.gamma < 1:
            raise DarkeningError("gamma must be >= 1 for a darkening correction")

    @property
    def learnable(self) -> bool:
        return self.tag in LEARNABLE_FAMILIES

    @property
    def num_alpha_maps(self) -> int:
        if self.tag == "iterative_quadratic" and self.per_iteration_maps:
            return self.iterations
        return 1


class AdjustmentMaps(NamedTuple):
    A: Tensor
    B: Tensor


def _check_unit(t: Tensor, what: str) -> None:
    d = t.data
    if d.size and (d.min() < 0 or d.max() > 1):
        raise DarkeningError(f"{what} outside [0, 1]: range [{d.min():.6g}, {d.max():.6g}]")


def _split_alpha(alpha: Tensor, count: int, channels_axis: int) -> list[Tensor]:
    if count == 1:
        return [alpha]
    c = alpha.shape[channels_axis] // count
    idx = [slice(None)] * alpha.ndim
    out = []
    for i in range(count):
        idx[channels_axis] = slice(i * c, (i + 1) * c)
        out.append(ops.slice(alpha, tuple(idx)))
    return out


def curve_f(x, alpha, family: CurveFamily = CurveFamily()) -> Tensor:
    """Apply a darkening tone curve elementwise.

    ``alpha`` has the shape of ``x``, or for per-iteration quadratic maps it
    stacks ``iterations`` such maps along the channel axis.
    """
    x, alpha = as_tensor(x), as_tensor(alpha)
    if not family.learnable:
        raise DarkeningError(f"{family.tag} is a fixed darkener without a curve parameter")
    _check_unit(x, "curve input")
    _check_unit(alpha, "curve parameter")
    count = family.num_alpha_maps
    if count == 1 and alpha.shape != x.shape:
        raise ops.ShapeError("curve_f", x.shape, alpha.shape)

    if family.tag == "iterative_quadratic":
        axis = 1 if x.ndim == 4 else 0
        alphas = _split_alpha(alpha, count, axis)
        if any(a.shape != x.shape for a in alphas):
            raise ops.ShapeError("curve_f", x.shape, alpha.shape)
        y = x
        for i in range(family.iterations):
            a = alphas[i if count > 1 else 0]
            # h(y, a) = a*y^2 + (1-a)*y = y + a*(y^2 - y)
            y = ops.add(y, ops.mul(a, ops.sub(ops.mul(y, y), y)))
        return y
    if family.tag == "gamma_curve":
        a = ops.add(ops.mul(alpha, 1.0 - CURVE_EPS), CURVE_EPS)
        return ops.pow(x, ops.div(1.0, a))
    # reciprocal: (1 - a) x / (1 - a x)
    a = ops.clamp(alpha, hi=1.0 - CURVE_EPS)
    return ops.div(ops.mul(ops.sub(1.0, a), x), ops.sub(1.0, ops.mul(a, x)))


def darken(image, maps: AdjustmentMaps, family: CurveFamily = CurveFamily()) -> Tensor:
    """``B * f(clamp(I / B, 0, 1), A)``, elementwise."""
    image = as_tensor(image)
    A, B = as_tensor(maps.A), as_tensor(maps.B)
    if B.shape != image.shape:
        raise ops.ShapeError("darken", image.shape, B.shape)
    if family.num_alpha_maps == 1 and A.shape != image.shape:
        raise ops.ShapeError("darken", image.shape, A.shape)
    _check_unit(image, "image")
    if B.data.size and B.data.min() <= 0:
        raise DarkeningError("divisor map B must be strictly positive")
    ratio = ops.clamp(ops.div(image, B), 0.0, 1.0)
    return ops.mul(B, curve_f(ratio, A, family))


def heuristic_darken(image, family: CurveFamily) -> Tensor:
    """Fixed brightness scaling or gamma correction, no learnable maps."""
    image = as_tensor(image)
    _check_unit(image, "image")
    if family.tag == "brightness":
        return ops.mul(image, family.brightness_factor)
    if family.tag == "gamma_correction":
        return ops.pow(image, family.gamma)
    raise DarkeningError(f"{family.tag} is not a heuristic darkener")


@dataclass
class MappingEstimatorSpec:
    widths: Sequence[int] = field(default_factory=lambda: [16, 16, 16, 16])
    kernel: int = 3
    channels: int = 3


class MappingEstimator(Module):
    """Plain stride-1 CNN predicting ``(A, B)`` from an image and exposure map.

    The exposure map is concatenated to the image as an extra input channel.
    """

    def __init__(self, spec: MappingEstimatorSpec | None = None, family: CurveFamily = CurveFamily(),
                 rng: np.random.Generator | None = None, b_min: float = B_MIN):
        super().__init__()
        self.spec = spec or MappingEstimatorSpec()
        self.family = family
        self.b_min = b_min
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = self.spec.channels, self.spec.kernel
        layers, prev = [], c + 1
        for w in self.spec.widths:
            layers.append(Conv2d(prev, w, k, rng))
            prev = w
        self.body = layers
        self.head_a = Conv2d(prev, c * family.num_alpha_maps, k, rng)
        self.head_b = Conv2d(prev, c, k, rng)
        # start close to the identity: A near 0 and B near 1
        self.head_a.weight.data *= 0.1
        self.head_b.weight.data *= 0.1
        self.head_a.bias.data[:] = -3.0
        self.head_b.bias.data[:] = 3.0

    def forward(self, image: Tensor, exposure: Tensor) -> AdjustmentMaps:
        return estimate_maps(image, exposure, self)


def _batched(image: Tensor, exposure) -> tuple[Tensor, Tensor, bool]:
    image = as_tensor(image)
    single = image.ndim == 3
    if single:
        image = ops.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise ops.ShapeError("estimate_maps", image.shape, detail="expected [N,C,H,W] or [C,H,W]")
    n, _, h, w = image.shape
    e = exposure.values if hasattr(exposure, "values") else exposure
    e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=image.dtype)
    if e.shape[-2:] != (h, w):
        raise ops.ShapeError("estimate_maps", image.shape, e.shape, "exposure map spatial size")
    e = np.broadcast_to(e.reshape((-1, 1, h, w)), (n, 1, h, w))
    return image, Tensor(e), single


def estimate_maps(image, exposure, net: MappingEstimator) -> AdjustmentMaps:
    """Predict adjustment maps; ranges hold by construction of the output squashing."""
    if net is None or not net.parameters():
        raise DarkeningError("mapping estimator is not initialized")
    x, e, single = _batched(image, exposure)
    h = ops.concat([x, e], axis=1)
    for layer in net.body:
        h = ops.relu(layer(h))
    A = ops.sigmoid(net.head_a(h))
    B = ops.add(ops.mul(ops.sigmoid(net.head_b(h)), 1.0 - net.b_min), net.b_min)
    if single:
        A = ops.reshape(A, A.shape[1:])
        B = ops.reshape(B, B.shape[1:])
    return AdjustmentMaps(A, B)


def darken_image(image, exposure, net: MappingEstimator | None, family: CurveFamily = CurveFamily(),
                 return_maps: bool = False):
    """Estimate maps for ``(image, exposure)`` and apply the darkening curve."""
    if not family.learnable:
        out = heuristic_darken(image, family)
        return (out, None) if return_maps else out
    maps = estimate_maps(image, exposure, net)
    out = darken(image, maps, family)
    return (out, maps) if return_maps else out

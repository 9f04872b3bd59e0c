"""Training objectives for the darkener and for the adapted model.

All losses take batched tensors (leading batch axis) and average over the
batch; single images are accepted and treated as a batch of one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops

NORM_FLOOR = 1e-12


class CollapseError(FloatingPointError):
    """A feature vector norm fell below the collapse threshold."""


@dataclass
class LossWeights:
    lambda_sim_D: float = 1.0
    lambda_c_exp: float = 10.0
    lambda_col: float = 5.0
    lambda_ltv: float = 1.0
    lambda_flex: float = 1.0
    lambda_sim_F: float = 1.0
    lambda_task: float = 1.0
    alpha_ltv: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.alpha_ltv <= 0:
            raise ValueError("alpha_ltv must be positive")


def _as_batch(x: Tensor, ndim: int) -> Tensor:
    x = as_tensor(x)
    return ops.reshape(x, (1,) + x.shape) if x.ndim == ndim - 1 else x


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity of ``[N, d]`` features, shape ``[N]``."""
    a, b = _as_batch(a, 2), _as_batch(b, 2)
    if a.shape != b.shape:
        raise ops.ShapeError("cosine_similarity", a.shape, b.shape)
    na, nb = ops.l2norm(a, axis=1), ops.l2norm(b, axis=1)
    if na.data.min() < NORM_FLOOR or nb.data.min() < NORM_FLOOR:
        raise CollapseError("feature norm below 1e-12; the extractor has collapsed")
    return ops.div(ops.sum(ops.mul(a, b), axis=1), ops.mul(na, nb))


def sim_loss_D(feat_day, feat_night) -> Tensor:
    """Mean cosine similarity between day and darkened features."""
    return ops.mean(cosine_similarity(feat_day, feat_night))


def exposure_loss(darkened, exposure) -> Tensor:
    """Mean absolute gap between the channel-averaged image and the exposure map."""
    d = _as_batch(darkened, 4)
    e = exposure.values if hasattr(exposure, "values") else exposure
    e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=d.dtype)
    n, _, h, w = d.shape
    if e.shape[-2:] != (h, w):
        raise ops.ShapeError("exposure_loss", d.shape, e.shape)
    e = np.broadcast_to(e.reshape((-1, h, w)), (n, h, w))
    return ops.mean(ops.abs(ops.sub(ops.mean(d, axis=1), Tensor(e, dtype=d.dtype))))


def _loose(diff: Tensor, alpha: float) -> Tensor:
    # h(x) = max(alpha - |x - alpha|, 0) applied to |diff|
    return ops.maximum(ops.sub(alpha, ops.abs(ops.sub(ops.abs(diff), alpha))), 0.0)


def ltv_loss(A, alpha_ltv: float = 0.1) -> Tensor:
    """Loose total variation of the curve map.

    Squared loose responses are averaged over neighbouring-pixel pairs in each
    direction and summed over channels, then averaged over the batch.
    """
    a = _as_batch(A, 4)
    if a.shape[2] < 2 or a.shape[3] < 2:
        raise ops.ShapeError("ltv_loss", a.shape, detail="needs H >= 2 and W >= 2")
    dx = ops.sub(a[:, :, :, 1:], a[:, :, :, :-1])
    dy = ops.sub(a[:, :, 1:, :], a[:, :, :-1, :])
    hx, hy = _loose(dx, alpha_ltv), _loose(dy, alpha_ltv)
    per_channel = ops.add(ops.mean(ops.mul(hx, hx), axis=(2, 3)), ops.mean(ops.mul(hy, hy), axis=(2, 3)))
    return ops.mean(ops.sum(per_channel, axis=1))


def flex_loss(B) -> Tensor:
    return ops.mean(ops.sub(1.0, as_tensor(B)))


def color_loss(darkened) -> Tensor:
    """Sum of squared differences between the three channel means."""
    d = _as_batch(darkened, 4)
    if d.shape[1] != 3:
        raise ops.ShapeError("color_loss", d.shape, detail="needs exactly 3 channels")
    means = ops.mean(d, axis=(2, 3))
    r, g, b = means[:, 0], means[:, 1], means[:, 2]
    total = ops.add(ops.add(ops.pow(ops.sub(r, g), 2), ops.pow(ops.sub(r, b), 2)), ops.pow(ops.sub(g, b), 2))
    return ops.mean(total)


DARKENER_PARTS = ("l_sim_d", "l_c_exp", "l_col", "l_ltv", "l_flex")


def total_loss_D(parts: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted darkener objective; returns the scalar and a log record."""
    terms = [
        (weights.lambda_sim_D, parts["l_sim_d"]),
        (weights.lambda_c_exp, parts["l_c_exp"]),
        (weights.lambda_col, parts["l_col"]),
        (weights.lambda_ltv, parts["l_ltv"]),
        (weights.lambda_flex, parts["l_flex"]),
    ]
    total = None
    for lam, part in terms:
        term = ops.mul(part, float(lam))
        total = term if total is None else ops.add(total, term)
    record = {k: float(parts[k].item()) for k in DARKENER_PARTS}
    record["total"] = float(total.item())
    return total, record


def byol_loss(online_pred, target_proj) -> Tensor:
    """``2 - 2 cos(p, z')`` averaged over the batch; the target side is detached."""
    target = as_tensor(target_proj).detach()
    return ops.mean(ops.sub(2.0, ops.mul(cosine_similarity(online_pred, target), 2.0)))


def byol_pair_loss(v, v_plus, online, target) -> Tensor:
    """BYOL loss between an online view ``v`` and a target view ``v_plus``."""
    return byol_loss(online.predict(v), target.project(v_plus))


def sim_loss_F(image, dark, online, target) -> Tensor:
    """Symmetric BYOL similarity between day images and their darkened twins."""
    return ops.add(byol_pair_loss(image, dark, online, target), byol_pair_loss(dark, image, online, target))


def task_loss(logits_day, logits_dark, labels) -> Tensor:
    """Cross-entropy averaged with equal weight over day and darkened batches."""
    day, dark = as_tensor(logits_day), as_tensor(logits_dark)
    return ops.mul(ops.add(ops.cross_entropy(day, labels), ops.cross_entropy(dark, labels)), 0.5)


def total_loss_F(sim_part: Tensor, task_part: Tensor, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    total = ops.add(ops.mul(sim_part, float(weights.lambda_sim_F)), ops.mul(task_part, float(weights.lambda_task)))
    return total, {"l_sim_f": float(sim_part.item()), "l_task": float(task_part.item()), "total": float(total.item())}

"""Numerical diagnostics: finite-difference gradient checks and kernel MMD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .autodiff import Tensor, backward, default_dtype

# step and tolerance per precision
GRADCHECK_SETTINGS = {
    np.dtype(np.float32): (1e-3, 1e-3),
    np.dtype(np.float64): (1e-6, 1e-6),
}

REFERENCE_STEP = 1e-5


@dataclass
class GradcheckResult:
    name: str
    rel_error: float
    tolerance: float
    checked: int
    excluded: int

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance and self.checked > 0

    def as_dict(self) -> dict:
        return {"name": self.name, "rel_error": self.rel_error, "tolerance": self.tolerance,
                "checked": self.checked, "excluded": self.excluded, "passed": self.passed}


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], name: str = "fn",
              step: float | None = None, tolerance: float | None = None,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              reference: Callable[..., Tensor] | None = None) -> GradcheckResult:
    """Compare reverse-mode gradients of a scalar ``fn`` with central differences.

    The error is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``
    taken as vector norms over all checked coordinates. A coordinate is
    skipped as a kink only when the central difference disagrees with the
    analytic value, the one-sided slopes disagree with each other, and the
    analytic value lies (nearly) between them, i.e. the stencil straddles a kink.
    ``max_entries`` subsamples coordinates per input.

    ``reference``, when given, is the same function built in float64; the
    finite differences are then taken on it at float64 inputs, so that
    rounding in a float32 forward pass does not swamp the comparison.
    """
    inputs = [np.array(x) for x in inputs]
    dtype = inputs[0].dtype
    default_step, default_tol = GRADCHECK_SETTINGS[np.dtype(dtype)]
    # a float64 reference tolerates a much finer stencil, which rarely straddles a kink
    h = step or (REFERENCE_STEP if reference is not None else default_step)
    tol = tolerance or default_tol
    rng = rng or np.random.default_rng(0)

    leaves = [Tensor(x, requires_grad=True, dtype=x.dtype) for x in inputs]
    out = fn(*leaves)
    backward(out)
    analytic = [np.zeros_like(x) if t.grad is None else t.grad for x, t in zip(inputs, leaves)]
    scale = max(max(float(np.abs(g).max()) if g.size else 0.0 for g in analytic), 1e-12)
    slack = tol * scale

    numeric_fn = fn
    if reference is not None:
        numeric_fn = reference
        inputs = [x.astype(np.float64) for x in inputs]

    def evaluate(values):
        with default_dtype(values[0].dtype):
            out = numeric_fn(*[Tensor(v, dtype=v.dtype) for v in values])
        return float(np.asarray(out.data, dtype=np.float64).sum())

    f0 = evaluate(inputs)
    num, ana = [], []
    excluded = total = 0
    for k, x in enumerate(inputs):
        flat_idx = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat_idx = np.sort(rng.choice(x.size, size=max_entries, replace=False))
        for idx in flat_idx:
            total += 1
            pos = np.unravel_index(idx, x.shape)
            vals = [v.copy() for v in inputs]
            vals[k][pos] = x[pos] + h
            fp = evaluate(vals)
            vals[k][pos] = x[pos] - h
            fm = evaluate(vals)
            right, left = (fp - f0) / h, (f0 - fm) / h
            central = (fp - fm) / (2 * h)
            a = float(analytic[k][pos])
            lo, hi = min(left, right), max(left, right)
            # one-sided slopes carry O(h) curvature error, hence the widened bracket
            margin = slack + 0.25 * (hi - lo)
            if abs(central - a) > slack and hi - lo > slack and lo - margin <= a <= hi + margin:
                excluded += 1
                continue
            num.append(central)
            ana.append(a)
    num_a, ana_a = np.asarray(num), np.asarray(ana)
    denom = max(np.linalg.norm(num_a), np.linalg.norm(ana_a), 1e-12)
    err = float(np.linalg.norm(num_a - ana_a) / denom) if len(num) else float("inf")
    if excluded > 0.2 * total:
        err = float("inf")
    return GradcheckResult(name, err, tol, len(num), excluded)


# -- MMD ------------------------------------------------------------------

BANDWIDTH_FLOOR = 1e-6


@dataclass
class MmdReport:
    mmd2: float
    bandwidth: float
    n_a: int
    n_b: int
    kernel: str = "rbf"

    def as_dict(self) -> dict:
        return {"kernel": self.kernel, "bandwidth": self.bandwidth, "mmd2": self.mmd2,
                "n_a": self.n_a, "n_b": self.n_b}


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b]).astype(np.float64)
    return max(float(np.median(pdist(pooled))), BANDWIDTH_FLOOR)


def mmd(features_a, features_b, bandwidth: float | None = None) -> MmdReport:
    """Unbiased MMD^2 with an RBF kernel ``exp(-d^2 / (2 s^2))``.

    The bandwidth ``s`` defaults to the median pairwise distance of the pooled
    samples.
    """
    a = np.asarray(features_a, dtype=np.float64).reshape(len(features_a), -1)
    b = np.asarray(features_b, dtype=np.float64).reshape(len(features_b), -1)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("each sample set needs at least 2 points")
    s = median_bandwidth(a, b) if bandwidth is None else bandwidth

    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2 * s * s))

    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    # fsum is order independent, so swapping the arguments is bit-exact
    term_a = (math.fsum(kaa.ravel()) - math.fsum(np.diag(kaa))) / (m * (m - 1))
    term_b = (math.fsum(kbb.ravel()) - math.fsum(np.diag(kbb))) / (n * (n - 1))
    if m == n:
        # U-statistic over pairs i != j; exactly zero for identical sets
        cross = (math.fsum(kab.ravel()) - math.fsum(np.diag(kab))) / (m * (m - 1))
    else:
        cross = math.fsum(kab.ravel()) / (m * n)
    value = term_a + term_b - 2 * cross
    return MmdReport(float(value), s, m, n)

"""Feature extractor, classifier, BYOL heads and the EMA target twin."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import BatchNorm, Conv2d, Linear, Module, Parameter, Tensor, as_tensor, no_grad, ops


@dataclass
class FeatureExtractorSpec:
    stages: Sequence[int] = field(default_factory=lambda: [16, 32, 64])
    image_size: int = 32
    channels: int = 3

    @property
    def dim(self) -> int:
        return self.stages[-1]


@dataclass
class HeadSpec:
    hidden: int = 128
    out: int = 64


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class FeatureExtractor(Module):
    """Stages of (conv-BN-ReLU) x2 followed by 2x average pooling, then GAP."""

    def __init__(self, spec: FeatureExtractorSpec | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec or FeatureExtractorSpec()
        rng = rng if rng is not None else np.random.default_rng(0)
        blocks, prev = [], self.spec.channels
        for width in self.spec.stages:
            blocks.append(ConvBlock(prev, width, rng))
            blocks.append(ConvBlock(width, width, rng))
            prev = width
        self.blocks = blocks

    @property
    def dim(self) -> int:
        return self.spec.dim

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        size = self.spec.image_size
        if x.ndim != 4 or x.shape[1] != self.spec.channels or x.shape[2:] != (size, size):
            raise ops.ShapeError("extract", x.shape, (None, self.spec.channels, size, size))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i % 2 == 1 and i < len(self.blocks) - 1:
                x = ops.avgpool2d(x, 2)
        return ops.mean(x, axis=(2, 3))


class MLPHead(Module):
    """Single-hidden-layer MLP."""

    def __init__(self, in_dim: int, spec: HeadSpec, rng):
        super().__init__()
        self.fc1 = Linear(in_dim, spec.hidden, rng)
        self.fc2 = Linear(spec.hidden, spec.out, rng)

    def forward(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


def classify(features, head: Linear) -> Tensor:
    features = as_tensor(features)
    if features.ndim == 1:
        features = ops.reshape(features, (1, -1))
    if features.shape[1] != head.weight.shape[0]:
        raise ops.ShapeError("classify", features.shape, head.weight.shape)
    return head(features)


def ema_update(online: Iterable[Parameter], target: Iterable[Parameter], tau: float) -> None:
    """In place ``target = tau * target + (1 - tau) * online``."""
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    online, target = list(online), list(target)
    if len(online) != len(target):
        raise ValueError("online and target parameter lists differ in length")
    for o, t in zip(online, target):
        if o.shape != t.shape:
            raise ops.ShapeError("ema_update", o.shape, t.shape)
        t.data = (tau * t.data + (1.0 - tau) * o.data).astype(t.dtype)


class TargetBranch:
    """Read-only view over the EMA twin; its outputs never enter the tape."""

    def __init__(self, extractor: FeatureExtractor, head_q: MLPHead):
        self.extractor = extractor
        self.head_q = head_q

    def project(self, x) -> Tensor:
        with no_grad():
            return self.head_q(self.extractor(x))


class AdaptationModel(Module):
    def __init__(self, num_classes: int = 10, spec: FeatureExtractorSpec | None = None,
                 head: HeadSpec | None = None, tau: float = 0.99, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec or FeatureExtractorSpec()
        self.head_spec = head or HeadSpec()
        self.num_classes = num_classes
        self.tau = tau
        self.extractor = FeatureExtractor(self.spec, rng)
        self.classifier = Linear(self.spec.dim, num_classes, rng)
        self.head_q = MLPHead(self.spec.dim, self.head_spec, rng)
        self.head_z = MLPHead(self.head_spec.out, HeadSpec(self.head_spec.hidden, self.head_spec.out), rng)
        self.target_extractor = FeatureExtractor(self.spec, rng)
        self.target_q = MLPHead(self.spec.dim, self.head_spec, rng)
        self.target_extractor.requires_grad_(False)
        self.target_q.requires_grad_(False)
        self.reset_target()

    # -- branches ----------------------------------------------------------
    @property
    def target(self) -> TargetBranch:
        return TargetBranch(self.target_extractor, self.target_q)

    def features(self, x) -> Tensor:
        return self.extractor(x)

    def logits(self, x) -> Tensor:
        return classify(self.extractor(x), self.classifier)

    def predict(self, x) -> Tensor:
        """Online prediction ``z(q(F(x)))``."""
        return self.head_z(self.head_q(self.extractor(x)))

    # -- parameter groups ---------------------------------------------------
    def task_modules(self) -> dict[str, Module]:
        return {"extractor": self.extractor, "classifier": self.classifier}

    def online_modules(self) -> dict[str, Module]:
        return {"extractor": self.extractor, "classifier": self.classifier,
                "head_q": self.head_q, "head_z": self.head_z}

    def target_modules(self) -> dict[str, Module]:
        return {"target_extractor": self.target_extractor, "target_q": self.target_q}

    def named_online_parameters(self):
        for prefix, mod in self.online_modules().items():
            for name, p in mod.named_parameters():
                yield f"{prefix}/{name}", p

    def reset_target(self) -> None:
        """Copy online F and q into the target twin."""
        self.target_extractor.copy_from(self.extractor)
        self.target_q.copy_from(self.head_q)

    def ema_update(self, tau: float | None = None) -> None:
        tau = self.tau if tau is None else tau
        ema_update(self.extractor.parameters(), self.target_extractor.parameters(), tau)
        ema_update(self.head_q.parameters(), self.target_q.parameters(), tau)

    # -- state ------------------------------------------------------------------
    def component_state(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, mod in {**self.online_modules(), **self.target_modules()}.items():
            for name, arr in mod.state_dict().items():
                state[f"{prefix}/{name}"] = arr
        state["ema/tau"] = np.asarray(self.tau, dtype=np.float64)
        return state

    def load_component_state(self, state: dict[str, np.ndarray], components: Iterable[str] | None = None) -> None:
        mods = {**self.online_modules(), **self.target_modules()}
        for prefix in components or mods:
            if prefix == "ema":
                continue
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + "/")}
            if not sub:
                raise KeyError(f"checkpoint has no tensors for component {prefix!r}")
            mods[prefix].load_state_dict(sub)
        if "ema/tau" in state and (components is None or "ema" in components):
            self.tau = float(state["ema/tau"])

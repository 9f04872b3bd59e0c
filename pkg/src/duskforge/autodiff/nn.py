"""Parameter containers and the handful of layers the networks need."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Attribute-scanning container in the style of the usual DL frameworks.

    Parameters, buffers and submodules are discovered from instance attributes
    in assignment order, so names are stable across runs.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        expected = set(own) | {name for name, _ in self.named_buffers()}
        missing = expected - set(state)
        extra = set(state) - expected
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.astype(p.dtype, copy=True)
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in list(self._buffers):
            key = prefix + name
            if key in state:
                self._buffers[name] = np.asarray(state[key], dtype=self._buffers[name].dtype).copy()
        for name, value in self._children():
            if isinstance(value, Module):
                value._load_buffers(state, f"{prefix}{name}.")

    def copy_from(self, other: Module) -> None:
        """Make this module an exact copy of ``other`` (same architecture)."""
        self.load_state_dict(other.state_dict())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(_he(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class BatchNorm(Module):
    """Per-channel batch normalization for ``[N, C]`` or ``[N, C, H, W]``.

    Training mode uses batch statistics and updates the running averages;
    eval mode uses the running averages.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))
        self.track_running_stats = True

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = ops.batch_norm(x, self.gamma, self.beta, self.eps)
            if self.track_running_stats:
                m = self.momentum
                n = x.size // x.shape[1]
                unbiased = var * (n / max(n - 1, 1))
                rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
                self._buffers["running_mean"] = ((1 - m) * rm + m * mu).astype(rm.dtype)
                self._buffers["running_var"] = ((1 - m) * rv + m * unbiased).astype(rv.dtype)
            return out
        shape = (1, -1) + (1,) * (x.ndim - 2)
        scale_t = ops.mul(self.gamma, Tensor(1.0 / np.sqrt(self._buffers["running_var"] + self.eps), dtype=x.dtype))
        shift_t = ops.sub(self.beta, ops.mul(scale_t, Tensor(self._buffers["running_mean"], dtype=x.dtype)))
        return ops.add(ops.mul(x, ops.reshape(scale_t, shape)), ops.reshape(shift_t, shape))

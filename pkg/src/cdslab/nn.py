"""Parameter containers and the handful of layers the backbones need."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Registry of parameters, buffers and child modules, in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "bn_mode", "train")

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def set_bn_mode(self, mode: str) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "bn_mode", mode)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        out.update(dict(self.named_buffers(prefix)))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            src = arrays[name]
            if src.shape != p.shape:
                raise ValueError(f"{name}: stored shape {src.shape} != {p.shape}")
            p.data = np.array(src, dtype=p.dtype)
        for name, b in self.named_buffers(prefix):
            b[...] = arrays[name]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.gamma = Parameter(np.ones(c), dtype=dtype)
        self.beta = Parameter(np.zeros(c), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             mode=self.bn_mode, momentum=self.momentum)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cin, cout)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, size=cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.bias_add(T.matmul(x, self.weight), self.bias)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, rng, stride=1, k=3, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity or 1x1 projection shortcut."""

    def __init__(self, cin, cout, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.has_proj = stride != 1 or cin != cout
        if self.has_proj:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, pad=0, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = self.proj_bn(self.proj(x)) if self.has_proj else x
        return T.relu(T.add(out, short))

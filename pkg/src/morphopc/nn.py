"""Module containers and the standard layers the generator is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Parameter/buffer bookkeeping with a train/eval switch.

    Parameters and submodules are discovered from instance attributes in
    assignment order, so names are stable across runs.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, v in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(v, (Parameter, Module)):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, v in self._children():
            full = f"{prefix}{name}"
            if isinstance(v, Parameter):
                yield full, v
            else:
                yield from v.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for name, v in self._children():
            if isinstance(v, Module):
                yield from v.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, v in self._children():
            if isinstance(v, Module):
                yield from v.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[f"{name}"] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.reset_state()
        for name, b in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {b.shape}")
            b[...] = arr

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.reset_state()
        for m in self.modules():
            for k, b in m._buffers.items():
                m._buffers[k] = b.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), "weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), "gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), "beta")
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.eps,
            self.momentum,
        )


def activation(kind: str):
    if kind == "relu":
        return ops.relu
    if kind == "sigmoid":
        return ops.sigmoid
    if kind == "identity":
        return lambda t: t
    raise ValueError(f"unknown activation {kind!r}; expected relu, sigmoid or identity")


class ConvBlock(Module):
    """conv -> batchnorm -> activation."""

    def __init__(self, cin, cout, k=3, stride=1, act="relu", rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return activation(self.act)(self.norm(self.conv(x)))

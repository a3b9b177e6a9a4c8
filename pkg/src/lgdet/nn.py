"""Parameters, modules and the layer primitives built on :mod:`lgdet.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad. ``name`` is set by the owning model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=T.DTYPE), requires_grad=True)
        self.name = name


class Module:
    """Tree of named parameters, buffers and child modules.

    Names are dotted attribute paths; list-valued attributes contribute their
    position (``blocks.0.fc1.weight``).
    """

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def _walk(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield "param", prefix + key, val
        for key, buf in getattr(self, "_buffers", {}).items():
            yield "buffer", prefix + key, buf
        for key, child in self.children():
            yield from child._walk(prefix + key + ".")

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        items = sorted((n, p) for kind, n, p in self._walk() if kind == "param")
        for n, p in items:
            p.name = n
        return items

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return sorted(((n, b) for kind, n, b in self._walk() if kind == "buffer"), key=lambda t: t[0])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return dict(sorted(state.items()))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=T.DTYPE)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, out_features, in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Channel-last batch normalization with running statistics (momentum 0.9)."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, axis, training=self.training,
                            running_mean=self._buffers["running_mean"],
                            running_var=self._buffers["running_var"],
                            momentum=self.momentum, eps=self.eps)


class Identity(Module):
    """Identity stand-in used when normalization is switched off in config."""

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return x


def make_norm(kind: str, channels: int) -> Module:
    if kind == "batch":
        return BatchNorm(channels)
    if kind == "none":
        return Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    raise ValueError(f"unknown activation {kind!r}")


class SharedMLP(Module):
    """Pointwise stack of linear -> norm -> activation layers on the last axis.

    ``last_act=False`` leaves the final layer as a bare linear map.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator, norm: str = "batch",
                 act: str = "relu", last_act: bool = True):
        self.act = act
        self.last_act = last_act
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        n = len(self.layers) if last_act else len(self.layers) - 1
        self.norms = [make_norm(norm, widths[i + 1]) for i in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.norms):
                x = activation(self.act, self.norms[i](x))
        return x

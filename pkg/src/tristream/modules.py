"""Parameter containers shared by the backbone, heads and detector."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Holds parameter tensors and sub-modules as plain attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for val in vars(self).values():
            for m in _modules_in(val):
                m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise tn.ShapeError(f"{name}: stored shape {arr.shape} vs model shape {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


def _modules_in(val):
    if isinstance(val, Module):
        yield val
    elif isinstance(val, (list, tuple)):
        for v in val:
            yield from _modules_in(v)
    elif isinstance(val, dict):
        for v in val.values():
            yield from _modules_in(v)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return tn.param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return tn.param(rng.uniform(-lim, lim, shape))


def zeros(shape) -> Tensor:
    return tn.param(np.zeros(shape))


def ones(shape) -> Tensor:
    return tn.param(np.ones(shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = glorot_uniform(rng, (d_in, d_out), d_in, d_out)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.matmul(x, self.weight)
        return tn.bias_add(y, self.bias, -1) if self.bias is not None else y


class Conv3d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel, stride=1,
                 padding=0, dilation=1, bias: bool = False):
        kernel = tn._triple(kernel)
        fan_in = c_in * kernel[0] * kernel[1] * kernel[2]
        self.weight = he_normal(rng, (c_out, c_in) + kernel, fan_in)
        self.bias = zeros((c_out,)) if bias else None
        self.stride = tn._triple(stride)
        self.padding = tn._triple(padding)
        self.dilation = tn._triple(dilation)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def macs(self, in_size) -> tuple[int, tuple]:
        """Multiply-accumulates per sample for a (T, H, W) input, and the output size."""
        out = tn.conv_output_size(in_size, self.weight.shape[2:], self.stride, self.padding, self.dilation)
        per_pos = int(np.prod(self.weight.shape))
        return per_pos * out[0] * out[1] * out[2], out


class ChannelNorm(Module):
    """Per-sample normalisation over (C, T, H, W) with per-channel affine.

    Stands in for batch norm: statistics do not depend on the other samples
    in the batch, which keeps small-batch training deterministic.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = ones((channels,))
        self.shift = zeros((channels,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layernorm(x, self.gain, self.shift, axis=(1, 2, 3, 4), eps=self.eps, channel_axis=1)


def set_all(module: Module, value: float, skip: Optional[tuple] = None) -> None:
    """Overwrite every parameter with a constant (used by reduction-case tests)."""
    for name, p in module.named_parameters():
        if skip and any(s in name for s in skip):
            continue
        p.data[...] = value

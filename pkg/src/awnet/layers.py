"""Parameter containers: a minimal module tree, convolutions, BN and linear maps."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import RunningStats, Tensor, batchnorm, conv2d, linear


class Module:
    """Attribute-ordered container of parameters, buffers and sub-modules.

    Parameters are :class:`Tensor` attributes, buffers are
    :class:`RunningStats` attributes. Lists of modules are traversed with their
    index as the name component.
    """

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, RunningStats, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, RunningStats):
                yield prefix + name + ".mean", value.mean
                yield prefix + name + ".var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name (views, not copies)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} extra={extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} != {target.shape}")
            target[...] = arr

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class FilterBank(Module):
    """Convolution filters (Cout, Cin, k, k) plus a per-filter bias.

    ``omega`` rescales each output channel after the convolution and before
    the bias, which equals convolving with filters ``omega[m] * K_m``.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        self.kernel = Tensor(he_normal(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x: Tensor, omega: Tensor | None = None) -> Tensor:
        out = conv2d(x, self.kernel, self.stride, self.padding)
        if omega is not None:
            if omega.ndim != 2 or omega.shape[1] != self.out_channels:
                raise ValueError(
                    f"omega shape {omega.shape} does not match {self.out_channels} filters"
                )
            out = out * omega.reshape(omega.shape[0], omega.shape[1], 1, 1)
        return out + self.bias.reshape(1, self.out_channels, 1, 1)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats.fresh(channels)

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.stats,
                         "train" if train else "eval", update_stats)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        std = np.sqrt(1.0 / fan_in) if scale is None else scale
        self.weight = Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(fan_out), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

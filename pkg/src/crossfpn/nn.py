"""Minimal layer abstraction over the autodiff core.

Modules register parameters and submodules on attribute assignment, give
every parameter a hierarchical dotted name, and carry a train/eval flag
that batch-norm layers consult. State (parameters plus running-stat
buffers) round-trips through ordinary name->array dicts.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatchError


class Parameter(Tensor):
    """A leaf tensor that wants gradients."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, flag=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        """Parameters and buffers as name -> array, in registration order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeMismatchError(
                f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"parameter '{name}' shape", expected=p.data.shape, got=arr.shape
                )
            p.data[...] = arr
        for name, b in self.named_buffers():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != b.shape:
                raise ShapeMismatchError(
                    f"buffer '{name}' shape", expected=b.shape, got=arr.shape
                )
            b[...] = arr

    def grad_table(self):
        """Gradient per parameter name; zeros for parameters the last
        backward pass never reached."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.named_parameters()
        }

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """k in {1, 3}; default padding (k-1)//2 preserves size at stride 1."""

    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 stride=1, padding=None, bias=True):
        super().__init__()
        k = kernel_size
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = in_channels * k * k
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, k, k), fan_in))
        self.has_bias = bias
        self.bias = Parameter(np.zeros(out_channels))
        if not bias:
            # frozen zero bias keeps the op signature uniform
            self.bias.requires_grad = False
            del self._params["bias"]

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.track_stats = True

    def forward(self, x):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
            update_stats=self.training and self.track_stats,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return ad.fully_connected(x, self.weight, self.bias)


class ConvBNReLU(Module):
    """3x3 conv (no bias) -> batch norm -> relu, the workhorse block."""

    def __init__(self, in_channels, out_channels, rng, stride=1, kernel_size=3):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


def set_stat_tracking(module: Module, flag: bool):
    """Toggle running-stat updates on every batch-norm layer, so repeated
    forwards (e.g. finite differencing) stay side-effect free."""
    for mod in module.modules():
        if isinstance(mod, BatchNorm2d):
            mod.track_stats = flag

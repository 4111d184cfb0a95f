"""Parameter containers and the generic layers built on the autodiff ops."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .params import ParamSet


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal module tree.

    Parameters, buffers and child modules are discovered from instance
    attributes in assignment order, which fixes the naming order of
    ``state()`` and therefore of the wire format.
    """

    def __init__(self):
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_buffers", OrderedDict())

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Module, Parameter)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + key, val
            else:
                yield from val.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix=""):
        for key, buf in self._buffers.items():
            yield prefix + key, buf
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state(self) -> ParamSet:
        """Copy of every parameter and buffer, parameters first."""
        entries = [(n, p.data.copy()) for n, p in self.named_parameters()]
        entries += [(n, b.copy()) for n, b in self.named_buffers()]
        return ParamSet(entries)

    def load_state(self, params: ParamSet):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if set(params.names()) != set(own) | set(bufs):
            missing = (set(own) | set(bufs)) ^ set(params.names())
            raise ContractError(f"parameter set does not match model: {sorted(missing)[:5]}")
        for name, value in params.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != value.shape:
                raise DimensionError(f"{name}: expected {target.shape}, got {value.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        # glorot-uniform weights, zero bias
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear: input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, padding: int | None = None):
        super().__init__()
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(_uniform(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"], self.training
        )


class LayerNorm(Module):
    def __init__(self, width: int):
        super().__init__()
        self.weight = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, kernel, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over ``(B, T, width)`` tokens."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if width % heads:
            raise ContractError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng)
        self.last_attention = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, w = x.shape
        return ad.transpose(x.reshape(b, t, self.heads, w // self.heads), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        b, t, w = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(w // self.heads))
        att = ad.softmax(scores, axis=-1)
        self.last_attention = att.data
        ctx = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)).reshape(b, t, w)
        return self.out(ctx)

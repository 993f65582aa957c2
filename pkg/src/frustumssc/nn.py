"""Parameter containers and standard layers on top of the numerics substrate.

Initialization is Kaiming-uniform (fan-in) driven by an explicit
numpy Generator so every build is reproducible from the config seed.
"""

import numpy as np

from .errors import DimensionError
from .numerics import ops
from .numerics.tensor import Tensor, default_dtype, is_grad_enabled


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bias_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal recursive parameter container with train/eval state."""

    def __init__(self):
        self._buffers = {}
        self.training = True

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=default_dtype())

    def buffers(self):
        return self._buffers

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(prefix=full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, arr in self._buffers.items():
            yield f"{prefix}{name}", arr
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": arr.copy() for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        for name, p in own_params.items():
            if name not in state:
                raise DimensionError(f"missing parameter '{name}' in state dict")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter '{name}' shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr)
        for name in own_buffers:
            key = f"buffer:{name}"
            if key in state:
                self._assign_buffer(name, state[key])

    def _assign_buffer(self, dotted, array):
        parts = dotted.split(".")
        target = self
        for part in parts[:-1]:
            target = target[int(part)] if part.isdigit() else getattr(target, part)
        target._buffers[parts[-1]] = np.asarray(array, dtype=target._buffers[parts[-1]].dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self.items = list(modules)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def append(self, module):
        self.items.append(module)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (in_dim, out_dim), fan_in=in_dim))
        self.bias = Parameter(bias_uniform(rng, (out_dim,), fan_in=in_dim)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(bias_uniform(rng, (out_ch,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        fan_in = in_ch * kernel**3
        self.weight = Parameter(
            kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in)
        )
        self.bias = Parameter(bias_uniform(rng, (out_ch,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    """Normalizes the last axis to zero mean / unit variance, then applies a
    learned affine map."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = ops.mean(x, axis=-1, keepdims=True)
        centered = ops.sub(x, mu)
        var = ops.mean(ops.mul(centered, centered), axis=-1, keepdims=True)
        inv = ops.div(centered, ops.sqrt(ops.add(var, self.eps)))
        return ops.add(ops.mul(inv, self.gamma), self.beta)


class BatchNorm(Module):
    """Channel-axis batch normalization for [C, *spatial] single-sample maps.

    Statistics are taken over the spatial axes of the one sample per step
    (batch size is 1 throughout this codebase); running estimates serve
    eval mode. Running statistics update only on gradient-enabled forward
    passes, so no-grad evaluation passes are side-effect free.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        spatial_axes = tuple(range(1, x.ndim))
        affine_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        gamma = ops.reshape(self.gamma, affine_shape)
        beta = ops.reshape(self.beta, affine_shape)
        if self.training:
            mu = ops.mean(x, axis=spatial_axes, keepdims=True)
            centered = ops.sub(x, mu)
            var = ops.mean(ops.mul(centered, centered), axis=spatial_axes, keepdims=True)
            if is_grad_enabled():
                m = self.momentum
                self._buffers["running_mean"] = (
                    (1 - m) * self._buffers["running_mean"] + m * mu.data.reshape(-1)
                )
                self._buffers["running_var"] = (
                    (1 - m) * self._buffers["running_var"] + m * var.data.reshape(-1)
                )
            norm = ops.div(centered, ops.sqrt(ops.add(var, self.eps)))
        else:
            mu = self._buffers["running_mean"].reshape(affine_shape)
            var = self._buffers["running_var"].reshape(affine_shape)
            norm = ops.div(ops.sub(x, mu), np.sqrt(var + self.eps))

        return ops.add(ops.mul(norm, gamma), beta)


class MLP(Module):
    """Linear stack with an activation between layers."""

    def __init__(self, dims, rng, activation="relu"):
        super().__init__()
        self.layers = ModuleList(
            [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        )
        self.activation = activation

    def forward(self, x):
        act = {"relu": ops.relu, "silu": ops.silu, "tanh": ops.tanh}[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

"""Parameter containers and the layers used by every network in the package."""

import numpy as np

from cdcgen.diffmath import ops
from cdcgen.diffmath.tensor import Tensor, no_grad


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Owns parameters and submodules; enumeration follows assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.data.shape}")
            p.data[...] = value

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _fan_init(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, gain=1.0):
        super().__init__()
        if zero:
            self.weight = Parameter(np.zeros((n_in, n_out)))
        else:
            self.weight = Parameter(_fan_init(rng, (n_in, n_out), n_in, gain))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return ops.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, zero=False, gain=1.0):
        super().__init__()
        shape = (c_out, c_in, kernel, kernel)
        if zero:
            self.weight = Parameter(np.zeros(shape))
        else:
            self.weight = Parameter(_fan_init(rng, shape, c_in * kernel * kernel, gain))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Stride-``scale`` upsampling; kernel 4/pad 1 for scale 2, kernel 3/pad 1 for scale 1."""

    def __init__(self, c_in, c_out, scale, rng, gain=1.0):
        super().__init__()
        if scale == 2:
            kernel, self.padding = 4, 1
        elif scale == 1:
            kernel, self.padding = 3, 1
        else:
            raise ValueError(f"unsupported upsampling scale {scale}")
        self.stride = scale
        self.weight = Parameter(_fan_init(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel / scale**2, gain))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class ActNorm(Module):
    """Per-channel affine normalization with first-batch statistics.

    On the first forward pass the bias and log-scale are set so that the
    batch is zero-mean and unit-variance per channel; afterwards they are
    ordinary trainable parameters.  ``initialized`` is persisted as a
    parameter so checkpoints restore the post-init state.
    """

    def __init__(self, channels, axis=1):
        super().__init__()
        self.axis = axis
        self.log_scale = Parameter(np.zeros(channels))
        self.bias = Parameter(np.zeros(channels))
        self.initialized = Parameter(np.zeros(1))
        self.initialized.requires_grad = False

    def forward(self, x):
        if self.initialized.data[0] == 0.0:
            with no_grad():
                axis = self.axis % x.ndim
                other = tuple(i for i in range(x.ndim) if i != axis)
                mu = x.data.mean(axis=other)
                sd = x.data.std(axis=other)
                self.bias.data[...] = -mu
                self.log_scale.data[...] = -np.log(np.maximum(sd, 1e-6))
                self.initialized.data[0] = 1.0
        return ops.channel_affine(x, self.log_scale, self.bias, self.axis)

    def named_parameters(self, prefix=""):
        yield prefix + "log_scale", self.log_scale
        yield prefix + "bias", self.bias
        yield prefix + "initialized", self.initialized


def trainable(params):
    return [p for p in params if p.requires_grad]


class MLP(Module):
    """Fully connected stack with leaky-rectifier hidden activations."""

    def __init__(self, sizes, rng, zero_last=False):
        super().__init__()
        self.layers = ModuleList(
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        )

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = ops.leaky_relu(x)
        return x

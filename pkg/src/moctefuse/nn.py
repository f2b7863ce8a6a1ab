"""Parameter containers and the small layers the networks are built from."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-registered parameter tree.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``;
    children are ``Module`` attributes or lists of modules.  Iteration
    order is attribute assignment order, so the manifest of a model is a
    pure function of its constructor arguments.
    """

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def param(array, name=None):
    return Tensor(array, requires_grad=True, name=name)


def xavier(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def kaiming(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = param(xavier(rng, n_in, n_out, (n_in, n_out)))
        if bias:
            self.bias = param(np.zeros(n_out))
        else:
            self.bias = None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=None, bias=True, init="kaiming"):
        fan_in = c_in * k * k
        shape = (c_out, c_in, k, k)
        w = kaiming(rng, fan_in, shape) if init == "kaiming" else xavier(rng, fan_in, c_out * k * k, shape)
        self.weight = param(w)
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, n, eps=1e-5):
        self.gain = param(np.ones(n))
        self.bias = param(np.zeros(n))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)

"""Parameter containers."""
from collections import OrderedDict

import numpy as np

from fimp.errors import DimensionError
from fimp.numerics.tensor import Tensor, get_default_dtype


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def init_weight(rng, fan_in, fan_out, dtype=None):
    """Normal initialisation with standard deviation ``1/sqrt(fan_in)``."""
    dtype = dtype or get_default_dtype()
    return parameter(rng.normal((fan_in, fan_out), scale=fan_in ** -0.5, dtype=dtype), dtype=dtype)


class Module:
    """Holds parameters as attributes; submodules and lists of them are walked recursively."""

    training = True

    def named_parameters(self, prefix=""):
        seen = set()
        out = OrderedDict()
        self._collect(prefix, out, seen)
        return out

    def _collect(self, prefix, out, seen):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            for item_key, item in _expand(key, value):
                if isinstance(item, Tensor) and item.requires_grad:
                    if id(item) not in seen:
                        seen.add(id(item))
                        out[item_key] = item
                elif isinstance(item, Module):
                    if id(item) not in seen:
                        seen.add(id(item))
                        item._collect(item_key + ".", out, seen)

    def parameters(self):
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            for _, item in _expand("", value):
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)
        return [k for k in state if k not in params]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _expand(key, value):
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield f"{key}.{i}", item
    else:
        yield key, value


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = init_weight(rng, fan_in, fan_out)
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out

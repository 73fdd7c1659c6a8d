"""Named parameter bundles and seeded initialization."""
import zlib

import numpy as np

from .core import Tensor


class ParamSet:
    """Ordered map ``name -> Tensor``; iteration is lexicographic by name.

    Each parameter draws its initial values from a generator seeded by
    ``(rng_seed, crc32(name))`` so adding a parameter never perturbs others.
    """

    def __init__(self, rng_seed=0, dtype=np.float32):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self._params = {}

    def _rng(self, name):
        return np.random.default_rng([self.rng_seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])

    def uniform(self, name, shape, fan_in):
        """Register a parameter drawn from U[-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
        bound = 1.0 / np.sqrt(fan_in)
        values = self._rng(name).uniform(-bound, bound, size=shape)
        return self.add(name, values)

    def conv(self, name, cout, cin, k, bias=True):
        fan_in = cin * k * k
        w = self.uniform(f"{name}.w", (cout, cin, k, k), fan_in)
        b = self.uniform(f"{name}.b", (cout,), fan_in) if bias else None
        return w, b

    def linear(self, name, dout, din):
        w = self.uniform(f"{name}.w", (dout, din), din)
        b = self.uniform(f"{name}.b", (dout,), din)
        return w, b

    def add(self, name, values):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(sorted(self._params))

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def values(self):
        return [self._params[n] for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def freeze(self):
        for t in self._params.values():
            t.requires_grad = False

    def snapshot(self):
        return {n: t.data.copy() for n, t in self.items()}

    def load(self, arrays, strict=True):
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            t = self._params[name]
            if t.shape != tuple(arr.shape):
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()
        if strict:
            missing = set(self._params) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")

    def subset(self, prefix):
        """View of the parameters whose name starts with ``prefix``."""
        sub = ParamSet(self.rng_seed, self.dtype)
        sub._params = {n: t for n, t in self._params.items() if n.startswith(prefix)}
        return sub


def backward(loss, params):
    """Run the reverse pass from scalar ``loss``; return ``{name: grad}``.

    Parameters the graph never reaches get a zero gradient.
    """
    from ..errors import ContractError

    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if not np.isfinite(loss.data).all():
        raise ContractError("loss is not finite")
    params.zero_grad()
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

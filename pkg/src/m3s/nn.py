"""Parameter containers and the shared layers every branch is built from.

Modules auto-register parameters and submodules in attribute-assignment
order, which fixes the (deterministic) serialization order of checkpoints.
Initialization draws from a caller-supplied generator so a single config
seed reproduces every weight in the model bit-for-bit.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


def seeded_rng(seed: int) -> np.random.Generator:
    """The package-wide generator family (PCG64 via default_rng)."""
    return np.random.default_rng(seed)


class Module:
    """Base class: tracks parameters and children by attribute assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ContractError(
                f"state dict mismatch: missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr) if arr.ndim else arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    """An indexable, ordered container of submodules."""

    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = Tensor(_kaiming_uniform(rng, (d_in, d_out), d_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dilation: int = 1,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ShapeError(f"channels ({cin},{cout}) not divisible by groups={groups}")
        fan_in = (cin // groups) * k * k
        self.weight = Tensor(
            _kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in),
            requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.pad, self.dilation, self.groups = stride, pad, dilation, groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        pad=self.pad, dilation=self.dilation, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


def silu(x: Tensor) -> Tensor:
    return T.mul(x, T.sigmoid(x))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes (..., T, d).

    ``key_mask`` is additive, broadcastable to the score shape (..., Tq, Tk);
    use -1e30 to exclude a key exactly (it underflows to probability 0).
    """
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, axes=tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = T.mul(scores, Tensor(np.asarray(1.0 / math.sqrt(d))))
    if key_mask is not None:
        scores = T.add(scores, Tensor(key_mask))
    probs = T.softmax(scores, axis=-1)
    return T.matmul(probs, v)


EXCLUDE = -1e30  # additive mask value whose exp underflows to exactly 0


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Standard interleaved sin/cos position table, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table


__all__ = [
    "Module", "ModuleList", "Linear", "Conv2d", "LayerNorm",
    "seeded_rng", "silu", "scaled_dot_attention", "EXCLUDE",
    "sinusoidal_positions",
]

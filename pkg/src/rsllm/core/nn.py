"""Parameter containers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .autograd import Parameter, Tensor


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Walks attributes in definition order to name parameters by dotted path."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}{i}", item

    def registry(self, prefix: str = "") -> dict[str, Parameter]:
        """Name -> Parameter map; also stamps each Parameter with its name."""
        out: dict[str, Parameter] = {}
        for name, p in self.named_parameters(prefix):
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            p.name = name
            out[name] = p
        return out

    def trainable(self, prefix: str = "") -> dict[str, Parameter]:
        return {n: p for n, p in self.registry(prefix).items() if p.requires_grad}

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.trainable = flag

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.registry(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        reg = self.registry(prefix)
        if strict:
            missing = sorted(set(reg) - set(state))
            if missing:
                raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in reg.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
                p.data = value.copy()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(p.size for _, p in self.named_parameters() if p.requires_grad or not trainable_only))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, self._eps)

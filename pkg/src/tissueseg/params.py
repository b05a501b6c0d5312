"""Learnable parameter storage addressed by stable dotted paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# initialization families
CONV = "conv"          # Kaiming normal, fan-in, a = 0
GLOROT = "glorot"      # uniform on +-sqrt(6 / (fan_in + fan_out))
EMBEDDING = "embedding"  # N(0, 0.02)
ONES = "ones"
ZEROS = "zeros"


@dataclass
class ParamSpec:
    shape: tuple[int, ...]
    family: str
    fan_in: int = 0
    fan_out: int = 0


@dataclass
class ModelParams:
    """All learnable tensors plus non-learnable buffers (BN running statistics)."""

    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))
    tensors: dict[str, Tensor] = field(default_factory=dict)
    specs: dict[str, ParamSpec] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def declare(self, path: str, shape, family: str, fan_in: int = 0, fan_out: int = 0) -> Tensor:
        if path in self.tensors:
            raise KeyError(f"parameter '{path}' declared twice")
        shape = tuple(int(s) for s in shape)
        if family == ONES:
            data = np.ones(shape, dtype=self.dtype)
        else:
            data = np.zeros(shape, dtype=self.dtype)
        t = Tensor(data, requires_grad=True, name=path)
        self.tensors[path] = t
        self.specs[path] = ParamSpec(shape, family, fan_in, fan_out)
        return t

    def declare_buffer(self, path: str, value: np.ndarray) -> np.ndarray:
        self.buffers[path] = np.array(value, dtype=self.dtype)
        return self.buffers[path]

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def paths(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = np.zeros_like(t.data)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer keyed by path (buffers prefixed ``buffer:``)."""
        out = {p: t.data for p, t in self.tensors.items()}
        out.update({f"buffer:{p}": b for p, b in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state())
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing} extra={extra}")
        for key, value in state.items():
            target = self.buffers[key[7:]] if key.startswith("buffer:") else self.tensors[key].data
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for '{key}': model {target.shape} vs stored {value.shape}")
            target[...] = value

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}


def init_params(params: ModelParams, seed: int) -> ModelParams:
    """Draw every parameter from its family's distribution with a seeded generator.

    Parameters are visited in declaration order so a seed maps to one model.
    """
    rng = np.random.default_rng(seed)
    for path, spec in params.specs.items():
        t = params.tensors[path]
        if spec.family == CONV:
            std = np.sqrt(2.0 / spec.fan_in)
            t.data[...] = rng.normal(0.0, std, size=spec.shape)
        elif spec.family == GLOROT:
            bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
            t.data[...] = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.family == EMBEDDING:
            t.data[...] = rng.normal(0.0, 0.02, size=spec.shape)
        elif spec.family == ONES:
            t.data[...] = 1.0
        elif spec.family == ZEROS:
            t.data[...] = 0.0
        else:
            raise ValueError(f"unknown init family '{spec.family}' for '{path}'")
    for path, buf in params.buffers.items():
        buf[...] = 1.0 if path.endswith("running_var") else 0.0
    return params

"""Named parameter registry with weight tying and optimizer state.

Every trainable tensor lives here under a dotted name of the form
``type.instance.layer.role`` (e.g. ``find.red.conv.weight``). Looking up a
name always returns the same :class:`Tensor` object within a run; that
identity is what ties weights across every network the instance appears
in. Each parameter carries a persistent gradient buffer plus the two
adadelta accumulators.

Initialization is seeded by hashing (seed, name), so the values a
parameter receives do not depend on the order in which parameters happen
to be created.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor, get_default_dtype

__all__ = ["ParameterStore", "named_seed", "glorot_bound"]


def named_seed(seed: int, name: str) -> int:
    """Stable 64-bit stream seed for (seed, name), independent of creation order."""
    digest = hashlib.sha256(f"{seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def glorot_bound(shape: tuple[int, ...]) -> float:
    """Uniform init bound sqrt(6 / (fan_in + fan_out)) for a weight shape."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        kh, kw, cin, cout = shape
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
    elif len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        raise ValueError(f"no fan convention for weight shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParameterStore:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}
        # per-name (E[g^2], E[dx^2]) accumulators, same dims as the value
        self._opt_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def weight(self, name: str, shape: tuple[int, ...]) -> Tensor:
        """Fetch (or lazily create, uniform on [-a, a]) a weight tensor."""
        tensor = self._params.get(name)
        if tensor is None:
            bound = glorot_bound(shape)
            rng = np.random.default_rng(named_seed(self.seed, name))
            values = rng.uniform(-bound, bound, size=shape)
            tensor = self._register(name, values)
        self._check_shape(name, tensor, shape)
        return tensor

    def bias(self, name: str, shape: tuple[int, ...]) -> Tensor:
        """Fetch (or lazily create, all-zero) a bias tensor."""
        tensor = self._params.get(name)
        if tensor is None:
            tensor = self._register(name, np.zeros(shape))
        self._check_shape(name, tensor, shape)
        return tensor

    def set_value(self, name: str, values: np.ndarray) -> Tensor:
        """Create or overwrite a parameter with explicit values (checkpoint load)."""
        existing = self._params.get(name)
        if existing is None:
            return self._register(name, values)
        if existing.dims != np.asarray(values).shape:
            raise ValueError(
                f"parameter {name!r} has dims {existing.dims}, "
                f"cannot load values of shape {np.asarray(values).shape}")
        existing.data = np.ascontiguousarray(values, dtype=get_default_dtype())
        return existing

    def _register(self, name: str, values) -> Tensor:
        tensor = Tensor(values, name=name)
        tensor.zero_grad()
        self._params[name] = tensor
        self._opt_state[name] = (np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        return tensor

    @staticmethod
    def _check_shape(name: str, tensor: Tensor, shape: tuple[int, ...]) -> None:
        if tensor.dims != tuple(shape):
            raise ValueError(
                f"parameter {name!r} already exists with dims {tensor.dims}, "
                f"requested {tuple(shape)}")

    def opt_state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._opt_state[name]

    def set_opt_state(self, name: str, eg2: np.ndarray, edx2: np.ndarray) -> None:
        value = self._params[name]
        for label, arr in (("Eg2", eg2), ("Edx2", edx2)):
            if np.asarray(arr).shape != value.dims:
                raise ValueError(
                    f"{label} state for {name!r} has shape {np.asarray(arr).shape}, "
                    f"expected {value.dims}")
        dtype = value.data.dtype
        self._opt_state[name] = (
            np.ascontiguousarray(eg2, dtype=dtype),
            np.ascontiguousarray(edx2, dtype=dtype),
        )

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def items(self):
        return sorted(self._params.items())

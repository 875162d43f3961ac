"""Tiny module system: parameter discovery by attribute walk, nothing else."""

from __future__ import annotations

from typing import Iterator

from .tensor import Parameter, Tensor


class Module:
    """Base class; children and parameters are found in __dict__ order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, "Tensor | object"]) -> None:
        """Copy arrays from a {name: ndarray} dict into matching parameters."""
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = state[name]
            data = arr.data if isinstance(arr, Tensor) else arr
            if tuple(data.shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for {name}: {data.shape} vs {p.data.shape}")
            p.data = data.astype(p.data.dtype, copy=True)

    def state(self) -> dict[str, object]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

from __future__ import annotations

from typing import Iterator

import numpy as np
from pydantic import BaseModel

from stfusion.core.tensor import Tensor, get_default_dtype


class ParamsModel(BaseModel):
    """Base for parameter containers; Tensor fields (also nested in models, lists and dicts) are parameters."""

    class Config:
        arbitrary_types_allowed = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for field_name in self.__fields__:
            yield from _walk(getattr(self, field_name), f"{prefix}{field_name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParamsModel):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(item, f"{name}.{index}")
    elif isinstance(value, dict):
        for key, item in value.items():
            key = getattr(key, "value", key)
            yield from _walk(item, f"{name}.{key}")


def parameter(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=get_default_dtype()), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape))


def constant_init(shape: tuple[int, ...], value: float) -> Tensor:
    return parameter(np.full(shape, value))

"""Parameter containers: naming, initialization helpers, trainability tags."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .autograd import Tensor


class Trainable:
    """Mixin for parameter groups that stay trainable under the freeze mask."""


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    return uniform(rng, (fan_in, fan_out), bound), uniform(rng, (fan_out,), bound)


def _walk(obj, prefix: str, trainable: bool) -> Iterator[tuple[str, Tensor, bool]]:
    if isinstance(obj, Tensor):
        yield prefix, obj, trainable
        return
    trainable = trainable or isinstance(obj, Trainable)
    join = (lambda k: f"{prefix}.{k}") if prefix else str
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), join(f.name), trainable)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk(v, join(k), trainable)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _walk(v, join(str(i)), trainable)


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    return [(name, t) for name, t, _ in _walk(obj, prefix, False)]


def trainable_flags(obj) -> dict[str, bool]:
    return {name: flag for name, _, flag in _walk(obj, "", False)}


def count(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))

"""Named parameter collections and the Adam update rule."""

from __future__ import annotations

from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from ..errors import NumericError, PreconditionError
from .grid import Grid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Ordered mapping of parameter names to trainable grids.

    Also owns the Adam state (first/second moment per entry plus a shared
    step counter) so that a model's full optimizer state lives in one
    place.  Iteration order is insertion order, which makes every
    downstream artifact (updates, checkpoints) deterministic.
    """

    def __init__(self):
        self._entries: Dict[str, Grid] = {}
        self.step_count: int = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def add(self, name: str, grid) -> Grid:
        if name in self._entries:
            raise PreconditionError(f"parameter {name!r} already registered")
        if not isinstance(grid, Grid):
            grid = Grid(np.asarray(grid))
        grid.requires_grad = True
        self._entries[name] = grid
        return grid

    def __getitem__(self, name: str) -> Grid:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self) -> Iterator[Tuple[str, Grid]]:
        return iter(self._entries.items())

    def grids(self):
        return list(self._entries.values())

    def total_params(self) -> int:
        return sum(g.size for g in self._entries.values())

    def freeze(self) -> "ParamStore":
        for g in self._entries.values():
            g.requires_grad = False
        return self

    def unfreeze(self) -> "ParamStore":
        for g in self._entries.values():
            g.requires_grad = True
        return self

    def zero_grads(self) -> None:
        for g in self._entries.values():
            g.grad = None

    def gather_grads(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, g in self._entries.items():
            if g.grad is None:
                raise PreconditionError(f"missing gradient for parameter {name!r}")
            grads[name] = g.grad
        return grads


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    Every registered parameter must have a gradient in ``grads``; a
    missing one raises with the parameter's name.  Updates are applied in
    registration order so repeated runs are bitwise identical.
    """
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            raise PreconditionError(f"adam_step: missing gradient for parameter {name!r}")
        g = np.asarray(g, dtype=p.values.dtype)
        if g.shape != p.shape:
            raise PreconditionError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        m = store._m.get(name)
        v = store._v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store._m[name] = m
        store._v[name] = v
        mhat = m / np.asarray(c1, dtype=p.values.dtype)
        vhat = v / np.asarray(c2, dtype=p.values.dtype)
        p.values = p.values - np.asarray(lr, dtype=p.values.dtype) * mhat / (
            np.sqrt(vhat) + np.asarray(eps, dtype=p.values.dtype)
        )

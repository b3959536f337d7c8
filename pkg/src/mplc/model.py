"""MPLC parameter container and the forward / adjoint passes through it.

A model with N masks has N+1 layers. Layer i (1-based, i <= N) propagates
by ``distances[i-1]`` and then multiplies by ``exp(i*masks[i-1])``; the last
layer only propagates by ``distances[N]``. Masks are unwrapped radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, GridMismatchError
from .grid import ComplexField, GridSpec
from .propagation import SpectralPropagator


@dataclass(eq=False)
class MPLCModel:
    grid: GridSpec
    masks: list[np.ndarray]
    distances: np.ndarray
    trainable_masks: list[bool] = None
    trainable_distances: list[bool] = None
    _propagator: SpectralPropagator = field(default=None, repr=False)

    def __post_init__(self):
        self.masks = [np.array(m, dtype=float) for m in self.masks]
        self.distances = np.array(self.distances, dtype=float)
        n = len(self.masks)
        if n < 1:
            raise ConfigurationError("a model needs at least one mask")
        if self.distances.shape != (n + 1,):
            raise ConfigurationError(f"{n} masks need {n + 1} distances, got {self.distances.shape}")
        if np.any(self.distances < 0) or not np.all(np.isfinite(self.distances)):
            raise ConfigurationError("distances must be finite and non-negative")
        for m in self.masks:
            if m.shape != self.grid.shape:
                raise GridMismatchError(f"mask shape {m.shape} does not match grid {self.grid.shape}")
        if self.trainable_masks is None:
            self.trainable_masks = [True] * n
        if self.trainable_distances is None:
            self.trainable_distances = [False] * (n + 1)
        self.trainable_masks = [bool(t) for t in self.trainable_masks]
        self.trainable_distances = [bool(t) for t in self.trainable_distances]
        if len(self.trainable_masks) != n or len(self.trainable_distances) != n + 1:
            raise ConfigurationError("trainable flags must match the mask and distance counts")

    @classmethod
    def zeros(cls, grid: GridSpec, n_masks: int, distance: float | Sequence[float]) -> "MPLCModel":
        dist = np.broadcast_to(np.asarray(distance, dtype=float), (n_masks + 1,))
        return cls(grid, [np.zeros(grid.shape) for _ in range(n_masks)], dist.copy())

    @property
    def n_masks(self) -> int:
        return len(self.masks)

    @property
    def propagator(self) -> SpectralPropagator:
        if self._propagator is None or self._propagator.grid != self.grid:
            self._propagator = SpectralPropagator(self.grid)
        return self._propagator

    def copy(self) -> "MPLCModel":
        return MPLCModel(
            self.grid,
            [m.copy() for m in self.masks],
            self.distances.copy(),
            list(self.trainable_masks),
            list(self.trainable_distances),
            self._propagator,
        )

    def phasors(self, i: int) -> np.ndarray:
        """``exp(i*phi)`` of mask ``i`` (1-based)."""
        return np.exp(1j * self.masks[i - 1])

    def _field_values(self, field):
        if isinstance(field, ComplexField):
            if field.grid != self.grid:
                raise GridMismatchError("field grid differs from model grid")
            return field.values, True
        arr = np.asarray(field, dtype=complex)
        if arr.shape[-2:] != self.grid.shape:
            raise GridMismatchError(f"array of shape {arr.shape} on grid {self.grid.shape}")
        return arr, False


@dataclass
class ForwardTrace:
    """``fields[i-1]`` is the field arriving at mask i, before modulation."""

    fields: list[np.ndarray]
    output: np.ndarray

    def __len__(self):
        return len(self.fields) + 1


@dataclass
class BackwardTrace:
    """``fields[i-1]`` is the adjoint field leaving mask i toward the output.

    It satisfies ``vdot(fields[i-1], exp(i*phi_i) * eps_i) == vdot(E_t, E_N)``;
    its conjugate is the row vector that multiplies ``exp(i*phi_i) * eps_i``
    in the wavefront-matching condition.
    """

    fields: list[np.ndarray]

    def __len__(self):
        return len(self.fields)


def apply_layer(model: MPLCModel, i: int, field):
    """Apply layer ``i`` (1-based). ``i == N+1`` is the final propagation."""
    n = model.n_masks
    if not 1 <= i <= n + 1:
        raise IndexError(f"layer index {i} outside 1..{n + 1}")
    vals, wrap = model._field_values(field)
    out = model.propagator.propagate(vals, model.distances[i - 1])
    if i <= n:
        out = out * model.phasors(i)
    return ComplexField(model.grid, out) if wrap else out


def forward(model: MPLCModel, e0):
    vals, wrap = model._field_values(e0)
    out = vals
    for i in range(1, model.n_masks + 2):
        out = apply_layer(model, i, out)
    return ComplexField(model.grid, out) if wrap else out


def forward_trace(model: MPLCModel, e0) -> ForwardTrace:
    vals, _ = model._field_values(e0)
    prop = model.propagator
    fields = []
    cur = vals
    for i in range(1, model.n_masks + 1):
        cur = prop.propagate(cur, model.distances[i - 1])
        fields.append(cur)
        cur = cur * model.phasors(i)
    out = prop.propagate(cur, model.distances[-1])
    return ForwardTrace(fields, out)


def backward_trace(model: MPLCModel, et) -> BackwardTrace:
    vals, _ = model._field_values(et)
    prop = model.propagator
    n = model.n_masks
    fields = [None] * n
    cur = prop.propagate_adjoint(vals, model.distances[n])
    fields[n - 1] = cur
    for i in range(n - 1, 0, -1):
        cur = prop.propagate_adjoint(cur * model.phasors(i + 1).conj(), model.distances[i])
        fields[i - 1] = cur
    return BackwardTrace(fields)


def overlaps(model: MPLCModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-mode overlaps ``vdot(E_N, E_t)`` for stacked ``(M, ny, nx)`` fields."""
    out = forward(model, inputs)
    return np.einsum("mij,mij->m", out.conj(), targets)

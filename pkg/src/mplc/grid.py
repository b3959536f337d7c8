"""Sampling grid, optical fields and the mode sets an MPLC is trained on.

Arrays are stored row-major with shape ``(ny, nx)``: axis -1 is x, axis -2
is y. The coordinate origin sits on pixel ``(ny // 2, nx // 2)``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateFieldError, GridMismatchError

DEFAULT_WAVELENGTH = 1550e-9
NORM_TOL = 1e-12
CLIP_TOL = 1e-3


@dataclass(frozen=True)
class GridSpec:
    """Uniform square-pixel sampling grid.

    Parameters
    ----------
    nx, ny : int
        Pixel counts along x and y.
    pitch : float
        Pixel size in meters.
    wavelength : float
        Vacuum wavelength in meters.
    """

    nx: int
    ny: int
    pitch: float
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ConfigurationError("grid dimensions must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ConfigurationError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not self.pitch > 0:
            raise ConfigurationError(f"pitch must be positive, got {self.pitch}")
        if not self.wavelength > 0:
            raise ConfigurationError(f"wavelength must be positive, got {self.wavelength}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def k0(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def extent(self) -> tuple[float, float]:
        """Physical size (width, height) in meters."""
        return (self.nx * self.pitch, self.ny * self.pitch)

    @cached_property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) - self.nx // 2) * self.pitch

    @cached_property
    def y(self) -> np.ndarray:
        return (np.arange(self.ny) - self.ny // 2) * self.pitch

    @cached_property
    def kx(self) -> np.ndarray:
        """Angular spatial frequencies along x (rad/m), DFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.nx, d=self.pitch)

    @cached_property
    def ky(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.ny, d=self.pitch)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="xy")

    def contains(self, x: float, y: float) -> bool:
        return (self.x[0] <= x <= self.x[-1]) and (self.y[0] <= y <= self.y[-1])

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "pitch_um": self.pitch * 1e6,
            "wavelength_nm": self.wavelength * 1e9,
        }


@dataclass(frozen=True, eq=False)
class ComplexField:
    """A sampled complex scalar field on a :class:`GridSpec`."""

    grid: GridSpec
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape:
            raise GridMismatchError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def power(self) -> float:
        return float(np.vdot(self.values, self.values).real)

    def __mul__(self, other):
        return ComplexField(self.grid, self.values * other)

    __rmul__ = __mul__


def _check_grids(a: ComplexField, b: ComplexField):
    if a.grid != b.grid:
        raise GridMismatchError(f"fields live on different grids: {a.grid} vs {b.grid}")


def inner_product(a: ComplexField, b: ComplexField) -> complex:
    """Discrete overlap ``sum(conj(a) * b)``, conjugating the first argument."""
    _check_grids(a, b)
    return complex(np.vdot(a.values, b.values))


def normalize(f: ComplexField) -> ComplexField:
    p = f.power
    if not p > 0:
        raise DegenerateFieldError("cannot normalize a field with zero power")
    return ComplexField(f.grid, f.values / np.sqrt(p), normalized=True)


def is_normalized(values: np.ndarray, tol: float = NORM_TOL) -> bool:
    return abs(np.vdot(values, values).real - 1.0) < tol


def gaussian_spot(grid: GridSpec, center=(0.0, 0.0), waist: float = 50e-6) -> ComplexField:
    """Normalized flat-phase Gaussian ``exp(-r^2 / w0^2)`` centered at ``center``."""
    if not waist > 0:
        raise ConfigurationError(f"waist must be positive, got {waist}")
    x0, y0 = center
    if not grid.contains(x0, y0):
        raise ConfigurationError(f"spot center {center} lies outside the grid")
    if waist < 2 * grid.pitch:
        warnings.warn(
            f"waist {waist:.3g} m is under-resolved at pitch {grid.pitch:.3g} m",
            stacklevel=2,
        )
    gx = np.exp(-((grid.x - x0) ** 2) / waist**2)
    gy = np.exp(-((grid.y - y0) ** 2) / waist**2)
    return normalize(ComplexField(grid, np.outer(gy, gx)))


def hermite(order: int, x: np.ndarray) -> np.ndarray:
    """Physicists' Hermite polynomial via the three-term recurrence."""
    h_prev = np.ones_like(x, dtype=float)
    if order == 0:
        return h_prev
    h = 2 * x
    for k in range(1, order):
        h_prev, h = h, 2 * x * h - 2 * k * h_prev
    return h


def _hg_1d(coord: np.ndarray, order: int, waist: float) -> np.ndarray:
    u = coord / waist
    return hermite(order, np.sqrt(2) * u) * np.exp(-(u**2))


def _clipped_fraction(axis: np.ndarray, order: int, waist: float, center: float) -> float:
    # Power outside the sampled window, estimated on a 4x wider axis of the same pitch.
    pitch = axis[1] - axis[0]
    n = len(axis)
    wide = axis[0] - 2 * n * pitch + np.arange(5 * n) * pitch
    prof = _hg_1d(wide - center, order, waist) ** 2
    inside = (wide >= axis[0] - pitch / 2) & (wide <= axis[-1] + pitch / 2)
    total = prof.sum()
    return float(prof[~inside].sum() / total) if total > 0 else 0.0


def hermite_gaussian(grid: GridSpec, m: int, n: int, waist: float, center=(0.0, 0.0)) -> ComplexField:
    """Normalized HG_mn at its waist plane; ``m`` indexes x, ``n`` indexes y."""
    if m < 0 or n < 0:
        raise ConfigurationError(f"mode indices must be non-negative, got ({m}, {n})")
    if not waist > 0:
        raise ConfigurationError(f"waist must be positive, got {waist}")
    x0, y0 = center
    clipped = 1 - (1 - _clipped_fraction(grid.x, m, waist, x0)) * (1 - _clipped_fraction(grid.y, n, waist, y0))
    if clipped > CLIP_TOL:
        warnings.warn(
            f"HG{m}{n} (waist {waist:.3g} m) loses {clipped:.2%} of its power outside the grid",
            stacklevel=2,
        )
    vals = np.outer(_hg_1d(grid.y - y0, n, waist), _hg_1d(grid.x - x0, m, waist))
    return normalize(ComplexField(grid, vals))


def mode_groups(n_groups: int) -> list[tuple[int, int]]:
    """HG indices of the first ``n_groups`` mode groups, raster order over (group, m)."""
    return [(m, g - m) for g in range(n_groups) for m in range(g + 1)]


def groups_for_count(count: int) -> int | None:
    """Number of complete mode groups holding exactly ``count`` modes, else None."""
    g, total = 0, 0
    while total < count:
        g += 1
        total += g
    return g if total == count else None


class ModeOrdering(str, enum.Enum):
    """How spots (left to right along x) are paired with HG modes."""

    RASTER = "raster"
    REVERSED = "reversed"


@dataclass(frozen=True, eq=False)
class ModeSet:
    """Paired, normalized input and target fields stacked as ``(M, ny, nx)`` arrays."""

    grid: GridSpec
    inputs: np.ndarray
    targets: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=complex)
        targets = np.asarray(self.targets, dtype=complex)
        if inputs.ndim != 3 or inputs.shape[0] < 1:
            raise ConfigurationError("a mode set needs at least one (ny, nx) input field")
        if inputs.shape != targets.shape:
            raise ConfigurationError(
                f"{inputs.shape[0]} inputs vs {targets.shape[0]} targets (or shape mismatch)"
            )
        if inputs.shape[1:] != self.grid.shape:
            raise GridMismatchError(f"fields of shape {inputs.shape[1:]} on grid {self.grid.shape}")
        for name, arr in (("input", inputs), ("target", targets)):
            powers = np.einsum("mij,mij->m", arr.conj(), arr).real
            bad = np.flatnonzero(np.abs(powers - 1) >= NORM_TOL)
            if bad.size:
                raise ConfigurationError(f"{name} field {bad[0]} is not normalized (power {powers[bad[0]]!r})")
        inputs.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_fields(cls, inputs: Sequence[ComplexField], targets: Sequence[ComplexField], labels=()):
        if len(inputs) != len(targets) or not inputs:
            raise ConfigurationError("inputs and targets must be non-empty and of equal length")
        grid = inputs[0].grid
        for f in [*inputs, *targets]:
            if f.grid != grid:
                raise GridMismatchError("all fields of a mode set must share one grid")
        return cls(grid, np.stack([f.values for f in inputs]), np.stack([f.values for f in targets]), tuple(labels))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    def input_field(self, j: int) -> ComplexField:
        return ComplexField(self.grid, self.inputs[j], normalized=True)

    def target_field(self, j: int) -> ComplexField:
        return ComplexField(self.grid, self.targets[j], normalized=True)

    def subset(self, indices) -> "ModeSet":
        idx = list(indices)
        labels = tuple(self.labels[i] for i in idx) if self.labels else ()
        return ModeSet(self.grid, self.inputs[idx], self.targets[idx], labels)


def build_linear_array_modeset(
    grid: GridSpec,
    count: int,
    spot_spacing: float,
    spot_waist: float,
    target_waist: float,
    ordering: ModeOrdering | str | Sequence[int] = ModeOrdering.RASTER,
    modes: Sequence[tuple[int, int]] | None = None,
) -> ModeSet:
    """Linear array of Gaussian spots along x mapped onto centered HG modes.

    ``modes`` overrides the default mode list (the first complete mode groups
    holding ``count`` modes). ``ordering`` is a :class:`ModeOrdering` or an
    explicit permutation: spot ``k`` is paired with ``modes[ordering[k]]``.
    """
    if modes is None:
        n_groups = groups_for_count(count)
        if n_groups is None:
            raise ConfigurationError(
                f"{count} modes do not fill complete mode groups; pass an explicit mode list",
                path="target.modes",
            )
        modes = mode_groups(n_groups)
    modes = [tuple(int(v) for v in mn) for mn in modes]
    if len(modes) != count:
        raise ConfigurationError(f"mode list has {len(modes)} entries, expected {count}", path="target.modes")

    if isinstance(ordering, (str, ModeOrdering)):
        ordering = ModeOrdering(ordering)
        perm = list(range(count)) if ordering is ModeOrdering.RASTER else list(range(count))[::-1]
    else:
        perm = [int(p) for p in ordering]
        if sorted(perm) != list(range(count)):
            raise ConfigurationError("ordering must be a permutation of the mode indices", path="target.ordering")

    centers = (np.arange(count) - (count - 1) / 2) * spot_spacing
    half_span = abs(centers[0]) + 2 * spot_waist
    if half_span > min(abs(grid.x[0]), grid.x[-1]) or 2 * spot_waist > min(abs(grid.y[0]), grid.y[-1]):
        raise ConfigurationError(
            f"spot array (half-span {half_span * 1e6:.0f} um) does not fit the grid "
            f"({grid.extent[0] * 1e6:.0f} um wide)",
            path="source",
        )

    inputs, targets, labels = [], [], []
    for k, cx in enumerate(centers):
        m, n = modes[perm[k]]
        inputs.append(gaussian_spot(grid, (float(cx), 0.0), spot_waist))
        targets.append(hermite_gaussian(grid, m, n, target_waist))
        labels.append(f"spot{k}->HG{m}{n}")
    return ModeSet.from_fields(inputs, targets, labels)


def similarity(phi1: np.ndarray, phi2: np.ndarray) -> float:
    """Normalized cross-correlation of the phasors ``exp(i*phi1)`` and ``exp(i*phi2)``."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    if phi1.shape != phi2.shape:
        raise ValueError(f"mask shapes differ: {phi1.shape} vs {phi2.shape}")
    s = np.abs(np.sum(np.exp(1j * (phi1 - phi2)))) / phi1.size
    return float(min(s, 1.0))

"""Angular-spectrum free-space propagation.

Fields may carry leading batch axes: every function acts on the last two
axes, so a ``(M, ny, nx)`` stack of modes propagates in one FFT call.
"""

from __future__ import annotations

import os
import threading

import numpy as np
import scipy.fft as sfft

from .grid import ComplexField, GridSpec
from .errors import GridMismatchError

_AXES = (-2, -1)


def fft_workers() -> int:
    """Thread count handed to scipy.fft (``MPLC_THREADS`` env var, default 1)."""
    try:
        return max(1, int(os.environ.get("MPLC_THREADS", "1")))
    except ValueError:
        return 1


def fft2(a):
    return sfft.fft2(a, axes=_AXES, workers=fft_workers())


def ifft2(a):
    return sfft.ifft2(a, axes=_AXES, workers=fft_workers())


class SpectralPropagator:
    """Transfer-function propagator ``F^-1 diag(exp(i kz z)) F`` on one grid.

    Evanescent components get ``kz = i*sqrt(kx^2 + ky^2 - k0^2)`` so that the
    transfer factor decays as ``exp(-|kz| z)``; nothing is ever amplified.
    Transfer factors are cached per bit-exact distance.
    """

    def __init__(self, grid: GridSpec, cache_size: int = 64):
        self.grid = grid
        kx, ky = np.meshgrid(grid.kx, grid.ky, indexing="xy")
        arg = grid.k0**2 - kx**2 - ky**2
        self.propagating = arg >= 0
        self.kz = np.where(self.propagating, np.sqrt(np.abs(arg)), 1j * np.sqrt(np.abs(arg)))
        self.kz[0, 0] = grid.k0
        self.kz.setflags(write=False)
        self._cache: dict[float, np.ndarray] = {}
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def _check_z(self, z):
        if not z >= 0:
            raise ValueError(f"propagation distance must be non-negative, got {z}")

    def transfer(self, z: float) -> np.ndarray:
        """``exp(i kz z)``; read-only, shared between callers."""
        self._check_z(z)
        key = float(z)
        h = self._cache.get(key)
        if h is None:
            h = np.exp(1j * self.kz * key)
            h.setflags(write=False)
            with self._lock:
                if len(self._cache) >= self._cache_size:
                    self._cache.pop(next(iter(self._cache)))
                self._cache[key] = h
        return h

    def transfer_derivative(self, z: float) -> np.ndarray:
        """Elementwise ``d/dz exp(i kz z) = i kz exp(i kz z)``."""
        return 1j * self.kz * self.transfer(z)

    def clear_cache(self):
        with self._lock:
            self._cache.clear()

    def _values(self, field):
        if isinstance(field, ComplexField):
            if field.grid != self.grid:
                raise GridMismatchError("field grid differs from propagator grid")
            return field.values, True
        arr = np.asarray(field)
        if arr.shape[-2:] != self.grid.shape:
            raise GridMismatchError(f"array of shape {arr.shape} on grid {self.grid.shape}")
        return arr, False

    def propagate(self, field, z: float):
        vals, wrap = self._values(field)
        if z == 0:
            out = np.array(vals, dtype=complex)
        else:
            out = ifft2(fft2(vals) * self.transfer(z))
        return ComplexField(self.grid, out) if wrap else out

    def propagate_adjoint(self, field, z: float):
        """Conjugate-transpose of :meth:`propagate` (never a negative distance)."""
        vals, wrap = self._values(field)
        if z == 0:
            out = np.array(vals, dtype=complex)
        else:
            out = ifft2(fft2(vals) * self.transfer(z).conj())
        return ComplexField(self.grid, out) if wrap else out

    def band_limit(self, field):
        """Remove evanescent spectral content."""
        vals, wrap = self._values(field)
        out = ifft2(fft2(vals) * self.propagating)
        return ComplexField(self.grid, out) if wrap else out


def propagate(field: ComplexField, z: float) -> ComplexField:
    return SpectralPropagator(field.grid).propagate(field, z)

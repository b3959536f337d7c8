"""Adjoint-method gradients of the mode-conversion loss.

The loss over a batch of modes ``j_1..j_B`` is ``L = 1 - mean(eta_j)`` with
``eta_j = |<E_N^(j), E_t^(j)>|^2``. One forward trace and one backward trace
per mode give the gradient for every mask pixel and every distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .grid import ModeSet
from .model import MPLCModel, backward_trace, forward_trace
from .propagation import fft2


@dataclass
class GradientBundle:
    """Loss and gradients for one batch.

    ``mask_grads`` is keyed by 1-based mask index, ``distance_grads`` by
    distance index 0..N; only requested parameters appear.
    """

    loss: float
    mask_grads: dict[int, np.ndarray] = field(default_factory=dict)
    distance_grads: dict[int, float] = field(default_factory=dict)
    overlaps: dict[int, complex] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return len(self.overlaps)

    @property
    def efficiencies(self) -> dict[int, float]:
        return {j: abs(o) ** 2 for j, o in self.overlaps.items()}


def _check_batch(modeset: ModeSet, batch) -> list[int]:
    idx = [int(j) for j in batch]
    if not idx:
        raise ConfigurationError("batch must not be empty")
    m = len(modeset)
    for j in idx:
        if not 0 <= j < m:
            raise IndexError(f"mode index {j} outside 0..{m - 1}")
    return idx


def _resolve(flags: Sequence[bool], explicit: Iterable[int] | None) -> list[int]:
    if explicit is None:
        return [k for k, t in enumerate(flags) if t]
    return sorted(set(int(k) for k in explicit))


def loss_and_grads(
    model: MPLCModel,
    modeset: ModeSet,
    batch: Sequence[int] | None = None,
    masks: Iterable[int] | None = None,
    distances: Iterable[int] | None = None,
) -> GradientBundle:
    """Batch loss plus gradients for the requested parameters.

    ``masks`` holds 1-based mask indices and ``distances`` holds indices
    0..N. When they are omitted, the model's trainable flags decide.
    """
    if batch is None:
        batch = range(len(modeset))
    idx = _check_batch(modeset, batch)
    if masks is None:
        mask_idx = [k + 1 for k in _resolve(model.trainable_masks, None)]
    else:
        mask_idx = sorted(set(int(i) for i in masks))
    dist_idx = _resolve(model.trainable_distances, distances)
    n = model.n_masks
    for i in mask_idx:
        if not 1 <= i <= n:
            raise IndexError(f"mask index {i} outside 1..{n}")
    for k in dist_idx:
        if not 0 <= k <= n:
            raise IndexError(f"distance index {k} outside 0..{n}")

    e0 = modeset.inputs[idx]
    et = modeset.targets[idx]
    b = len(idx)
    fwd = forward_trace(model, e0)
    ov = np.einsum("mij,mij->m", fwd.output.conj(), et)
    loss = float(1.0 - np.mean(np.abs(ov) ** 2))
    bundle = GradientBundle(loss, overlaps={j: complex(o) for j, o in zip(idx, ov)})
    if not mask_idx and not dist_idx:
        return bundle

    bwd = backward_trace(model, et)
    w = ov[:, None, None]
    for i in mask_idx:
        term = w * bwd.fields[i - 1].conj() * model.phasors(i) * fwd.fields[i - 1]
        bundle.mask_grads[i] = (2.0 / b) * np.sum(term.imag, axis=0)

    if dist_idx:
        prop = model.propagator
        npix = model.grid.size
        cbar = ov[:, None, None]  # conj(<E_t, E_N>)
        for k in dist_idx:
            # z_k feeds mask k+1, or the output plane when k == N.
            if k == 0:
                before = e0
            else:
                before = model.phasors(k) * fwd.fields[k - 1]
            if k == n:
                adjoint = et
            else:
                adjoint = model.phasors(k + 1).conj() * bwd.fields[k]
            dh = prop.transfer_derivative(model.distances[k])
            dc = np.einsum("mij,mij->m", fft2(adjoint).conj(), dh * fft2(before)) / npix
            deta = 2.0 * np.real(cbar[:, 0, 0] * dc)
            bundle.distance_grads[k] = float(-np.mean(deta))
    return bundle


def aggregate_gradients(bundles: Sequence[GradientBundle], mode_counts: Sequence[int] | None = None) -> GradientBundle:
    """Combine per-batch bundles into the bundle of their union.

    Each bundle holds batch means, so bundle ``b`` is weighted by
    ``mode_counts[b] / sum(mode_counts)``; over an epoch partition the
    result is the full-dataset bundle.
    """
    if not bundles:
        raise ValueError("nothing to aggregate")
    if mode_counts is None:
        mode_counts = [bd.batch_size for bd in bundles]
    if len(mode_counts) != len(bundles):
        raise ValueError("one mode count per bundle required")
    keys_m = set(bundles[0].mask_grads)
    keys_d = set(bundles[0].distance_grads)
    for bd in bundles[1:]:
        if set(bd.mask_grads) != keys_m or set(bd.distance_grads) != keys_d:
            raise ValueError("bundles cover different parameter sets")
        for i in keys_m:
            if bd.mask_grads[i].shape != bundles[0].mask_grads[i].shape:
                raise ValueError(f"mask {i} gradient shapes differ")
    total = float(sum(mode_counts))
    weights = [c / total for c in mode_counts]
    out = GradientBundle(loss=float(sum(w * bd.loss for w, bd in zip(weights, bundles))))
    for i in sorted(keys_m):
        acc = np.zeros_like(bundles[0].mask_grads[i])
        for w, bd in zip(weights, bundles):
            acc += w * bd.mask_grads[i]
        out.mask_grads[i] = acc
    for k in sorted(keys_d):
        out.distance_grads[k] = float(sum(w * bd.distance_grads[k] for w, bd in zip(weights, bundles)))
    for bd in bundles:
        out.overlaps.update(bd.overlaps)
    return out


class FrozenMaskObjective:
    """Loss as a function of a single mask while every other parameter is fixed.

    With the rest of the system frozen, the overlap of mode j is linear in the
    phasor of mask i: ``c_j = sum_p a_jp exp(i*phi_p)`` with
    ``a_j = conj(beta_j) * eps_j``. Precomputing ``a`` makes each loss and
    gradient evaluation free of FFTs; values match :func:`loss_and_grads`.
    """

    def __init__(self, model: MPLCModel, modeset: ModeSet, i: int, batch: Sequence[int] | None = None):
        if not 1 <= i <= model.n_masks:
            raise IndexError(f"mask index {i} outside 1..{model.n_masks}")
        idx = list(range(len(modeset))) if batch is None else _check_batch(modeset, batch)
        self.index = i
        self.modes = idx
        eps = forward_trace(model, modeset.inputs[idx]).fields[i - 1]
        beta = backward_trace(model, modeset.targets[idx]).fields[i - 1]
        self.coupling = beta.conj() * eps

    def overlaps(self, phi: np.ndarray) -> np.ndarray:
        """``<E_t, E_N>`` per mode for mask value ``phi``."""
        return np.einsum("mij,ij->m", self.coupling, np.exp(1j * phi))

    def loss(self, phi: np.ndarray) -> float:
        return float(1.0 - np.mean(np.abs(self.overlaps(phi)) ** 2))

    def loss_and_grad(self, phi: np.ndarray) -> tuple[float, np.ndarray]:
        ph = np.exp(1j * phi)
        c = np.einsum("mij,ij->m", self.coupling, ph)
        loss = float(1.0 - np.mean(np.abs(c) ** 2))
        grad = (2.0 / len(c)) * (np.einsum("m,mij->ij", c.conj(), self.coupling) * ph).imag
        return loss, grad

    def matched_phasor_sum(self) -> np.ndarray:
        """Pointwise ``sum_j xi_j * eps_j`` (the wavefront-matching field)."""
        return self.coupling.sum(axis=0)

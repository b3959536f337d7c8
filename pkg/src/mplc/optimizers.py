"""ADAM and wavefront-matching updates, and the convergence-controlled stage loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

from .errors import NonFiniteGradientError, StageFailedError
from .gradients import FrozenMaskObjective, GradientBundle, aggregate_gradients, loss_and_grads
from .grid import ModeSet
from .model import MPLCModel, backward_trace

log = logging.getLogger(__name__)

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8
DEFAULT_DISTANCE_SCALE = 1e-3  # meters moved per unit of phase learning rate
DIVERGENCE_FACTOR = 10.0
# matched sums below this fraction of the peak carry no usable phase
WFM_RTOL = 1e-4


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name.

    Keys are ``("mask", i)`` with 1-based ``i`` or ``("z", k)`` with
    ``k`` in 0..N. Distances step with ``lr * distance_scale``.
    """

    lr: float = 0.1
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    distance_scale: float = DEFAULT_DISTANCE_SCALE
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def rate(self, key: Hashable) -> float:
        return self.lr * self.distance_scale if key[0] == "z" else self.lr


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected ADAM step. Returns new parameter values; ``state`` is advanced.

    Distance parameters are clamped to ``z >= 0`` after the step.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {key} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = dict(params)
    for key, g in grads.items():
        g = np.asarray(g, dtype=float)
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m = state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        step = state.rate(key) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = np.asarray(params[key], dtype=float) - step
        if key[0] == "z":
            new = np.maximum(new, 0.0)
        out[key] = new if np.ndim(new) else float(new)
    return out


def matched_phasor_sum(model: MPLCModel, modeset: ModeSet, i: int) -> np.ndarray:
    return FrozenMaskObjective(model, modeset, i).matched_phasor_sum()


def _wfm_phase(total: np.ndarray, previous: np.ndarray, rtol: float | None = None) -> np.ndarray:
    rtol = WFM_RTOL if rtol is None else rtol
    mag = np.abs(total)
    dark = mag <= rtol * mag.max() if mag.max() > 0 else np.ones(total.shape, bool)
    return np.where(dark, previous, -np.angle(total))


def wfm_update(model: MPLCModel, modeset: ModeSet, i: int, rtol: float | None = None) -> np.ndarray:
    """Wavefront-matching value of mask ``i`` with all other parameters fixed.

    Sets each pixel to ``-arg(sum_j xi_j * eps_j)``, aligning every pixel's
    matched phasor with the real axis. Dark pixels, where the sum is at most
    ``rtol`` times its peak (default ``WFM_RTOL``), keep their previous phase:
    their phase is numerical noise. The model is not modified.
    """
    total = matched_phasor_sum(model, modeset, i)
    return _wfm_phase(total, model.masks[i - 1], rtol)


def wfm_sweep(model: MPLCModel, modeset: ModeSet, masks, rtol: float | None = None) -> float:
    """Update ``masks`` in increasing order by wavefront matching, in place.

    Backward fields for mask i depend only on masks after i, so a single
    backward trace plus one forward pass serves the whole sweep. Returns
    the full-dataset loss after the sweep.
    """
    order = sorted(masks)
    prop = model.propagator
    bwd = backward_trace(model, modeset.targets)
    cur = prop.propagate(modeset.inputs, model.distances[0])
    for i in range(1, model.n_masks + 1):
        if i in order:
            total = np.einsum("mij,mij->ij", bwd.fields[i - 1].conj(), cur)
            model.masks[i - 1] = _wfm_phase(total, model.masks[i - 1], rtol)
        cur = prop.propagate(cur * model.phasors(i), model.distances[i])
    ov = np.einsum("mij,mij->m", cur.conj(), modeset.targets)
    return float(1.0 - np.mean(np.abs(ov) ** 2))


@dataclass
class StageResult:
    name: str
    iterations: int
    losses: list[float]
    elapsed: list[float]
    stop_reason: str

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def mean_etas(self) -> list[float]:
        return [1.0 - v for v in self.losses]


def relative_change(loss: float, prev: float) -> float:
    if abs(prev) < 1e-12:
        return abs(loss - prev)
    return abs(loss - prev) / abs(prev)


def _params(model: MPLCModel, masks, dists) -> dict:
    p = {("mask", i): model.masks[i - 1] for i in masks}
    p.update({("z", k): float(model.distances[k]) for k in dists})
    return p


def _assign(model: MPLCModel, params: dict, groups) -> None:
    for key, val in params.items():
        if key[0] == "mask":
            model.masks[key[1] - 1] = val
        else:
            model.distances[key[1]] = val
    for grp in groups:
        model.distances[list(grp)] = np.mean(model.distances[list(grp)])
    if model._propagator is not None and len(model._propagator._cache) > 32:
        model._propagator.clear_cache()


def _grads(bundle: GradientBundle, groups) -> dict:
    g = {("mask", i): a for i, a in bundle.mask_grads.items()}
    dg = dict(bundle.distance_grads)
    for grp in groups:
        mean = float(np.mean([dg[k] for k in grp if k in dg]))
        for k in grp:
            if k in dg:
                dg[k] = mean
    g.update({("z", k): v for k, v in dg.items()})
    return g


def run_stage(
    model: MPLCModel,
    modeset: ModeSet,
    stage,
    rng: np.random.Generator,
    callback: Callable[[int, float], None] | None = None,
) -> StageResult:
    """Iterate one training stage until the relative loss change drops to ``stage.tolerance``.

    ``stage`` is a :class:`mplc.macro.Stage`. Every recorded loss is the
    full-dataset loss after an update (one epoch for ADAM, one sweep for
    wavefront matching). The model is updated in place.
    """
    from .macro import epoch_batches  # deferred: macro imports this module

    masks = sorted(stage.masks)
    dists = sorted(stage.distances)
    groups = [sorted(g) for g in stage.equal_distances]
    n_modes = len(modeset)
    batch = n_modes if stage.batch_size is None else min(stage.batch_size, n_modes)
    if not masks and not dists:
        raise ValueError(f"stage {stage.name!r} has nothing to train")
    for grp in groups:
        model.distances[grp] = np.mean(model.distances[grp])

    losses, elapsed = [], []
    t0 = time.perf_counter()
    l_prev = None
    best = np.inf
    reason = "max-iters"

    def record(loss: float) -> bool:
        nonlocal l_prev, best
        if not np.isfinite(loss):
            raise StageFailedError(f"stage {stage.name!r}: non-finite loss at iteration {len(losses) + 1}")
        losses.append(loss)
        elapsed.append(time.perf_counter() - t0)
        if callback is not None:
            callback(len(losses), loss)
        best = min(best, loss)
        if best > 0 and loss > DIVERGENCE_FACTOR * best:
            raise StageFailedError(
                f"stage {stage.name!r} diverged: loss {loss:.3g} exceeds {DIVERGENCE_FACTOR:g}x best {best:.3g}"
            )
        value = converged_value(loss)
        delta = relative_change(value, l_prev)
        l_prev = value
        return delta <= stage.tolerance

    def converged_value(loss: float) -> float:
        # Convergence is judged on the optimized objective: -mean(eta) when the
        # constant is dropped, 1 - mean(eta) otherwise.
        return loss - 1.0 if stage.convergence == "efficiency" else loss

    def start(loss: float):
        nonlocal l_prev, best
        l_prev = converged_value(loss)
        best = loss

    if stage.method == "wfm-sweep":
        start(loss_and_grads(model, modeset, masks=[], distances=[]).loss)
        for _ in range(stage.max_iters):
            if record(wfm_sweep(model, modeset, masks)):
                reason = "tolerance"
                break
        return StageResult(stage.name, len(losses), losses, elapsed, reason)

    state = AdamState(
        lr=stage.learning_rate,
        beta1=stage.beta1,
        beta2=stage.beta2,
        eps=stage.adam_eps,
        distance_scale=stage.distance_scale,
    )

    if len(masks) == 1 and not dists and batch == n_modes:
        # Only one mask moves: overlaps are linear in its phasor, no FFTs needed per step.
        i = masks[0]
        obj = FrozenMaskObjective(model, modeset, i)
        phi = model.masks[i - 1]
        loss, grad = obj.loss_and_grad(phi)
        start(loss)
        for _ in range(stage.max_iters):
            phi = adam_step(state, {("mask", i): phi}, {("mask", i): grad})[("mask", i)]
            loss, grad = obj.loss_and_grad(phi)
            if record(loss):
                reason = "tolerance"
                break
        model.masks[i - 1] = phi
        return StageResult(stage.name, len(losses), losses, elapsed, reason)

    def epoch_bundles():
        parts = epoch_batches(n_modes, batch, rng)
        return [loss_and_grads(model, modeset, b, masks=masks, distances=dists) for b in parts], parts

    aggregate = stage.gradient_mode == "epoch-aggregate"
    if batch == n_modes or aggregate:
        bundles, parts = epoch_bundles()
        full = aggregate_gradients(bundles, [len(p) for p in parts])
        start(full.loss)
        for _ in range(stage.max_iters):
            params = adam_step(state, _params(model, masks, dists), _grads(full, groups))
            _assign(model, params, groups)
            bundles, parts = epoch_bundles()
            full = aggregate_gradients(bundles, [len(p) for p in parts])
            if record(full.loss):
                reason = "tolerance"
                break
        return StageResult(stage.name, len(losses), losses, elapsed, reason)

    start(loss_and_grads(model, modeset, masks=[], distances=[]).loss)
    for _ in range(stage.max_iters):
        for part in epoch_batches(n_modes, batch, rng):
            bundle = loss_and_grads(model, modeset, part, masks=masks, distances=dists)
            params = adam_step(state, _params(model, masks, dists), _grads(bundle, groups))
            _assign(model, params, groups)
        loss = loss_and_grads(model, modeset, masks=[], distances=[]).loss
        if record(loss):
            reason = "tolerance"
            break
    return StageResult(stage.name, len(losses), losses, elapsed, reason)

"""Post-training metrics: coupling efficiency, crosstalk, insertion loss, robustness."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, GridMismatchError
from .grid import ComplexField, ModeSet, is_normalized
from .model import MPLCModel, forward

EIG_RESIDUAL_TOL = 1e-8


def coupling_efficiency(model: MPLCModel, e0: ComplexField, et: ComplexField) -> float:
    """``|<E_N, E_t>|^2`` for one normalized input/target pair."""
    for name, f in (("input", e0), ("target", et)):
        if f.grid != model.grid:
            raise GridMismatchError(f"{name} field grid differs from model grid")
        if not is_normalized(f.values):
            raise ConfigurationError(f"{name} field is not normalized")
    out = forward(model, e0.values)
    return float(abs(np.vdot(out, et.values)) ** 2)


@dataclass
class CrosstalkMatrix:
    """Complex transfer matrix ``h[j, k] = <E_t^(j), forward(E_0^(k))>``."""

    h: np.ndarray

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.h) ** 2

    @property
    def efficiencies(self) -> np.ndarray:
        return np.abs(np.diag(self.h)) ** 2

    @property
    def loss(self) -> float:
        return float(1.0 - np.mean(self.efficiencies))

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``H^dagger H``, descending."""
        gram = self.h.conj().T @ self.h
        gram = 0.5 * (gram + gram.conj().T)
        w, v = np.linalg.eigh(gram)
        resid = np.linalg.norm(gram @ v - v * w, axis=0)
        if np.any(resid > EIG_RESIDUAL_TOL * max(1.0, np.abs(w).max())):
            raise ArithmeticError(f"Hermitian eigensolver residual {resid.max():.3g} too large")
        return w[::-1]

    def to_csv(self) -> str:
        """Rows of interleaved ``re, im`` pairs."""
        m = self.h.shape[1]
        header = ",".join(f"re_{k},im_{k}" for k in range(m))
        lines = [header]
        for row in self.h:
            lines.append(",".join(f"{float(z.real)!r},{float(z.imag)!r}" for z in row))
        return "\n".join(lines) + "\n"


def crosstalk_matrix(model: MPLCModel, modeset: ModeSet) -> CrosstalkMatrix:
    if modeset.grid != model.grid:
        raise GridMismatchError("mode set grid differs from model grid")
    m = len(modeset)
    outs = forward(model, modeset.inputs).reshape(m, -1)
    tgts = modeset.targets.reshape(m, -1)
    return CrosstalkMatrix(tgts.conj() @ outs.T)


def insertion_loss(ct: CrosstalkMatrix) -> float:
    """``-10 log10`` of the mean eigenvalue of ``H^dagger H``; +inf for a zero matrix."""
    mean = float(np.mean(ct.eigenvalues()))
    if mean <= 0:
        return float("inf")
    return float(-10.0 * np.log10(mean))


def perturbation_draws(model: MPLCModel, dphi: float, k: int, rng: np.random.Generator):
    """Yield ``k`` perturbation sets, i.i.d. ``U[-dphi, dphi]`` per pixel and mask."""
    if dphi < 0 or k < 1:
        raise ConfigurationError("need dphi >= 0 and K >= 1")
    for _ in range(k):
        yield [rng.uniform(-dphi, dphi, size=m.shape) for m in model.masks]


def _perturbed(model: MPLCModel, deltas) -> MPLCModel:
    p = model.copy()
    p.masks = [m + d for m, d in zip(model.masks, deltas)]
    return p


def _perturbation_metrics(model, modeset, dphi, k, rng):
    base = crosstalk_matrix(model, modeset)
    l0, il0 = base.loss, insertion_loss(base)
    dl, dil = [], []
    for deltas in perturbation_draws(model, dphi, k, rng):
        ct = crosstalk_matrix(_perturbed(model, deltas), modeset)
        dl.append(abs(ct.loss - l0) / (1.0 + abs(l0)))
        dil.append(abs(insertion_loss(ct) - il0))
    return base, np.array(dl), np.array(dil)


def sharpness(model: MPLCModel, modeset: ModeSet, dphi: float = 0.05, k: int = 10, rng=None) -> tuple[float, float]:
    """Mean and std of ``|L(phi + d) - L(phi)| / (1 + |L(phi)|)`` over ``k`` random draws."""
    rng = np.random.default_rng(rng)
    _, dl, _ = _perturbation_metrics(model, modeset, dphi, k, rng)
    return float(dl.mean()), float(dl.std())


def optical_tolerance(model: MPLCModel, modeset: ModeSet, dphi: float = 0.05, k: int = 10, rng=None) -> tuple[float, float]:
    """Mean and std of the insertion-loss change (dB) under random phase perturbation."""
    rng = np.random.default_rng(rng)
    _, _, dil = _perturbation_metrics(model, modeset, dphi, k, rng)
    return float(dil.mean()), float(dil.std())


@dataclass
class EvalReport:
    efficiencies: list[float]
    loss: float
    insertion_loss_db: float
    sharpness_mean: float
    sharpness_std: float
    tolerance_mean_db: float
    tolerance_std_db: float
    k: int
    dphi: float
    seed: int | None
    crosstalk: CrosstalkMatrix = field(repr=False, default=None)

    @property
    def mean_efficiency(self) -> float:
        return float(np.mean(self.efficiencies))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("crosstalk")
        d["mean_efficiency"] = self.mean_efficiency
        if d["seed"] is None:
            d.pop("seed")
        if not np.isfinite(d["insertion_loss_db"]):
            d["insertion_loss_db"] = "inf"
        return d


def evaluate(model: MPLCModel, modeset: ModeSet, dphi: float = 0.05, k: int = 10, seed: int | None = 0) -> EvalReport:
    """Full report; the same ``k`` perturbation draws feed both sharpness and tolerance."""
    rng = np.random.default_rng(seed)
    base, dl, dil = _perturbation_metrics(model, modeset, dphi, k, rng)
    return EvalReport(
        efficiencies=[float(e) for e in base.efficiencies],
        loss=base.loss,
        insertion_loss_db=insertion_loss(base),
        sharpness_mean=float(dl.mean()),
        sharpness_std=float(dl.std()),
        tolerance_mean_db=float(dil.mean()),
        tolerance_std_db=float(dil.std()),
        k=k,
        dphi=dphi,
        seed=seed,
        crosstalk=base,
    )

"""Optimization-sequence programs ("macros"): parsing, builtins and execution.

A macro document is TOML. It either names a builtin sequence::

    [macro]
    builtin = "sequential"
    global_iterations = 2
    learning_rate = 0.1

or lists stages explicitly::

    [macro]
    seed = 7

    [[macro.stages]]
    name = "round1"
    masks = [1, -1]        # 1-based; negative counts from the last mask
    distances = [0, -1]    # 0..N; negative counts from z_N
    learning_rate = 0.1

``masks`` and ``distances`` also accept ``"all"`` and ``"none"``. Indices
stay symbolic until :meth:`MacroProgram.resolve` binds them to a model.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ConfigurationError, StageFailedError
from .grid import ModeSet
from .model import MPLCModel
from .optimizers import (
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_DISTANCE_SCALE,
    DEFAULT_EPS,
    StageResult,
    run_stage,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("adam", "wfm-sweep")
GRADIENT_MODES = ("per-batch", "epoch-aggregate")
CONVERGENCE = ("efficiency", "loss")
BUILTINS = ("sequential", "default", "refocus", "batch", "full-aggregate", "wfm")

DEFAULT_TOLERANCE = 1e-3
DEFAULT_LR = 0.1
DEFAULT_MAX_ITERS = 10_000
SEQUENTIAL_MAX_ITERS = 500


@dataclass(frozen=True)
class Stage:
    """One training stage: which parameters move, how, and when to stop.

    ``masks`` are 1-based indices, ``distances`` are indices 0..N (either
    may be ``"all"`` before resolution). ``batch_size=None`` means the full
    mode set.
    """

    name: str = "stage"
    masks: Any = "all"
    distances: Any = ()
    method: str = "adam"
    batch_size: int | None = None
    learning_rate: float = DEFAULT_LR
    tolerance: float = DEFAULT_TOLERANCE
    max_iters: int = DEFAULT_MAX_ITERS
    gradient_mode: str = "per-batch"
    equal_distances: tuple = ()
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_eps: float = DEFAULT_EPS
    distance_scale: float = DEFAULT_DISTANCE_SCALE
    convergence: str = "efficiency"

    def resolve(self, n_masks: int, n_modes: int | None = None, path: str = "stage") -> "Stage":
        masks = _resolve_indices(self.masks, 1, n_masks, f"{path}.masks")
        dists = _resolve_indices(self.distances, 0, n_masks, f"{path}.distances")
        groups = tuple(
            tuple(_resolve_indices(list(g), 0, n_masks, f"{path}.equal_distances[{k}]"))
            for k, g in enumerate(self.equal_distances)
        )
        for k, g in enumerate(groups):
            if len(g) < 2:
                raise ConfigurationError("an equality group needs at least two distances", f"{path}.equal_distances[{k}]")
            if not set(g) <= set(dists):
                raise ConfigurationError("constrained distances must be trainable", f"{path}.equal_distances[{k}]")
        if not masks and not dists:
            raise ConfigurationError("stage trains no parameters", path)
        if self.method == "wfm-sweep" and dists:
            raise ConfigurationError("wavefront matching cannot train distances", f"{path}.distances")
        if n_modes is not None and self.batch_size is not None and self.batch_size > n_modes:
            raise ConfigurationError(
                f"batch size {self.batch_size} exceeds the {n_modes} available modes", f"{path}.batch_size"
            )
        return replace(self, masks=tuple(masks), distances=tuple(dists), equal_distances=groups)

    def validate(self, path: str = "stage"):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}", f"{path}.method")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigurationError(
                f"unknown gradient mode {self.gradient_mode!r}; expected one of {GRADIENT_MODES}",
                f"{path}.gradient_mode",
            )
        if self.batch_size is not None and (int(self.batch_size) != self.batch_size or self.batch_size < 1):
            raise ConfigurationError("batch size must be a positive integer or 'full'", f"{path}.batch_size")
        if self.convergence not in CONVERGENCE:
            raise ConfigurationError(
                f"unknown convergence measure {self.convergence!r}; expected one of {CONVERGENCE}",
                f"{path}.convergence",
            )
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive", f"{path}.tolerance")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive", f"{path}.learning_rate")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigurationError("max_iters must be a positive integer", f"{path}.max_iters")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("ADAM betas must lie in [0, 1)", path)
        if not self.adam_eps > 0 or not self.distance_scale > 0:
            raise ConfigurationError("adam_eps and distance_scale must be positive", path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_size"] = "full" if self.batch_size is None else self.batch_size
        for key in ("masks", "distances"):
            d[key] = d[key] if isinstance(d[key], str) else list(d[key])
        d["equal_distances"] = [list(g) for g in self.equal_distances]
        return d


def _resolve_indices(spec, lo: int, hi: int, path: str) -> list[int]:
    if isinstance(spec, str):
        if spec == "all":
            return list(range(lo, hi + 1))
        if spec == "none":
            return []
        raise ConfigurationError(f"expected 'all', 'none' or a list of indices, got {spec!r}", path)
    out = []
    for v in spec:
        if isinstance(v, bool) or int(v) != v:
            raise ConfigurationError(f"index {v!r} is not an integer", path)
        v = int(v)
        k = hi + 1 + v if v < 0 else v
        if not lo <= k <= hi:
            raise ConfigurationError(f"index {v} outside {lo}..{hi}", path)
        out.append(k)
    if len(set(out)) != len(out):
        raise ConfigurationError("duplicate indices", path)
    return sorted(out)


@dataclass(frozen=True)
class MacroProgram:
    stages: tuple[Stage, ...]
    seed: int = 0
    description: str = ""
    builtin: str | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("a macro needs at least one stage", "macro.stages")

    def resolve(self, n_masks: int, n_modes: int | None = None) -> "MacroProgram":
        if self.builtin is not None and self.builtin in ("sequential",):
            # stage count depends on the mask count
            prog = builtin_program(self.builtin, n_masks=n_masks, seed=self.seed, **self.options)
            stages = prog.stages
        else:
            stages = self.stages
        resolved = tuple(s.resolve(n_masks, n_modes, f"macro.stages[{k}]") for k, s in enumerate(stages))
        return replace(self, stages=resolved)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "description": self.description}
        if self.builtin is not None:
            # provenance only; the stages below are authoritative on re-parse
            d["expanded_from"] = self.builtin
            d["options"] = dict(self.options)
        d["stages"] = [s.to_dict() for s in self.stages]
        return {"macro": d}

    def dumps(self) -> str:
        """Normalized TOML echo of the program with every default filled in."""
        import tomli_w

        return tomli_w.dumps(self.to_dict())


_STAGE_KEYS = {f for f in Stage.__dataclass_fields__}
_BUILTIN_OPTIONS = {
    "sequential": {"global_iterations", "learning_rate", "tolerance", "max_iters"},
    "default": {"learning_rate", "tolerance", "max_iters"},
    "wfm": {"global_iterations", "tolerance"},
    "refocus": {"learning_rate", "tolerance", "max_iters", "distance_scale"},
    "batch": {"batch_size", "learning_rate", "tolerance", "max_iters"},
    "full-aggregate": {"batch_size", "learning_rate", "tolerance", "max_iters"},
}


def builtin_program(name: str, n_masks: int | None = None, seed: int = 0, **opts) -> MacroProgram:
    """Expand a builtin macro name into stages.

    ``sequential`` needs ``n_masks``; it yields one single-mask stage per mask
    and global iteration. ``wfm`` is the wavefront-matching reference.
    """
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown builtin macro {name!r}; expected one of {BUILTINS}", "macro.builtin")
    unknown = set(opts) - _BUILTIN_OPTIONS[name]
    if unknown:
        raise ConfigurationError(f"unknown option(s) {sorted(unknown)} for builtin {name!r}", "macro")
    lr = opts.get("learning_rate", DEFAULT_LR)
    tol = opts.get("tolerance", DEFAULT_TOLERANCE)
    iters = opts.get("max_iters", DEFAULT_MAX_ITERS)
    if name == "sequential":
        k_max = opts.get("global_iterations", 1)
        cap = opts.get("max_iters", SEQUENTIAL_MAX_ITERS)
        if n_masks is None:
            stages = (Stage(name="sequential", masks="all", learning_rate=lr, tolerance=tol, max_iters=cap),)
        else:
            stages = tuple(
                Stage(name=f"k{k}-mask{i}", masks=(i,), learning_rate=lr, tolerance=tol, max_iters=cap)
                for k in range(1, k_max + 1)
                for i in range(1, n_masks + 1)
            )
    elif name == "wfm":
        sweeps = opts.get("global_iterations", DEFAULT_MAX_ITERS)
        stages = (Stage(name="wfm", masks="all", method="wfm-sweep", tolerance=tol, max_iters=sweeps),)
    elif name == "default":
        stages = (Stage(name="default", masks="all", learning_rate=lr, tolerance=tol, max_iters=iters),)
    elif name == "refocus":
        scale = opts.get("distance_scale", DEFAULT_DISTANCE_SCALE)
        common = dict(learning_rate=lr, tolerance=tol, max_iters=iters, distance_scale=scale, distances=(0, -1))
        stages = (
            Stage(name="round1", masks=(1, -1), **common),
            Stage(name="round2", masks="all", **common),
        )
    else:
        b = opts.get("batch_size", 8 if name == "full-aggregate" else None)
        if b is None:
            raise ConfigurationError("the 'batch' macro needs batch_size", "macro.batch_size")
        mode = "epoch-aggregate" if name == "full-aggregate" else "per-batch"
        stages = (
            Stage(name=name, masks="all", batch_size=b, gradient_mode=mode,
                  learning_rate=lr, tolerance=tol, max_iters=iters),
        )
    for k, s in enumerate(stages):
        s.validate(f"macro.stages[{k}]")
    return MacroProgram(stages, seed=seed, description=f"builtin:{name}", builtin=name, options=dict(opts))


def _stage_from_table(tbl: dict, path: str) -> Stage:
    unknown = set(tbl) - _STAGE_KEYS
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", path)
    kw = dict(tbl)
    if kw.get("batch_size") == "full":
        kw["batch_size"] = None
    for key in ("masks", "distances"):
        if key in kw and not isinstance(kw[key], (str, list)):
            raise ConfigurationError(f"{key} must be 'all', 'none' or a list", f"{path}.{key}")
        if isinstance(kw.get(key), list):
            kw[key] = tuple(kw[key])
    if "equal_distances" in kw:
        kw["equal_distances"] = tuple(tuple(g) for g in kw["equal_distances"])
    try:
        stage = Stage(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc), path) from exc
    stage.validate(path)
    return stage


def parse_macro(text: str | dict, n_masks: int | None = None, n_modes: int | None = None) -> MacroProgram:
    """Parse a macro document (TOML text, a parsed table, or a builtin name).

    The document may be the ``[macro]`` table itself or contain one. When
    ``n_masks`` is given the program is resolved against that topology.
    """
    if isinstance(text, str) and text.strip() in BUILTINS:
        prog = builtin_program(text.strip(), n_masks=n_masks)
        return prog.resolve(n_masks, n_modes) if n_masks is not None else prog
    if isinstance(text, str):
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(
                f"macro syntax error: {exc}", line=getattr(exc, "lineno", None), column=getattr(exc, "colno", None)
            ) from exc
    else:
        doc = dict(text)
    tbl = doc.get("macro", doc)
    if not isinstance(tbl, dict):
        raise ConfigurationError("'macro' must be a table", "macro")
    tbl = dict(tbl)
    seed = tbl.pop("seed", 0)
    description = tbl.pop("description", "")
    origin, options = tbl.pop("expanded_from", None), tbl.pop("options", {})
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("seed must be a non-negative integer", "macro.seed")
    if "builtin" in tbl:
        name = tbl.pop("builtin")
        if "stages" in tbl:
            raise ConfigurationError("use either 'builtin' or 'stages', not both", "macro")
        prog = builtin_program(name, n_masks=n_masks, seed=seed, **tbl)
        if description:
            prog = replace(prog, description=description)
    else:
        stages_tbl = tbl.pop("stages", None)
        if tbl:
            raise ConfigurationError(f"unknown key(s) {sorted(tbl)}", "macro")
        if not isinstance(stages_tbl, list) or not stages_tbl:
            raise ConfigurationError("a macro needs 'builtin' or a non-empty 'stages' list", "macro.stages")
        stages = tuple(_stage_from_table(s, f"macro.stages[{k}]") for k, s in enumerate(stages_tbl))
        prog = MacroProgram(stages, seed=seed, description=description)
        if origin is not None and origin != "sequential":
            prog = replace(prog, builtin=origin, options=dict(options))
    return prog.resolve(n_masks, n_modes) if n_masks is not None else prog


def epoch_batches(n_modes: int, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Random permutation of ``0..M-1`` cut into ``ceil(M/B)`` consecutive batches."""
    if int(batch_size) != batch_size or not 1 <= batch_size <= n_modes:
        raise ConfigurationError(f"batch size must lie in 1..{n_modes}, got {batch_size}", "batch_size")
    perm = rng.permutation(n_modes)
    q = math.ceil(n_modes / batch_size)
    return [perm[k * batch_size:(k + 1) * batch_size].tolist() for k in range(q)]


@dataclass
class RunLog:
    stages: list[StageResult] = field(default_factory=list)
    failure: str | None = None

    def rows(self):
        for s in self.stages:
            for it, (loss, t) in enumerate(zip(s.losses, s.elapsed), start=1):
                yield {"stage": s.name, "iteration": it, "loss": loss, "mean_eta": 1.0 - loss, "elapsed_s": t}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["stage", "iteration", "loss", "mean_eta", "elapsed_s"], lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({**row, "loss": repr(row["loss"]), "mean_eta": repr(row["mean_eta"]), "elapsed_s": f"{row['elapsed_s']:.6f}"})
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "iterations": s.iterations, "final_loss": s.final_loss, "stop_reason": s.stop_reason}
                for s in self.stages
            ],
            "failure": self.failure,
        }

    @property
    def final_loss(self) -> float:
        return self.stages[-1].final_loss


def run_program(
    model: MPLCModel,
    modeset: ModeSet,
    program: MacroProgram,
    rng: np.random.Generator | None = None,
    callback=None,
) -> tuple[MPLCModel, RunLog]:
    """Run every stage in order, training ``model`` in place.

    ADAM state is fresh at each stage boundary. On failure the exception's
    ``log`` holds the completed stages.
    """
    program = program.resolve(model.n_masks, len(modeset))
    if rng is None:
        rng = np.random.default_rng(program.seed)
    runlog = RunLog()
    for stage in program.stages:
        model.trainable_masks = [i + 1 in stage.masks for i in range(model.n_masks)]
        model.trainable_distances = [k in stage.distances for k in range(model.n_masks + 1)]
        log.info("stage %s: masks=%s distances=%s", stage.name, stage.masks, stage.distances)
        cb = None if callback is None else (lambda it, loss, _n=stage.name: callback(_n, it, loss))
        try:
            result = run_stage(model, modeset, stage, rng, callback=cb)
        except Exception as exc:
            runlog.failure = f"{stage.name}: {exc}"
            if isinstance(exc, StageFailedError):
                exc.log = runlog
                raise
            raise StageFailedError(runlog.failure, runlog) from exc
        runlog.stages.append(result)
        log.info("stage %s done: %d iterations, loss %.6f (%s)", stage.name, result.iterations,
                 result.final_loss, result.stop_reason)
    return model, runlog

"""Design configs, model bundles and mask export.

A model bundle is a directory holding ``manifest.toml`` and one raw
little-endian float32 file per mask (row-major, unwrapped radians). The
manifest lists a SHA-256 digest per mask file so corruption is detected
on load.
"""

from __future__ import annotations

import hashlib
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

from . import __version__
from .errors import BundleError, ConfigurationError
from .grid import GridSpec, ModeOrdering, ModeSet, build_linear_array_modeset
from .macro import MacroProgram, parse_macro
from .model import MPLCModel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MANIFEST = "manifest.toml"
BUNDLE_FORMAT = 1
MASK_DTYPE = np.dtype("<f4")

_SECTIONS = {
    "grid": {"nx", "ny", "pitch_um", "wavelength_nm"},
    "source": {"type", "count", "spacing_um", "waist_um"},
    "target": {"type", "waist_um", "ordering", "modes"},
    "model": {"masks", "distance_mm", "distances_mm", "init"},
    "macro": None,  # validated by parse_macro
    "evaluation": {"dphi", "k", "seed"},
    "run": {"seed", "description"},
}


def load_toml(path_or_text, origin: str = "config") -> dict:
    if isinstance(path_or_text, (str, Path)) and Path(path_or_text).exists():
        text = Path(path_or_text).read_text()
        origin = str(path_or_text)
    else:
        text = str(path_or_text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(
            f"{origin}: syntax error: {exc}", line=getattr(exc, "lineno", None), column=getattr(exc, "colno", None)
        ) from exc


def _need(tbl: dict, key: str, section: str):
    if key not in tbl:
        raise ConfigurationError(f"missing key {key!r}", f"{section}.{key}")
    return tbl[key]


def _number(tbl: dict, key: str, section: str, default=None, positive=True):
    val = tbl.get(key, default) if default is not None else _need(tbl, key, section)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigurationError(f"{key} must be a number", f"{section}.{key}")
    if positive and not val > 0:
        raise ConfigurationError(f"{key} must be positive", f"{section}.{key}")
    return float(val)


@dataclass
class DesignConfig:
    """Parsed design configuration; lengths are stored in SI meters."""

    grid: GridSpec
    count: int
    spot_spacing: float
    spot_waist: float
    target_waist: float
    ordering: Any = ModeOrdering.RASTER
    modes: list | None = None
    n_masks: int = 5
    distances: list[float] = field(default_factory=lambda: [6e-3] * 6)
    macro: MacroProgram | None = None
    dphi: float = 0.05
    k: int = 10
    eval_seed: int = 0
    seed: int | None = None
    description: str = ""
    raw: dict = field(default_factory=dict, repr=False)
    digest: str = ""

    def modeset(self) -> ModeSet:
        return build_linear_array_modeset(
            self.grid, self.count, self.spot_spacing, self.spot_waist, self.target_waist, self.ordering, self.modes
        )

    def model(self) -> MPLCModel:
        return MPLCModel(self.grid, [np.zeros(self.grid.shape) for _ in range(self.n_masks)], self.distances)

    def modeset_spec(self) -> dict:
        """Mode-set tables as written, with every default filled in."""
        grid, source, target = (dict(self.raw.get(k, {})) for k in ("grid", "source", "target"))
        grid.setdefault("wavelength_nm", 1550.0)
        source.setdefault("type", "linear_array")
        source.setdefault("spacing_um", 0.0)
        target.setdefault("type", "hermite_gaussian")
        target.setdefault("ordering", "raster")
        return {"grid": grid, "source": source, "target": target}


def parse_modeset_spec(doc: dict):
    """Grid and mode-set parameters from the ``grid``/``source``/``target`` tables."""
    for section in ("grid", "source", "target"):
        if section not in doc or not isinstance(doc[section], dict):
            raise ConfigurationError(f"missing [{section}] table", section)
        unknown = set(doc[section]) - _SECTIONS[section]
        if unknown:
            raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", section)
    g, s, t = doc["grid"], doc["source"], doc["target"]
    nx, ny = _need(g, "nx", "grid"), _need(g, "ny", "grid")
    if not isinstance(nx, int) or not isinstance(ny, int) or nx < 2 or ny < 2:
        raise ConfigurationError("nx and ny must be integers >= 2", "grid")
    grid = GridSpec(nx, ny, _number(g, "pitch_um", "grid") * 1e-6, _number(g, "wavelength_nm", "grid", 1550.0) * 1e-9)
    if s.get("type", "linear_array") != "linear_array":
        raise ConfigurationError(f"unsupported source type {s.get('type')!r}", "source.type")
    if t.get("type", "hermite_gaussian") != "hermite_gaussian":
        raise ConfigurationError(f"unsupported target type {t.get('type')!r}", "target.type")
    count = _need(s, "count", "source")
    if isinstance(count, bool) or not isinstance(count, int) or count < 1:
        raise ConfigurationError("count must be a positive integer", "source.count")
    ordering = t.get("ordering", "raster")
    if isinstance(ordering, str):
        try:
            ordering = ModeOrdering(ordering)
        except ValueError:
            raise ConfigurationError(f"unknown ordering {ordering!r}", "target.ordering") from None
    modes = t.get("modes")
    if modes is not None:
        if not all(isinstance(mn, list) and len(mn) == 2 for mn in modes):
            raise ConfigurationError("modes must be a list of [m, n] pairs", "target.modes")
    return dict(
        grid=grid,
        count=count,
        spot_spacing=_number(s, "spacing_um", "source") * 1e-6 if count > 1 else float(s.get("spacing_um", 0.0)) * 1e-6,
        spot_waist=_number(s, "waist_um", "source") * 1e-6,
        target_waist=_number(t, "waist_um", "target") * 1e-6,
        ordering=ordering,
        modes=[tuple(mn) for mn in modes] if modes is not None else None,
    )


def build_modeset(doc: dict) -> ModeSet:
    p = parse_modeset_spec(doc)
    return build_linear_array_modeset(
        p["grid"], p["count"], p["spot_spacing"], p["spot_waist"], p["target_waist"], p["ordering"], p["modes"]
    )


def parse_design_config(path_or_text) -> DesignConfig:
    raw = load_toml(path_or_text)
    if isinstance(path_or_text, (str, Path)) and Path(path_or_text).exists():
        digest = hashlib.sha256(Path(path_or_text).read_bytes()).hexdigest()
    else:
        digest = hashlib.sha256(str(path_or_text).encode()).hexdigest()
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown section(s) {sorted(unknown)}")
    params = parse_modeset_spec(raw)

    mtbl = raw.get("model", {})
    unknown = set(mtbl) - _SECTIONS["model"]
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "model")
    n_masks = mtbl.get("masks", 5)
    if isinstance(n_masks, bool) or not isinstance(n_masks, int) or n_masks < 1:
        raise ConfigurationError("masks must be a positive integer", "model.masks")
    if "distances_mm" in mtbl:
        dist = [float(d) * 1e-3 for d in mtbl["distances_mm"]]
        if len(dist) != n_masks + 1:
            raise ConfigurationError(f"need {n_masks + 1} distances", "model.distances_mm")
    else:
        dist = [_number(mtbl, "distance_mm", "model", 6.0) * 1e-3] * (n_masks + 1)
    if any(d < 0 for d in dist):
        raise ConfigurationError("distances must be non-negative", "model.distances_mm")
    if mtbl.get("init", "zeros") != "zeros":
        raise ConfigurationError("only init = 'zeros' is supported", "model.init")

    run = raw.get("run", {})
    unknown = set(run) - _SECTIONS["run"]
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "run")
    macro_tbl = raw.get("macro", {"builtin": "default"})
    macro = parse_macro({"macro": macro_tbl}, n_masks=n_masks, n_modes=params["count"])
    seed = run.get("seed")
    if seed is not None:
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigurationError("seed must be a non-negative integer", "run.seed")

    ev = raw.get("evaluation", {})
    unknown = set(ev) - _SECTIONS["evaluation"]
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "evaluation")
    dphi = float(ev.get("dphi", 0.05))
    k = ev.get("k", 10)
    if dphi < 0:
        raise ConfigurationError("dphi must be non-negative", "evaluation.dphi")
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ConfigurationError("k must be a positive integer", "evaluation.k")

    return DesignConfig(
        n_masks=n_masks,
        distances=dist,
        macro=macro,
        dphi=dphi,
        k=k,
        eval_seed=int(ev.get("seed", 0)),
        seed=seed,
        description=str(run.get("description", "")),
        raw=raw,
        digest=digest,
        **params,
    )


# -- model bundles ---------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def quantize_masks(model: MPLCModel) -> MPLCModel:
    """Round masks to the float32 values a bundle stores, in place."""
    model.masks = [m.astype(MASK_DTYPE).astype(float) for m in model.masks]
    return model


def save_bundle(model: MPLCModel, directory, extra: dict | None = None) -> Path:
    """Write masks and manifest. ``extra`` tables are merged into the manifest."""
    d = Path(directory)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(model.masks, start=1):
        name = f"masks/mask_{i:02d}.f32"
        np.ascontiguousarray(m, dtype=MASK_DTYPE).tofile(d / name)
        files.append({"file": name, "sha256": _sha256(d / name)})
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": __version__,
        "grid": {
            "nx": model.grid.nx,
            "ny": model.grid.ny,
            "pitch_m": model.grid.pitch,
            "wavelength_m": model.grid.wavelength,
        },
        "model": {
            "n_masks": model.n_masks,
            "distances_m": [float(z) for z in model.distances],
            "trainable_masks": list(model.trainable_masks),
            "trainable_distances": list(model.trainable_distances),
            "mask_dtype": "float32-le",
            "mask_layout": "row-major (ny, nx), radians, unwrapped",
        },
        "masks": files,
    }
    if extra:
        for key, val in extra.items():
            manifest[key] = val
    (d / MANIFEST).write_text(tomli_w.dumps(_clean(manifest)))
    return d / MANIFEST


def _clean(obj):
    """Drop None values (TOML has no null) and convert numpy scalars."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise BundleError(f"no {MANIFEST} in {directory}")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise BundleError(f"corrupt manifest {path}: {exc}") from exc


def load_bundle(directory) -> tuple[MPLCModel, dict]:
    d = Path(directory)
    man = read_manifest(d)
    try:
        g = man["grid"]
        grid = GridSpec(g["nx"], g["ny"], g["pitch_m"], g["wavelength_m"])
        mdl = man["model"]
        masks = []
        for entry in man["masks"]:
            path = d / entry["file"]
            if not path.exists():
                raise BundleError(f"missing mask file {path}")
            if _sha256(path) != entry["sha256"]:
                raise BundleError(f"checksum mismatch for {path}")
            arr = np.fromfile(path, dtype=MASK_DTYPE)
            if arr.size != grid.size:
                raise BundleError(f"{path} holds {arr.size} values, expected {grid.size}")
            masks.append(arr.reshape(grid.shape).astype(float))
        model = MPLCModel(grid, masks, mdl["distances_m"], mdl["trainable_masks"], mdl["trainable_distances"])
    except KeyError as exc:
        raise BundleError(f"manifest lacks {exc}") from exc
    if len(masks) != mdl["n_masks"]:
        raise BundleError("mask count does not match manifest")
    return model, man


# -- export ----------------------------------------------------------------

EXPORT_FORMATS = ("raw-f32", "png16", "csv")


def wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Wrap to ``[-pi, pi)``."""
    w = np.mod(np.asarray(phi, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w >= np.pi, -np.pi, w)


def phase_to_png16(phi: np.ndarray) -> np.ndarray:
    """Linear quantization of the wrapped phase onto 0..65535 (0 rad -> 32768)."""
    w = wrap_phase(phi)
    return (np.round((w + np.pi) / (2 * np.pi) * 65536).astype(np.int64) % 65536).astype(np.uint16)


def png16_to_phase(levels: np.ndarray) -> np.ndarray:
    return levels.astype(float) / 65536 * 2 * np.pi - np.pi


def write_png16(path, levels: np.ndarray):
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(levels, dtype=np.uint16)).save(path)


def read_png16(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im).astype(np.uint16)


def export_masks(model: MPLCModel, directory, fmt: str = "raw-f32") -> list[Path]:
    if fmt not in EXPORT_FORMATS:
        raise ConfigurationError(f"unknown export format {fmt!r}; expected one of {EXPORT_FORMATS}", "format")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for i, m in enumerate(model.masks, start=1):
        w = wrap_phase(m)
        if fmt == "raw-f32":
            p = d / f"mask_{i:02d}_wrapped.f32"
            np.ascontiguousarray(w, dtype=MASK_DTYPE).tofile(p)
        elif fmt == "png16":
            p = d / f"mask_{i:02d}.png"
            write_png16(p, phase_to_png16(w))
        else:
            p = d / f"mask_{i:02d}.csv"
            np.savetxt(p, w, delimiter=",", fmt="%.9g")
        out.append(p)
    return out


def import_raw_f32(path, grid: GridSpec) -> np.ndarray:
    arr = np.fromfile(path, dtype=MASK_DTYPE)
    if arr.size != grid.size:
        raise BundleError(f"{path} holds {arr.size} values, expected {grid.size}")
    return arr.reshape(grid.shape)


def cyclic_gray(phi: np.ndarray) -> np.ndarray:
    """16-bit cyclic grayscale: continuous across the +-pi wrap."""
    w = wrap_phase(phi)
    return np.round((1 - np.cos(w)) / 2 * 65535).astype(np.uint16)


@contextmanager
def output_lock(directory):
    """Exclusive lock on an output directory via an ``O_EXCL`` lock file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / ".mplc.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"output directory {d} is locked by another run ({lock})") from None
    try:
        os.write(fd, f"{os.getpid()} {time.time()}\n".encode())
        os.close(fd)
        yield d
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            warnings.warn(f"lock file {lock} vanished")

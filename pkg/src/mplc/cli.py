"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 validation failure. Failures
print a one-line JSON error record on stderr (and write ``error.json``
when an output directory is known).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli_w

from . import __version__
from .errors import BundleError, ConfigurationError, MPLCError, StageFailedError
from .evaluation import evaluate
from .grid import similarity
from .io import (
    EXPORT_FORMATS,
    _clean,
    build_modeset,
    cyclic_gray,
    export_masks,
    load_bundle,
    load_toml,
    output_lock,
    parse_design_config,
    quantize_masks,
    read_manifest,
    save_bundle,
    write_png16,
)
from .macro import run_program

log = logging.getLogger("mplc")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _plot_convergence(csv_path: Path, png_path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(rows) + 1), [float(r["mean_eta"]) for r in rows], lw=1.2)
    ax.set_xlabel("iteration (all stages)")
    ax.set_ylabel("mean coupling efficiency")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _plot_crosstalk(power: np.ndarray, png_path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(10 * np.log10(np.maximum(power, 1e-12)), cmap="viridis", vmin=-40, vmax=0)
    ax.set_xlabel("input mode k")
    ax.set_ylabel("target mode j")
    fig.colorbar(im, ax=ax, label="|h|^2 (dB)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _write_report(report, out: Path):
    (out / "eval_report.toml").write_text(tomli_w.dumps(_clean({"evaluation": report.to_dict()})))
    (out / "crosstalk.csv").write_text(report.crosstalk.to_csv())
    _plot_crosstalk(report.crosstalk.power, out / "crosstalk.png")


def cmd_design(args) -> int:
    cfg = parse_design_config(args.config)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg.seed is not None else cfg.macro.seed)
    out = Path(args.output)
    with output_lock(out):
        started = _now()
        modeset = cfg.modeset()
        model = cfg.model()
        rng = np.random.default_rng(seed)

        def progress(stage, it, loss):
            if it == 1 or it % args.log_every == 0:
                log.info("%s iter %d: loss %.6f mean_eta %.6f", stage, it, loss, 1 - loss)

        try:
            model, runlog = run_program(model, modeset, cfg.macro, rng=rng, callback=progress)
        except StageFailedError as exc:
            if exc.log is not None:
                (out / "loss_history.csv").write_text(exc.log.to_csv())
            raise
        (out / "loss_history.csv").write_text(runlog.to_csv())
        _plot_convergence(out / "loss_history.csv", out / "convergence.png")

        quantize_masks(model)
        report = evaluate(model, modeset, cfg.dphi, cfg.k, cfg.eval_seed)
        _write_report(report, out)
        for i, m in enumerate(model.masks, start=1):
            write_png16(out / f"phase_{i:02d}.png", cyclic_gray(m))

        save_bundle(
            model,
            out,
            extra={
                "run": {
                    "config": str(Path(args.config).resolve()),
                    "config_sha256": cfg.digest,
                    "seed": seed,
                    "description": cfg.description,
                    "started": started,
                    "finished": _now(),
                    "threads": int(os.environ.get("MPLC_THREADS", "1")),
                },
                "modeset": cfg.modeset_spec(),
                "macro": cfg.macro.to_dict()["macro"],
                "evaluation": {"dphi": cfg.dphi, "k": cfg.k, "seed": cfg.eval_seed},
                "metrics": report.to_dict(),
                "stages": runlog.summary()["stages"],
            },
        )
    print(
        f"mean eta {report.mean_efficiency:.6f}  loss {report.loss:.6f}  IL {report.insertion_loss_db:.4f} dB  "
        f"sharpness {report.sharpness_mean:.3e}+-{report.sharpness_std:.1e}  "
        f"tolerance {report.tolerance_mean_db:.3e}+-{report.tolerance_std_db:.1e} dB"
    )
    return EXIT_OK


def _modeset_for(args, manifest):
    if args.modeset:
        return build_modeset(load_toml(args.modeset))
    if "modeset" not in manifest:
        raise ConfigurationError("bundle has no mode-set spec; pass --modeset", "modeset")
    return build_modeset(manifest["modeset"])


def cmd_evaluate(args) -> int:
    model, manifest = load_bundle(args.bundle)
    modeset = _modeset_for(args, manifest)
    ev = manifest.get("evaluation", {})
    dphi = args.dphi if args.dphi is not None else ev.get("dphi", 0.05)
    k = args.k if args.k is not None else ev.get("k", 10)
    seed = args.seed if args.seed is not None else ev.get("seed", 0)
    report = evaluate(model, modeset, dphi, k, seed)
    doc = tomli_w.dumps(_clean({"evaluation": report.to_dict()}))
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(report, out)
    sys.stdout.write(doc)
    return EXIT_OK


def cmd_compare(args) -> int:
    a, _ = load_bundle(args.bundle_a)
    b, _ = load_bundle(args.bundle_b)
    if a.n_masks != b.n_masks or a.grid.shape != b.grid.shape:
        raise ConfigurationError(
            f"topology mismatch: {a.n_masks} masks {a.grid.shape} vs {b.n_masks} masks {b.grid.shape}"
        )
    rows = [(i, similarity(ma, mb)) for i, (ma, mb) in enumerate(zip(a.masks, b.masks), start=1)]
    lines = ["mask,similarity"] + [f"{i},{s:.6f}" for i, s in rows]
    if args.csv:
        Path(args.csv).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = load_bundle(args.bundle)
    paths = export_masks(model, args.output, args.format)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    manifest = read_manifest(run)
    csv_path = run / "loss_history.csv"
    if csv_path.exists():
        _plot_convergence(csv_path, run / "convergence.png")
    ct = run / "crosstalk.csv"
    if ct.exists():
        raw = np.loadtxt(ct, delimiter=",", skiprows=1, ndmin=2)
        h = raw[:, 0::2] + 1j * raw[:, 1::2]
        _plot_crosstalk(np.abs(h) ** 2, run / "crosstalk.png")
    metrics = manifest.get("metrics", {})
    print(f"run: {run}")
    print(f"macro: {manifest.get('macro', {}).get('description', '?')}")
    for st in manifest.get("stages", []):
        print(f"  {st['name']}: {st['iterations']} iterations, loss {st['final_loss']:.6f} ({st['stop_reason']})")
    for key in ("mean_efficiency", "loss", "insertion_loss_db", "sharpness_mean", "tolerance_mean_db"):
        if key in metrics:
            print(f"{key}: {metrics[key]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mplc", description="MPLC design by physical-neural-network training")
    p.add_argument("--version", action="version", version=f"mplc {__version__}")
    p.add_argument("--threads", type=int, default=None, help="FFT worker threads (default: $MPLC_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="train a design from a config file")
    d.add_argument("config")
    d.add_argument("-o", "--output", required=True, help="output directory")
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--log-every", type=int, default=25)
    d.set_defaults(func=cmd_design)

    e = sub.add_parser("evaluate", help="evaluate a model bundle")
    e.add_argument("bundle")
    e.add_argument("--modeset", help="mode-set config (default: the spec stored in the bundle)")
    e.add_argument("--dphi", type=float, default=None)
    e.add_argument("-K", "--k", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("-o", "--output", help="directory for report files")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="per-mask similarity of two bundles")
    c.add_argument("bundle_a")
    c.add_argument("bundle_b")
    c.add_argument("--csv")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-masks", help="export wrapped masks for an SLM")
    x.add_argument("bundle")
    x.add_argument("--format", choices=EXPORT_FORMATS, default="raw-f32")
    x.add_argument("-o", "--output", required=True)
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("report", help="re-render plots and print a design run summary")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def _error_record(exc: Exception, code: int) -> dict:
    rec = exc.as_record() if isinstance(exc, ConfigurationError) else {"error": type(exc).__name__, "message": str(exc)}
    rec["exit_code"] = code
    return rec


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    if args.threads is not None:
        os.environ["MPLC_THREADS"] = str(max(1, args.threads))
    try:
        return args.func(args)
    except (ConfigurationError, BundleError) as exc:
        rec = _error_record(exc, EXIT_VALIDATION)
    except (MPLCError, OSError, ArithmeticError, ValueError) as exc:
        rec = _error_record(exc, EXIT_RUNTIME)
    print(json.dumps(rec), file=sys.stderr)
    out = getattr(args, "output", None)
    if args.command == "design" and out and Path(out).is_dir():
        (Path(out) / "error.json").write_text(json.dumps(rec, indent=2) + "\n")
    return rec["exit_code"]


if __name__ == "__main__":
    sys.exit(main())

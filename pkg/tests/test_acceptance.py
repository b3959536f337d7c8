"""End-to-end acceptance checks.

Each test prints one pass/fail line (collected in the terminal summary).
The 256x256, 6 um variants run by default; the 512x512, 3 um runs need
``MPLC_FULL=1``.
"""

import warnings
from importlib.resources import files

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, fd_distance, fd_phase, random_model, rel_err
from mplc.cli import main
from mplc.evaluation import evaluate
from mplc.gradients import loss_and_grads
from mplc.grid import (
    ComplexField,
    GridSpec,
    ModeSet,
    build_linear_array_modeset,
    gaussian_spot,
    hermite_gaussian,
    mode_groups,
    normalize,
    similarity,
)
from mplc.macro import MacroProgram, builtin_program, run_program
from mplc.model import MPLCModel
from mplc.propagation import SpectralPropagator

SCALES = {
    "reduced": dict(shape=(256, 256), pitch=6e-6),
    "full": dict(shape=(512, 512), pitch=3e-6),
}
N_MASKS, Z0 = 5, 6e-3


def check(label: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def ten_mode(scale):
    ny, nx = SCALES[scale]["shape"]
    g = GridSpec(nx, ny, SCALES[scale]["pitch"])
    return g, build_linear_array_modeset(g, 10, 128e-6, 50e-6, 200e-6)


@pytest.fixture(scope="module", params=["reduced", pytest.param("full", marks=pytest.mark.fullscale)])
def scale(request):
    return request.param


@pytest.fixture(scope="module")
def solutions(scale):
    """WFM and default-macro solutions from flat masks, plus their reports."""
    g, ms = ten_mode(scale)
    rng = np.random.default_rng(0)
    wfm, _ = run_program(MPLCModel.zeros(g, N_MASKS, Z0), ms, builtin_program("wfm", N_MASKS), rng=rng)
    pnn, _ = run_program(MPLCModel.zeros(g, N_MASKS, Z0), ms, builtin_program("default", N_MASKS), rng=rng)
    reports = {name: evaluate(m, ms, 0.05, 10, 0) for name, m in (("wfm", wfm), ("pnn", pnn))}
    return dict(grid=g, modeset=ms, wfm=wfm, pnn=pnn, reports=reports)


# 1. gradient correctness


def test_c1_gradients():
    rng = np.random.default_rng(2024)
    g = GridSpec(64, 64, 8e-6)
    worst_phi = worst_z = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 4))
        model = random_model(g, n, rng)
        model.trainable_distances = [True] * (n + 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            xs = rng.uniform(-100e-6, 100e-6, m)
            inputs = [gaussian_spot(g, (float(x), 0.0), 30e-6) for x in xs]
            targets = [hermite_gaussian(g, a, b, 60e-6) for a, b in mode_groups(2)[:m]]
        ms = ModeSet.from_fields(inputs, targets)
        b = loss_and_grads(model, ms)
        for i in range(1, n + 1):
            pix = [tuple(p) for p in rng.integers(0, 64, size=(50, 2))]
            an = np.array([b.mask_grads[i][r, c] for r, c in pix])
            worst_phi = max(worst_phi, rel_err(fd_phase(model, ms, i, pix), an))
        for k in range(n + 1):
            worst_z = max(worst_z, rel_err(fd_distance(model, ms, k), b.distance_grads[k]))
    check(
        "C1 gradient correctness",
        worst_phi < 1e-5 and worst_z < 1e-4,
        f"worst phase rel err {worst_phi:.2e} (< 1e-5), worst distance rel err {worst_z:.2e} (< 1e-4)",
    )


# 2. physics invariants


def test_c2_physics():
    rng = np.random.default_rng(7)
    g = GridSpec(64, 48, 4e-6)
    p = SpectralPropagator(g)

    def rand():
        v = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
        return normalize(ComplexField(g, v)).values

    a, b = rand(), rand()
    identity = np.abs(p.propagate(a, 0.0) - a).max()
    group = np.abs(p.propagate(p.propagate(a, 1.3e-3), 2.9e-3) - p.propagate(a, 4.2e-3)).max()
    bl = p.band_limit(a)
    bl = bl / np.linalg.norm(bl)
    unitary = max(abs(np.vdot(o, o).real - 1) for o in (p.propagate(bl, z) for z in (0.5e-3, 7e-3, 40e-3)))
    adjoint = abs(np.vdot(p.propagate(a, 5e-3), b) - np.vdot(a, p.propagate_adjoint(b, 5e-3)))

    big = GridSpec(512, 512, 3e-6)
    w0, z = 50e-6, 6e-3
    p_big = SpectralPropagator(big).propagate(gaussian_spot(big, (0, 0), w0).values, z)
    x, _ = big.meshgrid()
    inten = np.abs(p_big) ** 2
    w_num = 2 * np.sqrt(np.sum(x**2 * inten) / np.sum(inten))
    w_ana = w0 * np.sqrt(1 + (z * big.wavelength / (np.pi * w0**2)) ** 2)
    beam = abs(w_num / w_ana - 1)

    hg = GridSpec(256, 256, 6e-6)
    modes = mode_groups(4)
    f = np.array([hermite_gaussian(hg, m, n, 50e-6).values for m, n in modes]).reshape(len(modes), -1)
    ortho = np.abs(f.conj() @ f.T - np.eye(len(modes))).max()

    ok = max(identity, group, unitary, adjoint) < 1e-10 and beam < 0.01 and ortho < 1e-6
    check(
        "C2 physics invariants",
        ok,
        f"identity {identity:.1e}, group {group:.1e}, unitarity {unitary:.1e}, adjoint {adjoint:.1e} (< 1e-10); "
        f"beam width {beam:.2%} (< 1%); HG orthonormality {ortho:.1e} (< 1e-6)",
    )


# 3. WFM and the sequential macro reach the same masks


def test_c3_sequential_matches_wfm(scale):
    g, ms = ten_mode(scale)
    rng = np.random.default_rng(0)
    seq = builtin_program("sequential", N_MASKS, global_iterations=2)
    model = MPLCModel.zeros(g, N_MASKS, Z0)
    run_program(model, ms, MacroProgram(seq.stages[:N_MASKS]), rng=rng)
    k1 = [m.copy() for m in model.masks]
    run_program(model, ms, MacroProgram(seq.stages[N_MASKS:]), rng=rng)
    k2 = [m.copy() for m in model.masks]

    wfm = MPLCModel.zeros(g, N_MASKS, Z0)
    w = []
    for _ in range(2):
        run_program(wfm, ms, builtin_program("wfm", N_MASKS, global_iterations=1), rng=rng)
        w.append([m.copy() for m in wfm.masks])
    s1 = [similarity(a, b) for a, b in zip(k1, w[0])]
    s2 = [similarity(a, b) for a, b in zip(k2, w[1])]
    check(
        f"C3 sequential vs WFM ({scale})",
        min(s1) >= 0.90 and min(s2) >= 0.95,
        f"k=1 S={fmt(s1)} (>= 0.90), k=2 S={fmt(s2)} (>= 0.95)",
    )


# 4. default macro and WFM converge to distinct good solutions


def test_c4_convergence(solutions, scale):
    eta_w = solutions["reports"]["wfm"].mean_efficiency
    eta_p = solutions["reports"]["pnn"].mean_efficiency
    s = [similarity(a, b) for a, b in zip(solutions["wfm"].masks, solutions["pnn"].masks)]
    check(
        f"C4 convergence ({scale})",
        eta_p >= 0.72 and eta_w >= 0.72 and max(s) < 0.3,
        f"PNN eta {eta_p:.4f}, WFM eta {eta_w:.4f} (>= 0.72); S={fmt(s)} (< 0.3)",
    )


# 5. sharpness and tolerance bands


def test_c5_bands(solutions, scale):
    parts, ok = [], True
    for name in ("pnn", "wfm"):
        r = solutions["reports"][name]
        ok &= 1e-3 <= r.sharpness_mean <= 1e-1 and 1e-3 <= r.tolerance_mean_db <= 1e-1
        parts.append(f"{name} dL {r.sharpness_mean:.2e}, dIL {r.tolerance_mean_db:.2e} dB")
    check(f"C5 sharpness/tolerance ({scale})", ok, "; ".join(parts) + " (bands [1e-3, 1e-1])")


# 6. refocusing


def test_c6_refocus(solutions, scale):
    ms = solutions["modeset"]
    base = solutions["reports"]["pnn"].mean_efficiency
    model, runlog = run_program(
        solutions["pnn"].copy(), ms, builtin_program("refocus", N_MASKS), rng=np.random.default_rng(0)
    )
    eta = 1 - runlog.final_loss
    moves = np.abs(model.distances[[0, -1]] - Z0)
    check(
        f"C6 refocus ({scale})",
        eta - base >= 0.01 and moves.min() > 1e-4,
        f"eta {base:.4f} -> {eta:.4f} (+{eta - base:.4f}, need >= 0.01); "
        f"z0 {model.distances[0] * 1e3:.3f} mm, zN {model.distances[-1] * 1e3:.3f} mm (move > 0.1 mm)",
    )


# 7. batch-size insensitivity


def test_c7_epoch_aggregate_identity():
    g, ms = ten_mode("reduced")
    runs = {}
    for b in (4, 6, 8, 10):
        prog = builtin_program("full-aggregate", N_MASKS, batch_size=b, max_iters=6, tolerance=1e-12)
        model, runlog = run_program(MPLCModel.zeros(g, N_MASKS, Z0), ms, prog, rng=np.random.default_rng(b))
        runs[b] = (np.array(runlog.stages[0].losses), model.masks)
    ref_l, ref_m = runs[10]
    dev = max(
        max(np.abs(l - ref_l).max(), max(np.abs(a - c).max() for a, c in zip(m, ref_m)))
        for l, m in runs.values()
    )
    check("C7a epoch-aggregate identity", dev < 1e-10, f"max deviation over B in {{4,6,8,10}}: {dev:.1e} (< 1e-10)")


def test_c7_per_batch_spread():
    g, ms = ten_mode("reduced")
    best = {}
    models = {}
    for b in (4, 6, 8, 10):
        for lr in (0.1, 0.3):
            prog = builtin_program("batch", N_MASKS, batch_size=b, learning_rate=lr, max_iters=400)
            model, runlog = run_program(MPLCModel.zeros(g, N_MASKS, Z0), ms, prog, rng=np.random.default_rng(0))
            if runlog.final_loss < best.get(b, np.inf):
                best[b], models[b] = runlog.final_loss, model
    spread = max(best.values()) - min(best.values())
    std = evaluate(models[10], ms, 0.05, 10, 0).sharpness_std
    check(
        "C7b per-batch spread",
        spread < 3 * std,
        "best losses " + ", ".join(f"B={b}: {v:.4f}" for b, v in best.items())
        + f"; spread {spread:.2e} vs 3x dL std {3 * std:.2e}",
    )


def test_c7_twenty_mode_smoke():
    g = GridSpec(640, 256, 6e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ms = build_linear_array_modeset(g, 20, 127e-6, 30e-6, 200e-6, modes=mode_groups(6)[:20])
    prog = builtin_program("batch", 10, batch_size=4, max_iters=400)
    _, runlog = run_program(MPLCModel.zeros(g, 10, 15e-3), ms, prog, rng=np.random.default_rng(0))
    eta = 1 - runlog.final_loss
    check(
        "C7c 20-mode smoke",
        eta >= 0.60,
        f"mean eta {eta:.4f} after {runlog.stages[0].iterations} epochs at B=4 (>= 0.60)",
    )


# 8. determinism


def test_c8_determinism(tmp_path):
    text = (files("mplc") / "configs" / "reduced_10mode.cfg").read_text()
    text = text.replace('builtin = "default"', 'builtin = "default"\nmax_iters = 10')
    cfg = tmp_path / "run.cfg"
    cfg.write_text(text)
    assert main(["design", str(cfg), "-o", str(tmp_path / "a")]) == 0
    assert main(["design", str(cfg), "-o", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a" / "masks").glob("*.f32"))
    same = all((tmp_path / "a" / "masks" / n).read_bytes() == (tmp_path / "b" / "masks" / n).read_bytes() for n in names)
    check("C8 determinism", same and len(names) == N_MASKS, f"{len(names)} mask files byte-identical: {same}")

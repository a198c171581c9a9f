"""Batch front-end: stage orchestration over on-disk artifacts.

Stages: fdsim (data generation) -> decompose (frame energy report) ->
rtc (reverse-time continuation snapshots) -> migrate (partial and final
images) -> gather (angle gathers). selftest runs the quick invariant
suite; bench times the per-box loop against grid size and worker count.

Every stage reads only what earlier stages wrote to the output
directory, so a pipeline can be resumed at any point. Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np
from scipy.interpolate import interp1d

from . import io as pmio
from .config import ConfigError, RunConfig, load_config
from .fdref import FDConfig, simulate, simulate_initial
from .frame import Tiling, analyze, build_tiling
from .grids import GridSpec
from .imaging import (ImageAccumulator, ImagingCache, ImagingConfig,
                      angle_gather, migrate)
from .model import VelocityModel
from .nufft import nufft_t2, nufft_t2_direct
from .parallel import ordered_map
from .rays import (CausticError, SplitSchedule, auto_schedule, flow,
                   propagate_W)
from .rtc import BoundaryRecord, make_cache, part1_continue, reverse_continue
from .fio import apply_box

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class NumericalError(RuntimeError):
    """Numerical failure (caustic, rank breakdown, divergence)."""


def _error_line(kind: str, code: int, message: str) -> str:
    return "error kind=%s code=%d: %s" % (kind, code, message)


def _ensure_outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.outdir, exist_ok=True)
    return cfg.outdir


def _artifact(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.outdir, name)


def _need_artifact(cfg: RunConfig, name: str) -> str:
    path = _artifact(cfg, name)
    if not os.path.exists(path):
        raise IOError("missing artifact %s (run the producing stage "
                      "first)" % path)
    return path


def _schedule(cfg: RunConfig) -> SplitSchedule:
    if cfg.ns is not None:
        return SplitSchedule(cfg.t_start, cfg.t_end, cfg.ns)
    return auto_schedule(cfg.model, cfg.grid, cfg.t_start, cfg.t_end)


def _data_tiling(cfg: RunConfig, record: BoundaryRecord) -> Tiling:
    try:
        return build_tiling(cfg.k_max, 2, record.grid)
    except ValueError as exc:
        raise ConfigError("record too coarse for kmax=%d: %s"
                          % (cfg.k_max, exc)) from exc


def _fine_grid(cfg: RunConfig) -> GridSpec:
    r = cfg.fd_refine
    n = tuple(r * (m - 1) + 1 for m in cfg.grid.n)
    spacing = tuple(s / r for s in cfg.grid.spacing)
    return GridSpec(n, spacing, cfg.grid.origin)


def _packet_initial(cfg: RunConfig, grid: GridSpec):
    """One-way wave packet: envelope times carrier, moving along d.

    direction_deg is measured from the surface normal; 0 propagates
    straight toward the acquisition boundary. The rate uses the exact
    directional derivative so the packet is purely one-way.
    """
    ini = cfg.initial
    X = np.stack(grid.mesh(), axis=-1)
    center = np.asarray(ini["center"], dtype=float)
    sigma = float(ini["sigma"])
    th = np.deg2rad(ini["direction_deg"])
    d = np.array([np.sin(th), -np.cos(th)])
    k = 2.0 * np.pi * ini["frequency"] / cfg.model.c0
    u = X - center
    env = np.exp(-np.sum(u * u, axis=-1) / (2.0 * sigma**2))
    phase = k * (u @ d)
    u0 = env * np.cos(phase)
    grad = env[..., None] * (-u / sigma**2) * np.cos(phase)[..., None] \
        - (env * k * np.sin(phase))[..., None] * d
    spd = cfg.model.speed(X)
    v0 = -spd * (grad @ d)
    return u0, v0


def _resample_record(record: BoundaryRecord, cfg: RunConfig,
                     t_offset: float) -> BoundaryRecord:
    """Decimate x' to the analysis grid and cubic-resample time.

    t_offset shifts the clock so t = 0 is the effective source time.
    """
    r = cfg.fd_refine
    nt = int(round(cfg.t_total / cfg.record_dt)) + 1
    t_new = t_offset + cfg.record_dt * np.arange(nt)
    g = interp1d(record.t_axis, record.data[::r], axis=1, kind="cubic",
                 bounds_error=False, fill_value=0.0)(t_new)
    return BoundaryRecord(g, cfg.grid.spacing[0], cfg.record_dt,
                          cfg.grid.origin[0], 0.0)


def cmd_fdsim(cfg: RunConfig) -> int:
    outdir = _ensure_outdir(cfg)
    fine = _fine_grid(cfg)
    pad = 3.0 * cfg.record_dt
    if cfg.initial is not None:
        u0, v0 = _packet_initial(cfg, fine)
        fd = FDConfig(fine, cfg.t_total + pad, cfl=cfg.fd_cfl,
                      sponge_width=cfg.fd_sponge)
        res = simulate_initial(cfg.model, fd, u0, v0)
        record = _resample_record(res.record, cfg, 0.0)
        r = cfg.fd_refine
        pmio.write_pmgrid(_artifact(cfg, "initial.pmg"), u0[::r, ::r],
                          cfg.grid)
    elif cfg.source_position is not None:
        delay = 1.5 / cfg.f_peak
        fd = FDConfig(fine, cfg.t_total + delay + pad, cfl=cfg.fd_cfl,
                      sponge_width=cfg.fd_sponge,
                      source_position=cfg.source_position,
                      f_peak=cfg.f_peak)
        res = simulate(cfg.model, fd, reflectivity=cfg.reflectivity,
                       reflect_amplitude=cfg.reflect_amplitude,
                       subtract_reference=cfg.subtract_reference)
        # clock shift: data times measured from the wavelet maximum
        record = _resample_record(res.record, cfg, delay)
    else:
        raise ConfigError("fdsim needs a [source] or [initial] section")
    pmio.write_pmdata(_artifact(cfg, "record.pmd"), record)
    pmio.write_pgm(_artifact(cfg, "record.pgm"), record.data)
    pmio.write_pmgrid(_artifact(cfg, "model.pmg"),
                      cfg.model.on_grid(cfg.grid), cfg.grid)
    print("fdsim: wrote %s (%d x %d samples)"
          % (_artifact(cfg, "record.pmd"), *record.data.shape))
    return EXIT_OK


def cmd_decompose(cfg: RunConfig) -> int:
    _ensure_outdir(cfg)
    record = pmio.read_pmdata(_need_artifact(cfg, "record.pmd"))
    tiling = _data_tiling(cfg, record)
    coeffs = analyze(record.data, tiling)
    energy = coeffs.box_energy()
    total = coeffs.total_energy()
    path = _artifact(cfg, "decompose.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "direction", "energy", "fraction"])
        for (k, nu), e in sorted(energy.items()):
            writer.writerow([k, nu, "%.10g" % e,
                             "%.10g" % (e / total if total else 0.0)])
    print("decompose: %d boxes, total energy %.6g -> %s"
          % (len(energy), total, path))
    return EXIT_OK


def _write_snapshot(cfg: RunConfig, index: int, name: str,
                    field: np.ndarray) -> str:
    base = "rtc_%02d_%s" % (index, name)
    pmio.write_pmgrid(_artifact(cfg, base + ".pmg"), field, cfg.grid)
    pmio.write_pgm(_artifact(cfg, base + ".pgm"), field)
    return base


def cmd_rtc(cfg: RunConfig) -> int:
    _ensure_outdir(cfg)
    record = pmio.read_pmdata(_need_artifact(cfg, "record.pmd"))
    tiling_data = _data_tiling(cfg, record)
    tiling_space = build_tiling(cfg.k_max, 2, cfg.grid)
    schedule = _schedule(cfg)
    collect: list = []
    reverse_continue(record, schedule, cfg.model, tiling_data,
                     tiling_space, cfg.grid, t=cfg.t_start,
                     collect=collect,
                     min_energy_frac=cfg.min_energy_frac,
                     workers=cfg.threads)
    for i, (name, field) in enumerate(collect):
        _write_snapshot(cfg, i, name, field)
    print("rtc: N_s = %d, wrote %d snapshots to %s"
          % (schedule.N_s, len(collect), cfg.outdir))
    return EXIT_OK


def _imaging_setup(cfg: RunConfig, record: BoundaryRecord):
    from .rays import source_tables
    if cfg.source_position is None:
        raise ConfigError("imaging needs a [source] section")
    tiling_data = _data_tiling(cfg, record)
    tiling_space = build_tiling(cfg.k_max, 2, cfg.grid)
    schedule = _schedule(cfg)
    tables = source_tables(cfg.model, cfg.source_position, cfg.grid)
    kwargs = {}
    if cfg.tau_min is not None:
        kwargs["tau_min"] = cfg.tau_min
    icfg = ImagingConfig(source_position=np.asarray(cfg.source_position),
                         tables=tables, schedule=schedule,
                         model=cfg.model, grid=cfg.grid,
                         data_grid=record.grid, t=cfg.t_start, **kwargs)
    return icfg, tiling_data, tiling_space


def _gather_indices(cfg: RunConfig) -> tuple:
    return tuple(int(round((p - cfg.grid.origin[0]) / cfg.grid.spacing[0]))
                 for p in cfg.gather_positions)


def _run_migration(cfg: RunConfig):
    record = pmio.read_pmdata(_need_artifact(cfg, "record.pmd"))
    icfg, td, ts = _imaging_setup(cfg, record)
    acc = ImageAccumulator(cfg.grid, position_indices=_gather_indices(cfg))
    image, acc = migrate(record, icfg, td, ts, cfg.f_peak,
                         accumulator=acc,
                         min_energy_frac=cfg.min_energy_frac,
                         workers=cfg.threads)
    return image, acc, icfg


def cmd_migrate(cfg: RunConfig) -> int:
    _ensure_outdir(cfg)
    image, acc, icfg = _run_migration(cfg)
    for (n_s, n_p), partial in sorted(acc.partials.items()):
        base = "partial_ns%d_np%d" % (n_s, n_p)
        pmio.write_pmgrid(_artifact(cfg, base + ".pmg"), partial, cfg.grid)
    pmio.write_pmgrid(_artifact(cfg, "image.pmg"), image, cfg.grid)
    pmio.write_pgm(_artifact(cfg, "image.pgm"), image)
    if cfg.gather_positions:
        gath = angle_gather(acc, cfg.gather_bin_width)
        pmio.write_gather_csv(_artifact(cfg, "gather.csv"), gath)
    print("migrate: N_s = %d, %d partial images -> %s"
          % (icfg.schedule.N_s, len(acc.partials),
             _artifact(cfg, "image.pmg")))
    return EXIT_OK


def cmd_gather(cfg: RunConfig) -> int:
    _ensure_outdir(cfg)
    if not cfg.gather_positions:
        raise ConfigError("gather needs [gather] positions")
    _, acc, _ = _run_migration(cfg)
    gath = angle_gather(acc, cfg.gather_bin_width)
    path = _artifact(cfg, "gather.csv")
    pmio.write_gather_csv(path, gath)
    print("gather: %d positions, %d angle bins -> %s"
          % (len(gath.positions), len(gath.bin_edges) - 1, path))
    return EXIT_OK


def _selftest_checks(seed: int = 0):
    """Quick invariant suite; yields (name, passed, detail)."""
    from .frame import synthesize
    from .model import make_gaussian_lens
    rng = np.random.default_rng(seed)

    grid = GridSpec((128, 128), (1 / 127, 1 / 127))
    tiling = build_tiling(3, 2, grid)
    cov = tiling.coverage_sum()
    # radial frequency in sample units, matching the tiling geometry
    f = np.hypot(*np.meshgrid(*[2 * np.pi * np.fft.fftfreq(m)
                                for m in grid.n], indexing="ij"))
    annulus = (f > tiling.coarse_cutoff) & (f < 0.8 * np.pi)
    pou = float(np.abs(cov[annulus] - 1.0).max())
    yield "frame partition of unity", pou <= 1e-6, "residual %.3g" % pou

    u = np.fft.ifft2(np.fft.fft2(rng.standard_normal(grid.n))
                     * (f < 0.7 * np.pi)).real
    rt = synthesize(analyze(u, tiling)).real
    err = np.linalg.norm(rt - u) / np.linalg.norm(u)
    yield "frame round trip", err <= 1e-6, "rel %.3g" % err

    model = make_gaussian_lens(1.0, 0.3, center=(0.5, 0.4),
                               widths=(0.2, 0.15))
    x0, xi0 = np.array([0.3, 0.0]), np.array([0.2, 1.0])
    st = flow(model, x0, xi0, 0.5)
    c_of = lambda x: float(model.speed(np.asarray(x)))
    h0 = c_of(x0) * np.linalg.norm(xi0)
    h1 = c_of(st.y) * np.linalg.norm(st.eta)
    dh = abs(h1 - h0) / h0
    yield "ray Hamiltonian conservation", dh <= 1e-8, "drift %.3g" % dh

    back = flow(model, st.y, st.eta, 0.5, direction=-1)
    ret = max(np.abs(back.y - x0).max(), np.abs(back.eta - xi0).max())
    yield "ray time reversal", ret <= 1e-8, "return %.3g" % ret

    _, W = propagate_W(model, x0, xi0, 0.5)
    sd = W.symplectic_defect()
    yield "propagator symplectic", sd <= 1e-8, "defect %.3g" % sd

    spec = rng.standard_normal((128, 128)) \
        + 1j * rng.standard_normal((128, 128))
    pts = rng.uniform(0, 128, size=(200, 2))
    fast = nufft_t2(pts, spec)
    ref = nufft_t2_direct(pts, spec)
    ne = float(np.abs(fast - ref).max() / np.abs(ref).max())
    yield "nufft vs direct summation", ne <= 1e-6, "rel %.3g" % ne


def cmd_selftest(seed: int = 0) -> int:
    ok = True
    for name, passed, detail in _selftest_checks(seed):
        print("selftest: %-32s %s (%s)"
              % (name, "PASS" if passed else "FAIL", detail))
        ok = ok and passed
    if not ok:
        raise NumericalError("selftest failures")
    return EXIT_OK


def _bench_scene(n: int, k_max: int = 3, seed: int = 0):
    """Boundary continuation scene on an n x n grid, constant medium."""
    from .rtc import data_spectrum, surface_amp_norm, _shift_stamp
    rng = np.random.default_rng(seed)
    grid = GridSpec((n, n), (1.0 / (n - 1), 1.0 / (n - 1)))
    dg = GridSpec((n, n), (1.0 / (n - 1), 1.0 / (n - 1)))
    model = VelocityModel(c0=1.0)
    schedule = SplitSchedule(0.0, 0.5, 1)
    tiling = build_tiling(k_max, 2, dg)
    record = BoundaryRecord(rng.standard_normal(dg.n), dg.spacing[0],
                            dg.spacing[1])
    cache = make_cache(model, schedule, tiling, None, grid, dg, 0.0)
    g_hat = data_spectrum(record, dg, 1.0, "reconstruction")
    jobs = []
    for box in tiling.all_boxes(include_coarse=False):
        if box.center_covector[1] <= 0:
            continue
        pd, ex = cache.boundary(box)
        if ex is None:
            continue
        norm = surface_amp_norm(pd.xi_center, 1.0)
        jobs.append((box, _shift_stamp(pd, 0.0), ex, pd.amp * norm))
    return g_hat, tiling, jobs


def _time_box_loop(g_hat, tiling, jobs, workers: int,
                   repeats: int = 1) -> float:
    func = lambda j: apply_box(g_hat, tiling, j[0], j[1], j[2], amp=j[3])
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for part in ordered_map(func, jobs, workers):
            pass
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(n_values=(128, 256), workers=(1, 4), k_max: int = 3,
              seed: int = 0) -> dict:
    """Per-box wall time vs grid size, and box-loop speedup vs workers.

    Returns {"per_box": {n: seconds}, "loop": {w: seconds},
    "growth": ratio per doubling, "efficiency": 1 -> max workers}.
    """
    per_box = {}
    scenes = {}
    for n in n_values:
        g_hat, tiling, jobs = _bench_scene(n, k_max, seed)
        scenes[n] = (g_hat, tiling, jobs)
        _time_box_loop(g_hat, tiling, jobs[:2], 1)   # warm the JIT
        dt = _time_box_loop(g_hat, tiling, jobs, 1, repeats=2)
        per_box[n] = dt / len(jobs)
    n_big = max(n_values)
    g_hat, tiling, jobs = scenes[n_big]
    loop = {}
    for w in workers:
        loop[w] = _time_box_loop(g_hat, tiling, jobs, w, repeats=2)
    n_lo, n_hi = min(n_values), max(n_values)
    doublings = np.log2(n_hi / n_lo)
    growth = (per_box[n_hi] / per_box[n_lo]) ** (1.0 / doublings)
    w_lo, w_hi = min(workers), max(workers)
    efficiency = (loop[w_lo] / loop[w_hi]) * (w_lo / w_hi)
    return {"per_box": per_box, "loop": loop, "growth": growth,
            "efficiency": efficiency}


def cmd_bench(cfg: RunConfig | None, outdir: str | None,
              seed: int = 0) -> int:
    res = run_bench(seed=seed)
    for n, dt in res["per_box"].items():
        print("bench: n=%d per-box %.4f s" % (n, dt))
    for w, dt in res["loop"].items():
        print("bench: workers=%d box loop %.3f s" % (w, dt))
    print("bench: per-box growth %.2fx per doubling, parallel "
          "efficiency %.2f" % (res["growth"], res["efficiency"]))
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "bench.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["quantity", "value", "seconds"])
            for n, dt in res["per_box"].items():
                writer.writerow(["per_box_n", n, "%.6g" % dt])
            for w, dt in res["loop"].items():
                writer.writerow(["loop_workers", w, "%.6g" % dt])
            writer.writerow(["growth_per_doubling",
                             "%.4g" % res["growth"], ""])
            writer.writerow(["parallel_efficiency",
                             "%.4g" % res["efficiency"], ""])
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="packetmig",
        description="Wave-packet reverse-time continuation and imaging")
    sub = parser.add_subparsers(dest="command", required=True)
    needs_config = {"fdsim": "generate boundary data with the FD solver",
                    "decompose": "report per-box frame energies",
                    "rtc": "reverse-time continuation snapshots",
                    "migrate": "partial and final images",
                    "gather": "angle gathers at picked positions"}
    for name, help_text in needs_config.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="run configuration file")
        _common_flags(p)
    p = sub.add_parser("selftest", help="run the quick invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("bench", help="time the per-box loop")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="workers for the box loops")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed seeds and ordered reductions")
    p.add_argument("--kmax", type=int, default=None,
                   help="override the tiling depth")
    p.add_argument("--ns", default=None,
                   help="override the schedule (integer or 'auto')")
    p.add_argument("--out", default=None,
                   help="override the output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="seed for test-data randomness")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return cmd_selftest(args.seed)
        if args.command == "bench":
            return cmd_bench(None, args.out, args.seed)
        overrides = {k: getattr(args, k) for k in
                     ("threads", "kmax", "ns", "out", "seed")
                     if getattr(args, k) is not None}
        if args.deterministic:
            overrides["deterministic"] = True
        cfg = load_config(args.config, overrides)
        handler = {"fdsim": cmd_fdsim, "decompose": cmd_decompose,
                   "rtc": cmd_rtc, "migrate": cmd_migrate,
                   "gather": cmd_gather}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(_error_line("config", EXIT_CONFIG, str(exc)),
              file=sys.stderr)
        return EXIT_CONFIG
    except (CausticError, NumericalError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(_error_line("numerical", EXIT_NUMERICAL, str(exc)),
              file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, pmio.FormatError) as exc:
        print(_error_line("io", EXIT_IO, str(exc)), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

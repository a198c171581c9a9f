"""Time-domain finite-difference acoustic solver.

Second order in time, fourth order in space, on the normalized form
d^2u/dt^2 + c D^2 c u = f (u = p / c). Used both to generate synthetic
boundary records and as the verification oracle for continuation and
imaging: `continue_record` solves the same anti-causal boundary-source
problem the box algorithm approximates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import interp1d

from .grids import GridSpec
from .model import ReflectivityModel, VelocityModel
from .rtc import BoundaryRecord

SPONGE_MIN = 20
CFL_MAX = 0.5
SPONGE_ALPHA = 0.0115   # Cerjan damping coefficient per sponge cell


def ricker(f_peak: float, t):
    """Ricker wavelet with unit peak at t = 0."""
    a = (np.pi * f_peak * np.asarray(t, dtype=float)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


@dataclass
class FDConfig:
    """Run parameters; the grid is the physical (interior) region."""

    grid: GridSpec
    t_total: float
    cfl: float = 0.45
    sponge_width: int = 30
    source_position: tuple | None = None
    f_peak: float = 7.0
    source_delay: float | None = None     # default 1.5 / f_peak
    snapshot_times: tuple = ()
    receivers: tuple = ()                 # interior positions for traces

    def __post_init__(self):
        if self.cfl > CFL_MAX:
            raise ValueError("CFL number %.3g exceeds %.2g"
                             % (self.cfl, CFL_MAX))
        if self.sponge_width < SPONGE_MIN:
            raise ValueError("absorbing width %d below minimum %d cells"
                             % (self.sponge_width, SPONGE_MIN))


@dataclass
class FDResult:
    record: BoundaryRecord | None
    snapshots: dict = field(default_factory=dict)
    snapshots_prev: dict = field(default_factory=dict)
    dt: float = 0.0
    receiver_traces: np.ndarray | None = None
    peak_energy: float = 0.0
    final_energy: float = 0.0


def _padded_speed(model: VelocityModel, grid: GridSpec, P: int,
                  perturb: np.ndarray | None = None) -> np.ndarray:
    axes = [o + s * (np.arange(-P, m + P))
            for o, s, m in zip(grid.origin, grid.spacing, grid.n)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    c = model.speed(mesh.reshape(-1, 2)).reshape(mesh.shape[:2])
    if perturb is not None:
        full = np.zeros_like(c)
        full[P:P + grid.n[0], P:P + grid.n[1]] = perturb
        c = c * (1.0 + full)
    return c


def _lap4(q: np.ndarray, inv0: float, inv1: float) -> np.ndarray:
    """4th-order Laplacian; 2nd order one cell from the edge, zero edge."""
    l = np.zeros_like(q)
    l[2:-2, :] += (-q[:-4, :] + 16 * q[1:-3, :] - 30 * q[2:-2, :]
                   + 16 * q[3:-1, :] - q[4:, :]) * (inv0 / 12.0)
    l[:, 2:-2] += (-q[:, :-4] + 16 * q[:, 1:-3] - 30 * q[:, 2:-2]
                   + 16 * q[:, 3:-1] - q[:, 4:]) * (inv1 / 12.0)
    for i in (1, -2):
        l[i, 1:-1] = (q[i - 1, 1:-1] - 2 * q[i, 1:-1] + q[i + 1, 1:-1]) * inv0 \
            + (q[i, :-2] - 2 * q[i, 1:-1] + q[i, 2:]) * inv1
        l[1:-1, i] = (q[:-2, i] - 2 * q[1:-1, i] + q[2:, i]) * inv0 \
            + (q[1:-1, i - 1] - 2 * q[1:-1, i] + q[1:-1, i + 1]) * inv1
    return l


def _sponge_profile(n0: int, n1: int, P: int) -> np.ndarray:
    """Cerjan multiplicative damping, 1 in the interior."""
    def edge(n):
        d = np.zeros(n)
        i = np.arange(P)
        d[:P] = (P - i)
        d[n - P:] = (P - i)[::-1]
        return d
    d = np.maximum.outer(edge(n0), edge(n1))
    return np.exp(-(SPONGE_ALPHA * d) ** 2)


def _nearest_index(grid: GridSpec, pos) -> tuple[int, int]:
    return tuple(int(round((p - o) / s))
                 for p, o, s in zip(pos, grid.origin, grid.spacing))


def _run(c: np.ndarray, grid: GridSpec, P: int, dt: float, n_steps: int,
         source_term, u0=None, v0=None, snapshot_steps=(),
         receiver_idx=(), record_surface: bool = True):
    """Leapfrog time loop on the padded grid.

    source_term(step) returns an additive forcing array (padded shape) or
    None. Returns surface trace, snapshots {step: interior u}, previous-
    step snapshots, receiver traces and the energy extremes.
    """
    inv0 = 1.0 / grid.spacing[0] ** 2
    inv1 = 1.0 / grid.spacing[1] ** 2
    sponge = _sponge_profile(*c.shape, P)
    sl0 = slice(P, P + grid.n[0])
    sl1 = slice(P, P + grid.n[1])

    u_prev = np.zeros_like(c)
    u_cur = np.zeros_like(c)
    if u0 is not None:
        u_cur[sl0, sl1] = u0
        # second-order-accurate back-step: u(-dt) = u0 - dt v0 + dt^2/2 u_tt
        acc = c * _lap4(c * u_cur, inv0, inv1)
        u_prev = u_cur + 0.5 * dt * dt * acc
        if v0 is not None:
            u_prev[sl0, sl1] -= dt * v0

    trace = (np.empty((grid.n[0], n_steps + 1)) if record_surface else None)
    rec_traces = (np.empty((len(receiver_idx), n_steps + 1))
                  if receiver_idx else None)
    snaps, snaps_prev = {}, {}
    want = set(snapshot_steps)
    peak = 0.0

    def store(step):
        if trace is not None:
            trace[:, step] = u_cur[sl0, P]
        if rec_traces is not None:
            for r, (i, j) in enumerate(receiver_idx):
                rec_traces[r, step] = u_cur[P + i, P + j]
        if step in want:
            snaps[step] = u_cur[sl0, sl1].copy()
            snaps_prev[step] = u_prev[sl0, sl1].copy()

    store(0)
    for step in range(1, n_steps + 1):
        lap = _lap4(c * u_cur, inv0, inv1)
        u_next = 2.0 * u_cur - u_prev + dt * dt * c * lap
        f = source_term(step) if source_term is not None else None
        if f is not None:
            u_next += dt * dt * f
        u_next *= sponge
        u_cur *= sponge
        u_prev, u_cur = u_cur, u_next
        e = float(np.sum(u_cur[sl0, sl1] ** 2))
        peak = max(peak, e)
        store(step)
    final = float(np.sum(u_cur[sl0, sl1] ** 2))
    return trace, snaps, snaps_prev, rec_traces, peak, final


def _time_discretization(config: FDConfig, c_max: float):
    dt = config.cfl * min(config.grid.spacing) / c_max
    n_steps = max(1, int(np.ceil(config.t_total / dt)))
    return config.t_total / n_steps, n_steps


def _snapshot_steps(times, dt, n_steps, t0=0.0):
    return {min(n_steps, max(0, int(round((t - t0) / dt)))): t
            for t in times}


def simulate(model: VelocityModel, config: FDConfig,
             reflectivity: ReflectivityModel | None = None,
             reflect_amplitude: float = 0.1,
             subtract_reference: bool = True) -> FDResult:
    """Forward run with a Ricker point source; record at the surface row.

    With a reflectivity, reflectors are 1-cell speed contrasts in a
    perturbed medium; the returned record is (perturbed - reference) when
    subtraction is on, isolating the scattered field.
    """
    grid = config.grid
    P = config.sponge_width
    perturb = None
    if reflectivity is not None:
        perturb = reflect_amplitude * reflectivity.rasterize(grid)
    c = _padded_speed(model, grid, P, perturb)
    dt, n_steps = _time_discretization(config, float(c.max()))
    steps = _snapshot_steps(config.snapshot_times, dt, n_steps)

    if config.source_position is None:
        raise ValueError("simulate requires a source position")
    i_s, j_s = _nearest_index(grid, config.source_position)
    delay = (config.source_delay if config.source_delay is not None
             else 1.5 / config.f_peak)
    cell = grid.spacing[0] * grid.spacing[1]

    def source(step):
        a = ricker(config.f_peak, step * dt - delay)
        f = np.zeros_like(c)
        f[P + i_s, P + j_s] = a / cell
        return f

    rec_idx = [_nearest_index(grid, p) for p in config.receivers]
    trace, snaps, snaps_prev, rec, peak, fin = _run(
        c, grid, P, dt, n_steps, source, snapshot_steps=steps,
        receiver_idx=rec_idx)

    if reflectivity is not None and subtract_reference:
        c_ref = _padded_speed(model, grid, P, None)
        trace0, snaps0, snaps_prev0, rec0, _, _ = _run(
            c_ref, grid, P, dt, n_steps, source, snapshot_steps=steps,
            receiver_idx=rec_idx)
        trace = trace - trace0
        snaps = {k: snaps[k] - snaps0[k] for k in snaps}
        snaps_prev = {k: snaps_prev[k] - snaps_prev0[k] for k in snaps_prev}
        if rec is not None:
            rec = rec - rec0

    record = BoundaryRecord(trace, grid.spacing[0], dt, grid.origin[0], 0.0)
    return FDResult(record=record,
                    snapshots={steps[k]: v for k, v in snaps.items()},
                    snapshots_prev={steps[k]: v
                                    for k, v in snaps_prev.items()},
                    dt=dt, receiver_traces=rec,
                    peak_energy=peak, final_energy=fin)


def simulate_initial(model: VelocityModel, config: FDConfig,
                     u0: np.ndarray, v0: np.ndarray | None = None
                     ) -> FDResult:
    """Forward run from an injected initial field (and rate) at t = 0."""
    grid = config.grid
    P = config.sponge_width
    c = _padded_speed(model, grid, P)
    dt, n_steps = _time_discretization(config, float(c.max()))
    steps = _snapshot_steps(config.snapshot_times, dt, n_steps)
    trace, snaps, snaps_prev, _, peak, fin = _run(
        c, grid, P, dt, n_steps, None, u0=u0, v0=v0, snapshot_steps=steps)
    record = BoundaryRecord(trace, grid.spacing[0], dt, grid.origin[0], 0.0)
    return FDResult(record=record,
                    snapshots={steps[k]: v for k, v in snaps.items()},
                    snapshots_prev={steps[k]: v
                                    for k, v in snaps_prev.items()},
                    dt=dt, peak_energy=peak, final_energy=fin)


def continue_record(model: VelocityModel, config: FDConfig,
                    record: BoundaryRecord,
                    times: tuple = (0.0,)) -> dict:
    """Anti-causal boundary-source solve; the continuation oracle.

    Integrates the wave equation with source delta(x_n) g(x', t) backward
    from t_total (where the field vanishes) and returns {t: w_r(., t)} on
    the interior grid.
    """
    grid = config.grid
    P = config.sponge_width
    c = _padded_speed(model, grid, P)
    dt, n_steps = _time_discretization(config, float(c.max()))
    if record.data.shape[0] != grid.n[0] or \
            abs(record.dx - grid.spacing[0]) > 1e-12 * grid.spacing[0]:
        raise ValueError("record x' axis must match the grid surface row")

    # resample the record onto the FD time axis, then reverse time; cubic
    # keeps the resampling error well below the FD discretization error
    g = interp1d(record.t_axis, record.data, axis=1, kind="cubic",
                 bounds_error=False,
                 fill_value=0.0)(dt * np.arange(n_steps + 1))

    def source(step):
        f = np.zeros_like(c)
        # reversed clock: FD step advances from t_total toward 0
        f[P:P + grid.n[0], P] = g[:, n_steps - step] / grid.spacing[1]
        return f

    steps = _snapshot_steps([config.t_total - t for t in times], dt, n_steps)
    _, snaps, _, _, _, _ = _run(c, grid, P, dt, n_steps, source,
                                snapshot_steps=steps,
                                record_surface=False)
    return {config.t_total - steps[k]: v for k, v in snaps.items()}


def poynting_direction(u: np.ndarray, u_prev: np.ndarray, dt: float,
                       grid: GridSpec) -> np.ndarray:
    """Unit propagation-direction estimate -du/dt grad u, (n0, n1, 2)."""
    ut = (u - u_prev) / dt
    g0, g1 = np.gradient(u, *grid.spacing)
    s = np.stack([-ut * g0, -ut * g1], axis=-1)
    mag = np.linalg.norm(s, axis=-1, keepdims=True)
    return s / np.where(mag > 0, mag, 1.0)

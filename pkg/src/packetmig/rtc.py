"""Reverse-time continuation of boundary data into the subsurface.

Part I continues each time slice of the record through the boundary-box
transforms; Part II re-propagates continued slices backward with interior
half-wave steps until every slice carries the target time stamp. The
positive-frequency branch is computed explicitly and the conjugate branch
is folded in as 2 Re at the end.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .fio import ScheduleSlice, apply_box, coordinate_transform, \
    separated_expansion
from .frame import Tiling
from .grids import GridSpec
from .model import VelocityModel
from .parallel import ordered_map
from .rays import SplitSchedule

CROSSFADE_SAMPLES = 2           # time-slice overlap delta, in data samples
GRAZING_TAPER = (0.85, 0.95)    # cosine roll-off band for c0 |xi'| / |tau|
CHI_RAMP_CELLS = 8              # interior cutoff ramp width at the surface
ROI_STOP_FRACTION = 0.005       # Part II stops when ROI energy drops below


@dataclass
class BoundaryRecord:
    """Real surface data g(x', t) on a uniform (x', t) grid."""

    data: np.ndarray
    dx: float
    dt: float
    x0: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("record must be a 2-d (x', t) array")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.data.shape, (self.dx, self.dt),
                        (self.x0, self.t0))

    @property
    def t_axis(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.data.shape[1])

    def taper_edges(self, frac: float = 0.1) -> "BoundaryRecord":
        """Cosine roll of the x' edges over the given aperture fraction."""
        n = self.data.shape[0]
        m = max(2, int(round(frac * n)))
        w = np.ones(n)
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(m) / m))
        w[:m] = ramp
        w[-m:] = ramp[::-1]
        return dataclasses.replace(self, data=self.data * w[:, None])


@dataclass
class WaveFieldSlice:
    """Positive-frequency continued field of one slice at one time stamp."""

    field: np.ndarray
    grid: GridSpec
    stamp: float
    n_s: int


def grazing_weight(ratio: np.ndarray) -> np.ndarray:
    """Smooth cutoff in c0 |xi'| / |tau|: 1 below the band, 0 above."""
    lo, hi = GRAZING_TAPER
    s = np.clip((ratio - lo) / (hi - lo), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


def data_multiplier(data_grid: GridSpec, c0: float,
                    convention: str = "reconstruction") -> np.ndarray:
    """Exact per-mode data weight with the grazing taper applied.

    The continuation amplitude is split per mode: the surface-restriction
    Jacobian factor is handled here exactly, while the per-box amplitude
    carries only the interior transport (normalized to 1 at the surface,
    see `surface_amp_norm`). k_n = sqrt(tau^2/c0^2 - |xi'|^2).

    - "reconstruction": weight 1; the continuation reproduces the
      recorded wave field itself (exact per mode in a constant medium).
    - "anticausal": weight i / (2 c0^2 k_n); reproduces the anti-causal
      solution of the wave equation with source delta(x_n) g(x', t).
    """
    xp, tau = np.meshgrid(*data_grid.freq_axes(), indexing="ij")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(c0 * xp / tau)
        ratio[tau == 0] = np.inf
        kn2 = tau**2 / c0**2 - xp**2
        ok = (kn2 > 0) & (tau != 0)
        if convention == "reconstruction":
            M = np.where(ok, 1.0, 0.0).astype(complex)
        elif convention == "anticausal":
            kn = np.sqrt(np.where(ok, kn2, 1.0))
            M = np.where(ok, 0.5j / (c0 * c0 * kn), 0.0)
        else:
            raise ValueError("unknown convention %r" % convention)
    return M * grazing_weight(ratio)


def surface_amp_norm(xi_center: np.ndarray, c0: float) -> float:
    """sqrt of the surface-restriction Jacobian at the box center.

    Multiplying the per-box amplitude |det W1|^-1/2 by this factor leaves
    the pure interior-transport amplitude (1 at zero elapsed time), so
    the mode-exact surface factor in `data_multiplier` is not counted
    twice.
    """
    xp, tau = float(xi_center[0]), float(xi_center[1])
    kn2 = tau * tau / (c0 * c0) - xp * xp
    if kn2 <= 0 or tau <= 0:
        return 0.0
    return float(np.sqrt(c0 * c0 * np.sqrt(kn2) / tau))


def slice_data(record: BoundaryRecord,
               schedule: SplitSchedule) -> list[BoundaryRecord]:
    """Partition of unity in time: N_s cross-faded copies of the record.

    Each slice keeps the full (x', t) grid with a smooth window applied,
    so the slices sum back to the original record exactly.
    """
    delta = CROSSFADE_SAMPLES * record.dt
    if delta >= schedule.t1 / 2:
        raise ValueError("crossfade width %.3g exceeds half of t1 = %.3g; "
                         "record sampling too coarse for this schedule"
                         % (delta, schedule.t1))
    t = record.t_axis
    eps = 0.5 * record.dt
    if schedule.t_start > t[0] + eps or schedule.t_end < t[-1] - eps:
        raise ValueError("schedule does not cover the record's time axis")

    def ramp_down(edge):
        s = np.clip((t - (edge - delta / 2)) / delta, 0.0, 1.0)
        return 0.5 * (1.0 + np.cos(np.pi * s))

    out = []
    for n_s in range(1, schedule.N_s + 1):
        w = np.ones_like(t)
        if n_s > 1:
            w *= 1.0 - ramp_down(schedule.t_start + (n_s - 1) * schedule.t1)
        if n_s < schedule.N_s:
            w *= ramp_down(schedule.t_start + n_s * schedule.t1)
        out.append(dataclasses.replace(record, data=record.data * w[None, :]))
    return out


def _shift_stamp(phase_data, dt_shift: float):
    """Boundary transform at a later slice: only the time stamp moves."""
    if dt_shift == 0.0:
        return phase_data
    T = phase_data.T.copy()
    T[..., 1] += dt_shift
    return dataclasses.replace(phase_data, T=T)


class TransformCache:
    """Per-box transforms and expansions, shared across slices and steps.

    Boundary transforms depend on the slice index only through an additive
    time-stamp shift; interior transforms depend only on (box, t1). Both
    are built once per box on first use.
    """

    def __init__(self, model: VelocityModel, schedule: SplitSchedule,
                 tiling_data: Tiling, tiling_space: Tiling, grid: GridSpec,
                 data_grid: GridSpec, t: float):
        self.model = model
        self.schedule = schedule
        self.tiling_data = tiling_data
        self.tiling_space = tiling_space
        self.grid = grid
        self.data_grid = data_grid
        self.t = t
        self._boundary: dict = {}
        self._interior: dict = {}

    def boundary(self, box):
        """(phase data at stamp = t, expansion) for a data box."""
        key = box.box_id
        if key not in self._boundary:
            sl = ScheduleSlice(self.schedule, 1, self.grid,
                               data_grid=self.data_grid, t=self.t,
                               kind="boundary")
            pd = coordinate_transform(box, sl, self.model)
            ex = (separated_expansion(pd, self.tiling_data)
                  if pd.mask.any() else None)
            self._boundary[key] = (pd, ex)
        return self._boundary[key]

    def interior(self, box):
        key = box.box_id
        if key not in self._interior:
            sl = ScheduleSlice(self.schedule, 1, self.grid, t=self.t,
                               kind="interior")
            pd = coordinate_transform(box, sl, self.model)
            ex = (separated_expansion(pd, self.tiling_space)
                  if pd.mask.any() else None)
            self._interior[key] = (pd, ex)
        return self._interior[key]


def make_cache(model, schedule, tiling_data, tiling_space, grid,
               data_grid, t: float = None) -> TransformCache:
    if t is None:
        t = schedule.t_start
    return TransformCache(model, schedule, tiling_data, tiling_space,
                          grid, data_grid, t)


def _box_has_content(tiling: Tiling, box, spectrum: np.ndarray,
                     total: float, min_frac: float) -> bool:
    p = tiling.patch(box)
    sub = p.extract(spectrum) * p.window
    e = float(np.sum(np.abs(sub) ** 2))
    if min_frac <= 0.0:
        return e > 0.0
    return e > min_frac * total


def data_spectrum(record_slice: BoundaryRecord, data_grid: GridSpec,
                  c0: float, convention: str = "reconstruction",
                  extra_multiplier: np.ndarray = None) -> np.ndarray:
    """FFT of a data slice with the continuation weight applied.

    extra_multiplier is an optional additional spectral filter (the
    imaging module folds its time-invariant data filter in here so the
    continued field carries it through every semi-group step).
    """
    g_hat = np.fft.fft2(record_slice.data) \
        * data_multiplier(data_grid, c0, convention)
    if extra_multiplier is not None:
        g_hat = g_hat * extra_multiplier
    return g_hat


def part1_continue(record_slice: BoundaryRecord, n_s: int,
                   schedule: SplitSchedule, model: VelocityModel,
                   tiling: Tiling, grid: GridSpec, t: float = None,
                   cache: TransformCache = None,
                   convention: str = "reconstruction",
                   min_energy_frac: float = 0.0,
                   extra_multiplier: np.ndarray = None,
                   workers: int = 1) -> WaveFieldSlice:
    """Continue one data slice into the interior (Algorithm Part I)."""
    if t is None:
        t = schedule.t_start
    data_grid = record_slice.grid
    if cache is None:
        cache = make_cache(model, schedule, tiling, None, grid, data_grid, t)
    stamp = t + (n_s - 1) * schedule.t1
    g_hat = data_spectrum(record_slice, data_grid, model.boundary_speed(),
                          convention, extra_multiplier)

    w = np.zeros(grid.n, dtype=complex)
    total = float(np.sum(np.abs(g_hat) ** 2))
    jobs = []
    if total > 0.0:
        for box in tiling.all_boxes(include_coarse=False):
            if box.center_covector[1] <= 0:
                continue
            if not _box_has_content(tiling, box, g_hat, total,
                                    min_energy_frac):
                continue
            pd, ex = cache.boundary(box)
            if ex is None:
                continue
            pd_s = _shift_stamp(pd, stamp - cache.t)
            # transport-only amplitude; the surface Jacobian factor is
            # exact per mode inside data_multiplier
            norm = surface_amp_norm(pd.xi_center, model.boundary_speed())
            jobs.append((box, pd_s, ex, pd.amp * norm))
    for part in ordered_map(
            lambda j: apply_box(g_hat, tiling, j[0], j[1], j[2], amp=j[3]),
            jobs, workers):
        w += part
    return WaveFieldSlice(field=w, grid=grid, stamp=stamp, n_s=n_s)


def halfwave_step(field_slice: WaveFieldSlice, schedule: SplitSchedule,
                  model: VelocityModel, tiling_space: Tiling,
                  cache: TransformCache = None,
                  min_energy_frac: float = 0.0,
                  workers: int = 1) -> WaveFieldSlice:
    """Back-propagate a continued slice by t1 (Algorithm Part II step)."""
    grid = field_slice.grid
    if cache is None:
        cache = make_cache(model, schedule, None, tiling_space, grid,
                           None, 0.0)
    w_hat = np.fft.fft2(field_slice.field)
    out = np.zeros(grid.n, dtype=complex)
    total = float(np.sum(np.abs(w_hat) ** 2))
    jobs = []
    if total > 0.0:
        for box in tiling_space.all_boxes(include_coarse=False):
            if not _box_has_content(tiling_space, box, w_hat, total,
                                    min_energy_frac):
                continue
            pd, ex = cache.interior(box)
            if ex is None:
                continue
            jobs.append((box, pd, ex))
    for part in ordered_map(
            lambda j: apply_box(w_hat, tiling_space, j[0], j[1], j[2]),
            jobs, workers):
        out += part
    return WaveFieldSlice(field=out, grid=grid,
                          stamp=field_slice.stamp - schedule.t1,
                          n_s=field_slice.n_s)


def chi_interior(grid: GridSpec, cells: int = CHI_RAMP_CELLS) -> np.ndarray:
    """Smooth depth cutoff removing contributions hugging the surface."""
    ramp = np.ones(grid.n[1])
    i = np.arange(min(cells, grid.n[1]))
    ramp[:len(i)] = 0.5 * (1.0 - np.cos(np.pi * i / cells))
    return np.broadcast_to(ramp[None, :], grid.n)


def reverse_continue(record: BoundaryRecord, schedule: SplitSchedule,
                     model: VelocityModel, tiling_data: Tiling,
                     tiling_space: Tiling, grid: GridSpec,
                     t: float = None, roi_mask: np.ndarray = None,
                     cache: TransformCache = None, collect: list = None,
                     convention: str = "reconstruction",
                     min_energy_frac: float = 0.0,
                     workers: int = 1) -> np.ndarray:
    """Full reverse-time continuation to time t; returns the real field.

    Each slice is continued (Part I) and stepped back until its stamp
    reaches t (Part II); slices whose energy has left the region of
    interest stop stepping early. Intermediate (n_s, n_p) fields are
    appended to `collect` when given.
    """
    if t is None:
        t = schedule.t_start
    if cache is None:
        cache = make_cache(model, schedule, tiling_data, tiling_space,
                           grid, record.grid, t)
    total = np.zeros(grid.n, dtype=complex)
    for n_s, rec in enumerate(slice_data(record, schedule), start=1):
        ws = part1_continue(rec, n_s, schedule, model, tiling_data, grid,
                            t=t, cache=cache, convention=convention,
                            min_energy_frac=min_energy_frac,
                            workers=workers)
        if collect is not None:
            collect.append(("part1_ns%d" % n_s, 2.0 * ws.field.real))
        for n_p in range(2, n_s + 1):
            e_tot = float(np.sum(np.abs(ws.field) ** 2))
            if roi_mask is not None and e_tot > 0:
                e_roi = float(np.sum(np.abs(ws.field[roi_mask]) ** 2))
                if e_roi < ROI_STOP_FRACTION * e_tot:
                    break
            ws = halfwave_step(ws, schedule, model, tiling_space,
                               cache=cache,
                               min_energy_frac=min_energy_frac,
                               workers=workers)
            if collect is not None:
                collect.append(("part2_ns%d_np%d" % (n_s, n_p),
                                2.0 * ws.field.real))
        total += ws.field
    out = 2.0 * total.real * chi_interior(grid)
    if collect is not None:
        collect.append(("final", out))
    return out

"""Migration-based inverse scattering on top of boundary continuation.

The image at a point y is the preconditioned, reverse-continued receiver
field evaluated at the source arrival time T(y), weighted by the source
amplitude and an obliquity factor. Both evaluation paths reuse the box
machinery: Part I contributions re-stamp the boundary transform's time
component with T(y); Part II contributions rebuild the interior transform
with a per-point flow duration s*(y) = t_slice - T(y) monitored during
each half-wave back-step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .fio import (
    BoxPhaseData,
    _hessians_from_blocks,
    _integration_steps,
    _masked_all,
    _unpack_blocks,
    apply_box,
    separated_expansion,
)
from .grids import GridSpec
from .model import VelocityModel
from .rays import (
    CAUSTIC_THRESHOLD,
    PropagatorMatrices,
    SourceTables,
    SplitSchedule,
    _pack_W,
    _rk4,
)
from .rtc import (
    BoundaryRecord,
    TransformCache,
    WaveFieldSlice,
    _box_has_content,
    data_spectrum,
    grazing_weight,
    halfwave_step,
    make_cache,
    part1_continue,
    surface_amp_norm,
)

TAU_MIN_DEFAULT = 2.0 * np.pi * 0.5   # rad/s equivalent of 0.5 Hz
ANGLE_BIN_DEG = 5.0
ILLUMINATION_FACTOR = 10.0            # |amp| > factor * median is masked
MUTE_PERIODS = 1.5                    # direct-wave mute half-width
EDGE_TAPER_FRAC = 0.1


@dataclass
class ImagingConfig:
    """Everything the imaging drivers need besides the data itself."""

    source_position: np.ndarray
    tables: SourceTables
    schedule: SplitSchedule
    model: VelocityModel
    grid: GridSpec
    data_grid: GridSpec
    t: float = None
    tau_min: float = TAU_MIN_DEFAULT
    roi_mask: np.ndarray = None

    def __post_init__(self):
        if self.t is None:
            self.t = self.schedule.t_start
        if self.tau_min <= 0:
            raise ValueError("tau_min must be positive")
        if tuple(self.tables.grid.n) != tuple(self.grid.n):
            raise ValueError("source tables must live on the image grid")


def illumination_mask(tables: SourceTables,
                      factor: float = ILLUMINATION_FACTOR) -> np.ndarray:
    """True where a usable source arrival exists.

    Shadow zones (no arrival) and near-caustic blow-ups of the source
    amplitude (|amp| above factor times its median) are excluded.
    """
    ok = tables.mask & (np.abs(tables.amp) > 0)
    if not ok.any():
        return ok
    med = float(np.median(np.abs(tables.amp[ok])))
    return ok & (np.abs(tables.amp) <= factor * med)


def apply_N(record: BoundaryRecord, c0: float) -> BoundaryRecord:
    """Normal-derivative weight -2 i tau c0^-1 C in (xi', tau).

    C = sqrt(1 - c0^2 |xi'|^2 / tau^2); the grazing taper rolls the
    multiplier to zero before the root degenerates. Output is real.
    """
    dg = record.grid
    xp, tau = np.meshgrid(*dg.freq_axes(), indexing="ij")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(c0 * xp / tau)
        ratio[tau == 0] = np.inf
        C2 = 1.0 - ratio**2
        ok = (C2 > 0) & (tau != 0)
        C = np.sqrt(np.where(ok, np.abs(C2), 0.0))
    M = np.where(ok, -2j * tau * C / c0, 0.0) * grazing_weight(ratio)
    out = np.fft.ifft2(np.fft.fft2(record.data) * M).real
    return dataclasses.replace(record, data=out)


def apply_Psi(record: BoundaryRecord, source_position, c0: float,
              f_peak: float, taper_frac: float = EDGE_TAPER_FRAC,
              mute_halfwidth: float = None) -> BoundaryRecord:
    """Acquisition cutoff: edge tapers plus a direct-arrival mute.

    Cosine tapers over taper_frac of the (x', t) extents and a smooth
    mute around the direct arrival t = |x' - x_src'| / c0 with half-width
    MUTE_PERIODS source periods by default.
    """
    if mute_halfwidth is None:
        mute_halfwidth = MUTE_PERIODS / f_peak
    x_src = float(np.asarray(source_position, dtype=float)[0])
    dg = record.grid
    x = dg.origin[0] + dg.spacing[0] * np.arange(dg.n[0])
    t = record.t_axis

    def edge(axis_vals, extent):
        w = np.ones_like(axis_vals)
        m = taper_frac * extent
        lo = axis_vals[0]
        hi = axis_vals[-1]
        r = np.clip((axis_vals - lo) / m, 0.0, 1.0)
        w *= 0.5 * (1.0 - np.cos(np.pi * r))
        r = np.clip((hi - axis_vals) / m, 0.0, 1.0)
        w *= 0.5 * (1.0 - np.cos(np.pi * r))
        return w

    wx = edge(x, dg.extent[0])
    wt = edge(t, record.dt * (dg.n[1] - 1))
    t_dir = np.abs(x - x_src) / c0
    d = np.abs(t[None, :] - t_dir[:, None])
    r = np.clip((d - 0.5 * mute_halfwidth) / (0.5 * mute_halfwidth),
                0.0, 1.0)
    mute = 0.5 * (1.0 - np.cos(np.pi * r))
    out = record.data * wx[:, None] * wt[None, :] * mute
    return dataclasses.replace(record, data=out)


def sigma_tilde(tau: np.ndarray, tau_min: float) -> np.ndarray:
    """Smooth low-frequency cutoff: 0 below tau_min, 1 above 2 tau_min."""
    s = np.clip((np.abs(tau) - tau_min) / tau_min, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * s))


def imaging_filter(data_grid: GridSpec, tau_min: float) -> np.ndarray:
    """Spectral factor sigma_tilde(tau) (i tau)^(-(n+1)/2), n = 2."""
    tau = data_grid.freq_axes()[1]
    sig = sigma_tilde(tau, tau_min)
    z = 1j * np.where(tau == 0, 1.0, tau)
    fac = np.where(sig > 0, sig * z ** -1.5, 0.0)
    return np.broadcast_to(fac[None, :], data_grid.n)


def eta0_field(pd: BoxPhaseData) -> np.ndarray:
    """Central-ray covector of the continued field, (n0, n1, 2).

    The leading-order spatial phase gradient is (grad T)^T xi_center;
    exact for the quadratic model, garbage outside pd.mask.
    """
    sp = pd.grid.spacing
    eta = np.zeros(pd.grid.n + (2,))
    for i in range(2):
        gi = np.gradient(pd.T[..., i], sp[0], sp[1])
        for j in range(2):
            eta[..., j] += gi[j] * pd.xi_center[i]
    return eta


def imaging_multiplier(pd: BoxPhaseData, config: ImagingConfig,
                       kind: str):
    """Per-point complex weight and incidence angle of one box.

    Weight = illumination / amp_src * i * (tau + c n_src . eta0) with
    eta0 the box's central covector at y; tau is the data-side center
    frequency for boundary boxes and c |eta0| for interior boxes. The
    angle between eta0 and the source ray direction is returned in
    degrees for the gathers.
    """
    tables = config.tables
    illum = illumination_mask(tables)
    c = config.model.on_grid(config.grid)
    if kind == "boundary":
        # ray-family covector of the continued field at fixed time
        eta0 = eta0_field(pd)
        tau = float(pd.xi_center[1])
    else:
        # interior boxes carry the central covector at the image point
        # by construction of the per-point flow
        eta0 = np.broadcast_to(pd.xi_center, pd.grid.n + (2,))
        tau = c * float(np.linalg.norm(pd.xi_center))
    mag = np.linalg.norm(eta0, axis=-1)
    dot = np.einsum("...i,...i->...", tables.normal, eta0)
    ok = illum & pd.mask & (mag > 0)
    amp_src = np.where(ok, tables.amp, 1.0)
    factor = np.where(ok, 1j * (tau + c * dot) / amp_src, 0.0)
    cosang = np.where(ok, np.abs(dot) / np.where(mag > 0, mag, 1.0), 1.0)
    angle = np.degrees(np.arccos(np.clip(cosang, 0.0, 1.0)))
    return factor, angle, ok


@dataclass
class AngleGather:
    """Image traces re-binned by local incidence angle."""

    positions: np.ndarray      # horizontal positions (physical)
    depth_axis: np.ndarray
    bin_edges: np.ndarray      # degrees, [0, 90)
    values: np.ndarray         # (n_pos, n_depth, n_bins)

    def image_trace(self, pos_index: int) -> np.ndarray:
        return self.values[pos_index].sum(axis=-1)


class ImageAccumulator:
    """Partial images keyed by (n_s, n_p) plus angle samples for gathers.

    Contributions are added per box in deterministic order; the assembled
    image is the plain sum of all partials. Angle samples store the
    per-box image column and its incidence-angle column at the requested
    horizontal positions, so gathers of any bin width can be formed later.
    """

    def __init__(self, grid: GridSpec, position_indices=()):
        self.grid = grid
        self.position_indices = tuple(int(i) for i in position_indices)
        self.partials: dict = {}
        self.samples: list = []

    def add(self, key, contribution: np.ndarray, angle: np.ndarray = None,
            ok: np.ndarray = None):
        if key not in self.partials:
            self.partials[key] = np.zeros(self.grid.n)
        self.partials[key] += contribution
        if angle is None:
            return
        for ix in self.position_indices:
            col_ok = ok[ix] if ok is not None else np.ones(
                self.grid.n[1], dtype=bool)
            self.samples.append((ix, angle[ix].copy(),
                                 np.where(col_ok, contribution[ix], 0.0)))

    def merge(self, other: "ImageAccumulator"):
        for key, val in other.partials.items():
            if key not in self.partials:
                self.partials[key] = np.zeros(self.grid.n)
            self.partials[key] += val
        self.samples.extend(other.samples)


def assemble(accumulator: ImageAccumulator) -> np.ndarray:
    """Final image: sum of Part I partials and all Part II partials."""
    out = np.zeros(accumulator.grid.n)
    for key in sorted(accumulator.partials):
        out += accumulator.partials[key]
    return out


def angle_gather(accumulator: ImageAccumulator,
                 bin_width: float = ANGLE_BIN_DEG) -> AngleGather:
    """Bin the recorded per-box image columns by incidence angle."""
    grid = accumulator.grid
    edges = np.arange(0.0, 90.0 + bin_width, bin_width)
    n_bins = len(edges) - 1
    pos = np.asarray([grid.origin[0] + i * grid.spacing[0]
                      for i in accumulator.position_indices])
    depth = grid.origin[1] + grid.spacing[1] * np.arange(grid.n[1])
    values = np.zeros((len(pos), grid.n[1], n_bins))
    index_of = {ix: k for k, ix in enumerate(accumulator.position_indices)}
    for ix, ang, col in accumulator.samples:
        b = np.clip((ang / bin_width).astype(int), 0, n_bins - 1)
        values[index_of[ix], np.arange(grid.n[1]), b] += col
    return AngleGather(positions=pos, depth_axis=depth, bin_edges=edges,
                       values=values)


class ImagingCache:
    """Continuation transforms plus per-step imaging interior transforms."""

    def __init__(self, config: ImagingConfig, tiling_data, tiling_space):
        self.config = config
        self.tiling_data = tiling_data
        self.tiling_space = tiling_space
        self.rtc = make_cache(config.model, config.schedule, tiling_data,
                              tiling_space, config.grid, config.data_grid,
                              config.t)
        self._interior_im: dict = {}

    def boundary(self, box):
        return self.rtc.boundary(box)

    def interior_imaging(self, box, m: int):
        """Imaging interior transform for slice time t + m * t1."""
        key = (box.box_id, m)
        if key not in self._interior_im:
            cfg = self.config
            t_slice = cfg.t + m * cfg.schedule.t1
            pd = _imaging_interior_phase(box, cfg, t_slice,
                                         self.tiling_space)
            ex = (separated_expansion(pd, self.tiling_space)
                  if pd.mask.any() else None)
            self._interior_im[key] = (pd, ex)
        return self._interior_im[key]


def _imaging_interior_phase(box, config: ImagingConfig, t_slice: float,
                            tiling_space) -> BoxPhaseData:
    """Interior transform with per-point flow time s*(y) = t_slice - T(y).

    Image points are the seeds; each ray is integrated along the reversed
    flow for its own duration, giving the position the constituent holds
    at the slice time and the propagator over s*(y). Points whose source
    arrival falls outside (t_slice - t1, t_slice] are masked.
    """
    grid = config.grid
    model = config.model
    t1 = config.schedule.t1
    xi_c = box.physical_covector(grid.spacing)
    tables = config.tables

    s_star_full = np.where(tables.mask, t_slice - tables.T, np.nan)
    cond_full = tables.mask & (s_star_full > 0) & (s_star_full <= t1)
    if not cond_full.any():
        return _masked_all(box, grid, xi_c)

    stride = max(1, int(np.ceil(min(grid.n) / 65)))
    ii = [np.unique(np.r_[np.arange(0, grid.n[ax], stride), grid.n[ax] - 1])
          for ax in range(2)]
    axes = grid.axes()
    sx = [axes[ax][ii[ax]] for ax in range(2)]
    seeds = np.stack(np.meshgrid(*sx, indexing="ij"), axis=-1)
    sh = seeds.shape[:2]
    m = sh[0] * sh[1]

    s_seed = np.where(tables.mask, t_slice - tables.T, np.nan)
    s_seed = s_seed[np.ix_(ii[0], ii[1])].reshape(-1)
    # clamp so every seed integrates a valid duration; validity of the
    # image point itself is decided on the full grid
    s_ok = np.isfinite(s_seed)
    s_run = np.clip(np.where(s_ok, s_seed, t1), 1e-6 * t1, t1)

    state = np.zeros((m, 20))
    state[:, 0:2] = seeds.reshape(-1, 2)
    state[:, 2:4] = xi_c
    state[:, 4:20] = _pack_W(PropagatorMatrices.identity())

    c_max = float(model.on_grid(grid).max())
    n_steps = _integration_steps(t1, c_max, grid.spacing)
    h = t1 / n_steps
    traj = np.empty((n_steps + 1, m, 20))
    traj[0] = state
    for i in range(n_steps):
        state = _rk4(model, state, h, 1, -1.0, with_W=True)
        traj[i + 1] = state
    # per-seed state at its own duration, linear between substeps
    idx = np.clip((s_run / h).astype(int), 0, n_steps - 1)
    frac = s_run / h - idx
    cols = np.arange(m)
    st = (1.0 - frac[:, None]) * traj[idx, cols] \
        + frac[:, None] * traj[idx + 1, cols]

    T_seed = st[:, 0:2].reshape(sh + (2,))
    Wb1, Wb2, Wb3, Wb4 = _unpack_blocks(st[:, 4:20].reshape(sh + (16,)))
    W1 = np.swapaxes(Wb4, -1, -2)
    W2 = -np.swapaxes(Wb2, -1, -2)
    W3 = -np.swapaxes(Wb3, -1, -2)
    W4 = np.swapaxes(Wb1, -1, -2)

    chan = np.concatenate(
        [T_seed,
         np.stack([W1, W2, W3, W4], axis=2).reshape(sh + (16,)),
         s_ok.reshape(sh + (1,)).astype(float)], axis=-1)
    rgi = RegularGridInterpolator(tuple(sx), chan, method="cubic",
                                  bounds_error=False, fill_value=np.nan)
    mesh = np.stack(grid.mesh(), axis=-1)
    vals = rgi(mesh.reshape(-1, 2)).reshape(grid.n + (19,))
    mask = np.all(np.isfinite(vals), axis=-1) & (vals[..., 18] > 0.999)
    mask &= cond_full
    vals = np.where(mask[..., None], vals, 0.0)

    W1g, W2g, W3g, _ = _unpack_blocks(vals[..., 2:18])
    detg = np.abs(np.linalg.det(W1g))
    mask &= detg >= CAUSTIC_THRESHOLD
    H_yxi, H_xixi, H_yy = _hessians_from_blocks(W1g, W2g, W3g, mask)
    amp = np.where(mask, 1.0 / np.sqrt(np.maximum(detg, 1e-30)), 0.0)
    T = np.where(mask[..., None], vals[..., 0:2], 0.0)
    lo = np.asarray(grid.origin)
    hi = lo + np.asarray(grid.extent)
    for ax in range(2):
        mask &= (T[..., ax] >= lo[ax]) & (T[..., ax] <= hi[ax])
    amp = np.where(mask, amp, 0.0)
    return BoxPhaseData(box=box, grid=grid, T=T, mask=mask, H_yxi=H_yxi,
                        H_xixi=H_xixi, H_yy=H_yy, amp=amp,
                        xi_center=np.asarray(xi_c, dtype=float))


def partial_image_I(record_slice: BoundaryRecord, n_s: int,
                    config: ImagingConfig, cache: ImagingCache,
                    accumulator: ImageAccumulator,
                    min_energy_frac: float = 0.0) -> np.ndarray:
    """Image contribution of one data slice without back-stepping.

    The boundary transform is reused with its time component re-stamped
    to the source arrival time plus the ray time; only points whose
    arrival falls inside this slice's bracket contribute.
    """
    cfg = config
    sched = cfg.schedule
    stamp = cfg.t + (n_s - 1) * sched.t1
    c0 = cfg.model.boundary_speed()
    g_hat = data_spectrum(record_slice, cfg.data_grid, c0, "anticausal",
                          imaging_filter(cfg.data_grid, cfg.tau_min))
    total = float(np.sum(np.abs(g_hat) ** 2))
    out = np.zeros(cfg.grid.n)
    key = (n_s, 1)
    accumulator.add(key, out)   # register the slot even if nothing lands
    if total == 0.0:
        return accumulator.partials[key]
    dg = cfg.data_grid
    tables = cfg.tables
    for box in cache.tiling_data.all_boxes(include_coarse=False):
        if box.center_covector[1] <= 0:
            continue
        if not _box_has_content(cache.tiling_data, box, g_hat, total,
                                min_energy_frac):
            continue
        pd, ex = cache.boundary(box)
        if ex is None:
            continue
        s_ray = pd.T[..., 1] - cache.rtc.t
        T_im = pd.T.copy()
        T_im[..., 1] = tables.T + s_ray
        cond = tables.mask & (tables.T >= stamp) \
            & (tables.T <= stamp + sched.t1 - s_ray)
        mask = pd.mask & cond
        if cfg.roi_mask is not None:
            mask &= cfg.roi_mask
        for ax in range(2):
            mask &= (T_im[..., ax] >= dg.origin[ax]) \
                & (T_im[..., ax] <= dg.origin[ax] + dg.extent[ax])
        if not mask.any():
            continue
        mult, angle, ok = imaging_multiplier(pd, cfg, "boundary")
        mask &= ok
        if not mask.any():
            continue
        pd_im = dataclasses.replace(pd, T=T_im, mask=mask)
        amp = pd.amp * surface_amp_norm(pd.xi_center, c0) * mult
        wb = apply_box(g_hat, cache.tiling_data, box, pd_im, ex, amp=amp)
        accumulator.add(key, 2.0 * np.real(wb), angle, mask)
    return accumulator.partials[key]


def partial_image_II(field_slice: WaveFieldSlice, n_s: int, n_p: int,
                     config: ImagingConfig, cache: ImagingCache,
                     accumulator: ImageAccumulator,
                     min_energy_frac: float = 0.0) -> np.ndarray:
    """Image contribution monitored during one half-wave back-step.

    field_slice is the complex upgoing field at t + (n_s - n_p + 1) t1,
    about to be stepped back by t1.
    """
    cfg = config
    m = n_s - n_p + 1
    out_key = (n_s, n_p)
    accumulator.add(out_key, np.zeros(cfg.grid.n))
    w_hat = np.fft.fft2(field_slice.field)
    total = float(np.sum(np.abs(w_hat) ** 2))
    if total == 0.0:
        return accumulator.partials[out_key]
    for box in cache.tiling_space.all_boxes(include_coarse=False):
        if not _box_has_content(cache.tiling_space, box, w_hat, total,
                                min_energy_frac):
            continue
        pd, ex = cache.interior_imaging(box, m)
        if ex is None:
            continue
        mask = pd.mask.copy()
        if cfg.roi_mask is not None:
            mask &= cfg.roi_mask
        if not mask.any():
            continue
        mult, angle, ok = imaging_multiplier(pd, cfg, "interior")
        mask &= ok
        if not mask.any():
            continue
        pd_im = dataclasses.replace(pd, mask=mask)
        amp = pd.amp * mult
        wb = apply_box(w_hat, cache.tiling_space, box, pd_im, ex, amp=amp)
        accumulator.add(out_key, 2.0 * np.real(wb), angle, mask)
    return accumulator.partials[out_key]


def migrate(record: BoundaryRecord, config: ImagingConfig,
            tiling_data, tiling_space, f_peak: float,
            cache: ImagingCache = None,
            accumulator: ImageAccumulator = None,
            min_energy_frac: float = 0.0,
            preconditioned: bool = False,
            workers: int = 1) -> tuple:
    """Full imaging chain: precondition, slice, image Parts I and II.

    Returns (image, accumulator). Set preconditioned=True when the record
    already went through apply_Psi and apply_N.
    """
    from .rtc import slice_data
    cfg = config
    c0 = cfg.model.boundary_speed()
    if not preconditioned:
        record = apply_N(apply_Psi(record, cfg.source_position, c0,
                                   f_peak), c0)
    if cache is None:
        cache = ImagingCache(cfg, tiling_data, tiling_space)
    if accumulator is None:
        accumulator = ImageAccumulator(cfg.grid)
    slices = slice_data(record, cfg.schedule)
    filt = imaging_filter(cfg.data_grid, cfg.tau_min)
    for n_s, rec_slice in enumerate(slices, start=1):
        partial_image_I(rec_slice, n_s, cfg, cache, accumulator,
                        min_energy_frac)
        if n_s == 1:
            continue
        w = part1_continue(rec_slice, n_s, cfg.schedule, cfg.model,
                           tiling_data, cfg.grid, t=cfg.t, cache=cache.rtc,
                           convention="anticausal",
                           min_energy_frac=min_energy_frac,
                           extra_multiplier=filt, workers=workers)
        for n_p in range(2, n_s + 1):
            partial_image_II(w, n_s, n_p, cfg, cache, accumulator,
                             min_energy_frac)
            if n_p < n_s:
                w = halfwave_step(w, cfg.schedule, cfg.model, tiling_space,
                                  cache=cache.rtc,
                                  min_energy_frac=min_energy_frac,
                                  workers=workers)
    return assemble(accumulator), accumulator

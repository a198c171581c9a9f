"""Multiscale box-algorithm evaluator for half-wave propagators.

Each frequency box contributes through four stages: a coordinate transform
gridded from the box's central-ray family, second-order phase data derived
from the propagator matrices along those rays, a low-rank separated
expansion of the residual oscillatory factor exp(i theta_2), and the final
summation realized as a type-2 NUFFT at the transformed points.

Two transform flavors exist. Boundary transforms ("part I") map an image
point y to data coordinates (x0', t) via rays launched from the acquisition
surface with the box's central covector. Interior transforms map y to the
position the constituent occupies one semi-group step later; they drive the
half-wave back-steps between time slices.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator, RegularGridInterpolator

from .frame import FrequencyBox, Tiling
from .grids import GridSpec
from .model import VelocityModel
from .nufft import nufft_t2
from .rays import (
    CAUSTIC_THRESHOLD,
    CausticError,
    PropagatorMatrices,
    SplitSchedule,
    _pack_W,
    _rk4,
)

R_MAX = 64
COARSE_SAMPLES = 32        # spatial samples per axis for the expansion SVD
XI_SVD_MAX = 384           # frequency columns entering the SVD
GRAZING_LIMIT = 0.95       # c0 |nu'| / nu_t above which a box is dropped

# per-box wall time accumulated by apply_box, for the benchmark harness
BOX_TIMINGS: dict = defaultdict(float)


def reset_timings():
    BOX_TIMINGS.clear()


@dataclass(frozen=True)
class ScheduleSlice:
    """One semi-group subinterval bound to its target and data sampling."""

    schedule: SplitSchedule
    n_s: int                          # 1-based slice index
    grid: GridSpec                    # target (image/field) grid
    data_grid: GridSpec | None = None  # (x', t) sampling for boundary slices
    t: float = 0.0                    # continuation target time
    kind: str = "boundary"            # "boundary" or "interior"

    @property
    def t1(self) -> float:
        return self.schedule.t1

    @property
    def stamp(self) -> float:
        """Time stamp of the continued field for this slice."""
        return self.t + (self.n_s - 1) * self.t1


@dataclass
class BoxPhaseData:
    """Gridded transform, Hessian blocks and amplitude of one box."""

    box: FrequencyBox
    grid: GridSpec
    T: np.ndarray          # (n0, n1, 2) source-domain coordinates
    mask: np.ndarray       # (n0, n1) bool, True where the ray family covers y
    H_yxi: np.ndarray      # (n0, n1, 2, 2)
    H_xixi: np.ndarray
    H_yy: np.ndarray
    amp: np.ndarray        # |det W1|^(-1/2), zero off the mask
    xi_center: np.ndarray  # (2,) central covector in physical units


@dataclass
class SeparatedExpansion:
    """Low-rank factorization of exp(i theta_2) over (y, xi)."""

    rank: int
    alpha: np.ndarray      # (R, n0, n1) spatial factors on the target grid
    theta_hat: np.ndarray  # (R, p0, p1) frequency factors on the box patch
    eps: float
    max_error: float       # measured on the SVD sampling set


def phase_hessians(W: PropagatorMatrices):
    """Second-derivative blocks of the phase from the propagator matrix.

    Returns (H_yxi, H_xixi, H_yy) = ((W1)^-1, -(W1)^-1 W2, W3 (W1)^-1).
    """
    det = abs(W.det_W1())
    if det < CAUSTIC_THRESHOLD:
        raise CausticError(
            "det W1 = %.3g below caustic threshold" % det)
    H_yxi = np.linalg.inv(W.W1)
    return H_yxi, -H_yxi @ W.W2, W.W3 @ H_yxi


def _masked_all(box, grid, xi_c) -> BoxPhaseData:
    n = grid.n
    return BoxPhaseData(
        box=box, grid=grid,
        T=np.zeros(n + (2,)), mask=np.zeros(n, dtype=bool),
        H_yxi=np.zeros(n + (2, 2)), H_xixi=np.zeros(n + (2, 2)),
        H_yy=np.zeros(n + (2, 2)), amp=np.zeros(n),
        xi_center=np.asarray(xi_c, dtype=float))


def _unpack_blocks(vals16: np.ndarray):
    """Split packed W channels (..., 16) into four (..., 2, 2) blocks."""
    W = vals16.reshape(vals16.shape[:-1] + (4, 2, 2))
    return W[..., 0, :, :], W[..., 1, :, :], W[..., 2, :, :], W[..., 3, :, :]


def _hessians_from_blocks(W1, W2, W3, mask):
    """Vectorized phase Hessians; masked cells get identity W1 placeholders."""
    safe = np.where(mask[..., None, None], W1, np.eye(2))
    H_yxi = np.linalg.inv(safe)
    H_xixi = -H_yxi @ W2
    H_yy = W3 @ H_yxi
    # enforce the symmetry the phase guarantees; interpolation breaks it at
    # roundoff-plus-interpolation level otherwise
    H_xixi = 0.5 * (H_xixi + np.swapaxes(H_xixi, -1, -2))
    H_yy = 0.5 * (H_yy + np.swapaxes(H_yy, -1, -2))
    z = np.zeros((2, 2))
    H_yxi = np.where(mask[..., None, None], H_yxi, z)
    H_xixi = np.where(mask[..., None, None], H_xixi, z)
    H_yy = np.where(mask[..., None, None], H_yy, z)
    return H_yxi, H_xixi, H_yy


def _integration_steps(t1: float, c_max: float, spacing) -> int:
    # resolve the ray family at ~2/3 grid cell per stored step
    return max(48, int(np.ceil(t1 * c_max / (0.66 * float(np.min(spacing))))))


def _boundary_jacobian(xi_c: np.ndarray, c0: float):
    """Interior covector and restriction Jacobian of a boundary data box.

    For data covector (xi', tau) the matching interior covector is
    eta = (xi', k_n) with k_n = sqrt(tau^2/c0^2 - xi'^2) (tangential phase
    matching; |eta| = tau / c0). The W blocks are the exact Jacobian of the
    boundary-to-interior map at elapsed time zero: position depends on the
    launch coordinates (x0', t), the covector on (xi', tau) only.
    """
    xp, tau = float(xi_c[0]), float(xi_c[1])
    kn2 = tau * tau / (c0 * c0) - xp * xp
    if tau <= 0 or kn2 <= 0:
        raise ValueError("grazing direction excluded")
    kn = np.sqrt(kn2)
    eta = np.array([xp, kn])
    ehat = eta * (c0 / tau)
    W1 = np.array([[1.0, c0 * ehat[0]],
                   [0.0, c0 * ehat[1]]])
    W4 = np.array([[1.0, 0.0],
                   [-xp / kn, tau / (c0 * c0 * kn)]])
    z = np.zeros((2, 2))
    return eta, PropagatorMatrices(W1, z.copy(), z.copy(), W4)


def _boundary_phase(box: FrequencyBox, sl: ScheduleSlice,
                    model: VelocityModel) -> BoxPhaseData:
    if sl.data_grid is None:
        raise ValueError("boundary transform requires a data grid")
    grid = sl.grid
    xi_c = box.physical_covector(sl.data_grid.spacing)
    c0 = model.boundary_speed()
    if xi_c[1] <= 0 or c0 * abs(xi_c[0]) >= GRAZING_LIMIT * xi_c[1]:
        return _masked_all(box, grid, xi_c)
    eta0, W0 = _boundary_jacobian(xi_c, c0)

    t1 = sl.t1
    c_max = float(model.on_grid(grid).max())
    pad = 1.1 * c_max * t1 + grid.spacing[0]
    dx0 = 0.75 * grid.spacing[0]
    x0s = np.arange(grid.origin[0] - pad,
                    grid.origin[0] + grid.extent[0] + pad + dx0, dx0)
    m = len(x0s)
    state = np.zeros((m, 20))
    state[:, 0] = x0s
    state[:, 1] = 0.0
    state[:, 2:4] = eta0
    state[:, 4:20] = _pack_W(W0)

    n_steps = _integration_steps(t1, c_max, grid.spacing)
    h = t1 / n_steps
    traj = np.empty((n_steps + 1, m, 20))
    traj[0] = state
    for i in range(n_steps):
        state = _rk4(model, state, h, 1, 1.0, with_W=True)
        traj[i + 1] = state
    s_vals = h * np.arange(n_steps + 1)

    # scattered samples (y -> x0', s, W), restricted to the grid's bounding
    # box with one-cell margin
    y = traj[:, :, 0:2].reshape(-1, 2)
    samp = np.empty((y.shape[0], 18))
    samp[:, 0] = np.tile(x0s, n_steps + 1)
    samp[:, 1] = np.repeat(s_vals, m)
    samp[:, 2:18] = traj[:, :, 4:20].reshape(-1, 16)
    lo = np.asarray(grid.origin) - 2.0 * np.asarray(grid.spacing)
    hi = lo + np.asarray(grid.extent) + 4.0 * np.asarray(grid.spacing)
    keep = np.all((y >= lo) & (y <= hi), axis=1)
    y, samp = y[keep], samp[keep]
    if len(y) < 4:
        return _masked_all(box, grid, xi_c)

    interp = CloughTocher2DInterpolator(y, samp, fill_value=np.nan)
    mesh = np.stack(grid.mesh(), axis=-1)
    vals = interp(mesh.reshape(-1, 2)).reshape(grid.n + (18,))
    mask = np.all(np.isfinite(vals), axis=-1)
    vals = np.where(mask[..., None], vals, 0.0)

    W1, W2, W3, _ = _unpack_blocks(vals[..., 2:18])
    det = np.abs(np.linalg.det(W1))
    mask &= det >= CAUSTIC_THRESHOLD
    H_yxi, H_xixi, H_yy = _hessians_from_blocks(W1, W2, W3, mask)
    amp = np.where(mask, 1.0 / np.sqrt(np.maximum(det, 1e-30)), 0.0)

    T = np.zeros(grid.n + (2,))
    T[..., 0] = vals[..., 0]
    T[..., 1] = sl.stamp + vals[..., 1]
    # transformed coordinates must land inside the data aperture; the
    # periodic NUFFT would otherwise wrap them around
    dg = sl.data_grid
    for ax in range(2):
        mask &= (T[..., ax] >= dg.origin[ax]) & \
                (T[..., ax] <= dg.origin[ax] + dg.extent[ax])
    amp = np.where(mask, amp, 0.0)
    return BoxPhaseData(box=box, grid=grid, T=T, mask=mask, H_yxi=H_yxi,
                        H_xixi=H_xixi, H_yy=H_yy, amp=amp, xi_center=xi_c)


def _interior_phase(box: FrequencyBox, sl: ScheduleSlice,
                    model: VelocityModel) -> BoxPhaseData:
    if box.k == 0:
        raise ValueError("interior transform needs a directional box")
    grid = sl.grid
    xi_c = box.physical_covector(grid.spacing)
    t1 = sl.t1
    c_max = float(model.on_grid(grid).max())

    stride = max(1, int(np.ceil(min(grid.n) / 65)))
    ii = [np.unique(np.r_[np.arange(0, grid.n[ax], stride), grid.n[ax] - 1])
          for ax in range(2)]
    axes = grid.axes()
    sx = [axes[ax][ii[ax]] for ax in range(2)]
    seeds = np.stack(np.meshgrid(*sx, indexing="ij"), axis=-1)
    sh = seeds.shape[:2]
    m = sh[0] * sh[1]
    state = np.zeros((m, 20))
    state[:, 0:2] = seeds.reshape(-1, 2)
    state[:, 2:4] = xi_c
    state[:, 4:20] = _pack_W(PropagatorMatrices.identity())

    n_steps = _integration_steps(t1, c_max, grid.spacing)
    # the later-time position of the constituent now at y follows the
    # reversed flow; see the module docstring
    state = _rk4(model, state, t1, n_steps, -1.0, with_W=True)

    T_seed = state[:, 0:2].reshape(sh + (2,))
    Wb1, Wb2, Wb3, Wb4 = _unpack_blocks(state[:, 4:20].reshape(sh + (16,)))
    # W of the forward (old -> new) map is the symplectic inverse
    W1 = np.swapaxes(Wb4, -1, -2)
    W2 = -np.swapaxes(Wb2, -1, -2)
    W3 = -np.swapaxes(Wb3, -1, -2)
    W4 = np.swapaxes(Wb1, -1, -2)
    det = np.abs(np.linalg.det(W1))

    lo = np.asarray(grid.origin)
    hi = lo + np.asarray(grid.extent)
    inside = np.all((T_seed >= lo) & (T_seed <= hi), axis=-1)
    if np.any(det[inside] < CAUSTIC_THRESHOLD):
        raise CausticError(
            "caustic inside a single semi-group step; schedule too coarse")

    chan = np.concatenate(
        [T_seed,
         np.stack([W1, W2, W3, W4], axis=2).reshape(sh + (16,)),
         inside[..., None].astype(float)], axis=-1)
    rgi = RegularGridInterpolator(tuple(sx), chan, method="cubic",
                                  bounds_error=False, fill_value=np.nan)
    mesh = np.stack(grid.mesh(), axis=-1)
    vals = rgi(mesh.reshape(-1, 2)).reshape(grid.n + (19,))
    mask = np.all(np.isfinite(vals), axis=-1) & (vals[..., 18] > 0.999)

    W1g, W2g, W3g, _ = _unpack_blocks(vals[..., 2:18])
    detg = np.abs(np.linalg.det(W1g))
    mask &= detg >= CAUSTIC_THRESHOLD
    H_yxi, H_xixi, H_yy = _hessians_from_blocks(W1g, W2g, W3g, mask)
    amp = np.where(mask, 1.0 / np.sqrt(np.maximum(detg, 1e-30)), 0.0)
    T = np.where(mask[..., None], vals[..., 0:2], 0.0)
    return BoxPhaseData(box=box, grid=grid, T=T, mask=mask, H_yxi=H_yxi,
                        H_xixi=H_xixi, H_yy=H_yy, amp=amp, xi_center=xi_c)


def coordinate_transform(box: FrequencyBox, schedule_slice: ScheduleSlice,
                         model: VelocityModel) -> BoxPhaseData:
    """Gridded transform plus phase data of one box for one time slice."""
    if schedule_slice.kind == "boundary":
        return _boundary_phase(box, schedule_slice, model)
    if schedule_slice.kind == "interior":
        return _interior_phase(box, schedule_slice, model)
    raise ValueError("unknown slice kind %r" % (schedule_slice.kind,))


def _patch_freq_offsets(tiling: Tiling, phase_data: BoxPhaseData):
    """Physical frequency offsets of the patch samples from the box center."""
    p = tiling.patch(phase_data.box)
    f0, f1 = p.freqs(tiling.grid.n)
    d0 = f0 / tiling.grid.spacing[0] - phase_data.xi_center[0]
    d1 = f1 / tiling.grid.spacing[1] - phase_data.xi_center[1]
    return d0, d1


def separated_expansion(phase_data: BoxPhaseData, tiling: Tiling,
                        eps_k: float | None = None) -> SeparatedExpansion:
    """Rank-truncated factorization exp(i theta_2) ~ sum_r alpha_r theta_r.

    theta_2 is the quadratic phase remainder 0.5 <dxi, H_xixi(y) dxi> around
    the box's central covector, sampled on a coarse spatial grid crossed
    with the box's frequency patch, factorized by SVD and interpolated back
    to the full grid.
    """
    box = phase_data.box
    if eps_k is None:
        eps_k = 2.0 ** (-box.k / 2.0)
    n0, n1 = phase_data.grid.n
    i0 = np.unique(np.round(
        np.linspace(0, n0 - 1, min(COARSE_SAMPLES, n0))).astype(int))
    i1 = np.unique(np.round(
        np.linspace(0, n1 - 1, min(COARSE_SAMPLES, n1))).astype(int))
    H = phase_data.H_xixi[np.ix_(i0, i1)].reshape(-1, 2, 2)
    m_y = H.shape[0]

    d0, d1 = _patch_freq_offsets(tiling, phase_data)
    D0, D1 = np.meshgrid(d0, d1, indexing="ij")
    q = np.stack([D0 * D0, 2.0 * D0 * D1, D1 * D1], axis=-1).reshape(-1, 3)
    h = np.stack([H[:, 0, 0], H[:, 0, 1], H[:, 1, 1]], axis=-1)
    E = np.exp(0.5j * (h @ q.T))          # (m_y, P)
    P = E.shape[1]

    cols = np.unique(np.round(
        np.linspace(0, P - 1, min(XI_SVD_MAX, P))).astype(int))
    U, s, _ = np.linalg.svd(E[:, cols], full_matrices=False)
    # smallest rank whose projector reproduces exp(i theta2) within the
    # scale budget in max norm, found by doubling then bisection
    G = U.conj().T @ E
    target = 0.9 * eps_k

    def max_err(R):
        return float(np.abs(U[:, :R] @ G[:R] - E).max())

    R = 1
    while R < R_MAX and max_err(R) > target:
        R = min(2 * R, R_MAX)
    if max_err(R) > target:
        if R >= R_MAX:
            raise RuntimeError("expansion rank blow-up; shrink t1")
    lo = R // 2
    while R - lo > 1:
        mid = (R + lo) // 2
        if max_err(mid) <= target:
            R = mid
        else:
            lo = mid
    err = max_err(R)
    U = U[:, :R]

    theta_hat = G[:R] / np.sqrt(m_y)                      # (R, P)
    alpha_c = np.sqrt(m_y) * U                            # (m_y, R)
    # fix the per-rank phase so trivial factors come out as exactly 1
    for r in range(R):
        piv = np.argmax(np.abs(alpha_c[:, r]))
        ph = alpha_c[piv, r] / max(np.abs(alpha_c[piv, r]), 1e-300)
        alpha_c[:, r] /= ph
        theta_hat[r] *= ph

    rgi = RegularGridInterpolator(
        (i0.astype(float), i1.astype(float)),
        alpha_c.reshape(len(i0), len(i1), R), method="linear")
    full = np.stack(np.meshgrid(np.arange(n0, dtype=float),
                                np.arange(n1, dtype=float),
                                indexing="ij"), axis=-1)
    alpha = rgi(full.reshape(-1, 2)).reshape(n0, n1, R)
    alpha = np.moveaxis(alpha, -1, 0)

    p = tiling.patch(box)
    return SeparatedExpansion(
        rank=R, alpha=alpha,
        theta_hat=theta_hat.reshape((R,) + p.shape),
        eps=eps_k, max_error=err)


def apply_box(g_hat: np.ndarray, tiling: Tiling, box: FrequencyBox,
              phase_data: BoxPhaseData, expansion: SeparatedExpansion,
              amp: np.ndarray | None = None) -> np.ndarray:
    """One box's contribution w(y) to the continued field.

    g_hat is the unnormalized FFT of the source-domain data; the result is
    the band-limited evaluation a(y) sum_r alpha_r(y) *
    sum_xi exp(i <T(y), xi>) g_hat beta chi theta_r / N.
    """
    t_wall = time.perf_counter()
    p = tiling.patch(box)
    sub = p.extract(g_hat) * p.window**2
    grid = phase_data.grid
    out = np.zeros(grid.n, dtype=complex)
    mask = phase_data.mask
    if not mask.any() or not np.any(sub):
        BOX_TIMINGS[box.box_id] += time.perf_counter() - t_wall
        return out

    dg = tiling.grid
    pts = (phase_data.T[mask] - np.asarray(dg.origin)) / np.asarray(dg.spacing)
    acc = np.zeros(len(pts), dtype=complex)
    n = dg.n
    for r in range(expansion.rank):
        S = np.zeros(n, dtype=complex)
        p.add_into(S, sub * expansion.theta_hat[r])
        acc += expansion.alpha[r][mask] * nufft_t2(pts, S)
    a = phase_data.amp if amp is None else amp
    out[mask] = a[mask] * acc / (n[0] * n[1])
    BOX_TIMINGS[box.box_id] += time.perf_counter() - t_wall
    return out

"""Hamiltonian ray geometry for the half-wave equation.

The Hamiltonian is H(y, eta) = c(y)|eta|. Rays, the linearized propagator
matrices W = d(y, eta)/d(x, xi), caustic-aware time splitting, boundary
launch states, and gridded point-source tables (travel time, geometric
amplitude, incidence direction) all derive from the same batched RK4
integrator with a fixed step for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from .grids import GridSpec
from .model import VelocityModel

CAUSTIC_THRESHOLD = 0.1
N_S_MAX = 16
STEPS_PER_SUBINTERVAL = 64


class CausticError(RuntimeError):
    """det W1 fell below the caustic threshold; split the time interval."""


@dataclass
class RayState:
    y: np.ndarray
    eta: np.ndarray
    escaped: bool = False

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if np.linalg.norm(self.eta) == 0:
            raise ValueError("ray covector must be nonzero")


@dataclass
class PropagatorMatrices:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray

    @classmethod
    def identity(cls, n: int = 2) -> "PropagatorMatrices":
        z = np.zeros((n, n))
        return cls(np.eye(n), z.copy(), z.copy(), np.eye(n))

    def as_block(self) -> np.ndarray:
        return np.block([[self.W1, self.W2], [self.W3, self.W4]])

    def det_W1(self) -> float:
        return float(np.linalg.det(self.W1))

    def symplectic_defect(self) -> float:
        n = self.W1.shape[0]
        J = np.block([[np.zeros((n, n)), np.eye(n)],
                      [-np.eye(n), np.zeros((n, n))]])
        W = self.as_block()
        return float(np.linalg.norm(W.T @ J @ W - J))


@dataclass(frozen=True)
class SplitSchedule:
    t_start: float
    t_end: float
    N_s: int
    overlap: float = 0.0
    min_det_W1: float = 1.0

    @property
    def t1(self) -> float:
        return (self.t_end - self.t_start) / self.N_s

    def subintervals(self):
        return [(self.t_start + i * self.t1, self.t_start + (i + 1) * self.t1)
                for i in range(self.N_s)]


@dataclass
class SourceTables:
    x_src: np.ndarray
    grid: GridSpec
    T: np.ndarray
    amp: np.ndarray
    normal: np.ndarray      # unit incidence vector n = grad T / |grad T|
    mask: np.ndarray        # True where an arrival was recorded


def _hamilton_rhs(model: VelocityModel, y: np.ndarray, eta: np.ndarray,
                  sign: float):
    """Batched right-hand side of Hamilton's equations for H = c|eta|."""
    c, grad, _ = model.eval(y)
    mag = np.linalg.norm(eta, axis=-1, keepdims=True)
    etah = eta / mag
    dy = sign * c[..., None] * etah
    deta = -sign * mag * grad
    return dy, deta


def _linearized_blocks(model: VelocityModel, y: np.ndarray, eta: np.ndarray,
                       sign: float):
    """Coefficient blocks of the linearized Hamilton system at (y, eta)."""
    c, grad, hess = model.eval(y)
    mag = np.linalg.norm(eta, axis=-1, keepdims=True)
    etah = eta / mag
    outer = etah[..., :, None] * etah[..., None, :]
    eye = np.eye(y.shape[-1])
    A11 = sign * etah[..., :, None] * grad[..., None, :]
    A12 = sign * c[..., None, None] * (eye - outer) / mag[..., None]
    A21 = -sign * mag[..., None] * hess
    A22 = -sign * grad[..., :, None] * etah[..., None, :]
    return A11, A12, A21, A22


def _rhs_full(model, state, sign, with_W):
    """RHS on packed state (..., 4) or (..., 4 + 16) for rays plus W."""
    y = state[..., 0:2]
    eta = state[..., 2:4]
    dy, deta = _hamilton_rhs(model, y, eta, sign)
    if not with_W:
        return np.concatenate([dy, deta], axis=-1)
    A11, A12, A21, A22 = _linearized_blocks(model, y, eta, sign)
    W = state[..., 4:20].reshape(state.shape[:-1] + (2, 2, 2, 2))
    W1, W2, W3, W4 = W[..., 0, 0, :, :], W[..., 0, 1, :, :], W[..., 1, 0, :, :], W[..., 1, 1, :, :]
    dW1 = A11 @ W1 + A12 @ W3
    dW2 = A11 @ W2 + A12 @ W4
    dW3 = A21 @ W1 + A22 @ W3
    dW4 = A21 @ W2 + A22 @ W4
    dW = np.stack([np.stack([dW1, dW2], axis=-3),
                   np.stack([dW3, dW4], axis=-3)], axis=-4)
    return np.concatenate(
        [dy, deta, dW.reshape(state.shape[:-1] + (16,))], axis=-1)


def _rk4(model, state, t, n_steps, sign, with_W):
    h = t / n_steps
    for _ in range(n_steps):
        k1 = _rhs_full(model, state, sign, with_W)
        k2 = _rhs_full(model, state + 0.5 * h * k1, sign, with_W)
        k3 = _rhs_full(model, state + 0.5 * h * k2, sign, with_W)
        k4 = _rhs_full(model, state + h * k3, sign, with_W)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state


def _pack_W(W: PropagatorMatrices) -> np.ndarray:
    blk = np.stack([np.stack([W.W1, W.W2]), np.stack([W.W3, W.W4])])
    return blk.reshape(16)


def _unpack_W(flat: np.ndarray) -> PropagatorMatrices:
    blk = flat.reshape(2, 2, 2, 2)
    return PropagatorMatrices(blk[0, 0].copy(), blk[0, 1].copy(),
                              blk[1, 0].copy(), blk[1, 1].copy())


def _escaped(y: np.ndarray, domain: GridSpec | None, pad: float) -> bool:
    if domain is None:
        return False
    lo = np.asarray(domain.origin) - pad
    hi = np.asarray(domain.origin) + np.asarray(domain.extent) + pad
    return bool(np.any(y < lo) or np.any(y > hi))


def flow(model: VelocityModel, x, xi, t: float, direction: int = +1,
         n_steps: int | None = None, domain: GridSpec | None = None,
         pad: float = 0.0) -> RayState:
    """Integrate Hamilton's equations from (x, xi) for time t."""
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    state = np.concatenate([np.asarray(x, float), np.asarray(xi, float)])
    if np.linalg.norm(state[2:4]) == 0:
        raise ValueError("ray covector must be nonzero")
    if t == 0:
        return RayState(state[0:2], state[2:4])
    if n_steps is None:
        n_steps = max(16, int(np.ceil(512 * t)))
    sign = 1.0 if direction >= 0 else -1.0
    state = _rk4(model, state, t, n_steps, sign, with_W=False)
    out = RayState(state[0:2], state[2:4])
    out.escaped = _escaped(out.y, domain, pad)
    return out


def propagate_W(model: VelocityModel, x, xi, t: float, direction: int = +1,
                W0: PropagatorMatrices | None = None,
                n_steps: int | None = None):
    """Ray endpoint plus the propagator matrix W solving the linearized
    Hamilton-Jacobi system from W0 (default: identity)."""
    if W0 is None:
        W0 = PropagatorMatrices.identity()
    state = np.concatenate(
        [np.asarray(x, float), np.asarray(xi, float), _pack_W(W0)])
    if t == 0:
        return RayState(state[0:2], state[2:4]), W0
    if n_steps is None:
        n_steps = max(16, int(np.ceil(512 * t)))
    sign = 1.0 if direction >= 0 else -1.0
    state = _rk4(model, state, t, n_steps, sign, with_W=True)
    return RayState(state[0:2], state[2:4]), _unpack_W(state[4:20])


def amplitude_from_W(W: PropagatorMatrices) -> float:
    """Half-wave amplitude factor |det W1|^(-1/2)."""
    d = abs(W.det_W1())
    if d < CAUSTIC_THRESHOLD:
        raise CausticError(
            "det W1 = %.3g below caustic threshold; split the interval" % d)
    return 1.0 / np.sqrt(d)


def boundary_launch(nu, c0: float):
    """Initial ray covector and propagator matrix for a boundary data box.

    nu is the unit covector in (xi', tau) space; the launch is into the
    interior with eta_n > 0.
    """
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    nup, nun = nu[0], nu[1]
    if abs(nup) * c0 >= abs(nun):
        raise ValueError("grazing direction excluded")
    nun_abs = abs(nun)
    etan = np.sqrt(nun_abs**2 / c0**2 - nup**2)
    eta0 = (c0 / nun_abs) * np.array([nup, etan])
    etap = eta0[0]
    etan0 = eta0[1]
    W1 = np.array([[1.0, 0.0],
                   [c0 * etap, c0 * etan0]])
    W4 = (c0 / nun_abs) * np.array(
        [[1.0, c0 * nup / (nun_abs * etan0)],
         [nup / nun_abs, c0 * nup**2 / (nun_abs**2 * etan0)]])
    z = np.zeros((2, 2))
    return eta0, PropagatorMatrices(W1, z.copy(), z.copy(), W4)


def monitor_launches(directions, positions, freqs, c0: float):
    """Launch states (x, xi) covering box directions x boundary positions
    x radial frequencies, skipping grazing directions."""
    launches = []
    for nu in directions:
        nu = np.asarray(nu, dtype=float)
        if nu[1] == 0:
            continue
        nu = np.array([nu[0], abs(nu[1])]) / np.linalg.norm(nu)
        if abs(nu[0]) * c0 >= 0.95 * abs(nu[1]):
            continue
        eta0, _ = boundary_launch(nu, c0)
        for xp in positions:
            for w in freqs:
                launches.append((np.array([xp, 0.0]), w * eta0))
    return launches


def split_schedule(model: VelocityModel, launches, t_start: float,
                   t_end: float, overlap: float = 0.0,
                   n_s_max: int = N_S_MAX) -> SplitSchedule:
    """Smallest N_s whose subintervals, each restarted from identity W,
    keep |det W1| above the caustic threshold on every monitored ray."""
    if not launches:
        raise ValueError("empty launch set")
    m = len(launches)
    ys = np.array([np.asarray(x, float) for x, _ in launches])
    etas = np.array([np.asarray(xi, float) for _, xi in launches])
    for N_s in range(1, n_s_max + 1):
        t1 = (t_end - t_start) / N_s
        state = np.zeros((m, 20))
        state[:, 0:2] = ys
        state[:, 2:4] = etas
        state[:, 4:20] = _pack_W(PropagatorMatrices.identity())
        worst = np.inf
        for _ in range(N_s):
            # fresh identity W at the start of each subinterval
            state[:, 4:20] = _pack_W(PropagatorMatrices.identity())
            sub = 8
            for _ in range(STEPS_PER_SUBINTERVAL // sub):
                state = _rk4(model, state, t1 * sub / STEPS_PER_SUBINTERVAL,
                             sub, 1.0, with_W=True)
                W1 = state[:, 4:20].reshape(m, 2, 2, 2, 2)[:, 0, 0]
                dets = np.abs(W1[:, 0, 0] * W1[:, 1, 1]
                              - W1[:, 0, 1] * W1[:, 1, 0])
                worst = min(worst, float(dets.min()))
            if worst < CAUSTIC_THRESHOLD:
                break
        if worst >= CAUSTIC_THRESHOLD:
            return SplitSchedule(t_start, t_end, N_s, overlap=overlap,
                                 min_det_W1=worst)
    raise ValueError("model too strongly focusing")


def auto_schedule(model: VelocityModel, grid: GridSpec, t_start: float,
                  t_end: float, n_angles: int = 9, n_positions: int = 8,
                  freq: float = 50.0) -> SplitSchedule:
    """Schedule from a standard monitor set: a fan of sub-grazing launch
    directions at boundary positions across the grid aperture."""
    c0 = model.boundary_speed()
    angles = np.linspace(-1.0, 1.0, n_angles)
    directions = [(np.sin(a), np.cos(a)) for a in angles]
    x0 = grid.origin[0]
    positions = np.linspace(x0 + 0.1 * grid.extent[0],
                            x0 + 0.9 * grid.extent[0], n_positions)
    launches = monitor_launches(directions, positions, [freq], c0)
    return split_schedule(model, launches, t_start, t_end)


def _paraxial_fan(model: VelocityModel, x_src, angles, t_max, h):
    """Integrate a point-source fan with per-ray paraxial vectors.

    State per ray: y(2), eta(2), dy/dtheta(2), deta/dtheta(2). Returns the
    trajectory array of shape (n_steps + 1, n_rays, 8).
    """
    x_src = np.asarray(x_src, dtype=float)
    c_src = float(model.speed(x_src))
    m = len(angles)
    state = np.zeros((m, 8))
    state[:, 0:2] = x_src
    state[:, 2] = np.cos(angles) / c_src
    state[:, 3] = np.sin(angles) / c_src
    state[:, 6] = -np.sin(angles) / c_src
    state[:, 7] = np.cos(angles) / c_src
    n_steps = int(np.ceil(t_max / h))

    def rhs(s):
        y, eta = s[:, 0:2], s[:, 2:4]
        dy, deta = _hamilton_rhs(model, y, eta, 1.0)
        A11, A12, A21, A22 = _linearized_blocks(model, y, eta, 1.0)
        qy, qe = s[:, 4:6], s[:, 6:8]
        dqy = np.einsum("mij,mj->mi", A11, qy) + np.einsum("mij,mj->mi", A12, qe)
        dqe = np.einsum("mij,mj->mi", A21, qy) + np.einsum("mij,mj->mi", A22, qe)
        return np.concatenate([dy, deta, dqy, dqe], axis=-1)

    traj = np.empty((n_steps + 1, m, 8))
    traj[0] = state
    for i in range(n_steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        traj[i + 1] = state
    return traj


def source_tables(model: VelocityModel, x_src, grid: GridSpec,
                  n_rays: int = 4096, t_max: float | None = None,
                  interior: bool = False) -> SourceTables:
    """Travel time, geometric amplitude and incidence direction of a
    point-source ray fan, gridded by first arrival.

    Deposits use a second-order Taylor correction in the offset between the
    ray sample and the cell center; the travel-time Hessian is recovered
    from the paraxial vectors. Cells no ray reaches keep mask False.
    """
    x_src = np.asarray(x_src, dtype=float)
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    nn = np.asarray(grid.n)
    extent = np.asarray(grid.extent)
    c_grid = model.on_grid(grid)
    c_min, c_max = float(c_grid.min()), float(c_grid.max())
    if t_max is None:
        far = np.max(np.abs(np.stack([origin - x_src,
                                      origin + extent - x_src])), axis=0)
        t_max = 1.3 * float(np.linalg.norm(far)) / c_min
    if interior:
        angles = np.linspace(0.0, 2 * np.pi, n_rays, endpoint=False)
    else:
        # boundary source: launch into the interior half-space
        angles = np.linspace(0.0, np.pi, n_rays + 2)[1:-1]
    h = 0.4 * float(spacing.min()) / c_max
    traj = _paraxial_fan(model, x_src, angles, t_max, h)
    times = h * np.arange(traj.shape[0])
    H_src = 1.0  # c(x_src) * |eta0| with |eta0| = 1/c(x_src)

    T = np.full(grid.n, np.inf)
    amp = np.zeros(grid.n)
    normal = np.zeros(grid.n + (2,))

    flat = traj.reshape(-1, 8)
    t_flat = np.repeat(times, traj.shape[1])
    th_flat = np.tile(angles, traj.shape[0])
    y = flat[:, 0:2]
    idx = np.round((y - origin) / spacing).astype(int)
    inside = np.all((idx >= 0) & (idx < nn), axis=1)
    flat, t_flat, idx = flat[inside], t_flat[inside], idx[inside]
    th_flat = th_flat[inside]
    y, eta = flat[:, 0:2], flat[:, 2:4]
    qy, qe = flat[:, 4:6], flat[:, 6:8]
    cell = origin + idx * spacing
    delta = cell - y

    c_here, _, _ = model.eval(y)
    mag = np.linalg.norm(eta, axis=1)
    etah = eta / mag[:, None]
    gradT = eta / H_src
    ydot = c_here[:, None] * etah
    etadot = -mag[:, None] * model.eval(y)[1]

    # Hess T from Hess T @ [ydot, qy] = [etadot, qe] / H
    M = np.stack([ydot, qy], axis=-1)
    R = np.stack([etadot / H_src, qe / H_src], axis=-1)
    detM = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    ok = np.abs(detM) > 1e-10
    Minv = np.zeros_like(M)
    Minv[ok, 0, 0] = M[ok, 1, 1] / detM[ok]
    Minv[ok, 1, 1] = M[ok, 0, 0] / detM[ok]
    Minv[ok, 0, 1] = -M[ok, 0, 1] / detM[ok]
    Minv[ok, 1, 0] = -M[ok, 1, 0] / detM[ok]
    hessT = np.einsum("mij,mkj->mik", R, Minv)
    hessT = 0.5 * (hessT + np.swapaxes(hessT, 1, 2))

    cand = (t_flat + np.einsum("mi,mi->m", gradT, delta)
            + 0.5 * np.einsum("mi,mij,mj->m", delta, hessT, delta))
    lin = idx[:, 0] * nn[1] + idx[:, 1]
    Tf = T.reshape(-1)
    np.minimum.at(Tf, lin, cand)

    # within the first-arrival cluster, prefer the sample of closest
    # approach: its Taylor extrapolation carries the smallest error
    cluster = cand <= Tf[lin] + h
    dist = np.linalg.norm(delta, axis=1)
    dmin = np.full(Tf.shape, np.inf)
    np.minimum.at(dmin, lin[cluster], dist[cluster])
    win = cluster & (dist <= dmin[lin] + 1e-15)
    spread = np.maximum(np.linalg.norm(qy, axis=1), 1e-12)
    a_cand = 1.0 / np.sqrt(spread)
    af = amp.reshape(-1)
    nf = normal.reshape(-1, 2)
    theta0 = np.zeros(grid.n)
    thf = theta0.reshape(-1)
    Tf[lin[win]] = cand[win]
    af[lin[win]] = a_cand[win]
    nf[lin[win]] = etah[win]
    thf[lin[win]] = th_flat[win]

    T = Tf.reshape(grid.n)
    mask = np.isfinite(T)
    T = np.where(mask, T, 0.0)

    # exclude cells where the first arrival is not smooth: caustic cells
    # (relative focusing beyond the caustic threshold) and kink lines where
    # a second ray branch arrives within ~2 time steps of the winner
    dist_cell = np.linalg.norm(
        np.stack(grid.mesh(), axis=-1) - x_src, axis=-1)
    focusing = amp * np.sqrt(np.maximum(dist_cell, 1e-12))
    bad = mask & (focusing > 1.0 / np.sqrt(CAUSTIC_THRESHOLD))
    dth = np.abs((th_flat - thf[lin] + np.pi) % (2 * np.pi) - np.pi)
    far_branch = dth > 0.15
    second = np.full(Tf.shape, np.inf)
    np.minimum.at(second, lin[far_branch], cand[far_branch])
    bad |= (second.reshape(grid.n) - T) <= 2.0 * h
    mask &= ~binary_dilation(bad, iterations=1)

    # near-source zone: Taylor extrapolation degrades as 1/r^2, so use
    # direct slowness integration along the straight segment instead
    r_near = min(12.0 * float(spacing.min()),
                 0.35 * float(np.linalg.norm(extent)))
    mesh = np.stack(grid.mesh(), axis=-1)
    dvec = mesh - x_src
    rr = np.linalg.norm(dvec, axis=-1)
    near = (rr <= r_near) & (rr > 0)
    if np.any(near):
        pts = mesh[near]
        u, wq = np.polynomial.legendre.leggauss(16)
        u = 0.5 * (u + 1.0)
        wq = 0.5 * wq
        seg = x_src + u[:, None, None] * (pts - x_src)[None, :, :]
        c_seg = model.speed(seg)
        T[near] = np.linalg.norm(pts - x_src, axis=-1) * np.einsum(
            "q,qm->m", wq, 1.0 / c_seg)
        amp[near] = 1.0 / np.sqrt(rr[near])
        normal[near] = dvec[near] / rr[near][:, None]
        mask[near] = True
    src_cell = np.all(np.abs(mesh - x_src) < 0.5 * spacing, axis=-1)
    if np.any(src_cell):
        T[src_cell] = 0.0
        amp[src_cell] = amp[near].max() if np.any(near) else 1.0
        mask[src_cell] = True
    return SourceTables(x_src=x_src, grid=grid, T=T, amp=amp,
                        normal=normal, mask=mask)

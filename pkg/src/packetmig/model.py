"""Smooth velocity models with analytic derivatives, plus reflectivity models.

Models are closed-form, so ray tracing and the linearized Hamilton-Jacobi
system get exact gradients and Hessians without interpolation noise. A
gridded adapter with spline interpolation is provided for cross-checks
against finite-difference data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .grids import GridSpec


def _smoothstep(s: np.ndarray):
    """C^3 ramp on [0, 1] with value, first and second derivative."""
    s = np.clip(s, 0.0, 1.0)
    p = s**4 * (35.0 - 84.0 * s + 70.0 * s**2 - 20.0 * s**3)
    dp = s**3 * (140.0 - 420.0 * s + 420.0 * s**2 - 140.0 * s**3)
    d2p = s**2 * (420.0 - 1680.0 * s + 2100.0 * s**2 - 840.0 * s**3)
    return p, dp, d2p


@dataclass(frozen=True)
class GaussianLens:
    """One Gaussian low-velocity anomaly.

    The lens is multiplied by a depth ramp that vanishes identically for
    x_n <= surface_band[0], which keeps the wave speed laterally constant
    in a layer along the acquisition boundary.
    """

    contrast: float
    center: tuple[float, ...]
    widths: tuple[float, ...]
    surface_band: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.contrast < 1.0:
            raise ValueError("contrast fraction must be in (0, 1)")
        if any(w <= 0 for w in self.widths):
            raise ValueError("lens widths must be positive")
        z0, z1 = self.surface_band
        if z1 < z0 or z0 < 0:
            raise ValueError("invalid surface band")

    def bump(self, x: np.ndarray):
        """Return (g, grad g, hess g) of the tapered Gaussian at points x."""
        x = np.asarray(x, dtype=float)
        nd = len(self.center)
        u = (x - np.asarray(self.center)) / np.asarray(self.widths)
        g = np.exp(-np.sum(u * u, axis=-1))
        w = np.asarray(self.widths)
        dg = g[..., None] * (-2.0 * u / w)
        hg = g[..., None, None] * (
            4.0 * (u / w)[..., :, None] * (u / w)[..., None, :]
        )
        idx = np.arange(nd)
        hg[..., idx, idx] -= g[..., None] * 2.0 / w**2

        z0, z1 = self.surface_band
        if z1 > z0:
            zn = x[..., -1]
            s = (zn - z0) / (z1 - z0)
            q, dq, d2q = _smoothstep(s)
            dq = dq / (z1 - z0)
            d2q = d2q / (z1 - z0) ** 2
            # product rule for f = q(z) * g(x)
            f = q * g
            df = q[..., None] * dg
            hf = q[..., None, None] * hg
            df[..., -1] += dq * g
            hf[..., -1, :] += dq[..., None] * dg
            hf[..., :, -1] += dq[..., None] * dg
            hf[..., -1, -1] += d2q * g
            return f, df, hf
        return g, dg, hg


@dataclass(frozen=True)
class VelocityModel:
    """Background speed c0 modulated by a sum of Gaussian lenses.

    c(x) = c0 * (1 - sum_j f_j * bump_j(x)). With no lenses the model is
    constant. c stays positive as long as the summed contrasts are < 1.
    """

    c0: float
    lenses: tuple[GaussianLens, ...] = field(default=())

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValueError("background speed must be positive")
        if sum(l.contrast for l in self.lenses) >= 1.0:
            raise ValueError("total lens contrast must stay below 1")

    @property
    def kind(self) -> str:
        if not self.lenses:
            return "constant"
        return "gaussian_lens" if len(self.lenses) == 1 else "sum"

    def eval(self, x: np.ndarray):
        """Wave speed with analytic gradient and Hessian.

        x has shape (..., n); returns (c, grad, hess) with shapes
        (...,), (..., n) and (..., n, n).
        """
        x = np.asarray(x, dtype=float)
        nd = x.shape[-1]
        c = np.ones(x.shape[:-1])
        grad = np.zeros(x.shape[:-1] + (nd,))
        hess = np.zeros(x.shape[:-1] + (nd, nd))
        for lens in self.lenses:
            g, dg, hg = lens.bump(x)
            c -= lens.contrast * g
            grad -= lens.contrast * dg
            hess -= lens.contrast * hg
        return self.c0 * c, self.c0 * grad, self.c0 * hess

    def speed(self, x: np.ndarray) -> np.ndarray:
        return self.eval(x)[0]

    def boundary_speed(self) -> float:
        """Wave speed in the laterally constant layer at x_n = 0."""
        nd = len(self.lenses[0].center) if self.lenses else 2
        return float(self.eval(np.zeros(nd))[0])

    def on_grid(self, grid: GridSpec) -> np.ndarray:
        pts = np.stack(grid.mesh(), axis=-1)
        return self.speed(pts)


def make_constant(c0: float, n_dims: int = 2) -> VelocityModel:
    del n_dims
    return VelocityModel(c0=float(c0))


def make_gaussian_lens(
    c0: float,
    contrast_fraction: float,
    center,
    widths,
    surface_band=None,
) -> VelocityModel:
    """Background c0 with one Gaussian low-velocity lens.

    c(x) = c0 * (1 - f * exp(-sum(((x - center) / widths)^2))), tapered to
    exactly c0 in a thin layer along the boundary.
    """
    center = tuple(float(v) for v in center)
    widths = tuple(float(v) for v in widths)
    if surface_band is None:
        # taper well clear of the lens so the closed form is unchanged there
        depth = center[-1]
        surface_band = (0.04 * depth, 0.22 * depth)
    lens = GaussianLens(
        contrast=float(contrast_fraction),
        center=center,
        widths=widths,
        surface_band=tuple(float(v) for v in surface_band),
    )
    return VelocityModel(c0=float(c0), lenses=(lens,))


def eval_speed(model: VelocityModel, x: np.ndarray):
    """Operation form of VelocityModel.eval."""
    return model.eval(x)


@dataclass(frozen=True)
class LineReflector:
    """Line segment reflector with normal-incidence reflectivity amplitude."""

    p0: tuple[float, float]
    p1: tuple[float, float]
    amplitude: float

    @property
    def dip_deg(self) -> float:
        d = np.subtract(self.p1, self.p0)
        return float(np.degrees(np.arctan2(d[1], d[0])))


@dataclass(frozen=True)
class ReflectivityModel:
    """Collection of line reflectors, used only by the data generator."""

    segments: tuple[LineReflector, ...]

    def validate_inside(self, grid: GridSpec):
        axes = grid.axes()
        lo = [a[1] for a in axes]
        hi = [a[-2] for a in axes]
        for seg in self.segments:
            for p in (seg.p0, seg.p1):
                if any(pi < l or pi > h for pi, l, h in zip(p, lo, hi)):
                    raise ValueError(
                        "reflector segment endpoint outside grid interior"
                    )

    def rasterize(self, grid: GridSpec) -> np.ndarray:
        """Thin (1-cell) contrast field on the grid, scaled by amplitude."""
        self.validate_inside(grid)
        out = np.zeros(grid.n)
        h = min(grid.spacing)
        for seg in self.segments:
            p0 = np.asarray(seg.p0, dtype=float)
            p1 = np.asarray(seg.p1, dtype=float)
            length = np.linalg.norm(p1 - p0)
            m = max(int(np.ceil(length / (0.25 * h))) + 1, 2)
            ts = np.linspace(0.0, 1.0, m)
            pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
            idx = np.round(
                (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
            ).astype(int)
            idx = np.clip(idx, 0, np.asarray(grid.n) - 1)
            out[idx[:, 0], idx[:, 1]] = seg.amplitude
        return out


class GriddedModel:
    """Spline adapter exposing the VelocityModel interface for gridded speeds.

    Coordinates outside the grid clamp to the boundary value. Only 2-D.
    """

    def __init__(self, grid: GridSpec, values: np.ndarray):
        if len(grid.n) != 2:
            raise ValueError("GriddedModel supports 2-D grids only")
        if values.shape != grid.n:
            raise ValueError("value array does not match grid")
        self.grid = grid
        ax = grid.axes()
        self._spline = RectBivariateSpline(ax[0], ax[1], values, kx=3, ky=3)
        self._lo = np.array([ax[0][0], ax[1][0]])
        self._hi = np.array([ax[0][-1], ax[1][-1]])

    def eval(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        flat = np.clip(flat, self._lo, self._hi)
        a, b = flat[:, 0], flat[:, 1]
        c = self._spline(a, b, grid=False)
        grad = np.stack(
            [self._spline(a, b, dx=1, grid=False),
             self._spline(a, b, dy=1, grid=False)], axis=-1)
        hess = np.empty((flat.shape[0], 2, 2))
        hess[:, 0, 0] = self._spline(a, b, dx=2, grid=False)
        hess[:, 1, 1] = self._spline(a, b, dy=2, grid=False)
        hxy = self._spline(a, b, dx=1, dy=1, grid=False)
        hess[:, 0, 1] = hxy
        hess[:, 1, 0] = hxy
        shp = x.shape[:-1]
        return c.reshape(shp), grad.reshape(shp + (2,)), hess.reshape(shp + (2, 2))

    def speed(self, x: np.ndarray) -> np.ndarray:
        return self.eval(x)[0]

"""Dyadic parabolic decomposition of phase space.

Frequency space is tiled by one isotropic low-frequency box plus, per scale
k = 1..k_max, a set of rotated boxes whose radial extent grows like 2^k and
whose transverse extent grows like 2^(k/2). The window pair (chi, beta) is
self-dual and normalized on the discrete grid so that

    chi_0 beta_0 + sum_{nu,k} chi_{nu,k} beta_{nu,k} = 1

holds exactly at every covered frequency sample. Analysis and synthesis are
realized spectrally; per-box coefficients live on the decimated lattice dual
to the box's spectral bounding patch, which makes the transform pair exact to
machine precision on band-limited input.

All tiling geometry is expressed in rad/sample units; the finest scale sits
just below the grid Nyquist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .grids import GridSpec

# tiling constants; the direction-count constant and overlap fraction are
# free parameters of the construction
C_DIR = 4.0
OVERLAP = 1.0 / 3.0
TOP_CENTER_FRAC = 2.0 / 3.0     # radial center of scale k_max, as fraction of pi
MIN_SAMPLES_PER_SCALE = 14.3
# windows are supported in a concentric sub-box of B_{nu,k}; keeping the
# support tighter than the nominal box limits overlap to near neighbors
RADIAL_SUPPORT = 0.667
TRANSVERSE_SUPPORT = 1.00


def _smooth_transition(s: np.ndarray) -> np.ndarray:
    """C-infinity monotone transition: 0 at s<=0, 1 at s>=1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        e0 = np.where(s > 0.0, np.exp(-1.0 / np.maximum(s, 1e-12)), 0.0)
        e1 = np.where(s < 1.0, np.exp(-1.0 / np.maximum(1.0 - s, 1e-12)), 0.0)
    return e0 / (e0 + e1)


def _edge_profile(u: np.ndarray) -> np.ndarray:
    """1-D Meyer-style bump on [-1, 1]: flat center, C-inf roll-off edges."""
    a = np.abs(u)
    return _smooth_transition((1.0 - a) / (OVERLAP * 2.0))


def round_to_even(x: float) -> int:
    return 2 * int(round(x / 2.0))


@dataclass(frozen=True)
class FrequencyBox:
    """One (nu, k) tile: scale, direction, rotation and box geometry."""

    k: int
    nu_index: int
    nu: np.ndarray            # unit covector (sample units)
    rotation: np.ndarray      # maps nu to e1
    center: float             # radial center xi_k
    half_lengths: tuple[float, float]

    @property
    def box_id(self) -> tuple[int, int]:
        return (self.k, self.nu_index)

    @property
    def center_covector(self) -> np.ndarray:
        return self.center * self.nu

    def physical_covector(self, spacing) -> np.ndarray:
        """Central covector in rad per physical unit for the given spacings."""
        return self.center_covector / np.asarray(spacing)


@dataclass(frozen=True)
class _Patch:
    """Axis-aligned spectral bounding patch of one box, with wrap-around."""

    start: tuple[int, int]    # unwrapped integer frequency index of corner
    shape: tuple[int, int]
    window: np.ndarray        # normalized window values on the patch

    def index_arrays(self, n: tuple[int, int]):
        i = (self.start[0] + np.arange(self.shape[0])) % n[0]
        j = (self.start[1] + np.arange(self.shape[1])) % n[1]
        return i, j

    def freqs(self, n: tuple[int, int]):
        """Unwrapped angular frequencies (rad/sample) at patch samples."""
        f0 = 2.0 * np.pi * (self.start[0] + np.arange(self.shape[0])) / n[0]
        f1 = 2.0 * np.pi * (self.start[1] + np.arange(self.shape[1])) / n[1]
        return f0, f1

    def extract(self, spectrum: np.ndarray) -> np.ndarray:
        i, j = self.index_arrays(spectrum.shape)
        return spectrum[np.ix_(i, j)]

    def add_into(self, spectrum: np.ndarray, values: np.ndarray):
        i, j = self.index_arrays(spectrum.shape)
        np.add.at(spectrum, np.ix_(i, j), values)


@dataclass
class Tiling:
    """Frequency tiling of a 2-D sampling grid."""

    n_dims: int
    k_max: int
    grid: GridSpec
    boxes: list[FrequencyBox]
    coarse_box: FrequencyBox
    xi_base: float
    _patches: dict = field(default_factory=dict, repr=False)

    @property
    def coarse_cutoff(self) -> float:
        return 2.0 * self.xi_base

    def patch(self, box: FrequencyBox) -> _Patch:
        return self._patches[box.box_id]

    def all_boxes(self, include_coarse: bool = True):
        if include_coarse:
            return [self.coarse_box] + list(self.boxes)
        return list(self.boxes)

    def boxes_at_scale(self, k: int):
        return [b for b in self.boxes if b.k == k]

    def coverage_sum(self) -> np.ndarray:
        """sum of chi*beta over all boxes, on the full frequency grid."""
        out = np.zeros(self.grid.n)
        for b in self.all_boxes():
            p = self.patch(b)
            p.add_into(out, p.window**2)
        return out


def _direction_count(k: int, n_dims: int) -> int:
    return round_to_even(C_DIR * 2 ** (k * (n_dims - 1) / 2.0))


def _raw_window(box: FrequencyBox, f0: np.ndarray, f1: np.ndarray) -> np.ndarray:
    """Unnormalized bump of one box at the given frequency samples."""
    xi0, xi1 = np.meshgrid(f0, f1, indexing="ij")
    if box.k == 0:
        r = np.hypot(xi0, xi1)
        return _edge_profile(r / (2.0 * box.center))
    rot = box.rotation
    r1 = rot[0, 0] * xi0 + rot[0, 1] * xi1
    r2 = rot[1, 0] * xi0 + rot[1, 1] * xi1
    u1 = (r1 - box.center) / (RADIAL_SUPPORT * box.half_lengths[0])
    u2 = r2 / (TRANSVERSE_SUPPORT * box.half_lengths[1])
    return _edge_profile(u1) * _edge_profile(u2)


def _bounding_patch(box: FrequencyBox, n: tuple[int, int]) -> _Patch:
    if box.k == 0:
        c = np.zeros(2)
        e = np.full(2, 2.0 * box.center)
    else:
        c = box.center_covector
        th = np.arctan2(box.nu[1], box.nu[0])
        a = RADIAL_SUPPORT * box.half_lengths[0]
        b = TRANSVERSE_SUPPORT * box.half_lengths[1]
        e = np.array([
            a * abs(np.cos(th)) + b * abs(np.sin(th)),
            a * abs(np.sin(th)) + b * abs(np.cos(th)),
        ])
    start = []
    shape = []
    for ax in range(2):
        d = 2.0 * np.pi / n[ax]
        lo = int(np.floor((c[ax] - e[ax]) / d))
        hi = int(np.ceil((c[ax] + e[ax]) / d))
        m = min(next_fast_len(hi - lo + 1), n[ax])
        start.append(lo)
        shape.append(m)
    return _Patch(start=tuple(start), shape=tuple(shape), window=None)  # type: ignore[arg-type]


def build_tiling(k_max: int, n_dims: int, grid: GridSpec) -> Tiling:
    """Build the dyadic parabolic tiling of the grid's frequency plane.

    Raises ValueError("scale exceeds Nyquist") when the grid cannot resolve
    the requested number of scales.
    """
    if n_dims != 2:
        raise NotImplementedError("tilings are implemented for n_dims = 2")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if len(grid.n) != 2:
        raise ValueError("grid must be 2-D")
    n_min = min(grid.n)
    if n_min < MIN_SAMPLES_PER_SCALE * 2**k_max:
        raise ValueError("scale exceeds Nyquist")

    xi_base = TOP_CENTER_FRAC * np.pi / 2**k_max

    boxes: list[FrequencyBox] = []
    for k in range(1, k_max + 1):
        xi_k = xi_base * 2**k
        half = (0.75 * xi_k, 0.90 * np.sqrt(xi_k * xi_base))
        n_half = _direction_count(k, n_dims)
        n_total = 2 * n_half
        for nu_index in range(n_total):
            th = 2.0 * np.pi * nu_index / n_total
            nu = np.array([np.cos(th), np.sin(th)])
            rot = np.array([[np.cos(th), np.sin(th)],
                            [-np.sin(th), np.cos(th)]])
            boxes.append(FrequencyBox(
                k=k, nu_index=nu_index, nu=nu, rotation=rot,
                center=xi_k, half_lengths=half))

    coarse = FrequencyBox(
        k=0, nu_index=0, nu=np.array([1.0, 0.0]), rotation=np.eye(2),
        center=xi_base, half_lengths=(xi_base, xi_base))

    tiling = Tiling(
        n_dims=n_dims, k_max=k_max, grid=grid,
        boxes=boxes, coarse_box=coarse, xi_base=xi_base)

    # raw windows on bounding patches, then discrete co-partition normalization
    raw: dict[tuple[int, int], _Patch] = {}
    ssum = np.zeros(grid.n)
    for box in tiling.all_boxes():
        p = _bounding_patch(box, grid.n)
        f0, f1 = p.freqs(grid.n)
        w = _raw_window(box, f0, f1)
        p = _Patch(start=p.start, shape=p.shape, window=w)
        raw[box.box_id] = p
        p.add_into(ssum, w**2)

    # normalize the co-partition to a smooth master window: identically 1 up
    # to 0.9*Nyquist, rolling off before the tiling's outer coverage edge so
    # no window terminates in a spectral jump
    fx = [2.0 * np.pi * np.fft.fftfreq(m) for m in grid.n]
    rr = np.hypot(*np.meshgrid(*fx, indexing="ij"))
    r_roll0, r_roll1 = 0.90 * np.pi, np.pi
    master = np.ones(grid.n)
    ramp = rr > r_roll0
    t = np.clip((r_roll1 - rr[ramp]) / (r_roll1 - r_roll0), 0.0, 1.0)
    # C^5 smoothstep: polynomial tails beat Gevrey bumps at grid-scale widths
    master[ramp] = t**6 * (462.0 - 1980.0 * t + 3465.0 * t**2
                           - 3080.0 * t**3 + 1386.0 * t**4 - 252.0 * t**5)

    scale = np.zeros(grid.n)
    good = ssum > 1e-60
    scale[good] = np.sqrt(master[good] / ssum[good])
    for box in tiling.all_boxes():
        p = raw[box.box_id]
        w = p.window * p.extract(scale)
        tiling._patches[box.box_id] = _Patch(start=p.start, shape=p.shape, window=w)
    return tiling


def window_pair(tiling: Tiling, box: FrequencyBox, xi) -> tuple[float, float]:
    """Window values (chi, beta) of one box at covector xi (rad/sample).

    The pair is self-dual and realized on the discrete frequency grid; xi is
    snapped to the nearest frequency sample.
    """
    xi = np.asarray(xi, dtype=float)
    p = tiling.patch(box)
    n = tiling.grid.n
    val = 0.0
    rel = []
    ok = True
    for ax in range(2):
        idx = int(round(xi[ax] * n[ax] / (2.0 * np.pi)))
        r = (idx - p.start[ax]) % n[ax]
        if r >= p.shape[ax]:
            ok = False
            break
        rel.append(r)
    if ok:
        val = float(p.window[rel[0], rel[1]])
    return val, val


@dataclass
class PacketCoefficients:
    """Frame coefficients per (nu, k) box, on each box's decimated lattice."""

    tiling: Tiling
    data: dict  # box_id -> complex ndarray of the patch shape

    def zero_like(self) -> "PacketCoefficients":
        return PacketCoefficients(
            tiling=self.tiling,
            data={k: np.zeros_like(v) for k, v in self.data.items()})

    def box_energy(self) -> dict:
        return {k: float(np.sum(np.abs(v) ** 2)) for k, v in self.data.items()}

    def total_energy(self) -> float:
        return float(sum(self.box_energy().values()))


def analyze(field_or_record: np.ndarray, tiling: Tiling) -> PacketCoefficients:
    """Frame analysis: per-box windowed spectrum on the box's dual lattice."""
    u = np.asarray(field_or_record)
    if u.shape != tiling.grid.n:
        raise ValueError("field shape does not match tiling grid")
    spec = np.fft.fft2(u, norm="ortho")
    data = {}
    for box in tiling.all_boxes():
        p = tiling.patch(box)
        sub = p.extract(spec) * p.window
        data[box.box_id] = np.fft.ifft2(sub, norm="ortho")
    return PacketCoefficients(tiling=tiling, data=data)


def synthesize(coeffs: PacketCoefficients) -> np.ndarray:
    """Frame synthesis; adjoint-inverse of analyze on the covered band."""
    tiling = coeffs.tiling
    spec = np.zeros(tiling.grid.n, dtype=complex)
    for box in tiling.all_boxes():
        p = tiling.patch(box)
        c = coeffs.data[box.box_id]
        if c.shape != p.shape:
            raise ValueError("coefficient array shape mismatch")
        p.add_into(spec, np.fft.fft2(c, norm="ortho") * p.window)
    return np.fft.ifft2(spec, norm="ortho")


def box_component(spectrum: np.ndarray, tiling: Tiling, box: FrequencyBox) -> np.ndarray:
    """Spectral projection u_hat * beta * chi of one box, on the full grid."""
    p = tiling.patch(box)
    out = np.zeros(tiling.grid.n, dtype=complex)
    p.add_into(out, p.extract(spectrum) * p.window**2)
    return out


def bandlimit(tiling: Tiling, spectrum: np.ndarray, frac: float = 0.9) -> np.ndarray:
    """Restrict a spectrum to the annulus covered by the tiling."""
    f = tiling.grid
    xi = np.meshgrid(*[2.0 * np.pi * np.fft.fftfreq(m) for m in f.n],
                     indexing="ij")
    r = np.hypot(xi[0], xi[1])
    return spectrum * (r <= frac * np.pi)

"""Uniform sampling grids.

The convention throughout is that axis 0 is the lateral coordinate x1 and the
last axis is the depth coordinate x_n, with the acquisition boundary on the
plane x_n = 0 and the interior at x_n > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid with the boundary on the x_n = 0 plane."""

    n: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = tuple(int(m) for m in self.n)
        spacing = tuple(float(s) for s in self.spacing)
        if len(n) != len(spacing):
            raise ValueError("n and spacing must have the same length")
        if any(m < 2 for m in n):
            raise ValueError("need at least 2 samples per axis")
        if any(s <= 0 for s in spacing):
            raise ValueError("grid spacing must be positive")
        origin = self.origin
        if origin is None:
            origin = (0.0,) * len(n)
        origin = tuple(float(o) for o in origin)
        if len(origin) != len(n):
            raise ValueError("origin length mismatch")
        # last axis starts at the boundary plane x_n = 0
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.n)

    @property
    def extent(self) -> tuple[float, ...]:
        return tuple((m - 1) * s for m, s in zip(self.n, self.spacing))

    def axes(self) -> list[np.ndarray]:
        """Per-axis sample coordinates."""
        return [
            o + s * np.arange(m)
            for o, s, m in zip(self.origin, self.spacing, self.n)
        ]

    def mesh(self, indexing: str = "ij") -> list[np.ndarray]:
        return list(np.meshgrid(*self.axes(), indexing=indexing))

    def freq_axes(self) -> list[np.ndarray]:
        """Angular frequency samples per axis, in FFT (wrapped) order."""
        return [
            2.0 * np.pi * np.fft.fftfreq(m, d=s)
            for m, s in zip(self.n, self.spacing)
        ]

    def freq_mesh(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.freq_axes(), indexing="ij"))

    def nyquist(self) -> float:
        """Smallest per-axis angular Nyquist frequency."""
        return min(np.pi / s for s in self.spacing)

    def same_sampling(self, other: "GridSpec") -> bool:
        return self.n == other.n and np.allclose(self.spacing, other.spacing)

"""Frequency tiling and wave-packet frame transform tests.

Oracles: exact FFT-based Parseval identities, direct coverage sums on the
frequency grid, and grid-exact 90 degree rotations.
"""

import numpy as np
import pytest

from packetmig.frame import (
    analyze,
    bandlimit,
    box_component,
    build_tiling,
    synthesize,
    window_pair,
)
from packetmig.grids import GridSpec


def unit_grid(n):
    return GridSpec(n=(n, n), spacing=(1.0, 1.0))


def random_bandlimited(tiling, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(tiling.grid.n)
    spec = bandlimit(tiling, np.fft.fft2(u, norm="ortho"))
    return np.fft.ifft2(spec, norm="ortho").real


@pytest.fixture(scope="module")
def tiling256():
    return build_tiling(k_max=4, n_dims=2, grid=unit_grid(256))


def annulus_mask(tiling):
    rr = np.hypot(*np.meshgrid(*tiling.grid.freq_axes(), indexing="ij"))
    return (rr >= tiling.coarse_cutoff) & (rr <= 0.9 * np.pi)


class TestTilingGeometry:
    def test_direction_counts_match_parabolic_scaling(self):
        # round-to-even of 4 * 2^(k/2) per half-space, doubled for both signs
        t = build_tiling(k_max=3, n_dims=2, grid=unit_grid(256))
        per_scale = {k: sum(1 for b in t.boxes if b.k == k) for k in (1, 2, 3)}
        assert per_scale == {1: 12, 2: 16, 3: 24}

    def test_finest_scale_half_space_count(self, tiling256):
        finest = [b for b in tiling256.boxes if b.k == 4]
        up = [b for b in finest
              if b.nu[1] > 1e-9 or (abs(b.nu[1]) <= 1e-9 and b.nu[0] > 0)]
        assert len(finest) == 32
        assert len(up) == 16

    def test_first_direction_aligned_with_axis(self, tiling256):
        b = next(b for b in tiling256.boxes if b.k == 4 and b.nu_index == 0)
        assert np.allclose(b.nu, [1.0, 0.0])

    def test_box_lengths_follow_parabolic_scaling(self, tiling256):
        by_scale = {}
        for b in tiling256.boxes:
            by_scale.setdefault(b.k, b)
        for k in (2, 3, 4):
            ratio_long = by_scale[k].half_lengths[0] / by_scale[k - 1].half_lengths[0]
            ratio_short = by_scale[k].half_lengths[1] / by_scale[k - 1].half_lengths[1]
            assert ratio_long == pytest.approx(2.0, rel=1e-12)
            assert ratio_short == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_scale_beyond_nyquist_rejected(self):
        with pytest.raises(ValueError):
            build_tiling(k_max=4, n_dims=2, grid=unit_grid(64))

    def test_small_grid_single_scale(self):
        t = build_tiling(k_max=1, n_dims=2, grid=unit_grid(64))
        assert len(t.boxes) == 12


class TestPartition:
    def test_windows_sum_to_one_on_annulus(self, tiling256):
        cov = tiling256.coverage_sum()
        assert np.abs(cov[annulus_mask(tiling256)] - 1.0).max() <= 1e-6

    def test_partition_other_sizes(self):
        for n, k in [(64, 1), (128, 2), (256, 3)]:
            t = build_tiling(k_max=k, n_dims=2, grid=unit_grid(n))
            cov = t.coverage_sum()
            assert np.abs(cov[annulus_mask(t)] - 1.0).max() <= 1e-6

    def test_window_pair_self_dual(self, tiling256):
        b = next(b for b in tiling256.boxes if b.k == 3)
        xi = b.center * b.nu
        chi, beta = window_pair(tiling256, b, xi)
        assert chi == pytest.approx(beta, abs=0.0)
        assert 0.0 <= chi <= 1.0

    def test_window_supported_in_box(self, tiling256):
        b = next(b for b in tiling256.boxes if b.k == 4)
        # far outside the box: window must vanish
        chi, beta = window_pair(tiling256, b, -b.center * b.nu)
        assert chi == 0.0 and beta == 0.0


class TestRoundTrip:
    def test_synthesize_analyze_identity(self, tiling256):
        u = random_bandlimited(tiling256, seed=0)
        v = synthesize(analyze(u, tiling256))
        assert np.linalg.norm(v - u) / np.linalg.norm(u) <= 1e-6

    def test_round_trip_small_grid(self):
        t = build_tiling(k_max=1, n_dims=2, grid=unit_grid(64))
        u = random_bandlimited(t, seed=3)
        v = synthesize(analyze(u, t))
        assert np.linalg.norm(v - u) / np.linalg.norm(u) <= 1e-6

    def test_parseval_energy(self, tiling256):
        for seed in range(3):
            u = random_bandlimited(tiling256, seed=seed)
            c = analyze(u, tiling256)
            assert c.total_energy() == pytest.approx(np.sum(u * u), rel=1e-10)

    def test_linearity(self, tiling256):
        u = random_bandlimited(tiling256, seed=1)
        v = random_bandlimited(tiling256, seed=2)
        cu = analyze(u, tiling256)
        cv = analyze(v, tiling256)
        cw = analyze(2.0 * u - 0.5 * v, tiling256)
        for key in cw.data:
            assert np.allclose(
                cw.data[key], 2.0 * cu.data[key] - 0.5 * cv.data[key], atol=1e-12)

    def test_box_components_sum_to_spectrum(self, tiling256):
        u = random_bandlimited(tiling256, seed=4)
        spec = np.fft.fft2(u, norm="ortho")
        total = np.zeros_like(spec)
        for b in tiling256.all_boxes():
            total += box_component(spec, tiling256, b)
        assert np.linalg.norm(total - spec) / np.linalg.norm(spec) <= 1e-10


class TestFrameElementDecay:
    def test_spatial_decay_at_finest_scale(self, tiling256):
        # discrete proxy of the parabolic decay estimate: the frame element
        # envelope must drop 10x per doubling of the anisotropic pseudo-norm
        # 2^k |<nu, x>| + 2^(k/2) |x|, measured outside the essential support
        n = 256
        x = np.fft.fftfreq(n) * n
        X, Y = np.meshgrid(x, x, indexing="ij")
        finest = [b for b in tiling256.boxes if b.k == 4]
        for b in (finest[0], finest[3], finest[7]):
            p = tiling256.patch(b)
            spec = np.zeros((n, n), dtype=complex)
            p.add_into(spec, p.window.astype(complex))
            phi = np.abs(np.fft.ifft2(spec))
            phi /= phi.max()
            nrm = 16.0 * np.abs(b.nu[0] * X + b.nu[1] * Y) + 4.0 * np.hypot(X, Y)
            tail = [phi[nrm >= d].max() for d in (400, 800, 1600)]
            assert tail[0] / tail[1] >= 10.0
            assert tail[1] / tail[2] >= 10.0


class TestRotationEquivariance:
    def test_quarter_turn_permutes_box_energies(self, tiling256):
        # 90 degrees is a tiling direction and rot90 is exact on the grid
        u = random_bandlimited(tiling256, seed=5)
        e1 = analyze(u, tiling256).box_energy()
        e2 = analyze(np.rot90(u), tiling256).box_energy()
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        for b in tiling256.boxes:
            target = rot @ b.nu
            same_scale = [bb for bb in tiling256.boxes if bb.k == b.k]
            best = min(
                same_scale,
                key=lambda bb: min(
                    np.linalg.norm(bb.nu - target), np.linalg.norm(bb.nu + target)))
            ref = max(e1[b.box_id], 1e-30)
            assert abs(e2[best.box_id] - e1[b.box_id]) / ref <= 0.05

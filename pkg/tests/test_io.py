"""Container formats: round trips, header validation, previews."""

import numpy as np
import pytest

from packetmig.grids import GridSpec
from packetmig.io import (FormatError, read_gather_csv, read_pmdata,
                          read_pmgrid, write_gather_csv, write_pgm,
                          write_pmdata, write_pmgrid)
from packetmig.imaging import AngleGather
from packetmig.rtc import BoundaryRecord


@pytest.fixture
def grid():
    return GridSpec((12, 9), (0.25, 0.5), (1.0, -2.0))


class TestPmgrid:
    def test_round_trip(self, tmp_path, grid):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(grid.n)
        path = tmp_path / "f.pmg"
        write_pmgrid(path, a, grid)
        b, g2 = read_pmgrid(path)
        assert np.array_equal(a, b)
        assert g2.n == grid.n
        assert g2.spacing == grid.spacing
        assert g2.origin == grid.origin

    def test_multichannel_round_trip(self, tmp_path, grid):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(grid.n + (3,))
        path = tmp_path / "f.pmg"
        write_pmgrid(path, a, grid)
        b, _ = read_pmgrid(path)
        assert b.shape == a.shape
        assert np.array_equal(a, b)

    def test_header_is_seven_ascii_lines(self, tmp_path, grid):
        path = tmp_path / "f.pmg"
        write_pmgrid(path, np.zeros(grid.n), grid)
        raw = path.read_bytes()
        header = raw.split(b"\n", 7)[:7]
        assert header[0] == b"PMGRID1"
        assert header[5] == b"dtype float64"
        assert header[6] == b"endian little"

    def test_payload_is_little_endian_row_major(self, tmp_path, grid):
        a = np.arange(12 * 9, dtype=float).reshape(grid.n)
        path = tmp_path / "f.pmg"
        write_pmgrid(path, a, grid)
        raw = path.read_bytes()
        body = raw.split(b"\n", 7)[7]
        vals = np.frombuffer(body, dtype="<f8")
        assert np.array_equal(vals, a.ravel(order="C"))

    def test_wrong_magic_rejected(self, tmp_path, grid):
        path = tmp_path / "f.pmg"
        write_pmgrid(path, np.zeros(grid.n), grid)
        data = path.read_bytes().replace(b"PMGRID1", b"PMGRIDX", 1)
        path.write_bytes(data)
        with pytest.raises(FormatError):
            read_pmgrid(path)

    def test_truncated_payload_rejected(self, tmp_path, grid):
        path = tmp_path / "f.pmg"
        write_pmgrid(path, np.zeros(grid.n), grid)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_pmgrid(path)

    def test_shape_mismatch_rejected(self, grid, tmp_path):
        with pytest.raises(ValueError):
            write_pmgrid(tmp_path / "f.pmg", np.zeros((3, 3)), grid)


class TestPmdata:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        rec = BoundaryRecord(rng.standard_normal((16, 20)), dx=0.1,
                             dt=0.004, x0=0.5, t0=0.1)
        path = tmp_path / "r.pmd"
        write_pmdata(path, rec)
        back = read_pmdata(path)
        assert np.array_equal(back.data, rec.data)
        assert back.dx == rec.dx and back.dt == rec.dt
        assert back.x0 == rec.x0 and back.t0 == rec.t0

    def test_magic_differs_from_pmgrid(self, tmp_path, grid):
        write_pmgrid(tmp_path / "f.pmg", np.zeros(grid.n), grid)
        with pytest.raises(FormatError):
            read_pmdata(tmp_path / "f.pmg")


class TestPgm:
    def test_header_and_size(self, tmp_path):
        a = np.linspace(-1, 1, 35 * 21).reshape(35, 21)
        path = tmp_path / "p.pgm"
        write_pgm(path, a)
        raw = path.read_bytes()
        # depth runs down: image is 21 rows of 35 columns
        assert raw.startswith(b"P5\n35 21\n65535\n")
        body = raw.split(b"\n", 3)[3]
        assert len(body) == 2 * 35 * 21

    def test_symmetric_clip(self, tmp_path):
        a = np.zeros((32, 32))
        a[3, 4] = 100.0
        a[8, 9] = -100.0
        write_pgm(tmp_path / "p.pgm", a)
        body = (tmp_path / "p.pgm").read_bytes().split(b"\n", 3)[3]
        pix = np.frombuffer(body, dtype=">u2").reshape(32, 32).T
        assert pix[3, 4] == 65535
        assert pix[8, 9] == 0
        # zero background sits at mid-gray
        assert abs(int(pix[0, 0]) - 32768) <= 1

    def test_constant_zero_field(self, tmp_path):
        write_pgm(tmp_path / "p.pgm", np.zeros((8, 8)))
        body = (tmp_path / "p.pgm").read_bytes().split(b"\n", 3)[3]
        pix = np.frombuffer(body, dtype=">u2")
        assert np.all(np.abs(pix.astype(int) - 32768) <= 1)


class TestGatherCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        gath = AngleGather(
            positions=np.array([0.25, 0.5]),
            depth_axis=np.linspace(0.0, 1.0, 7),
            bin_edges=np.arange(0.0, 91.0, 15.0),
            values=rng.standard_normal((2, 7, 6)))
        path = tmp_path / "g.csv"
        write_gather_csv(path, gath)
        pos, dep, bins, vals = read_gather_csv(path)
        assert np.allclose(pos, gath.positions)
        assert np.allclose(dep, gath.depth_axis)
        assert np.allclose(bins, gath.bin_edges[:-1])
        assert np.allclose(vals, gath.values)

    def test_header_row(self, tmp_path):
        gath = AngleGather(positions=np.array([0.0]),
                           depth_axis=np.array([0.0]),
                           bin_edges=np.array([0.0, 90.0]),
                           values=np.zeros((1, 1, 1)))
        path = tmp_path / "g.csv"
        write_gather_csv(path, gath)
        first = path.read_text().splitlines()[0]
        assert first == "position,depth,angle_bin,value"

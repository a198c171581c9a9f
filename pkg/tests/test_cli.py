"""Batch front-end: pipeline stages, artifacts, exit codes, determinism."""

import filecmp
import os

import numpy as np
import pytest

from packetmig.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from packetmig.io import read_pmdata, read_pmgrid

N = 128
DX = 1.0 / (N - 1)

CONFIG = """
[grid]
n = {n} {n}
spacing = {dx:.17g} {dx:.17g}

[model]
c0 = 1.0

[reflector1]
p0 = 0.25 0.35
p1 = 0.75 0.35

[tiling]
kmax = 3

[schedule]
ns = {ns}
t_end = 1.1

[acquisition]
t_total = 1.1
dt = {dt:.17g}

[source]
position = 0.5 0.0
f_peak = 12.0

[gather]
positions = 0.5

[output]
dir = {outdir}
"""


def write_config(tmp_path, outdir, ns=1):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG.format(n=N, dx=DX, dt=1.1 / (N - 1), ns=ns,
                                  outdir=outdir))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """fdsim + rtc + migrate on a small flat-reflector scene."""
    tmp = tmp_path_factory.mktemp("cli")
    out = str(tmp / "out")
    cfg = write_config(tmp, out)
    assert main(["fdsim", cfg]) == EXIT_OK
    assert main(["rtc", cfg]) == EXIT_OK
    assert main(["migrate", cfg]) == EXIT_OK
    return tmp, out, cfg


class TestPipeline:
    def test_fdsim_artifacts(self, pipeline):
        _, out, _ = pipeline
        record = read_pmdata(os.path.join(out, "record.pmd"))
        assert record.data.shape == (N, N)
        assert record.t0 == 0.0
        assert np.abs(record.data).max() > 0
        assert os.path.exists(os.path.join(out, "record.pgm"))
        model, grid = read_pmgrid(os.path.join(out, "model.pmg"))
        assert np.all(model == 1.0)

    def test_decompose_reports_all_boxes(self, pipeline):
        tmp, out, cfg = pipeline
        assert main(["decompose", cfg]) == EXIT_OK
        lines = open(os.path.join(out, "decompose.csv")).read().splitlines()
        assert lines[0] == "scale,direction,energy,fraction"
        # coarse box plus 12 + 16 + 24 directional boxes at kmax = 3
        assert len(lines) - 1 == 53
        fracs = [float(ln.split(",")[3]) for ln in lines[1:]]
        assert abs(sum(fracs) - 1.0) < 0.2   # windows overlap slightly

    def test_rtc_snapshot_count(self, pipeline):
        _, out, _ = pipeline
        snaps = sorted(f for f in os.listdir(out)
                       if f.startswith("rtc_") and f.endswith(".pmg"))
        # N_s (N_s + 1) / 2 + 1 snapshots; N_s = 1 here
        assert len(snaps) == 2
        assert snaps[-1].endswith("final.pmg")

    def test_migrate_peak_on_reflector(self, pipeline):
        _, out, _ = pipeline
        img, grid = read_pmgrid(os.path.join(out, "image.pmg"))
        iz = np.argmax(np.abs(img[N // 2]))
        assert abs(iz * grid.spacing[1] - 0.35) <= 1.5 * grid.spacing[1]
        assert os.path.exists(os.path.join(out, "image.pgm"))
        assert os.path.exists(os.path.join(out, "partial_ns1_np1.pmg"))

    def test_migrate_writes_gather(self, pipeline):
        _, out, _ = pipeline
        lines = open(os.path.join(out, "gather.csv")).read().splitlines()
        assert lines[0] == "position,depth,angle_bin,value"
        assert len(lines) > N

    def test_snapshot_count_formula_ns3(self, pipeline):
        tmp, out, cfg3path = pipeline
        # the documented snapshot count at larger N_s, on tiny data
        # (reuses the recorded data; only the slicing changes)
        cfg3 = write_config(tmp, out, ns=3)
        out3 = str(tmp / "out3")
        os.makedirs(out3, exist_ok=True)
        import shutil
        shutil.copy(os.path.join(out, "record.pmd"),
                    os.path.join(out3, "record.pmd"))
        assert main(["rtc", cfg3, "--out", out3, "--ns", "3"]) == EXIT_OK
        snaps = [f for f in os.listdir(out3)
                 if f.startswith("rtc_") and f.endswith(".pmg")]
        assert len(snaps) == 3 * 4 // 2 + 1


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["rtc", str(tmp_path / "none.ini")]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[grid]\nn = 4 4\nspacing = 0.1 0.1\n"
                        "[model]\nc0 = -1\n[acquisition]\n"
                        "t_total = 1\ndt = 0.01\n")
        assert main(["fdsim", str(path)]) == EXIT_CONFIG

    def test_missing_artifact_is_io_error(self, tmp_path):
        cfg = write_config(tmp_path, str(tmp_path / "empty"))
        assert main(["decompose", cfg]) == EXIT_IO

    def test_corrupt_record_is_io_error(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / "record.pmd").write_bytes(b"not a record")
        cfg = write_config(tmp_path, str(out))
        assert main(["decompose", cfg]) == EXIT_IO

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out


class TestDeterminism:
    def test_rtc_outputs_byte_identical(self, pipeline):
        tmp, out, cfg = pipeline
        import shutil
        outs = []
        for tag, threads in (("d1", "1"), ("d2", "1"), ("d4", "2")):
            dst = str(tmp / tag)
            os.makedirs(dst, exist_ok=True)
            shutil.copy(os.path.join(out, "record.pmd"),
                        os.path.join(dst, "record.pmd"))
            assert main(["rtc", cfg, "--out", dst, "--threads", threads,
                         "--deterministic"]) == EXIT_OK
            outs.append(os.path.join(dst, "rtc_01_final.pmg"))
        assert filecmp.cmp(outs[0], outs[1], shallow=False)
        assert filecmp.cmp(outs[0], outs[2], shallow=False)

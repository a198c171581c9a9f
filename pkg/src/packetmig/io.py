"""Container formats for gridded fields, boundary records and gathers.

PMGRID holds a real 2-d field (optionally multi-channel) as a 7-line
ASCII header followed by raw little-endian float64 samples, row-major,
channel-interleaved. PMDATA is the same container for boundary records,
with the two axes read as (x', t). PGM previews are 16-bit with a
symmetric percentile clip; the PMGRID file stays authoritative.
"""

from __future__ import annotations

import csv

import numpy as np

from .grids import GridSpec
from .rtc import BoundaryRecord

PGM_CLIP_PERCENTILE = 99.5


class FormatError(IOError):
    """Malformed container header or payload."""


def _write_container(path, magic: str, array: np.ndarray,
                     spacing, origin) -> None:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise ValueError("expected a 2-d field, optionally multi-channel")
    n0, n1, nch = array.shape
    header = "\n".join([
        magic,
        "dims %d %d" % (n0, n1),
        "spacing %.17g %.17g" % (float(spacing[0]), float(spacing[1])),
        "origin %.17g %.17g" % (float(origin[0]), float(origin[1])),
        "channels %d" % nch,
        "dtype float64",
        "endian little",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_container(path, magic: str):
    with open(path, "rb") as fh:
        lines = [fh.readline() for _ in range(7)]
        payload = fh.read()
    try:
        text = [ln.decode("ascii").strip() for ln in lines]
    except UnicodeDecodeError as exc:
        raise FormatError("%s: header is not ASCII" % path) from exc
    if text[0] != magic:
        raise FormatError("%s: expected magic %r, got %r"
                          % (path, magic, text[0]))
    fields = {}
    for ln in text[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    try:
        n = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        origin = tuple(float(v) for v in fields["origin"].split())
        nch = int(fields["channels"])
        dtype = fields["dtype"]
        endian = fields["endian"]
    except (KeyError, ValueError) as exc:
        raise FormatError("%s: bad header field (%s)" % (path, exc)) from exc
    if dtype != "float64" or endian != "little":
        raise FormatError("%s: unsupported dtype/endian %s/%s"
                          % (path, dtype, endian))
    count = n[0] * n[1] * nch
    if len(payload) != 8 * count:
        raise FormatError("%s: payload has %d bytes, header implies %d"
                          % (path, len(payload), 8 * count))
    array = np.frombuffer(payload, dtype="<f8").reshape(n[0], n[1], nch)
    if nch == 1:
        array = array[..., 0]
    return np.array(array), spacing, origin


def write_pmgrid(path, array: np.ndarray, grid: GridSpec) -> None:
    """Write a field (or stack of channels on the same grid) as PMGRID."""
    if tuple(array.shape[:2]) != tuple(grid.n):
        raise ValueError("array shape %s does not match grid %s"
                         % (array.shape, grid.n))
    _write_container(path, "PMGRID1", array, grid.spacing, grid.origin)


def read_pmgrid(path):
    """Read a PMGRID file; returns (array, grid)."""
    array, spacing, origin = _read_container(path, "PMGRID1")
    return array, GridSpec(array.shape[:2], spacing, origin)


def write_pmdata(path, record: BoundaryRecord) -> None:
    """Write a boundary record; axes are (x', t)."""
    _write_container(path, "PMDATA1", record.data,
                     (record.dx, record.dt), (record.x0, record.t0))


def read_pmdata(path) -> BoundaryRecord:
    array, spacing, origin = _read_container(path, "PMDATA1")
    if array.ndim != 2:
        raise FormatError("%s: boundary record must be single-channel"
                          % path)
    return BoundaryRecord(array, dx=spacing[0], dt=spacing[1],
                          x0=origin[0], t0=origin[1])


def write_pgm(path, array: np.ndarray,
              percentile: float = PGM_CLIP_PERCENTILE) -> None:
    """16-bit grayscale preview with a symmetric percentile clip.

    Zero maps to mid-gray; values at +-clip map to white/black. Depth
    runs down the image (rows are the second array axis).
    """
    array = np.asarray(array, dtype=float)
    if array.ndim != 2:
        raise ValueError("preview expects a 2-d field")
    clip = float(np.percentile(np.abs(array), percentile))
    if clip == 0.0:
        clip = 1.0
    scaled = np.clip(array / clip, -1.0, 1.0)
    pix = np.round((scaled + 1.0) * 0.5 * 65535.0).astype(">u2")
    # transpose so the first array axis (x') runs across the image
    pix = pix.T
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (pix.shape[1], pix.shape[0]))
        fh.write(pix.tobytes())


def write_gather_csv(path, gather) -> None:
    """Angle gather as rows of (position, depth, angle_bin, value).

    angle_bin is the lower edge of the bin in degrees. Empty bins are
    written as zeros so the layout is a complete rectangle.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "depth", "angle_bin", "value"])
        for ip, pos in enumerate(gather.positions):
            for iz, depth in enumerate(gather.depth_axis):
                for ib in range(len(gather.bin_edges) - 1):
                    writer.writerow(["%.10g" % pos, "%.10g" % depth,
                                     "%.10g" % gather.bin_edges[ib],
                                     "%.10g" % gather.values[ip, iz, ib]])


def read_gather_csv(path):
    """Inverse of write_gather_csv; returns (positions, depths, bins,
    values) with values shaped (n_pos, n_depth, n_bins)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["position", "depth", "angle_bin", "value"]:
            raise FormatError("%s: unexpected gather header %s"
                              % (path, header))
        for row in reader:
            rows.append(tuple(float(v) for v in row))
    data = np.array(rows)
    positions = np.unique(data[:, 0])
    depths = np.unique(data[:, 1])
    bins = np.unique(data[:, 2])
    values = np.zeros((len(positions), len(depths), len(bins)))
    ip = np.searchsorted(positions, data[:, 0])
    iz = np.searchsorted(depths, data[:, 1])
    ib = np.searchsorted(bins, data[:, 2])
    values[ip, iz, ib] = data[:, 3]
    return positions, depths, bins, values

"""File formats: ``.sbd`` arrays, plain CSV signals, 8-bit PGM images, run manifests.

An ``.sbd`` file is three ASCII header lines followed by raw data::

    SBD1
    dims <d> <n1> [<n2>]
    dtype f64
    <little-endian float64 values, row-major>
"""

import csv
import json
import platform
import sys

import numpy as np

__all__ = [
    "FormatError",
    "write_sbd",
    "read_sbd",
    "write_csv_signal",
    "read_csv_signal",
    "read_signal",
    "write_pgm",
    "read_pgm",
    "write_json",
    "platform_fingerprint",
    "make_manifest",
]

MAGIC = b"SBD1"


class FormatError(ValueError):
    """Malformed or unsupported input file."""


def write_sbd(path, arr):
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim not in (1, 2):
        raise ValueError("only 1D and 2D arrays are stored")
    header = "SBD1\ndims %d %s\ndtype f64\n" % (arr.ndim, " ".join(str(n) for n in arr.shape))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _readline(fh, path):
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise FormatError("%s: truncated header" % path)
    return line[:-1].decode("ascii", errors="replace").strip()


def read_sbd(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC) + 1) != MAGIC + b"\n":
            raise FormatError("%s: missing SBD1 magic" % path)
        dims = _readline(fh, path).split()
        if len(dims) < 3 or dims[0] != "dims":
            raise FormatError("%s: bad dims line" % path)
        try:
            d = int(dims[1])
            shape = tuple(int(v) for v in dims[2:])
        except ValueError:
            raise FormatError("%s: non-integer dims" % path) from None
        if d not in (1, 2) or len(shape) != d or min(shape) < 1:
            raise FormatError("%s: unsupported dims %s" % (path, dims[1:]))
        if _readline(fh, path) != "dtype f64":
            raise FormatError("%s: only dtype f64 is supported" % path)
        data = fh.read()
    n = int(np.prod(shape))
    if len(data) != 8 * n:
        raise FormatError("%s: expected %d values, found %d bytes" % (path, n, len(data)))
    arr = np.frombuffer(data, dtype="<f8").reshape(shape).astype(float)
    if not np.all(np.isfinite(arr)):
        raise FormatError("%s: non-finite values" % path)
    return arr


def write_csv_signal(path, arr):
    arr = np.atleast_1d(np.asarray(arr, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in (arr[:, None] if arr.ndim == 1 else arr):
            w.writerow([repr(float(v)) for v in row])


def read_csv_signal(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    except ValueError as exc:
        raise FormatError("%s: %s" % (path, exc)) from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError("%s: empty or ragged CSV" % path)
    arr = np.array(rows)
    return arr[:, 0] if arr.shape[1] == 1 else arr


def read_signal(path):
    """Read ``.sbd`` or ``.csv`` by extension."""
    if str(path).lower().endswith(".csv"):
        return read_csv_signal(path)
    return read_sbd(path)


def write_pgm(path, img):
    """Write values in ``[0, 1]`` as 8-bit binary PGM (clipped, rounded)."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM (P5) image as floats in ``[0, 1]``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("%s: truncated PGM header" % path)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("%s: not a binary PGM (P5)" % path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("%s: bad PGM header" % path) from None
    if not 0 < maxval < 256:
        raise FormatError("%s: only 8-bit PGM is supported" % path)
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise FormatError("%s: truncated PGM data" % path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(float) / maxval


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError("not JSON serializable: %r" % (v,))


def platform_fingerprint():
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "platform": platform.platform(),
    }


def make_manifest(command, config, seed, wall_time, argv=None):
    from . import __version__

    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "platform": platform_fingerprint(),
        "wall_time": wall_time,
        "argv": list(argv) if argv is not None else None,
    }

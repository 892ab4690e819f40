"""Point-cloud file readers and writers: PLY (ASCII / binary little-endian) and raw KITTI scans."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, MalformedFile, MalformedHeader, UnsupportedEncoding

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
KITTI_RECORD = 16


@dataclass
class RawCloud:
    points: np.ndarray  # (N, 3) float64, native units
    source_format: str = "array"
    element_count: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise MalformedFile("cloud contains non-finite coordinates")
        if not self.element_count:
            self.element_count = len(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count dtype, item dtype)) for lists


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise MalformedHeader("missing 'ply' magic line")
    fmt = None
    elements = []
    while True:
        line = f.readline()
        if not line:
            raise MalformedHeader("header has no end_header line")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) < 2:
                raise MalformedHeader("format line without an encoding")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise MalformedHeader(f"bad element line: {line!r}")
            elements.append(_Element(words[1], int(words[2]), []))
        elif key == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in PLY_TYPES or words[3] not in PLY_TYPES:
                    raise MalformedHeader(f"unknown list types in {line!r}")
                elements[-1].props.append((words[4], (PLY_TYPES[words[2]], PLY_TYPES[words[3]])))
            elif len(words) == 3 and words[1] in PLY_TYPES:
                elements[-1].props.append((words[2], PLY_TYPES[words[1]]))
            else:
                raise MalformedHeader(f"bad property line: {line!r}")
        else:
            raise MalformedHeader(f"unexpected header keyword {key!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt == "binary_big_endian":
        raise UnsupportedEncoding("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"unknown PLY format {fmt!r}")
    return fmt, elements


def _vertex_columns(el: _Element):
    names = [p[0] for p in el.props]
    for axis in "xyz":
        if axis not in names:
            raise MalformedHeader(f"vertex element has no {axis!r} property")
        if isinstance(el.props[names.index(axis)][1], tuple):
            raise MalformedHeader(f"{axis!r} must be a scalar property")
    return [names.index(a) for a in "xyz"]


def _skip_binary(data, pos, el):
    if all(not isinstance(t, tuple) for _, t in el.props):
        size = sum(np.dtype(t).itemsize for _, t in el.props)
        return pos + size * el.count
    for _ in range(el.count):
        for _, t in el.props:
            if isinstance(t, tuple):
                cnt_t, item_t = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                if pos + cnt_t.itemsize > len(data):
                    raise CountMismatch(f"element {el.name!r} truncated")
                n = int(np.frombuffer(data, cnt_t, 1, pos)[0])
                pos += cnt_t.itemsize + n * item_t.itemsize
            else:
                pos += np.dtype(t).itemsize
    return pos


def _read_binary(data, elements):
    pos = 0
    points = None
    for el in elements:
        if el.name != "vertex" or points is not None:
            pos = _skip_binary(data, pos, el)
            continue
        if any(isinstance(t, tuple) for _, t in el.props):
            raise MalformedHeader("list properties on vertices are not supported")
        cols = _vertex_columns(el)
        dt = np.dtype([(f"p{i}", "<" + t) for i, (_, t) in enumerate(el.props)])
        if pos + dt.itemsize * el.count > len(data):
            raise CountMismatch(
                f"vertex data holds {(len(data) - pos) // dt.itemsize} records, header declares {el.count}"
            )
        rec = np.frombuffer(data, dt, el.count, pos)
        points = np.stack([rec[f"p{c}"].astype(np.float64) for c in cols], axis=1)
        pos += dt.itemsize * el.count
    if pos > len(data):
        raise CountMismatch("file ends before all declared elements")
    if pos < len(data):
        raise CountMismatch(f"{len(data) - pos} bytes after the declared elements")
    return points


def _read_ascii(text, elements):
    lines = [ln for ln in text.decode("ascii", errors="replace").splitlines() if ln.strip()]
    pos = 0
    points = None
    for el in elements:
        block = lines[pos : pos + el.count]
        if len(block) < el.count:
            raise CountMismatch(f"element {el.name!r}: {len(block)} lines, header declares {el.count}")
        pos += el.count
        if el.name != "vertex" or points is not None:
            continue
        cols = _vertex_columns(el)
        width = len(el.props)
        try:
            rows = [ln.split() for ln in block]
            if any(len(r) != width for r in rows):
                raise MalformedFile(f"vertex line does not have {width} values")
            arr = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise MalformedFile(f"bad vertex value: {exc}") from exc
        points = arr.reshape(-1, 3)
    if pos < len(lines):
        raise CountMismatch(f"{len(lines) - pos} lines after the declared elements")
    return points


def read_ply(path) -> RawCloud:
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        body = f.read()
    if not any(el.name == "vertex" for el in elements):
        raise MalformedHeader("no vertex element")
    if fmt == "ascii":
        pts = _read_ascii(body, elements)
    else:
        pts = _read_binary(body, elements)
    return RawCloud(pts, "ply-" + fmt, len(pts))


def write_ply(cloud, path, binary: bool = False, dtype: str = "double") -> None:
    """Write x, y, z as ``double`` (default) or ``float`` properties."""
    pts = cloud.points if isinstance(cloud, RawCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if dtype not in ("double", "float"):
        raise ValueError("dtype must be 'double' or 'float'")
    fmt = "binary_little_endian" if binary else "ascii"
    head = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        f"property {dtype} x\nproperty {dtype} y\nproperty {dtype} z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(head.encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(pts, dtype="<f8" if dtype == "double" else "<f4").tobytes())
        else:
            vals = pts if dtype == "double" else pts.astype(np.float32)
            f.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in vals.tolist()).encode("ascii"))


def read_kitti_bin(path) -> RawCloud:
    """Flat little-endian float32 (x, y, z, intensity) records; intensity dropped."""
    size = os.path.getsize(path)
    if size % KITTI_RECORD:
        raise MalformedFile(f"{size} bytes is not a whole number of {KITTI_RECORD}-byte records")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    return RawCloud(raw[:, :3].astype(np.float64), "kitti-bin", len(raw))


def read_cloud(path) -> RawCloud:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return read_ply(path)
    if ext == ".bin":
        return read_kitti_bin(path)
    raise UnsupportedEncoding(f"unknown point-cloud extension {ext!r}")

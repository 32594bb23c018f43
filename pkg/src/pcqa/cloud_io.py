"""Point cloud containers, PLY reading/writing and geometric normalization."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, ParseError, UnsupportedFormat

NORMALIZED_EXTENT = 1024.0
GRAY = 128

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(frozen=True, eq=False)
class RawPointCloud:
    """Positions in source units plus 8-bit RGB colors."""

    positions: np.ndarray
    colors: np.ndarray
    has_color: bool = True

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        col = np.asarray(self.colors)
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
        if col.size and (col.min() < 0 or col.max() > 255):
            raise ValueError("color channels must lie in [0, 255]")
        if len(pos) < 1:
            raise ValueError("a point cloud needs at least one point")
        pos.setflags(write=False)
        col = np.ascontiguousarray(col, dtype=np.uint8)
        col.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    @property
    def count(self) -> int:
        return len(self.positions)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(type(self).__name__.encode())
        h.update(self.positions.tobytes())
        h.update(self.colors.tobytes())
        h.update(b"c" if self.has_color else b"g")
        return h.hexdigest()

    def take(self, index):
        """Return a cloud of the same type restricted to ``index``."""
        return type(self)(self.positions[index], self.colors[index], self.has_color)


class NormalizedCloud(RawPointCloud):
    """Cloud whose positions live in the shared [0, 1024] frame of the original."""


def colorless(positions) -> RawPointCloud:
    positions = np.asarray(positions, dtype=np.float64)
    return RawPointCloud(positions, np.full(positions.shape, GRAY, np.uint8), has_color=False)


# -- PLY ---------------------------------------------------------------------


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, None) for lists


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic")
    m = re.search(rb"end_header[ \t]*\r?\n", data)
    if m is None:
        raise ParseError("missing end_header")
    header = data[: m.start()].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_Element] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise ParseError("malformed format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"malformed element line: {line!r}")
            try:
                n = int(tok[2])
            except ValueError:
                raise ParseError(f"bad element count: {line!r}") from None
            if n < 0:
                raise ParseError(f"negative element count: {line!r}")
            elements.append(_Element(tok[1], n))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element")
            if len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif len(tok) == 5 and tok[1] == "list":
                elements[-1].props.append((tok[4], None))
            else:
                raise ParseError(f"malformed property line: {line!r}")
        else:
            raise ParseError(f"unknown header keyword: {tok[0]!r}")
    if fmt is None:
        raise ParseError("missing format line")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian binary PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unknown PLY format {fmt!r}")
    return fmt, elements, m.end()


def _cloud_from_columns(cols: dict, n: int) -> RawPointCloud:
    for axis in "xyz":
        if axis not in cols:
            raise ParseError(f"vertex element lacks property {axis!r}")
    positions = np.column_stack([np.asarray(cols[a], dtype=np.float64) for a in "xyz"])
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.column_stack([np.asarray(cols[c]) for c in ("red", "green", "blue")])
        if colors.size and (colors.min() < 0 or colors.max() > 255):
            raise ParseError("color values outside [0, 255]")
        colors = colors.astype(np.uint8)
        has_color = True
    else:
        colors = np.full((n, 3), GRAY, np.uint8)
        has_color = False
    if n < 1:
        raise ParseError("PLY contains no vertices")
    return RawPointCloud(positions, colors, has_color)


def parse_ply(data: bytes) -> RawPointCloud:
    """Parse an ASCII or binary little-endian PLY byte string."""
    fmt, elements, body_start = _parse_header(data)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element")
    if any(dt is None for _, dt in vertex.props):
        raise UnsupportedFormat("list properties on the vertex element are not supported")
    names = [name for name, _ in vertex.props]
    body = data[body_start:]

    if fmt == "ascii":
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
        offset = 0
        for el in elements:
            if el is vertex:
                break
            offset += el.count
        rows = lines[offset : offset + vertex.count]
        if len(rows) != vertex.count:
            raise ParseError(f"header declares {vertex.count} vertices, body has {len(rows)}")
        tokens = " ".join(rows).split()
        if len(tokens) != vertex.count * len(names):
            raise ParseError("vertex rows do not match the declared properties")
        if vertex is elements[-1] and len(lines) > offset + vertex.count:
            raise ParseError("trailing data after the last element")
        try:
            table = np.array(tokens, dtype=np.float64).reshape(vertex.count, len(names))
        except ValueError as exc:
            raise ParseError(f"non-numeric vertex data: {exc}") from None
        return _cloud_from_columns({n: table[:, i] for i, n in enumerate(names)}, vertex.count)

    offset = 0
    for el in elements:
        if el is vertex:
            break
        if any(dt is None for _, dt in el.props):
            raise UnsupportedFormat(f"cannot skip list-valued element {el.name!r} in binary PLY")
        offset += el.count * np.dtype([(n, "<" + dt) for n, dt in el.props]).itemsize
    dtype = np.dtype([(n, "<" + dt) for n, dt in vertex.props])
    need = offset + vertex.count * dtype.itemsize
    if len(body) < need:
        raise ParseError(f"binary body too short for {vertex.count} vertices")
    if vertex is elements[-1] and len(body) > need:
        raise ParseError("trailing data after the last element")
    table = np.frombuffer(body, dtype=dtype, count=vertex.count, offset=offset)
    return _cloud_from_columns({n: table[n] for n in names}, vertex.count)


def write_ply(cloud: RawPointCloud, ascii: bool = False) -> bytes:
    """Serialize ``cloud``; color properties are omitted for colorless clouds."""
    header = [
        "ply",
        "format ascii 1.0" if ascii else "format binary_little_endian 1.0",
        f"element vertex {cloud.count}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if cloud.has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if ascii:
        lines = []
        for i in range(cloud.count):
            row = " ".join(repr(float(v)) for v in cloud.positions[i])
            if cloud.has_color:
                row += " " + " ".join(str(int(c)) for c in cloud.colors[i])
            lines.append(row)
        return head + ("\n".join(lines) + "\n").encode("ascii")

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    table = np.empty(cloud.count, dtype=fields)
    for i, axis in enumerate("xyz"):
        table[axis] = cloud.positions[:, i]
    if cloud.has_color:
        for i, c in enumerate(("red", "green", "blue")):
            table[c] = cloud.colors[:, i]
    return head + table.tobytes()


def read_ply(path) -> RawPointCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read())


def save_ply(cloud: RawPointCloud, path, ascii: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(write_ply(cloud, ascii=ascii))


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormalizationParams:
    p_min: tuple
    l_max: float

    def __post_init__(self):
        if not self.l_max > 0:
            raise DegenerateCloud(f"l_max must be positive, got {self.l_max}")


def compute_norm_params(original: RawPointCloud) -> NormalizationParams:
    """Bounding-box corner and longest edge of ``original``."""
    lo = original.positions.min(axis=0)
    span = original.positions.max(axis=0) - lo
    l_max = float(span.max())
    if original.count < 2 or l_max <= 0:
        raise DegenerateCloud("all points coincide; bounding box is degenerate")
    return NormalizationParams(tuple(float(v) for v in lo), l_max)


def normalize(cloud: RawPointCloud, params: NormalizationParams) -> NormalizedCloud:
    if isinstance(cloud, NormalizedCloud):
        raise TypeError("cloud is already normalized")
    p_min = np.asarray(params.p_min, dtype=np.float64)
    positions = NORMALIZED_EXTENT * (cloud.positions - p_min) / params.l_max
    return NormalizedCloud(positions, cloud.colors, cloud.has_color)


def denormalize(cloud: NormalizedCloud, params: NormalizationParams) -> RawPointCloud:
    """Map a normalized cloud back to source units (used when writing distortions)."""
    p_min = np.asarray(params.p_min, dtype=np.float64)
    positions = cloud.positions * params.l_max / NORMALIZED_EXTENT + p_min
    return RawPointCloud(positions, cloud.colors, cloud.has_color)

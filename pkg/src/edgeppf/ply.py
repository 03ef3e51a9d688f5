"""PLY point-cloud reader/writer (ascii and binary little-endian).

Supported vertex properties: x, y, z (float32/float64), optional nx, ny, nz,
optional uchar `edge` (0/1). Unknown scalar vertex properties are skipped.
"""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


class PlyParseError(ValueError):
    """Raised on malformed PLY input; message names the offending line/offset."""


def _read_header(f):
    """Parse the header; returns (format, elements, header_end_offset).

    elements is a list of (name, count, [(prop_name, prop_type), ...]); list
    properties are recorded with type 'list:<count_type>:<item_type>'.
    """
    line = f.readline()
    if line.strip() != b"ply":
        raise PlyParseError("line 1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise PlyParseError(f"line {lineno}: unexpected end of header")
        line = raw.strip().decode("ascii", errors="replace")
        if line == "end_header":
            break
        tokens = line.split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) < 3:
                raise PlyParseError(f"line {lineno}: malformed format line")
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary_little_endian"
            else:
                raise PlyParseError(
                    f"line {lineno}: unsupported format {tokens[1]!r}"
                )
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError(f"line {lineno}: malformed element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyParseError(
                    f"line {lineno}: bad element count {tokens[2]!r}"
                ) from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError(f"line {lineno}: property before any element")
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyParseError(f"line {lineno}: malformed list property")
                elements[-1][2].append((tokens[4], f"list:{tokens[2]}:{tokens[3]}"))
            else:
                if len(tokens) != 3:
                    raise PlyParseError(f"line {lineno}: malformed property line")
                if tokens[1] not in _PLY_TYPES:
                    raise PlyParseError(
                        f"line {lineno}: unknown property type {tokens[1]!r}"
                    )
                elements[-1][2].append((tokens[2], tokens[1]))
        else:
            raise PlyParseError(f"line {lineno}: unrecognized keyword {tokens[0]!r}")
    if fmt is None:
        raise PlyParseError("header missing format line")
    return fmt, elements, lineno


def _vertex_dtype(props):
    fields = []
    for name, ptype in props:
        if ptype.startswith("list:"):
            raise PlyParseError("list properties in vertex element are unsupported")
        fields.append((name, "<" + _PLY_TYPES[ptype]))
    return np.dtype(fields)


def _skip_element(f, fmt, count, props, name):
    if fmt == "ascii":
        for _ in range(count):
            if not f.readline():
                raise PlyParseError(f"truncated element {name!r}")
        return
    if any(t.startswith("list:") for _, t in props):
        raise PlyParseError(
            f"cannot skip binary element {name!r} with list properties"
        )
    size = sum(np.dtype(_PLY_TYPES[t]).itemsize for _, t in props) * count
    data = f.read(size)
    if len(data) != size:
        raise PlyParseError(f"truncated element {name!r}")


def load_cloud(path) -> PointCloud:
    """Load a PLY file into a PointCloud.

    has_normals / has_edges reflect the properties present; point order is
    preserved from the file.
    """
    with open(path, "rb") as f:
        fmt, elements, header_lines = _read_header(f)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise PlyParseError("no vertex element in header")
        for name, count, props in elements:
            if name == "vertex":
                break
            _skip_element(f, fmt, count, props, name)
        _, n, props = vertex
        names = [p[0] for p in props]
        for coord in ("x", "y", "z"):
            if coord not in names:
                raise PlyParseError(f"vertex element missing property {coord!r}")
        dtype = _vertex_dtype(props)
        if fmt == "binary_little_endian":
            payload_start = f.tell()
            buf = f.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                raise PlyParseError(
                    f"truncated vertex payload at byte offset "
                    f"{payload_start + len(buf)}: expected {n} vertices"
                )
            rec = np.frombuffer(buf, dtype=dtype)
        else:
            rows = []
            for i in range(n):
                raw = f.readline()
                if not raw:
                    raise PlyParseError(
                        f"line {header_lines + i + 1}: truncated vertex data, "
                        f"expected {n} vertices got {i}"
                    )
                parts = raw.split()
                if len(parts) < len(props):
                    raise PlyParseError(
                        f"line {header_lines + i + 1}: expected "
                        f"{len(props)} values, got {len(parts)}"
                    )
                try:
                    rows.append([float(v) for v in parts[: len(props)]])
                except ValueError:
                    raise PlyParseError(
                        f"line {header_lines + i + 1}: non-numeric vertex value"
                    ) from None
            arr = np.asarray(rows, dtype=float).reshape(n, len(props))
            rec = np.empty(n, dtype=dtype)
            for k, (pname, _) in enumerate(props):
                rec[pname] = arr[:, k]
        if n == 0:
            raise PlyParseError("vertex element declares 0 vertices")
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
        if not np.all(np.isfinite(pts)):
            bad = int(np.argmin(np.all(np.isfinite(pts), axis=1)))
            raise PlyParseError(f"non-finite coordinate at vertex {bad}")
        normals = None
        if all(k in names for k in ("nx", "ny", "nz")):
            normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
        edges = None
        if "edge" in names:
            edges = rec["edge"].astype(bool)
        return PointCloud(pts, normals, edges)


def save_cloud(cloud: PointCloud, path, fmt: str = "binary_little_endian") -> None:
    """Write a PointCloud as PLY; coordinates/normals stored as float64."""
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported format {fmt!r}")
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty cloud")
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header += ["property double x", "property double y", "property double z"]
    if cloud.has_normals:
        header += ["property double nx", "property double ny", "property double nz"]
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if cloud.has_edges:
        header.append("property uchar edge")
        fields.append(("edge", "u1"))
    header.append("end_header")
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if cloud.has_normals:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    if cloud.has_edges:
        rec["edge"] = cloud.edges.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if fmt == "binary_little_endian":
            f.write(rec.tobytes())
        else:
            for row in rec:
                vals = [f"{row['x']:.17g}", f"{row['y']:.17g}", f"{row['z']:.17g}"]
                if cloud.has_normals:
                    vals += [
                        f"{row['nx']:.17g}",
                        f"{row['ny']:.17g}",
                        f"{row['nz']:.17g}",
                    ]
                if cloud.has_edges:
                    vals.append(str(int(row["edge"])))
                f.write((" ".join(vals) + "\n").encode("ascii"))

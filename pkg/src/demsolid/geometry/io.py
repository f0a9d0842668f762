"""ASCII OBJ / PLY mesh readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError
from .mesh import TriangleMesh


class MeshIndexError(ParseError, IndexError):
    """A face references a vertex that does not exist."""


def load_mesh(path, orient=True) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"mesh file not found: {path}")
    text = path.read_text(errors="replace")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _parse_obj(text)
    elif suffix == ".ply" or text.startswith("ply"):
        vertices, faces = _parse_ply(text)
    else:
        raise ParseError(f"unsupported mesh format: {path.suffix}")
    if len(vertices) == 0 or len(faces) == 0:
        raise ParseError(f"{path}: mesh has no vertices or no faces")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshIndexError(f"{path}: face references missing vertex")
    return TriangleMesh(vertices, faces, orient=orient)


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_obj(text):
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
                if len(vertices[-1]) != 3:
                    raise ValueError("vertex needs three coordinates")
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    k = int(token.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(vertices) + k)
                if len(idx) < 3:
                    raise ValueError("face needs at least three vertices")
                faces.extend(_fan(idx))
        except ValueError as exc:
            raise ParseError(f"OBJ line {lineno}: {exc}") from None
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply_header(lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic")
    elements = []
    fmt = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element")
            elements[-1]["props"].append(parts[1:])
        elif parts[0] == "end_header":
            if fmt != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got format {fmt}")
            return elements, i + 1
    raise ParseError("PLY header not terminated")


def read_ply_elements(text):
    """Parse an ASCII PLY into ``{element: {property: values}}``.

    List properties are returned as Python lists of int arrays.
    """
    lines = text.splitlines()
    elements, pos = _read_ply_header(lines)
    out = {}
    for el in elements:
        rows = lines[pos:pos + el["count"]]
        if len(rows) != el["count"]:
            raise ParseError(f"element {el['name']}: expected {el['count']} rows, got {len(rows)}")
        pos += el["count"]
        props = el["props"]
        if any(p[0] == "list" for p in props):
            lists = []
            for row in rows:
                vals = row.split()
                n = int(vals[0])
                lists.append(np.array([int(v) for v in vals[1:1 + n]], dtype=np.int64))
            out[el["name"]] = {"__list__": lists}
        else:
            try:
                data = np.array([[float(v) for v in row.split()] for row in rows], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"element {el['name']}: {exc}") from None
            data = data.reshape(len(rows), len(props))
            out[el["name"]] = {p[1]: data[:, j] for j, p in enumerate(props)}
    return out


def _parse_ply(text):
    el = read_ply_elements(text)
    if "vertex" not in el:
        raise ParseError("PLY has no vertex element")
    v = el["vertex"]
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1)
    faces = []
    for poly in el.get("face", {}).get("__list__", []):
        faces.extend(_fan(list(poly)))
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(mesh: TriangleMesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def save_ply(mesh: TriangleMesh, path):
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(header + body) + "\n")


def save_mesh(mesh: TriangleMesh, path):
    if Path(path).suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)

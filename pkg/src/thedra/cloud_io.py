"""Readers and writers for point clouds: XYZ, OBJ vertex lines, ASCII PLY."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom_core import PointCloud

__all__ = ["CloudFormatError", "read_xyz", "read_obj_vertices", "read_ply_ascii",
           "read_cloud", "write_xyz", "write_ply_ascii"]


class CloudFormatError(ValueError):
    """Malformed point-cloud file; the message carries the line number."""


def _parse_floats(tokens, lineno, path):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise CloudFormatError(f"{path}:{lineno}: cannot parse numbers from {' '.join(tokens)!r}") from None


def read_xyz(path) -> PointCloud:
    """Whitespace separated ``x y z`` per line; extra columns are ignored."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) < 3:
                raise CloudFormatError(f"{path}:{lineno}: expected 3 coordinates")
            rows.append(_parse_floats(tok[:3], lineno, path))
    return PointCloud(np.array(rows, float).reshape(-1, 3))


def read_obj_vertices(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if tok and tok[0] == "v":
                if len(tok) < 4:
                    raise CloudFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                rows.append(_parse_floats(tok[1:4], lineno, path))
    return PointCloud(np.array(rows, float).reshape(-1, 3))


def read_ply_ascii(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}:1: missing 'ply' magic")
    n_vertex, props, in_vertex, body = None, [], False, None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise CloudFormatError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = lineno
            break
    if body is None or n_vertex is None:
        raise CloudFormatError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise CloudFormatError(f"{path}: PLY vertex element lacks x/y/z") from None
    rows = []
    for off in range(n_vertex):
        lineno = body + 1 + off
        if lineno - 1 >= len(lines):
            raise CloudFormatError(f"{path}:{lineno}: file ends before all vertices were read")
        vals = _parse_floats(lines[lineno - 1].split(), lineno, path)
        if len(vals) < len(props):
            raise CloudFormatError(f"{path}:{lineno}: expected {len(props)} values")
        rows.append([vals[c] for c in cols])
    return PointCloud(np.array(rows, float).reshape(-1, 3))


def read_cloud(path) -> PointCloud:
    """Dispatch on file suffix (.xyz/.txt, .obj, .ply)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj_vertices(path)
    if suffix == ".ply":
        return read_ply_ascii(path)
    return read_xyz(path)


def write_xyz(path, points) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
    np.savetxt(path, pts, fmt="%.17g")


def write_ply_ascii(path, points) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header")
    np.savetxt(path, pts, fmt="%.17g", header=header, comments="")

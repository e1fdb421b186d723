"""External file formats: XYZ clouds, timestamped scan frames, ASCII STL,
and the flat key-value config syntax.

All formats are plain text with SI units.  Floats are written with
``repr`` so files round-trip bit-exactly, which the determinism
guarantees rely on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FileFormatError

__all__ = [
    "load_xyz",
    "save_xyz",
    "load_scan_frame",
    "save_scan_frame",
    "load_stl_ascii",
    "save_stl_ascii",
    "parse_kv",
    "format_kv",
    "fmt",
    "load_model_points",
]


def fmt(x) -> str:
    """Shortest exact decimal representation of a float."""
    return repr(float(x))


def load_xyz(path) -> np.ndarray:
    """Point cloud from text: one ``x y z`` triple per line, '#' comments."""
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 3:
                raise FileFormatError(
                    f"expected 3 coordinates, got {len(parts)}", lineno)
            try:
                pts.append([float(p) for p in parts])
            except ValueError:
                raise FileFormatError(f"bad number in {body!r}", lineno) from None
    return np.array(pts, dtype=float).reshape(-1, 3)


def save_xyz(path, pts, comment: str | None = None) -> None:
    pts = np.atleast_2d(pts)
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for p in pts:
            fh.write(f"{fmt(p[0])} {fmt(p[1])} {fmt(p[2])}\n")


def load_scan_frame(path):
    """Timestamped scan: XYZ text whose first line is ``# t=<seconds>``."""
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# t="):
        raise FileFormatError("scan frame must start with a '# t=<seconds>' "
                              "header", 1)
    try:
        t = float(first[4:].strip())
    except ValueError:
        raise FileFormatError(f"bad timestamp {first[4:].strip()!r}", 1) from None
    return t, load_xyz(path)


def save_scan_frame(path, t: float, pts) -> None:
    pts = np.atleast_2d(pts) if np.size(pts) else np.zeros((0, 3))
    with open(path, "w") as fh:
        fh.write(f"# t={fmt(t)}\n")
        for p in pts:
            fh.write(f"{fmt(p[0])} {fmt(p[1])} {fmt(p[2])}\n")


def load_stl_ascii(path):
    """ASCII STL: returns (triangles (n,3,3), normals (n,3))."""
    tris = []
    normals = []
    vertices: list[list[float]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key == "facet":
                if len(parts) != 5 or parts[1].lower() != "normal":
                    raise FileFormatError("malformed facet line", lineno)
                try:
                    normals.append([float(p) for p in parts[2:5]])
                except ValueError:
                    raise FileFormatError("bad facet normal", lineno) from None
                vertices = []
            elif key == "vertex":
                if len(parts) != 4:
                    raise FileFormatError("vertex needs 3 coordinates", lineno)
                try:
                    vertices.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise FileFormatError("bad vertex coordinate", lineno) from None
            elif key == "endfacet":
                if len(vertices) != 3:
                    raise FileFormatError(
                        f"facet closed with {len(vertices)} vertices", lineno)
                tris.append(vertices)
            elif key in ("solid", "endsolid", "outer", "endloop"):
                continue
            else:
                raise FileFormatError(f"unrecognized token {parts[0]!r}", lineno)
    if not tris:
        raise FileFormatError("no facets found", None)
    return np.array(tris, dtype=float), np.array(normals, dtype=float)


def save_stl_ascii(path, triangles, normals=None, name: str = "model") -> None:
    triangles = np.asarray(triangles, dtype=float)
    if normals is None:
        a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
        normals = np.cross(b - a, c - a)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.divide(normals, lens, out=np.zeros_like(normals),
                            where=lens > 0)
    with open(path, "w") as fh:
        fh.write(f"solid {name}\n")
        for tri, nrm in zip(triangles, normals):
            fh.write(f"  facet normal {fmt(nrm[0])} {fmt(nrm[1])} {fmt(nrm[2])}\n")
            fh.write("    outer loop\n")
            for v in tri:
                fh.write(f"      vertex {fmt(v[0])} {fmt(v[1])} {fmt(v[2])}\n")
            fh.write("    endloop\n")
            fh.write("  endfacet\n")
        fh.write(f"endsolid {name}\n")


def parse_kv(path) -> dict[str, str]:
    """Flat ``key = value`` config file with '#' comments.

    Later duplicate keys are rejected; values are returned raw so callers
    can apply their own typing and unknown-key policies.
    """
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            body = raw.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise FileFormatError(f"expected 'key = value', got {body!r}",
                                      lineno)
            key, value = body.split("=", 1)
            key = key.strip()
            if not key:
                raise FileFormatError("empty key", lineno)
            if key in out:
                raise FileFormatError(f"duplicate key {key!r}", lineno)
            out[key] = value.strip()
    return out


def format_kv(mapping: dict) -> str:
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    return "\n".join(lines) + "\n"


def load_model_points(path, resolution: float | None = None, seed=0):
    """Model cloud from an ASCII STL (sampled at `resolution`) or XYZ file.

    Returns (points, resolution_used); for XYZ input the resolution is
    left to the caller (None means estimate from spacing).
    """
    from .icp import sample_model

    path = Path(path)
    head = path.read_text().lstrip()[:5].lower()
    if path.suffix.lower() == ".stl" or head.startswith("solid"):
        tris, _ = load_stl_ascii(path)
        if resolution is None:
            raise ValueError("sampling an STL model requires a resolution")
        return sample_model(tris, resolution, seed), resolution
    return load_xyz(path), resolution

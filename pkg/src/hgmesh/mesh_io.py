"""Mesh containers, OBJ reading/writing, normalization and quantization."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-6


class MeshError(ValueError):
    pass


class MeshParseError(MeshError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class RawMesh:
    """Float-coordinate polygon mesh.

    ``faces`` holds vertex-index polygons of any arity >= 3. ``quad_ratio`` is the
    share of quads among the faces as they were authored, and survives
    triangulation untouched.
    """

    vertices: np.ndarray
    faces: list[tuple[int, ...]]
    quad_ratio: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = [tuple(int(i) for i in f) for f in self.faces]

    @property
    def is_triangular(self) -> bool:
        return all(len(f) == 3 for f in self.faces)

    def triangles(self) -> np.ndarray:
        if not self.is_triangular:
            raise MeshError("mesh is not triangulated")
        return np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self) -> None:
        n = len(self.vertices)
        for f in self.faces:
            if len(f) < 3:
                raise MeshError(f"face {f} has fewer than 3 vertices")
            if len(set(f)) != len(f):
                raise MeshError(f"face {f} repeats a vertex")
            if min(f) < 0 or max(f) >= n:
                raise MeshError(f"face {f} references a vertex outside [0, {n})")
        if not 0.0 <= self.quad_ratio <= 1.0:
            raise MeshError(f"quad_ratio {self.quad_ratio} outside [0, 1]")


@dataclass
class QuantizedMesh:
    """Triangle mesh with integer coordinates on a ``quant_level``-level grid."""

    quant_level: int
    vertices: np.ndarray
    faces: np.ndarray
    quad_ratio: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def __eq__(self, other):
        if not isinstance(other, QuantizedMesh):
            return NotImplemented
        return (
            self.quant_level == other.quant_level
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_set(self) -> set[frozenset[tuple[int, int, int]]]:
        """Faces as sets of coordinate triples; independent of indexing and winding."""
        verts = [tuple(int(c) for c in v) for v in self.vertices]
        return {frozenset(verts[i] for i in f) for f in self.faces}

    def validate(self) -> None:
        q = self.quant_level
        if self.vertices.size and (self.vertices.min() < 0 or self.vertices.max() > q - 1):
            raise MeshError(f"coordinates outside [0, {q - 1}]")
        if len(np.unique(self.vertices, axis=0)) != len(self.vertices):
            raise MeshError("duplicate vertices")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = np.sort(self.faces, axis=1)
            if np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]):
                raise MeshError("face with a repeated vertex")
            if len(np.unique(f, axis=0)) != len(f):
                raise MeshError("duplicate faces")


@dataclass
class QuantizeReport:
    merged_vertices: int = 0
    degenerate_faces: int = 0
    duplicate_faces: int = 0


# --------------------------------------------------------------------------- OBJ


def _parse_index(tok: str, nverts: int, lineno: int) -> int:
    head = tok.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshParseError(lineno, f"bad face index {tok!r}") from None
    if idx == 0:
        raise MeshParseError(lineno, "face index 0 is invalid in OBJ (1-based)")
    # negative indices are relative to the vertices read so far
    resolved = idx - 1 if idx > 0 else nverts + idx
    if not 0 <= resolved < nverts:
        raise MeshParseError(lineno, f"face index {idx} out of range (have {nverts} vertices)")
    return resolved


def load_mesh(path: str | os.PathLike) -> RawMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, ...]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(lineno, "vertex record needs 3 coordinates")
                try:
                    xyz = tuple(float(p) for p in parts[1:4])
                except ValueError:
                    raise MeshParseError(lineno, "non-numeric vertex coordinate") from None
                if not all(np.isfinite(xyz)):
                    raise MeshParseError(lineno, "non-finite vertex coordinate")
                verts.append(xyz)
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshParseError(lineno, "face record needs at least 3 indices")
                face = tuple(_parse_index(p, len(verts), lineno) for p in parts[1:])
                if len(set(face)) != len(face):
                    raise MeshParseError(lineno, "face repeats a vertex")
                faces.append(face)
    if not verts or not faces:
        raise MeshError(f"{path}: empty mesh ({len(verts)} vertices, {len(faces)} faces)")
    quads = sum(1 for f in faces if len(f) == 4)
    return RawMesh(np.array(verts), faces, quad_ratio=quads / len(faces))


def write_obj(mesh: RawMesh | QuantizedMesh, path: str | os.PathLike) -> None:
    if not path:
        raise MeshError("empty output path")
    if isinstance(mesh, QuantizedMesh):
        mesh = dequantize(mesh)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# quad_ratio {mesh.quad_ratio:.6f}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.8f} {y:.8f} {z:.8f}\n")
        for f in mesh.faces:
            fh.write("f " + " ".join(str(i + 1) for i in f) + "\n")


# ------------------------------------------------------------------ processing


def triangulate(mesh: RawMesh) -> tuple[RawMesh, int]:
    """Fan-triangulate every polygon from its first vertex.

    Returns the triangle mesh and the number of dropped degenerate triangles.
    """
    tris = []
    dropped = 0
    for f in mesh.faces:
        for k in range(1, len(f) - 1):
            t = (f[0], f[k], f[k + 1])
            if len(set(t)) < 3:
                dropped += 1
                continue
            tris.append(t)
    return RawMesh(mesh.vertices.copy(), tris, quad_ratio=mesh.quad_ratio), dropped


def normalize(mesh: RawMesh) -> RawMesh:
    """Center the bounding box at the origin and scale its longest side to 1."""
    if len(mesh.vertices) == 0:
        raise MeshError("cannot normalize a mesh without vertices")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise MeshError("zero-extent mesh: all vertices coincide")
    v = (mesh.vertices - (lo + hi) / 2.0) / extent
    return RawMesh(v, list(mesh.faces), quad_ratio=mesh.quad_ratio)


def quantize_coords(x: np.ndarray, quant_level: int) -> np.ndarray:
    q = np.floor((np.asarray(x, dtype=np.float64) + 0.5) * quant_level)
    return np.clip(q, 0, quant_level - 1).astype(np.int64)


def dequantize_coords(q: np.ndarray, quant_level: int) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) + 0.5) / quant_level - 0.5


def quantize(mesh: RawMesh, quant_level: int) -> tuple[QuantizedMesh, QuantizeReport]:
    """Snap a normalized triangle mesh to the grid, merging what collapses."""
    if quant_level < 2:
        raise MeshError(f"quantization level must be >= 2, got {quant_level}")
    v = mesh.vertices
    if v.size and np.abs(v).max() > 0.5 + NORM_TOL:
        raise MeshError("coordinates outside [-0.5, 0.5]; normalize first")
    tris = mesh.triangles()
    q = quantize_coords(v, quant_level)

    report = QuantizeReport()
    # merge identical grid vertices, keeping first-occurrence order
    _, first, inverse = np.unique(q, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_vertices = q[first[order]]
    remap = rank[inverse]
    report.merged_vertices = len(q) - len(new_vertices)

    faces = remap[tris] if len(tris) else tris.reshape(0, 3)
    s = np.sort(faces, axis=1)
    ok = (s[:, 0] != s[:, 1]) & (s[:, 1] != s[:, 2])
    report.degenerate_faces = int((~ok).sum())
    faces, s = faces[ok], s[ok]
    if len(faces):
        _, keep = np.unique(s, axis=0, return_index=True)
        keep = np.sort(keep)
        report.duplicate_faces = len(faces) - len(keep)
        faces = faces[keep]
    qm = QuantizedMesh(quant_level, new_vertices, faces, quad_ratio=mesh.quad_ratio)
    return qm, report


def dequantize(mesh: QuantizedMesh) -> RawMesh:
    v = dequantize_coords(mesh.vertices, mesh.quant_level)
    return RawMesh(v, [tuple(f) for f in mesh.faces.tolist()], quad_ratio=mesh.quad_ratio)


def prepare(mesh: RawMesh, quant_level: int) -> QuantizedMesh:
    """Triangulate, normalize and quantize in one go."""
    tri, _ = triangulate(mesh)
    qm, _ = quantize(normalize(tri), quant_level)
    return qm


def surface_area(vertices: np.ndarray, faces) -> float:
    """Total area of a polygon mesh; each polygon measured by its vector area."""
    total = 0.0
    for f in faces:
        p = vertices[list(f)]
        cross = np.zeros(3)
        for k in range(1, len(f) - 1):
            cross += np.cross(p[k] - p[0], p[k + 1] - p[0])
        total += 0.5 * np.linalg.norm(cross)
    return total

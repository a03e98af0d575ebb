"""Seeded procedural mesh families used as a stand-in training corpus."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.transform import Rotation

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .mesh_io import MeshError, RawMesh

FAMILIES = ("box", "cylinder", "icosphere", "extrusion", "box_union")


@dataclass(frozen=True)
class GeneratorSpec:
    """Family choice plus inclusive integer/float ranges the generator draws from."""

    family: str = "mixed"
    extent: tuple[float, float] = (0.3, 1.0)
    rotate: bool = True
    subdivisions: tuple[int, int] = (1, 3)
    segments: tuple[int, int] = (6, 24)
    rings: tuple[int, int] = (1, 8)
    sides: tuple[int, int] = (3, 10)
    boxes: tuple[int, int] = (2, 5)

    def __post_init__(self):
        if self.family not in FAMILIES + ("mixed",):
            raise MeshError(f"unknown family {self.family!r}; choose from {FAMILIES + ('mixed',)}")
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                object.__setattr__(self, f.name, tuple(val))
                val = tuple(val)
            if isinstance(val, tuple) and (len(val) != 2 or val[0] > val[1]):
                raise MeshError(f"{f.name} must be a (low, high) pair, got {val}")
        if self.subdivisions[0] < 0 or self.segments[0] < 3 or self.sides[0] < 3:
            raise MeshError("subdivisions >= 0, segments >= 3 and sides >= 3 required")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def load_generator_spec(path: str | os.PathLike) -> GeneratorSpec:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data = data.get("generator", data)
    known = {f.name for f in fields(GeneratorSpec)}
    unknown = set(data) - known
    if unknown:
        raise MeshError(f"unknown generator keys: {sorted(unknown)}")
    return GeneratorSpec(**data)


# ------------------------------------------------------------------ primitives


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), offset: int = 0):
    sx, sy, sz = (np.asarray(size, dtype=np.float64) / 2.0)
    corners = np.array(
        [[-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
         [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz]]
    ) + np.asarray(center, dtype=np.float64)
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    return corners, [tuple(i + offset for i in q) for q in quads]


def icosphere(subdivisions: int):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), faces


def cylinder_mesh(segments: int, rings: int, radius: float = 0.5, height: float = 1.0):
    ang = 2 * np.pi * np.arange(segments) / segments
    verts = []
    for r in range(rings + 1):
        y = -height / 2 + height * r / rings
        verts += [(radius * np.cos(a), y, radius * np.sin(a)) for a in ang]
    faces = []
    for r in range(rings):
        base = r * segments
        for k in range(segments):
            k2 = (k + 1) % segments
            faces.append((base + k, base + k2, base + segments + k2, base + segments + k))
    faces.append(tuple(reversed(range(segments))))
    top = rings * segments
    faces.append(tuple(top + k for k in range(segments)))
    return np.array(verts), faces


def extrusion_mesh(angles: np.ndarray, radii: tuple[float, float], height: float):
    n = len(angles)
    ring = np.stack([radii[0] * np.cos(angles), np.zeros(n), radii[1] * np.sin(angles)], axis=1)
    bottom = ring + [0.0, -height / 2, 0.0]
    top = ring + [0.0, height / 2, 0.0]
    verts = np.concatenate([bottom, top])
    faces = [tuple(reversed(range(n))), tuple(n + k for k in range(n))]
    for k in range(n):
        k2 = (k + 1) % n
        faces.append((k, k2, n + k2, n + k))
    return verts, faces


# ------------------------------------------------------------------ generator


def _randint(rng, lohi):
    return int(rng.integers(lohi[0], lohi[1] + 1))


def gen_procedural(seed: int, spec: GeneratorSpec | None = None) -> RawMesh:
    """Draw one mesh; identical (seed, spec) pairs give identical meshes."""
    spec = spec or GeneratorSpec()
    rng = np.random.default_rng(seed)
    family = spec.family
    if family == "mixed":
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]

    if family == "box":
        verts, faces = box_mesh(rng.uniform(*spec.extent, size=3))
    elif family == "icosphere":
        verts, faces = icosphere(_randint(rng, spec.subdivisions))
        verts = verts * rng.uniform(*spec.extent, size=3)
    elif family == "cylinder":
        verts, faces = cylinder_mesh(_randint(rng, spec.segments), _randint(rng, spec.rings))
        verts = verts * rng.uniform(*spec.extent, size=3)
    elif family == "extrusion":
        n = _randint(rng, spec.sides)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        verts, faces = extrusion_mesh(angles, tuple(rng.uniform(*spec.extent, size=2)),
                                      float(rng.uniform(*spec.extent)))
    else:
        verts_l, faces = [], []
        for _ in range(_randint(rng, spec.boxes)):
            v, f = box_mesh(rng.uniform(*spec.extent, size=3) * 0.6,
                            rng.uniform(-0.3, 0.3, size=3), offset=8 * len(verts_l))
            verts_l.append(v)
            faces += f
        verts = np.concatenate(verts_l)

    if spec.rotate:
        verts = Rotation.random(random_state=rng).apply(verts)
    quads = sum(1 for f in faces if len(f) == 4)
    return RawMesh(verts, faces, quad_ratio=quads / len(faces))

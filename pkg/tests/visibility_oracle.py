"""Brute-force visibility oracle: solve every ray/triangle system directly."""

import numpy as np

from hgmesh.mesh_io import RawMesh, triangulate
from hgmesh.pointcloud import icosahedron_directions
from hgmesh.procedural import box_mesh


def brute_visible(points, tris, eps=1e-4):
    """A point is visible if some icosahedron direction escapes every triangle."""
    dirs = icosahedron_directions()
    out = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        for d in dirs:
            o = p + eps * d
            blocked = False
            for a, b, c in tris:
                m = np.column_stack([b - a, c - a, -d])
                if abs(np.linalg.det(m)) < 1e-12:
                    continue
                u, v, t = np.linalg.solve(m, o - a)
                if t > 0 and u >= 0 and v >= 0 and u + v <= 1:
                    blocked = True
                    break
            if not blocked:
                out[i] = True
                break
    return out


def nested_boxes(inner=0.3, outer=1.0, inner_center=(0.0, 0.0, 0.0)):
    """Triangulated outer box enclosing a smaller box; returns (mesh, outer triangle count)."""
    vo, fo = box_mesh((outer,) * 3)
    vi, fi = box_mesh((inner,) * 3, center=inner_center, offset=8)
    mesh = triangulate(RawMesh(np.concatenate([vo, vi]), fo + fi))[0]
    return mesh, len(fo) * 2

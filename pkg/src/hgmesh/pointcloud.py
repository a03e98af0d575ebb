"""Conditioning point clouds: surface sampling, visibility filtering, FPS, noise."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .mesh_io import MeshError, RawMesh


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.normals.shape:
            raise ValueError("positions and normals differ in shape")

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], self.normals[idx])

    def features(self) -> np.ndarray:
        return np.concatenate([self.positions, self.normals], axis=1)


def _triangle_data(mesh: RawMesh):
    tris = mesh.triangles()
    p = mesh.vertices[tris]  # (T, 3, 3)
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return p, cross


def sample_surface(mesh: RawMesh, count: int, seed) -> PointCloud:
    """Area-weighted uniform samples; each point carries its face normal."""
    p, cross = _triangle_data(mesh)
    twice_area = np.linalg.norm(cross, axis=1)
    total = twice_area.sum()
    if not total > 0:
        raise MeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(p), size=count, p=twice_area / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = p[tri, 0], p[tri, 1], p[tri, 2]
    pos = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cross[tri] / twice_area[tri, None]
    normals = np.nan_to_num(normals)
    return PointCloud(pos, normals)


def icosahedron_directions() -> np.ndarray:
    """Unit normals of the 20 faces of a regular icosahedron."""
    from .procedural import icosphere

    v, faces = icosphere(0)
    d = np.array([v[list(f)].mean(axis=0) for f in faces])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ------------------------------------------------------------------------- BVH


class BVH:
    """Axis-aligned bounding-volume hierarchy over triangles with batched occlusion queries."""

    def __init__(self, triangles: np.ndarray, leaf_size: int = 4):
        self.tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        lo_all = self.tris.min(axis=1)
        hi_all = self.tris.max(axis=1)
        cent = self.tris.mean(axis=1)
        los, his, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(self.tris))
        stack = [(0, len(order), -1, 0)]  # (begin, end, parent, side)
        while stack:
            b, e, parent, side = stack.pop()
            idx = order[b:e]
            node = len(los)
            los.append(lo_all[idx].min(axis=0))
            his.append(hi_all[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(b)
            count.append(e - b)
            if parent >= 0:
                (left if side == 0 else right)[parent] = node
            if e - b <= leaf_size:
                continue
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = idx[np.argsort(c[:, axis], kind="stable")]
            order[b:e] = srt
            mid = (b + e) // 2
            count[node] = 0
            stack.append((mid, e, node, 1))
            stack.append((b, mid, node, 0))
        self.lo = np.array(los)
        self.hi = np.array(his)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)
        self.order = order

    def occluded(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = 0.0) -> np.ndarray:
        """Whether each ray ``origin + t * dir`` (t > t_min) hits any triangle."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        n = len(origins)
        hit = np.zeros(n, dtype=bool)
        if len(self.tris) == 0 or n == 0:
            return hit
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        ray = np.arange(n)
        node = np.zeros(n, dtype=np.int64)
        while len(ray):
            o, iv = origins[ray], inv[ray]
            with np.errstate(invalid="ignore"):
                t1 = (self.lo[node] - o) * iv
                t2 = (self.hi[node] - o) * iv
            # nan arises for 0 * inf on a slab boundary: treat the slab as unbounded
            tn = np.nanmax(np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)), axis=1)
            tf = np.nanmin(np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)), axis=1)
            keep = tf >= np.maximum(tn, t_min)
            ray, node = ray[keep], node[keep]
            leaf = self.left[node] < 0
            # leaves: expand to (ray, triangle) pairs
            lr, ln = ray[leaf], node[leaf]
            if len(lr):
                cnt = self.count[ln]
                rr = np.repeat(lr, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tt = self.order[np.repeat(self.start[ln], cnt) + offs]
                h = ray_triangle_hits(origins[rr], dirs[rr], self.tris[tt], t_min)
                hit[rr[h]] = True
            ir, inode = ray[~leaf], node[~leaf]
            ray = np.concatenate([ir, ir])
            node = np.concatenate([self.left[inode], self.right[inode]])
            live = ~hit[ray]
            ray, node = ray[live], node[live]
        return hit


def ray_triangle_hits(o, d, tri, t_min=0.0, eps=1e-12):
    """Moller-Trumbore test, vectorized over paired rays and triangles."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = o - tri[:, 0]
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = np.einsum("ij,ij->i", d, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)


def visibility_filter(points: PointCloud, mesh: RawMesh, epsilon: float = 1e-4,
                      directions: np.ndarray | None = None, bvh: BVH | None = None) -> PointCloud:
    """Keep points that see infinity along at least one icosahedron face direction."""
    dirs = icosahedron_directions() if directions is None else directions
    bvh = bvh or BVH(mesh.vertices[mesh.triangles()])
    visible = np.zeros(len(points), dtype=bool)
    for d in dirs:
        todo = np.flatnonzero(~visible)
        if len(todo) == 0:
            break
        dd = np.broadcast_to(d, (len(todo), 3))
        blocked = bvh.occluded(points.positions[todo] + epsilon * d, dd)
        visible[todo[~blocked]] = True
    return points.subset(visible)


def fps(points: PointCloud, k: int, seed=None, start: int | None = None) -> PointCloud:
    """Greedy farthest-point subset of size ``k`` (ties go to the lowest index)."""
    n = len(points)
    if k > n:
        raise ValueError(f"cannot pick {k} points from {n}")
    if k <= 0:
        return points.subset(np.zeros(0, dtype=np.int64))
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    pos = points.positions
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pos - pos[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    return points.subset(chosen)


def augment(points: PointCloud, sigma_pos: float = 0.1, sigma_normal: float = 0.2,
            p_zero_normals: float = 0.5, seed=None) -> PointCloud:
    """Per-cloud Gaussian jitter with noise scales drawn uniformly up to the given maxima."""
    rng = np.random.default_rng(seed)
    s_pos = rng.uniform(0.0, sigma_pos)
    s_nrm = rng.uniform(0.0, sigma_normal)
    zero = rng.random() < p_zero_normals
    pos = points.positions + s_pos * rng.standard_normal(points.positions.shape)
    nrm = points.normals
    if s_nrm > 0:
        nrm = nrm + s_nrm * rng.standard_normal(nrm.shape)
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        had = np.linalg.norm(points.normals, axis=1, keepdims=True) > 0
        nrm = np.where(had & (length > 0), nrm / np.where(length > 0, length, 1.0), 0.0)
    if zero:
        nrm = np.zeros_like(nrm)
    return PointCloud(pos, nrm)


def conditioning_cloud(mesh: RawMesh, num_points: int, seed, oversample: int = 4,
                       epsilon: float = 1e-4) -> PointCloud:
    """Sample, keep externally visible points, then FPS down to ``num_points``."""
    rng = np.random.default_rng(seed)
    cand = sample_surface(mesh, num_points * oversample, rng)
    vis = visibility_filter(cand, mesh, epsilon)
    if len(vis) < num_points:
        # too few visible candidates: top up from the raw samples
        extra = cand.subset(np.arange(num_points - len(vis)))
        vis = PointCloud(np.concatenate([vis.positions, extra.positions]),
                         np.concatenate([vis.normals, extra.normals]))
    return fps(vis, num_points, rng)


# ------------------------------------------------------------------------- PLY

_PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz")


def write_ply(cloud: PointCloud, path: str | os.PathLike) -> None:
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {f}" for f in _PLY_FIELDS] + ["end_header"]
    data = np.ascontiguousarray(cloud.features(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path: str | os.PathLike) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        count, props = None, []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unterminated header")
            words = line.decode("ascii").split()
            if not words:
                continue
            if words[0] == "format" and words[1] != "binary_little_endian":
                raise ValueError(f"{path}: only binary_little_endian is supported")
            if words[0] == "element" and words[1] == "vertex":
                count = int(words[2])
            elif words[0] == "property":
                if words[1] != "float":
                    raise ValueError(f"{path}: only float properties are supported")
                props.append(words[2])
            elif words[0] == "end_header":
                break
        if tuple(props) != _PLY_FIELDS or count is None:
            raise ValueError(f"{path}: expected vertex properties {_PLY_FIELDS}")
        data = np.frombuffer(fh.read(count * 24), dtype="<f4").reshape(count, 6)
    return PointCloud(data[:, :3].astype(np.float64), data[:, 3:].astype(np.float64))

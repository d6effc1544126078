"""Point clouds, meshes, sampling, noising, patching and exact kNN search."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, GeometryError

DIAMETER_EXACT_LIMIT = 4096
_DIAMETER_SUBSAMPLE_SEED = 0x5EED


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    clean_reference: np.ndarray | None = None
    indices: np.ndarray | None = None  # original indices, set by extract_patch

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise GeometryError(f"points must be N x 3 with N >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        n = pts.shape[0]
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise GeometryError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-5):
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.clean_reference is not None:
            ref = np.asarray(self.clean_reference, dtype=np.float64)
            if ref.shape != (n, 3):
                raise GeometryError(
                    f"clean_reference shape {ref.shape} does not match points {pts.shape}")
            object.__setattr__(self, "clean_reference", ref)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be V x 3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be T x 3, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


# ---------------------------------------------------------------- exact kNN

def squared_norm3(d: np.ndarray) -> np.ndarray:
    """x*x + y*y + z*z over the last axis, always summed left to right."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return (x * x + y * y) + z * z


def squared_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, computed as the sum of squared coordinate deltas."""
    return squared_norm3(queries[..., None, :] - points)


class SpatialIndex:
    """Exact k-nearest-neighbour search over a fixed point set.

    Candidates come from a kd-tree; their distances are then recomputed with
    :func:`squared_distances` and ranked by ``(distance, index)`` so that the
    result is identical to exhaustive search, tie order included.
    """

    _PAD = 8

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise GeometryError(f"cannot index point array of shape {self.points.shape}")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries: np.ndarray, k: int, exclude_self: bool = False,
              return_distances: bool = False):
        """k nearest indexed points for each query row, ascending distance.

        With ``exclude_self`` the queries must be the indexed points themselves,
        in order, and query ``i`` never returns index ``i``.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        available = n - 1 if exclude_self else n
        if k < 1 or k > available:
            raise ContractError(f"knn: k={k} but only {available} points are available")
        if exclude_self and queries.shape[0] != n:
            raise ContractError("exclude_self requires querying every indexed point in order")
        q = queries.shape[0]
        want = min(k + (1 if exclude_self else 0) + self._PAD, n)
        _, cand = self._tree.query(queries, k=want)
        cand = np.asarray(cand, dtype=np.int64).reshape(q, want)
        d2 = squared_norm3(queries[:, None, :] - self.points[cand])
        if exclude_self:
            d2 = np.where(cand == np.arange(q)[:, None], np.inf, d2)
        order = _rank(d2, cand)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        idx, dist = cand[:, :k].copy(), d2[:, :k].copy()

        if want < n:
            # Unseen points are at least as far as the farthest kd-tree
            # candidate; recheck rows where that bound does not clear the
            # k-th distance.
            finite = np.where(np.isinf(d2), -np.inf, d2)
            far = finite.max(axis=1)
            for row in np.nonzero(dist[:, -1] >= far * (1 - 1e-9))[0]:
                idx[row], dist[row] = self._exact_row(queries[row], k, row if exclude_self else -1)
        if return_distances:
            return idx, dist
        return idx

    def _exact_row(self, query: np.ndarray, k: int, exclude: int):
        d2 = squared_distances(query, self.points)
        if exclude >= 0:
            d2[exclude] = np.inf
        order = np.lexsort((np.arange(d2.size), d2))[:k]
        return order, d2[order]

    def nearest(self, queries: np.ndarray):
        """Index of and squared distance to the nearest indexed point."""
        idx, d2 = self.query(queries, 1, return_distances=True)
        return idx[:, 0], d2[:, 0]


def _rank(d2: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row-wise argsort by distance, ties broken by ascending index."""
    by_index = np.argsort(idx, axis=1, kind="stable")
    d_sorted = np.take_along_axis(d2, by_index, axis=1)
    by_dist = np.argsort(d_sorted, axis=1, kind="stable")
    return np.take_along_axis(by_index, by_dist, axis=1)


def build_spatial_index(points: np.ndarray) -> SpatialIndex:
    return SpatialIndex(points)


def knn_query(index: SpatialIndex, query: np.ndarray, k: int, exclude_self: bool = False):
    """k nearest neighbours of a single query point.

    ``exclude_self`` drops any indexed point that coincides exactly with the
    query, lowest index first.
    """
    query = np.asarray(query, dtype=np.float64).reshape(3)
    if not exclude_self:
        return index.query(query[None], k)[0]
    d2 = squared_distances(query, index.points)
    hits = np.nonzero(d2 == 0)[0]
    if hits.size == 0:
        return index.query(query[None], k)[0]
    if k > len(index) - 1:
        raise ContractError(f"knn: k={k} but only {len(index) - 1} points are available")
    d2[hits[0]] = np.inf
    return np.lexsort((np.arange(d2.size), d2))[:k]


# ---------------------------------------------------------------- sampling

def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh(mesh: TriangleMesh, n: int, seed) -> PointCloud:
    """Area-uniform surface samples with face normals attached."""
    rng = np.random.default_rng(seed)
    v, f = mesh.vertices, mesh.faces
    areas = triangle_areas(v, f) if f.size else np.zeros(0)
    total = areas.sum()
    if total <= 0:
        raise GeometryError("mesh has no face with positive area")
    face = rng.choice(f.shape[0], size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    a, b, c = (v[f[face, i]] for i in range(3))
    points = a + u[:, None] * (b - a) + w[:, None] * (c - a)
    normals = np.cross(b - a, c - a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points, normals=normals)


SPHERE_RADIUS = 0.5
TORUS_MAJOR = 0.35
TORUS_MINOR = 0.15
CUBE_SIDE = 1.0


def sample_primitive(kind: str, n: int, seed) -> PointCloud:
    """Area-uniform samples on a sphere, torus or cube surface centred at the origin."""
    if n < 1:
        raise ContractError("sample_primitive needs n >= 1")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return PointCloud(SPHERE_RADIUS * d, normals=d)
    if kind == "torus":
        R, r = TORUS_MAJOR, TORUS_MINOR
        theta = np.empty(0)
        # the area element is proportional to R + r cos(theta)
        while theta.size < n:
            t = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, R + r, 2 * n) < R + r * np.cos(t)
            theta = np.concatenate([theta, t[keep]])
        theta = theta[:n]
        phi = rng.uniform(0, 2 * np.pi, n)
        normals = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi),
                            np.sin(theta)], axis=1)
        ring = np.stack([R * np.cos(phi), R * np.sin(phi), np.zeros(n)], axis=1)
        return PointCloud(ring + r * normals, normals=normals)
    if kind in ("cube", "cube-surface"):
        h = CUBE_SIDE / 2
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-h, h, (n, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        points = np.empty((n, 3))
        normals = np.zeros((n, 3))
        for ax in range(3):
            sel = axis == ax
            others = [i for i in range(3) if i != ax]
            points[sel, ax] = sign[sel] * h
            points[np.ix_(sel, others)] = uv[sel]
            normals[sel, ax] = sign[sel]
        return PointCloud(points, normals=normals)
    raise ContractError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------- normalization and noise

def estimate_diameter(points: np.ndarray) -> float:
    """Max pairwise distance, exact up to 4096 points, else over a fixed subsample."""
    pts = points
    if pts.shape[0] > DIAMETER_EXACT_LIMIT:
        rng = np.random.default_rng(_DIAMETER_SUBSAMPLE_SEED)
        pts = pts[np.sort(rng.choice(pts.shape[0], DIAMETER_EXACT_LIMIT, replace=False))]
    best = 0.0
    for start in range(0, pts.shape[0], 512):
        block = squared_distances(pts[start:start + 512], pts)
        best = max(best, float(block.max()))
    return math.sqrt(best)


def normalize_diameter(pc: PointCloud) -> PointCloud:
    if len(pc) < 2:
        raise GeometryError("normalize_diameter needs at least two points")
    diameter = estimate_diameter(pc.points)
    if diameter == 0:
        raise GeometryError("cannot normalize a cloud whose points all coincide")
    centroid = pc.points.mean(axis=0)
    factor = 1.0 / diameter
    ref = None
    if pc.clean_reference is not None:
        ref = centroid + (pc.clean_reference - centroid) * factor
    return replace(pc, points=centroid + (pc.points - centroid) * factor, clean_reference=ref)


def add_gaussian_noise(pc: PointCloud, sigma: float, seed) -> PointCloud:
    if sigma < 0:
        raise ContractError(f"noise standard deviation must be >= 0, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, pc.points.shape) if sigma > 0 else 0.0
    return replace(pc, points=pc.points + noise, clean_reference=pc.points.copy())


def add_structured_noise(pc: PointCloud, sigma_bias: float, sigma_ray: float,
                         origin, seed) -> PointCloud:
    """Per-point range error along the ray from ``origin`` plus isotropic jitter."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    rays = pc.points - origin
    length = np.linalg.norm(rays, axis=1, keepdims=True)
    if np.any(length == 0):
        raise GeometryError("scanner origin coincides with a point (zero-length ray)")
    n = len(pc)
    radial = rng.normal(0.0, sigma_bias, (n, 1)) if sigma_bias > 0 else np.zeros((n, 1))
    jitter = rng.normal(0.0, sigma_ray, (n, 3)) if sigma_ray > 0 else np.zeros((n, 3))
    points = pc.points + rays / length * radial + jitter
    return replace(pc, points=points, clean_reference=pc.points.copy())


def extract_patch(pc: PointCloud, center_index: int, size: int = 1024,
                  index: SpatialIndex | None = None) -> PointCloud:
    """The centre point followed by its ``size - 1`` nearest neighbours."""
    n = len(pc)
    if n < size:
        raise ContractError(f"cannot extract a {size}-point patch from {n} points")
    if size == 1:
        sel = np.array([center_index])
    else:
        if index is None:
            index = SpatialIndex(pc.points)
        sel_rest = _neighbors_excluding(index, center_index, size - 1)
        sel = np.concatenate([[center_index], sel_rest])
    return PointCloud(
        pc.points[sel],
        normals=None if pc.normals is None else pc.normals[sel],
        clean_reference=None if pc.clean_reference is None else pc.clean_reference[sel],
        indices=sel if pc.indices is None else pc.indices[sel],
    )


def _neighbors_excluding(index: SpatialIndex, center: int, k: int) -> np.ndarray:
    q = index.points[center][None]
    idx, _ = index.query(q, k + 1, return_distances=True)
    idx = idx[0]
    if center in idx:
        return idx[idx != center][:k]
    return idx[:k]


# ---------------------------------------------------------------- file formats

def read_off(path) -> TriangleMesh:
    path = Path(path)
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("OFF"):
        raise GeometryError(f"{path}: missing OFF header")
    head = lines[0][3:].split()
    rest = lines[1:]
    if head:
        counts = head
    else:
        counts, rest = rest[0].split(), rest[1:]
    try:
        nv, nf = int(counts[0]), int(counts[1])
        vertices = np.array([[float(x) for x in rest[i].split()[:3]] for i in range(nv)])
        faces = []
        for line in rest[nv:nv + nf]:
            tokens = [int(x) for x in line.split()]
            cnt, idx = tokens[0], tokens[1:1 + tokens[0]]
            if cnt < 3 or len(idx) != cnt:
                raise GeometryError(f"{path}: malformed face line {line!r}")
            for j in range(1, cnt - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
    except (IndexError, ValueError) as exc:
        raise GeometryError(f"{path}: malformed OFF file ({exc})") from None
    return TriangleMesh(vertices.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_off(path, mesh: TriangleMesh) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.vertices.shape[0]} {mesh.faces.shape[0]} 0\n")
        for v in mesh.vertices:
            fh.write("%.9g %.9g %.9g\n" % tuple(v))
        for f in mesh.faces:
            fh.write("3 %d %d %d\n" % tuple(f))


def write_xyz(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    data = points if normals is None else np.hstack([points, normals])
    fmt = " ".join(["%.9g"] * data.shape[1])
    with open(path, "w", newline="\n") as fh:
        for row in data:
            fh.write(fmt % tuple(row) + "\n")


def read_xyz(path) -> PointCloud:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, found {data.shape[1]}")
    normals = None
    if data.shape[1] == 6:
        normals = data[:, 3:]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(data[:, :3], normals=normals)

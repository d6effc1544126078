"""Exhaustive reference implementations used as test oracles."""

import numpy as np


def sq_dist_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        d = b - a[i]
        out[i] = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
    return out


def brute_knn(queries, points, k, exclude_self=False):
    """Sort every candidate by (distance, index); drop the query's own index if asked."""
    d2 = sq_dist_matrix(queries, points)
    rows = []
    for i in range(d2.shape[0]):
        order = sorted(range(d2.shape[1]), key=lambda j: (d2[i, j], j))
        if exclude_self:
            order = [j for j in order if j != i]
        rows.append(order[:k])
    return np.array(rows, dtype=np.int64)


def brute_diameter(points):
    return float(np.sqrt(sq_dist_matrix(points, points).max()))


def brute_chamfer(a, b):
    d2 = sq_dist_matrix(a, b)
    return (d2.min(axis=1).sum() + d2.min(axis=0).sum()) / (2 * a.shape[0])


def brute_rmsd(a, b):
    return float(np.sqrt(sq_dist_matrix(a, b).min(axis=1).mean()))


def bfs_field_sizes(neighbors, layers):
    """Receptive-field size per point after each layer, by breadth-first search.

    Node i reads from itself and from neighbors[i] at every layer.
    """
    n = len(neighbors)
    sizes = np.zeros((n, layers), dtype=np.int64)
    for i in range(n):
        seen = {i}
        frontier = {i}
        for layer in range(layers):
            nxt = set()
            for u in frontier:
                for v in neighbors[u]:
                    if v not in seen:
                        nxt.add(int(v))
            seen |= nxt
            frontier = nxt
            sizes[i, layer] = len(seen)
    return sizes


def brute_unae(denoised, clean_points, clean_normals, k_n):
    """Mean unoriented normal angle in degrees, every search exhaustive.

    Normals come from per-point 3x3 covariance eigenproblems; the angle uses
    atan2(|a x b|, |a . b|), which stays accurate near zero and ninety degrees.
    """
    pts = np.asarray(denoised, dtype=np.float64)
    nbrs = brute_knn(pts, pts, k_n - 1, exclude_self=True)
    normals = np.empty_like(pts)
    for i in range(pts.shape[0]):
        local = pts[np.concatenate([[i], nbrs[i]])]
        c = local - local.mean(axis=0)
        _, vecs = np.linalg.eigh(c.T @ c / k_n)
        normals[i] = vecs[:, 0]
    nearest = brute_knn(clean_points, pts, 1)[:, 0]
    est = normals[nearest]
    cross = np.linalg.norm(np.cross(est, clean_normals), axis=1)
    dot = np.abs(np.sum(est * clean_normals, axis=1))
    return float(np.degrees(np.arctan2(cross, dot)).mean())

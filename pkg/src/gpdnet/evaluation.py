"""Denoising quality metrics and receptive-field analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ContractError
from .geometry import PointCloud, SpatialIndex
from .graph import NeighborGraph
from .network import ForwardTrace, GpdNet

CSV_HEADER = ["cloud_id", "sigma", "k", "graph_mode", "chamfer", "rmsd", "unae_deg", "chamfer_e6"]


def _as_points(x) -> np.ndarray:
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("metrics need non-empty point clouds")
    return pts


def nearest_sq_distances(queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Squared distance from each query to its nearest reference point."""
    _, d2 = SpatialIndex(reference).nearest(queries)
    return d2


def chamfer(denoised, clean) -> float:
    """Symmetric nearest-neighbour squared distance, both sums over the same N."""
    a, b = _as_points(denoised), _as_points(clean)
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"chamfer expects equal cardinalities, got {a.shape[0]} and {b.shape[0]}")
    n = a.shape[0]
    return float((nearest_sq_distances(a, b).sum() + nearest_sq_distances(b, a).sum()) / (2 * n))


def rmsd(denoised, clean) -> float:
    a, b = _as_points(denoised), _as_points(clean)
    return math.sqrt(float(nearest_sq_distances(a, b).mean()))


# ---------------------------------------------------------------- normals

def _pick_normal(vals: np.ndarray, vecs: np.ndarray, tie_tol: float) -> np.ndarray:
    """Smallest-eigenvalue eigenvector with a deterministic tie rule and sign."""
    n = vals.shape[0]
    out = vecs[:, :, 0].copy()
    scale = np.maximum(np.abs(vals).max(axis=1), 1e-300)
    tied = (vals[:, 1] - vals[:, 0]) <= tie_tol * scale
    for i in np.nonzero(tied)[0]:
        members = [0, 1] + ([2] if vals[i, 2] - vals[i, 0] <= tie_tol * scale[i] else [])
        cands = [vecs[i, :, j] for j in members]
        # lexicographically largest absolute-component pattern
        out[i] = max(cands, key=lambda v: tuple(np.round(np.abs(v), 12)))
    lead = np.argmax(np.abs(out), axis=1)
    sign = np.sign(out[np.arange(n), lead])
    sign[sign == 0] = 1
    return out * sign[:, None]


def estimate_normals_pca(pc, k_n: int = 16, tie_tol: float = 1e-9) -> np.ndarray:
    """Unoriented unit normals from the covariance of each point's k_n-neighbourhood.

    The neighbourhood includes the point itself.  The sign is normalised so
    the largest-magnitude component is positive.
    """
    pts = _as_points(pc)
    n = pts.shape[0]
    if not 3 <= k_n < n:
        raise ContractError(f"normal estimation needs 3 <= k_n < N, got k_n={k_n}, N={n}")
    nbrs = SpatialIndex(pts).query(pts, k_n - 1, exclude_self=True)
    idx = np.concatenate([np.arange(n)[:, None], nbrs], axis=1)
    local = pts[idx]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_n
    vals, vecs = np.linalg.eigh(cov)
    return _pick_normal(vals, vecs, tie_tol)


def normal_angle_errors(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-pair unoriented angle in degrees."""
    d_minus = np.sum((estimated - truth) ** 2, axis=1)
    d_plus = np.sum((estimated + truth) ** 2, axis=1)
    arg = np.clip(1.0 - 0.5 * np.minimum(d_minus, d_plus), -1.0, 1.0)
    return np.degrees(np.arccos(arg))


def unae(denoised, clean: PointCloud, k_n: int = 16,
         estimated_normals: np.ndarray | None = None) -> float:
    """Mean unoriented angle between ground-truth normals and the normal
    estimated at the nearest denoised point, in degrees."""
    if getattr(clean, "normals", None) is None:
        raise ContractError("unae needs ground-truth normals on the clean cloud")
    pts = _as_points(denoised)
    if estimated_normals is None:
        estimated_normals = estimate_normals_pca(pts, k_n)
    nearest, _ = SpatialIndex(pts).nearest(clean.points)
    return float(normal_angle_errors(estimated_normals[nearest], clean.normals).mean())


# ---------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    cloud_id: str
    sigma: float
    k: int
    graph_mode: str
    chamfer: float
    rmsd: float
    unae_deg: float
    checkpoint_id: str = ""
    baseline: dict = field(default_factory=dict)

    @property
    def chamfer_e6(self) -> float:
        return self.chamfer * 1e6

    def row(self) -> list:
        return [self.cloud_id, self.sigma, self.k, self.graph_mode, self.chamfer, self.rmsd,
                self.unae_deg, self.chamfer_e6]


def cloud_metrics(denoised: np.ndarray, clean: PointCloud, k_n: int = 16) -> dict:
    out = {"chamfer": chamfer(denoised, clean.points), "rmsd": rmsd(denoised, clean.points)}
    out["unae_deg"] = unae(denoised, clean, k_n) if clean.normals is not None else float("nan")
    return out


def evaluate_cloud(model: GpdNet, noisy: PointCloud, clean: PointCloud, *, cloud_id: str = "",
                   sigma: float = float("nan"), graph_mode: str = "dynamic", k_n: int = 16,
                   checkpoint_id: str = "", with_baseline: bool = True) -> MetricsReport:
    """Whole-cloud inference followed by chamfer, RMSD and UNAE against ``clean``."""
    cfg = model.config
    if len(noisy) <= cfg.k:
        raise ContractError(f"cloud of {len(noisy)} points is too small for k={cfg.k}")
    denoised = model.denoise(noisy.points, graph_mode)
    m = cloud_metrics(denoised, clean, k_n)
    report = MetricsReport(cloud_id, sigma, cfg.k, graph_mode, m["chamfer"], m["rmsd"],
                           m["unae_deg"], checkpoint_id)
    if with_baseline:
        report.baseline = cloud_metrics(noisy.points, clean, k_n)
    return report


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    """Per-cloud rows, a mean row, and noisy-baseline columns when available."""
    has_base = any(r.baseline for r in reports)
    header = CSV_HEADER + (["noisy_chamfer", "noisy_chamfer_e6", "noisy_rmsd", "noisy_unae_deg"]
                           if has_base else [])
    rows = []
    for r in reports:
        row = r.row()
        if has_base:
            b = r.baseline
            row += [b.get("chamfer"), b.get("chamfer", float("nan")) * 1e6, b.get("rmsd"),
                    b.get("unae_deg")]
        rows.append(row)
    if reports:
        numeric = np.array([[float(v) for v in row[4:]] for row in rows])
        first = reports[0]
        rows.append(["mean", first.sigma, first.k, first.graph_mode] + list(numeric.mean(axis=0)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.9g" % v
    return v


# ---------------------------------------------------------------- receptive field

@dataclass
class ReceptiveFieldStat:
    block: int
    sizes: np.ndarray    # N x L, field size after each layer
    radii: np.ndarray    # N x L, 90th-percentile clean-space distance after each layer
    fields: list         # per layer, sparse N x N boolean membership

    @property
    def radius(self) -> np.ndarray:
        """Radius at the block output."""
        return self.radii[:, -1]


def nearest_rank_percentile(values: np.ndarray, q: float = 90.0) -> float:
    v = np.sort(np.asarray(values))
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def receptive_fields(graph: NeighborGraph, layers: int) -> list:
    """Membership after each layer: field_1 = self + neighbours, then grown through the graph."""
    n = graph.n_points
    adj = sparse.csr_matrix(
        (np.ones(graph.sources.size, dtype=np.int32), (graph.targets, graph.sources)), shape=(n, n))
    step = (adj + sparse.identity(n, dtype=np.int32, format="csr")).astype(bool).astype(np.int32)
    fields, current = [], step
    for _ in range(layers):
        fields.append(current.astype(bool).tocsr())
        current = (current @ step).astype(bool).astype(np.int32)
    return fields


def field_radii(field_matrix, clean_points: np.ndarray, q: float = 90.0) -> np.ndarray:
    m = field_matrix.tocsr()
    out = np.empty(m.shape[0])
    for i in range(m.shape[0]):
        members = m.indices[m.indptr[i]:m.indptr[i + 1]]
        d = np.sqrt(np.sum((clean_points[members] - clean_points[i]) ** 2, axis=1))
        out[i] = nearest_rank_percentile(d, q)
    return out


def receptive_field_stats(graph: NeighborGraph, clean_points: np.ndarray, layers: int,
                          block: int = 0) -> ReceptiveFieldStat:
    fields = receptive_fields(graph, layers)
    sizes = np.stack([np.diff(f.indptr) for f in fields], axis=1)
    radii = np.stack([field_radii(f, clean_points) for f in fields], axis=1)
    return ReceptiveFieldStat(block, sizes, radii, fields)


def receptive_field_radius(model: GpdNet, noisy: PointCloud, clean: PointCloud, block: int,
                           graph_mode: str = "dynamic") -> ReceptiveFieldStat:
    """Receptive field of every point at the output of ``block`` w.r.t. the block input."""
    cfg = model.config
    if not 0 <= block < cfg.blocks:
        raise ContractError(f"block index {block} out of range [0, {cfg.blocks})")
    clean_pts = _as_points(clean)
    if clean_pts.shape[0] != len(noisy):
        raise ContractError("clean cloud must be index-aligned with the noisy cloud")
    trace = ForwardTrace()
    model.forward(noisy.points, "eval", graph_mode, trace=trace)
    return receptive_field_stats(trace.graphs[block], clean_pts, cfg.layers_per_block, block)

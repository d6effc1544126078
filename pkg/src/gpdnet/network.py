"""The GPDNet denoiser.

Layout: three single-point convolutions (each followed by batch norm and
leaky ReLU) lift xyz into an F-dimensional feature space, two residual
blocks of three graph-convolutional layers refine it, and a last graph
convolution projects back to 3-D.  That projection is the noise estimate;
the network returns ``noisy - noise``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .graph import (NeighborGraph, SearchArea, build_feature_graph, build_fixed_graph,
                    build_search_areas)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
# initial noise estimates start near zero, i.e. the untrained net is close to identity
OUTPUT_GAIN = 0.01


@dataclass(frozen=True)
class GpdNetConfig:
    widths: tuple = (33, 66, 99)
    blocks: int = 2
    layers_per_block: int = 3
    rank: int = 11
    circulant_rows: int = 3
    delta: float = 10.0
    k: int = 16
    search_size: int = 32
    slope: float = 0.2
    hidden: int | None = None  # edge-MLP hidden width; None means the layer's input width

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ConfigError(f"invalid feature widths {self.widths}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 1 <= self.circulant_rows <= self.features:
            raise ConfigError(
                f"circulant rows must lie in [1, {self.features}], got {self.circulant_rows}")
        if self.k < 1 or self.k > self.search_size:
            raise ConfigError(f"need 1 <= k <= search_size, got k={self.k}, M={self.search_size}")
        if self.delta <= 0:
            raise ConfigError("attention decay delta must be positive")
        if self.blocks < 1 or self.layers_per_block < 1:
            raise ConfigError("need at least one residual block with one layer")

    @property
    def features(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GpdNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


PAPER_NET = GpdNetConfig()
DESK_NET = GpdNetConfig(widths=(8, 16, 24), rank=4, circulant_rows=2, k=8, search_size=24)


# ---------------------------------------------------------------- circulant stack

def circulant_index(d_out: int, d_in: int, m: int) -> np.ndarray:
    """Flat positions into a (blocks, m, d_in) generator array for each matrix entry.

    Rows come in blocks of ``d_in``.  Within a block, row ``j*q + s`` with
    ``q = ceil(d_in / m)`` and ``s < q`` is generator ``j`` cyclically shifted
    right by ``s``.
    """
    q = math.ceil(d_in / m)
    rows = np.arange(d_out)
    block, offset = rows // d_in, rows % d_in
    gen, shift = offset // q, offset % q
    cols = np.arange(d_in)
    src_col = (cols[None, :] - shift[:, None]) % d_in
    return ((block * m + gen)[:, None] * d_in + src_col).astype(np.intp)


def circulant_blocks(d_out: int, d_in: int) -> int:
    return math.ceil(d_out / d_in)


class CirculantStackLinear:
    """Linear map whose weight rows are cyclic shifts of a few generator rows."""

    def __init__(self, generators: Tensor, bias: Tensor, d_out: int):
        n_blocks, m, d_in = generators.shape
        if n_blocks != circulant_blocks(d_out, d_in):
            raise DimensionError(
                f"{n_blocks} generator blocks cannot cover {d_out} rows of width {d_in}")
        if bias.shape != (d_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match d_out={d_out}")
        self.generators = generators
        self.bias = bias
        self.d_out, self.d_in, self.m = d_out, d_in, m
        self._index = circulant_index(d_out, d_in, m)

    def matrix(self) -> Tensor:
        return ad.take(self.generators, self._index)

    def materialize(self) -> np.ndarray:
        return self.generators.data.reshape(-1)[self._index]

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"circulant layer expects width {self.d_in}, got {x.shape}")
        if x.data.ndim == 1:
            return ad.reshape(ad.linear(ad.reshape(x, (1, self.d_in)), self.matrix(), self.bias),
                              (self.d_out,))
        return ad.linear(x, self.matrix(), self.bias)

    def num_parameters(self) -> int:
        return self.generators.data.size + self.d_out


def circulant_matvec(layer: CirculantStackLinear, x) -> Tensor:
    return layer(x)


# ---------------------------------------------------------------- layers

def single_point_conv(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.linear(features, weight, bias)


def edge_attention(diff: Tensor, delta: float) -> Tensor:
    """exp(-||diff||^2 / delta) per edge."""
    if delta <= 0:
        raise ConfigError(f"attention decay must be positive, got {delta}")
    return ad.exp(ad.scale(ad.row_squared_norm(diff), -1.0 / delta))


@dataclass
class GraphConvParams:
    W: Tensor
    mlp_weight: Tensor
    mlp_bias: Tensor
    circulant: CirculantStackLinear
    rank: int

    @property
    def f_out(self) -> int:
        return self.W.shape[0]

    @property
    def f_in(self) -> int:
        return self.W.shape[1]


def edge_mlp(diff: Tensor, p: GraphConvParams, slope: float = 0.2):
    """Map per-edge feature differences to the rank-r factors (phi, psi, omega).

    The second layer's output is laid out as all phi blocks, then all psi
    blocks, then the r omega scalars.
    """
    e = diff.shape[0]
    r, fo, fi = p.rank, p.f_out, p.f_in
    out = edge_factors(diff, p, slope)
    phi = ad.reshape(ad.slice_cols(out, 0, r * fo), (e, r, fo))
    psi = ad.reshape(ad.slice_cols(out, r * fo, r * (fo + fi)), (e, r, fi))
    omega = ad.slice_cols(out, r * (fo + fi), r * (fo + fi + 1))
    return phi, psi, omega


def edge_factors(diff: Tensor, p: GraphConvParams, slope: float = 0.2) -> Tensor:
    """Packed edge-MLP output, one row per edge: r phi blocks, r psi blocks, r omegas."""
    hidden = ad.leaky_relu(ad.linear(diff, p.mlp_weight, p.mlp_bias), slope)
    return p.circulant(hidden)


def low_rank_aggregate(h_src: Tensor, packed: Tensor, gamma: Tensor, graph: NeighborGraph,
                       f_out: int, rank: int) -> Tensor:
    """Mean over incoming edges of gamma * sum_t omega_t phi_t (psi_t . h_src)."""
    msg = ad.low_rank_messages(packed, h_src, gamma, rank, f_out, h_src.shape[1])
    return ad.segment_mean(msg, graph.targets, graph.n_points)


def graph_conv(features: Tensor, graph: NeighborGraph, p: GraphConvParams, delta: float,
               slope: float = 0.2) -> Tensor:
    n = features.shape[0]
    if graph.n_points != n:
        raise DimensionError(f"graph has {graph.n_points} nodes but features have {n} rows")
    if features.shape[1] != p.f_in:
        raise DimensionError(f"layer expects {p.f_in} input features, got {features.shape[1]}")
    h_src = ad.gather_rows(features, graph.sources)
    diff = ad.sub(ad.repeat_rows(features, graph.k), h_src)
    gamma = edge_attention(diff, delta)
    packed = edge_factors(diff, p, slope)
    agg = low_rank_aggregate(h_src, packed, gamma, graph, p.f_out, p.rank)
    return ad.add(ad.linear(features, p.W), agg)


# ---------------------------------------------------------------- parameters

def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def _add_bn(store: ParameterStore, prefix: str, width: int) -> None:
    store.add(f"{prefix}.bn.scale", np.ones(width))
    store.add(f"{prefix}.bn.shift", np.zeros(width))
    store.add_buffer(f"{prefix}.bn.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.bn.running_var", np.ones(width))


def _add_graph_conv(store: ParameterStore, prefix: str, f_in: int, f_out: int,
                    config: GpdNetConfig, rng, gain: float = 1.0) -> None:
    hidden = config.hidden or f_in
    d_out = config.rank * (f_out + f_in + 1)
    nb = circulant_blocks(d_out, hidden)
    store.add(f"{prefix}.W", gain * _glorot(rng, (f_out, f_in), f_in, f_out))
    store.add(f"{prefix}.mlp1.weight", _glorot(rng, (hidden, f_in), f_in, hidden))
    store.add(f"{prefix}.mlp1.bias", np.zeros(hidden))
    store.add(f"{prefix}.mlp2.generators",
              gain * _glorot(rng, (nb, config.circulant_rows, hidden), hidden, d_out))
    store.add(f"{prefix}.mlp2.bias", np.zeros(d_out))


def layer_names(config: GpdNetConfig) -> list[str]:
    names = [f"sp{i}" for i in range(len(config.widths))]
    names += [f"block{b}.gc{l}" for b in range(config.blocks) for l in range(config.layers_per_block)]
    return names + ["out"]


def init_params(config: GpdNetConfig, seed=0) -> ParameterStore:
    """Fan-based uniform weights, zero biases, unit batch-norm scale."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParameterStore()
    width_in = 3
    for i, w in enumerate(config.widths):
        store.add(f"sp{i}.weight", _glorot(rng, (w, width_in), width_in, w))
        store.add(f"sp{i}.bias", np.zeros(w))
        _add_bn(store, f"sp{i}", w)
        width_in = w
    f = config.features
    for b in range(config.blocks):
        for l in range(config.layers_per_block):
            prefix = f"block{b}.gc{l}"
            _add_graph_conv(store, prefix, f, f, config, rng)
            _add_bn(store, prefix, f)
    _add_graph_conv(store, "out", f, 3, config, rng, OUTPUT_GAIN)
    return store


def zero_params(config: GpdNetConfig) -> ParameterStore:
    """Every learnable tensor zero (batch-norm scale included); running stats at their defaults."""
    store = init_params(config, 0)
    for _, t in store.items():
        t.data[...] = 0
    return store


def parameter_count(config: GpdNetConfig) -> int:
    total, width_in = 0, 3
    for w in config.widths:
        total += w * width_in + w + 2 * w
        width_in = w
    f = config.features

    def gc(f_in, f_out):
        hidden = config.hidden or f_in
        d_out = config.rank * (f_out + f_in + 1)
        return (f_out * f_in + hidden * f_in + hidden
                + circulant_blocks(d_out, hidden) * config.circulant_rows * hidden + d_out)

    total += config.blocks * config.layers_per_block * (gc(f, f) + 2 * f)
    return total + gc(f, 3)


def graph_conv_params(store: ParameterStore, prefix: str, rank: int) -> GraphConvParams:
    W = store[f"{prefix}.W"]
    bias = store[f"{prefix}.mlp2.bias"]
    return GraphConvParams(
        W=W,
        mlp_weight=store[f"{prefix}.mlp1.weight"],
        mlp_bias=store[f"{prefix}.mlp1.bias"],
        circulant=CirculantStackLinear(store[f"{prefix}.mlp2.generators"], bias, bias.shape[0]),
        rank=rank,
    )


def _bn(h: Tensor, store: ParameterStore, prefix: str, training: bool) -> Tensor:
    return ad.batch_norm(h, store[f"{prefix}.bn.scale"], store[f"{prefix}.bn.shift"],
                         store.buffers[f"{prefix}.bn.running_mean"],
                         store.buffers[f"{prefix}.bn.running_var"],
                         training, BN_MOMENTUM, BN_EPS)


def residual_block(features: Tensor, graph: NeighborGraph, store: ParameterStore, block: int,
                   config: GpdNetConfig, training: bool) -> Tensor:
    """Graph conv, batch norm and leaky ReLU, repeated, with an input-output skip."""
    h = features
    for l in range(config.layers_per_block):
        prefix = f"block{block}.gc{l}"
        h = graph_conv(h, graph, graph_conv_params(store, prefix, config.rank), config.delta,
                       config.slope)
        h = ad.leaky_relu(_bn(h, store, prefix, training), config.slope)
    return ad.add(features, h)


# ---------------------------------------------------------------- full model

@dataclass
class ForwardTrace:
    """Graphs and search areas used by one forward pass."""
    graphs: list = field(default_factory=list)
    areas: SearchArea | None = None
    block_inputs: list = field(default_factory=list)


def gpdnet_forward(noisy, config: GpdNetConfig, params: ParameterStore, mode: str = "eval",
                   graph_mode: str = "dynamic", segments: Sequence[int] | None = None,
                   graphs: Sequence[NeighborGraph] | None = None,
                   trace: ForwardTrace | None = None) -> Tensor:
    """Denoise ``noisy`` (N x 3, possibly several clouds concatenated per ``segments``).

    Passing ``graphs`` (one per residual block) freezes the neighbour
    selection, which gradient checks rely on.
    """
    x, noise = estimate_noise(noisy, config, params, mode, graph_mode, segments, graphs, trace)
    return ad.sub(x, noise)


def estimate_noise(noisy, config: GpdNetConfig, params: ParameterStore, mode: str = "eval",
                   graph_mode: str = "dynamic", segments: Sequence[int] | None = None,
                   graphs: Sequence[NeighborGraph] | None = None,
                   trace: ForwardTrace | None = None) -> tuple[Tensor, Tensor]:
    """Input tensor and the network's noise estimate for it."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if graph_mode not in ("dynamic", "fixed"):
        raise ConfigError(f"graph_mode must be 'dynamic' or 'fixed', got {graph_mode!r}")
    points = np.asarray(getattr(noisy, "data", noisy))
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"expected N x 3 input, got {points.shape}")
    sizes = list(segments) if segments is not None else [points.shape[0]]
    if min(sizes) <= config.k:
        raise ContractError(f"each cloud needs more than k={config.k} points, got {min(sizes)}")
    training = mode == "train"
    dtype = next(iter(params.items()))[1].dtype
    x = Tensor(points.astype(dtype))

    h = x
    for i in range(len(config.widths)):
        h = single_point_conv(h, params[f"sp{i}.weight"], params[f"sp{i}.bias"])
        h = ad.leaky_relu(_bn(h, params, f"sp{i}", training), config.slope)

    areas = None
    fixed = None
    if graphs is None:
        if graph_mode == "fixed":
            fixed = build_fixed_graph(points, config.k, sizes)
        else:
            areas = build_search_areas(points, config.search_size, config.k, sizes)
    elif len(graphs) != config.blocks:
        raise ContractError(f"need {config.blocks} frozen graphs, got {len(graphs)}")
    if trace is not None:
        trace.areas = areas

    graph = None
    for b in range(config.blocks):
        if graphs is not None:
            graph = graphs[b]
        elif fixed is not None:
            graph = fixed
        else:
            graph = build_feature_graph(h.data, areas, config.k)
        if trace is not None:
            trace.graphs.append(graph)
            trace.block_inputs.append(h.data)
        h = residual_block(h, graph, params, b, config, training)

    noise = graph_conv(h, graph, graph_conv_params(params, "out", config.rank), config.delta,
                       config.slope)
    return x, noise


class GpdNet:
    """Convenience wrapper bundling a configuration with its parameters."""

    def __init__(self, config: GpdNetConfig, params: ParameterStore | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, noisy, mode="eval", graph_mode="dynamic", **kwargs) -> Tensor:
        return gpdnet_forward(noisy, self.config, self.params, mode, graph_mode, **kwargs)

    def denoise(self, points: np.ndarray, graph_mode: str = "dynamic",
                trace: ForwardTrace | None = None) -> np.ndarray:
        """Eval-mode inference; the residual subtraction happens in float64."""
        points = np.asarray(points, dtype=np.float64)
        _, noise = estimate_noise(points, self.config, self.params, "eval", graph_mode, trace=trace)
        return points - noise.data.astype(np.float64)

"""Losses, patch batching and the supervised training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParameterStore, Tensor
from .errors import ConfigError, ContractError, NumericError
from .geometry import PointCloud, SpatialIndex, add_gaussian_noise, extract_patch
from .network import GpdNetConfig, gpdnet_forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    sigma: float = 0.02
    batch_size: int = 16
    patch_size: int = 1024
    iterations: int = 1000
    lr: float = 1e-4
    loss: str = "mse"          # "mse" or "mse-sp"
    lam: float = 1.0           # surface-proximity weight
    seed: int = 0
    checkpoint_interval: int = 0
    graph_mode: str = "dynamic"
    fresh_noise: bool = False
    lr_drop_at: int = 0        # iteration after which lr is scaled by lr_drop; 0 keeps it fixed
    lr_drop: float = 0.1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.loss not in ("mse", "mse-sp"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.graph_mode not in ("dynamic", "fixed"):
            raise ConfigError(f"unknown graph mode {self.graph_mode!r}")
        if self.lr <= 0 or not 0 < self.lr_drop <= 1 or self.lr_drop_at < 0:
            raise ConfigError("need lr > 0, 0 < lr_drop <= 1 and lr_drop_at >= 0")

    def learning_rate(self, iteration: int) -> float:
        """Step size for the update that produces iteration ``iteration + 1``."""
        if self.lr_drop_at and iteration >= self.lr_drop_at:
            return self.lr * self.lr_drop
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_TRAIN = TrainingConfig()
DESK_TRAIN = TrainingConfig(batch_size=4, patch_size=256, iterations=8000, lr=1e-3,
                            lr_drop_at=6000, fresh_noise=True)


# ---------------------------------------------------------------- losses

def _check_aligned(denoised, clean: np.ndarray) -> None:
    n = denoised.shape[0]
    if clean.shape != (n, 3):
        raise ContractError(f"denoised has {n} points but clean has shape {clean.shape}")


def loss_mse(denoised: Tensor, clean: np.ndarray) -> Tensor:
    """Mean over points of the squared distance to the aligned clean point."""
    denoised = ad.as_tensor(denoised)
    clean = np.asarray(clean)
    _check_aligned(denoised, clean)
    diff = ad.sub(denoised, Tensor(clean, dtype=denoised.dtype))
    return ad.mean(ad.row_squared_norm(diff))


def nearest_clean(points: np.ndarray, clean: np.ndarray,
                  segments: Sequence[int] | None = None) -> np.ndarray:
    """Index of the nearest clean point for every point, searched within its own segment."""
    sizes = list(segments) if segments is not None else [points.shape[0]]
    out, start = [], 0
    for size in sizes:
        idx, _ = SpatialIndex(clean[start:start + size]).nearest(points[start:start + size])
        out.append(idx + start)
        start += size
    return np.concatenate(out)


def loss_mse_sp(denoised: Tensor, clean: np.ndarray, lam: float,
                segments: Sequence[int] | None = None,
                assignment: np.ndarray | None = None) -> Tensor:
    """MSE plus ``lam`` times the squared distance to the nearest clean point.

    The nearest-point assignment is a fixed index array; gradients flow to the
    denoised points through the selected clean points only.
    """
    denoised = ad.as_tensor(denoised)
    clean = np.asarray(clean)
    _check_aligned(denoised, clean)
    mse = loss_mse(denoised, clean)
    if lam == 0:
        return mse
    if assignment is None:
        assignment = nearest_clean(denoised.data.astype(np.float64), clean, segments)
    target = Tensor(clean[assignment], dtype=denoised.dtype)
    sp = ad.mean(ad.row_squared_norm(ad.sub(denoised, target)))
    return ad.add(mse, ad.scale(sp, lam))


def compute_loss(denoised: Tensor, clean: np.ndarray, config: TrainingConfig,
                 segments=None) -> Tensor:
    if config.loss == "mse":
        return loss_mse(denoised, clean)
    return loss_mse_sp(denoised, clean, config.lam, segments)


# ---------------------------------------------------------------- batching

class PatchSampler:
    """Draws training patches; caches one spatial index per cloud."""

    def __init__(self, dataset: Sequence[PointCloud], patch_size: int):
        if not dataset:
            raise ContractError("the training dataset is empty")
        for i, pc in enumerate(dataset):
            if len(pc) < patch_size:
                raise ContractError(
                    f"cloud {i} has {len(pc)} points, fewer than the patch size {patch_size}")
            if pc.clean_reference is None:
                raise ContractError(f"cloud {i} has no clean reference")
        self.dataset = list(dataset)
        self.patch_size = patch_size
        self._indices: dict[int, SpatialIndex] = {}

    def index(self, i: int) -> SpatialIndex:
        if i not in self._indices:
            self._indices[i] = SpatialIndex(self.dataset[i].points)
        return self._indices[i]

    def sample(self, batch_size: int, rng: np.random.Generator,
               fresh_noise_sigma: float | None = None) -> list[PointCloud]:
        patches = []
        for _ in range(batch_size):
            i = int(rng.integers(len(self.dataset)))
            pc = self.dataset[i]
            center = int(rng.integers(len(pc)))
            if fresh_noise_sigma is not None:
                clean = PointCloud(pc.clean_reference)
                renoised = add_gaussian_noise(clean, fresh_noise_sigma, rng)
                patch = extract_patch(renoised, center, self.patch_size)
            else:
                patch = extract_patch(pc, center, self.patch_size, self.index(i))
            patches.append(patch)
        return patches


def make_batch(dataset: Sequence[PointCloud], config: TrainingConfig, rng: np.random.Generator,
               sampler: PatchSampler | None = None) -> list[PointCloud]:
    sampler = sampler or PatchSampler(dataset, config.patch_size)
    sigma = config.sigma if config.fresh_noise else None
    return sampler.sample(config.batch_size, rng, sigma)


# ---------------------------------------------------------------- loop

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for everything the training loop draws."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class TrainState:
    net_config: GpdNetConfig
    train_config: TrainingConfig
    params: ParameterStore
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0


@dataclass
class LossRecord:
    iteration: int
    loss: float
    seconds: float


def init_state(net_config: GpdNetConfig, train_config: TrainingConfig) -> TrainState:
    rng = make_rng(train_config.seed)
    init_rng = np.random.default_rng(train_config.seed)
    params = init_params(net_config, init_rng)
    return TrainState(net_config, train_config, params, Adam(lr=train_config.lr), rng)


def train_step(state: TrainState, sampler: PatchSampler) -> float:
    cfg = state.train_config
    patches = sampler.sample(cfg.batch_size, state.rng, cfg.sigma if cfg.fresh_noise else None)
    noisy = np.concatenate([p.points for p in patches])
    clean = np.concatenate([p.clean_reference for p in patches])
    segments = [len(p) for p in patches]
    denoised = gpdnet_forward(noisy, state.net_config, state.params, "train", cfg.graph_mode,
                              segments=segments)
    # equal patch sizes make the pooled mean equal to the batch average of patch losses
    loss = compute_loss(denoised, clean, cfg, segments)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss at iteration {state.iteration + 1}")
    state.params.zero_grad()
    loss.backward()
    state.optimizer.lr = cfg.learning_rate(state.iteration)
    state.optimizer.step(state.params)
    state.iteration += 1
    return value


def train(dataset: Sequence[PointCloud], net_config: GpdNetConfig, train_config: TrainingConfig,
          state: TrainState | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None,
          on_step: Callable[[LossRecord], None] | None = None):
    """Run (or resume) training until ``train_config.iterations`` is reached.

    Returns the final state and the list of loss records for the iterations
    run in this call.
    """
    if state is None:
        state = init_state(net_config, train_config)
    sampler = PatchSampler(dataset, train_config.patch_size)
    trace: list[LossRecord] = []
    start = time.perf_counter()
    interval = train_config.checkpoint_interval
    while state.iteration < train_config.iterations:
        value = train_step(state, sampler)
        rec = LossRecord(state.iteration, value, time.perf_counter() - start)
        trace.append(rec)
        if on_step is not None:
            on_step(rec)
        if state.iteration % 100 == 0:
            log.info("iteration %d loss %.6g", state.iteration, value)
        if on_checkpoint is not None and interval > 0 and state.iteration % interval == 0:
            on_checkpoint(state)
    return state, trace


def build_dataset(clean_clouds: Sequence[PointCloud], sigma: float, seed) -> list[PointCloud]:
    """One fixed noisy realization per clean cloud."""
    rng = make_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    return [add_gaussian_noise(pc, sigma, rng) for pc in clean_clouds]


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")

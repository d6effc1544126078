"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest gradient magnitude."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)),
                float(np.max(np.abs(analytic), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _projection(out: np.ndarray, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(out.shape)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_op(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-4,
             seed: int = 0) -> list[float]:
    """Relative error of ``fn``'s analytic gradient for every input array.

    Non-scalar outputs are reduced with a fixed random projection.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.precision(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        weights = _projection(out.data, seed)
        ad.sum(ad.mul(out, weights)).backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def scalar():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

        errors = []
        for a, g in zip(arrays, analytic):
            errors.append(relative_error(g, numeric_gradient(scalar, a, h)))
    return errors


@dataclass
class ParamCheck:
    analytic: dict
    numeric: dict

    @property
    def overall(self) -> float:
        """Relative error of the whole parameter gradient taken as one vector."""
        a = np.concatenate([g.ravel() for g in self.analytic.values()])
        n = np.concatenate([g.ravel() for g in self.numeric.values()])
        return relative_error(a, n)

    def per_tensor(self) -> dict[str, float]:
        return {k: relative_error(self.analytic[k], self.numeric[k]) for k in self.analytic}


def check_params(loss_fn: Callable[[ParameterStore], Tensor], params: ParameterStore,
                 h: float = 1e-4) -> ParamCheck:
    """Analytic and central-difference gradients of a scalar loss built from ``params``.

    ``params`` should already be float64 (see :meth:`ParameterStore.astype`).
    """
    with ad.precision(np.float64):
        params.zero_grad()
        loss_fn(params).backward()
        analytic = {name: t.grad.copy() for name, t in params.items()}

        def scalar():
            return float(loss_fn(params).data)

        numeric = {name: numeric_gradient(scalar, t.data, h) for name, t in params.items()}
    return ParamCheck(analytic, numeric)

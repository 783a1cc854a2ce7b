"""Symmetric positive kernels used by the MMD potential and interaction energies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _pairwise_diff(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return x[:, None, :] - y[None, :, :]


@dataclass(frozen=True)
class GaussianKernel:
    """k(x, y) = exp(-||x - y||^2 / (2 l^2)).

    All methods take batches ``x`` of shape (n, d) and ``y`` of shape (m, d).
    """

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def lipschitz_grad(self) -> float:
        # sup of the spectral norm of the x-Hessian, attained at x = y
        return 1.0 / self.bandwidth**2

    def value(self, x, y):
        diff = _pairwise_diff(np.asarray(x, float), np.asarray(y, float))
        return np.exp(-0.5 * np.einsum("nmd,nmd->nm", diff, diff) / self.bandwidth**2)

    def grad_x(self, x, y):
        diff = _pairwise_diff(np.asarray(x, float), np.asarray(y, float))
        k = np.exp(-0.5 * np.einsum("nmd,nmd->nm", diff, diff) / self.bandwidth**2)
        return -diff * (k / self.bandwidth**2)[..., None]

    def hess_x(self, x, y):
        diff = _pairwise_diff(np.asarray(x, float), np.asarray(y, float))
        l2 = self.bandwidth**2
        k = np.exp(-0.5 * np.einsum("nmd,nmd->nm", diff, diff) / l2)
        eye = np.eye(diff.shape[-1])
        outer = diff[..., :, None] * diff[..., None, :]
        return k[..., None, None] * (outer / l2**2 - eye / l2)


@dataclass(frozen=True)
class ConstantKernel:
    """k(x, y) = c. Useful as a degenerate test case."""

    c: float = 1.0

    @property
    def lipschitz_grad(self) -> float:
        return 0.0

    def value(self, x, y):
        return np.full((len(x), len(y)), float(self.c))

    def grad_x(self, x, y):
        x = np.asarray(x, float)
        return np.zeros((len(x), len(y), x.shape[1]))

    def hess_x(self, x, y):
        x = np.asarray(x, float)
        d = x.shape[1]
        return np.zeros((len(x), len(y), d, d))


KERNELS = {"gaussian": GaussianKernel, "constant": ConstantKernel}


def build_kernel(spec: dict):
    """Construct a kernel from ``{"name": ..., "params": {...}}``."""
    name = spec.get("name")
    if name not in KERNELS:
        raise ValueError(f"unknown kernel {name!r}; expected one of {sorted(KERNELS)}")
    return KERNELS[name](**spec.get("params", {}))

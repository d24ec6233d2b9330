"""Small neural building blocks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight matrix via sign-corrected QR of a Gaussian draw."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Linear:
    """Affine layer x @ W + b with orthogonal W and zero b."""

    def __init__(self, registry: ParameterRegistry, group: str, name: str,
                 in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 1.0):
        self.w = registry.register(group, f"{name}.w", Tensor(orthogonal(rng, in_dim, out_dim, gain)))
        self.b = registry.register(group, f"{name}.b", Tensor(np.zeros(out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class MLP:
    """Stack of Linear layers with tanh between them (none after the last)."""

    def __init__(self, registry, group, name, in_dim, hidden, out_dim, rng, gain=1.0):
        dims = [in_dim, *hidden, out_dim]
        self.layers = [
            Linear(registry, group, f"{name}.l{i}", dims[i], dims[i + 1], rng, gain)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x

"""Low-rank adapted linear maps.

A frozen weight matrix W gets a trainable update B A of rank r. B starts at
zero, so a freshly initialized layer computes exactly the frozen forward.
"""
from __future__ import annotations

from typing import Optional

import numpy as np


class AdapterError(ValueError):
    """Shape or numerical error in adapter layers."""


class LoraLayer:
    """y = W x + B (A x), with W frozen and A, B trainable.

    The update is always applied as two rank-r products; the dense B A
    matrix is never materialized.
    """

    def __init__(
        self,
        W: np.ndarray,
        rank: int,
        rng: np.random.Generator,
        bias: Optional[np.ndarray] = None,
    ) -> None:
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise AdapterError(f"weight must be 2-d, got shape {W.shape}")
        d_out, d_in = W.shape
        if not (1 <= rank <= min(d_out, d_in)):
            raise AdapterError(f"rank {rank} invalid for {d_out}x{d_in} weight")
        self.W = W
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.rank = rank
        # A ~ N(0, 1/r), B = 0: forward equals the frozen forward at init.
        self.A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, d_in))
        self.B = np.zeros((d_out, rank))
        self.grad_A = np.zeros_like(self.A)
        self.grad_B = np.zeros_like(self.B)

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Apply to a (n, d_in) batch or a single (d_in,) vector."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.d_in:
            raise AdapterError(f"input width {x.shape[1]} != layer width {self.d_in}")
        y = x @ self.W.T + (x @ self.A.T) @ self.B.T
        if self.bias is not None:
            y = y + self.bias
        return y[0] if single else y

    def forward_frozen(self, x: np.ndarray) -> np.ndarray:
        """Frozen-path forward (W only), for adapter-neutrality baselines."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        y = x @ self.W.T
        if self.bias is not None:
            y = y + self.bias
        return y[0] if single else y

    def backward(self, x: np.ndarray, d_y: np.ndarray) -> np.ndarray:
        """Accumulate grads on A and B; return d_loss/d_x. W gets none."""
        x = np.asarray(x, dtype=np.float64)
        d_y = np.asarray(d_y, dtype=np.float64)
        if x.ndim == 1:
            x, d_y = x[None, :], d_y[None, :]
        t = x @ self.A.T  # (n, r)
        d_t = d_y @ self.B  # (n, r)
        self.grad_B += d_y.T @ t
        self.grad_A += d_t.T @ x
        return d_y @ self.W + d_t @ self.A

    def zero_grad(self) -> None:
        self.grad_A.fill(0.0)
        self.grad_B.fill(0.0)

    def trainables(self):
        yield "A", self.A, self.grad_A
        yield "B", self.B, self.grad_B


def lora_forward(layer: LoraLayer, x: np.ndarray) -> np.ndarray:
    """Functional alias for LoraLayer.forward."""
    return layer.forward(x)

"""Multi-head self-attention block with LoRA on the query/value projections.

Post-norm residual layout: y = LayerNorm(x + MHA(x)). Only the Q and V
projections carry adapters; K and the output projection stay frozen.
"""
from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

from .lora import AdapterError, LoraLayer

LN_EPS = 1e-5


def softmax(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis."""
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_forward(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray
) -> Tuple[np.ndarray, Dict]:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = centered * inv_std
    return gamma * x_hat + beta, {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma}


def layer_norm_backward(d_y: np.ndarray, cache: Dict) -> np.ndarray:
    x_hat, inv_std, gamma = cache["x_hat"], cache["inv_std"], cache["gamma"]
    d = x_hat.shape[-1]
    d_xhat = d_y * gamma
    # dx = inv_std * (d_xhat - mean(d_xhat) - x_hat * mean(d_xhat * x_hat))
    return inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
    )


class ToyAttentionBlock:
    """One encoder block at toy scale."""

    def __init__(self, d_model: int, n_heads: int, rank: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise AdapterError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        scale = 1.0 / math.sqrt(d_model)
        self.W_K = rng.normal(0.0, scale, size=(d_model, d_model))
        self.W_O = rng.normal(0.0, scale, size=(d_model, d_model))
        W_Q = rng.normal(0.0, scale, size=(d_model, d_model))
        W_V = rng.normal(0.0, scale, size=(d_model, d_model))
        self.lora_q = LoraLayer(W_Q, rank, rng)
        self.lora_v = LoraLayer(W_V, rank, rng)
        self.ln_gamma = np.ones(d_model)
        self.ln_beta = np.zeros(d_model)

    def _split(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        return x.reshape(n, self.n_heads, self.d_k).transpose(1, 0, 2)  # (H, n, d_k)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        h, n, d_k = x.shape
        return x.transpose(1, 0, 2).reshape(n, h * d_k)

    def forward(self, x: np.ndarray, frozen: bool = False) -> Tuple[np.ndarray, Dict]:
        q_layer = self.lora_q.forward_frozen if frozen else self.lora_q.forward
        v_layer = self.lora_v.forward_frozen if frozen else self.lora_v.forward
        Q = q_layer(x)
        K = x @ self.W_K.T
        V = v_layer(x)
        Qh, Kh, Vh = self._split(Q), self._split(K), self._split(V)
        S = Qh @ Kh.transpose(0, 2, 1) / math.sqrt(self.d_k)  # (H, n, n)
        P = softmax(S)
        Oh = P @ Vh
        O = self._merge(Oh)
        attn = O @ self.W_O.T
        z = x + attn
        y, ln_cache = layer_norm_forward(z, self.ln_gamma, self.ln_beta)
        cache = {"x": x, "Qh": Qh, "Kh": Kh, "Vh": Vh, "P": P, "ln": ln_cache}
        return y, cache

    def backward(self, d_y: np.ndarray, cache: Dict) -> np.ndarray:
        x, Qh, Kh, Vh, P = cache["x"], cache["Qh"], cache["Kh"], cache["Vh"], cache["P"]
        d_z = layer_norm_backward(d_y, cache["ln"])
        d_attn = d_z
        d_O = d_attn @ self.W_O
        d_Oh = self._split(d_O)
        d_P = d_Oh @ Vh.transpose(0, 2, 1)
        d_Vh = P.transpose(0, 2, 1) @ d_Oh
        d_S = P * (d_P - (d_P * P).sum(axis=-1, keepdims=True))
        inv_sqrt = 1.0 / math.sqrt(self.d_k)
        d_Qh = d_S @ Kh * inv_sqrt
        d_Kh = d_S.transpose(0, 2, 1) @ Qh * inv_sqrt
        d_Q, d_K, d_V = self._merge(d_Qh), self._merge(d_Kh), self._merge(d_Vh)
        d_x = d_z.copy()  # residual branch
        d_x += self.lora_q.backward(x, d_Q)
        d_x += d_K @ self.W_K
        d_x += self.lora_v.backward(x, d_V)
        return d_x

    def zero_grad(self) -> None:
        self.lora_q.zero_grad()
        self.lora_v.zero_grad()

    def trainables(self, prefix: str):
        for name, p, g in self.lora_q.trainables():
            yield f"{prefix}.lora_q.{name}", p, g
        for name, p, g in self.lora_v.trainables():
            yield f"{prefix}.lora_v.{name}", p, g

    def frozen_arrays(self, prefix: str):
        yield f"{prefix}.W_Q", self.lora_q.W
        yield f"{prefix}.W_K", self.W_K
        yield f"{prefix}.W_V", self.lora_v.W
        yield f"{prefix}.W_O", self.W_O
        yield f"{prefix}.ln_gamma", self.ln_gamma
        yield f"{prefix}.ln_beta", self.ln_beta


def attention_forward(block: ToyAttentionBlock, tokens: np.ndarray) -> np.ndarray:
    """Functional forward pass over an (n, d_model) token matrix."""
    y, _ = block.forward(np.asarray(tokens, dtype=np.float64))
    return y

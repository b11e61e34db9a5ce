"""Positional encoding and the residual convolutional encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: (t, 2i) = sin(t / 10000^(2i/d)), (t, 2i+1) = cos(...)."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    t = np.arange(length, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(t / rate)
    pe[:, 1::2] = np.cos(t / rate)
    return pe


@dataclass
class EncoderParams:
    """N blocks of L x [LayerNorm -> conv -> ReLU] with residuals, then a LayerNorm."""

    ln_gamma: list[Tensor]
    ln_beta: list[Tensor]
    kernels: list[Tensor]
    biases: list[Tensor]
    out_gamma: list[Tensor]
    out_beta: list[Tensor]
    L: int = 2
    N: int = 1

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, L: int = 2, N: int = 1, k: int = 3):
        if k % 2 == 0:
            raise ValueError("encoder kernel width must be odd")
        n = L * N
        return cls(
            ln_gamma=[Tensor(np.ones(d, np.float32), True) for _ in range(n)],
            ln_beta=[Tensor(np.zeros(d, np.float32), True) for _ in range(n)],
            kernels=[Tensor(T.glorot(rng, (k, d, d), k * d, k * d), True) for _ in range(n)],
            biases=[Tensor(np.zeros(d, np.float32), True) for _ in range(n)],
            out_gamma=[Tensor(np.ones(d, np.float32), True) for _ in range(N)],
            out_beta=[Tensor(np.zeros(d, np.float32), True) for _ in range(N)],
            L=L, N=N,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for b in range(self.N):
            for i in range(self.L):
                j = b * self.L + i
                out[f"{prefix}.b{b}.conv{i}.ln_gamma"] = self.ln_gamma[j]
                out[f"{prefix}.b{b}.conv{i}.ln_beta"] = self.ln_beta[j]
                out[f"{prefix}.b{b}.conv{i}.kernel"] = self.kernels[j]
                out[f"{prefix}.b{b}.conv{i}.bias"] = self.biases[j]
            out[f"{prefix}.b{b}.out_gamma"] = self.out_gamma[b]
            out[f"{prefix}.b{b}.out_beta"] = self.out_beta[b]
        return out


def conv_encoder(x: Tensor, params: EncoderParams, train: bool = False,
                 mask: np.ndarray | None = None, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Encode a (..., T, d) sequence; ``mask`` (..., T) marks valid positions.

    Padded positions are zeroed before every convolution so they behave like
    the convolution's own zero padding, which keeps valid outputs independent
    of how much padding follows them.
    """
    d = x.shape[-1]
    if d != params.kernels[0].shape[1]:
        raise ValueError(f"encoder expects width {params.kernels[0].shape[1]}, got {d}")
    keep = None if mask is None else np.asarray(mask, dtype=x.dtype)[..., None]
    h = x + positional_encoding(x.shape[-2], d).astype(x.dtype)
    for b in range(params.N):
        for i in range(params.L):
            j = b * params.L + i
            y = T.layer_norm(h, params.ln_gamma[j], params.ln_beta[j])
            if keep is not None:
                y = y * keep
            y = T.relu(T.conv1d_same(y, params.kernels[j], params.biases[j]))
            y = T.dropout(y, dropout, train, rng)
            h = h + y
        h = T.layer_norm(h, params.out_gamma[b], params.out_beta[b])
    return h

"""Self-cross integration of the video- and dense-caption-fused frame streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SelfAttnParams:
    """Projections are stored as d x d blocks; columns [h*d_h, (h+1)*d_h) belong to head h."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_m: Tensor
    heads: int = 4
    residual: bool = False
    ln_gamma: Tensor | None = None
    ln_beta: Tensor | None = None

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, heads: int = 4, residual: bool = False):
        if d % heads:
            raise ValueError(f"{heads} heads do not divide width {d}")
        mats = [Tensor(T.glorot(rng, (d, d), d, d), True) for _ in range(4)]
        gamma = beta = None
        if residual:
            gamma = Tensor(np.ones(d, np.float32), True)
            beta = Tensor(np.zeros(d, np.float32), True)
        return cls(*mats, heads=heads, residual=residual, ln_gamma=gamma, ln_beta=beta)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
               f"{prefix}.w_v": self.w_v, f"{prefix}.w_m": self.w_m}
        if self.residual:
            out[f"{prefix}.ln_gamma"] = self.ln_gamma
            out[f"{prefix}.ln_beta"] = self.ln_beta
        return out


def multi_head_self_attention(x: Tensor, params: SelfAttnParams,
                              trace: dict | None = None) -> Tensor:
    """Scaled dot-product self-attention over axis -2 of a (..., T, d) input."""
    d = x.shape[-1]
    H = params.heads
    if d % H:
        raise ValueError(f"{H} heads do not divide width {d}")
    dh = d // H
    lead, n = x.shape[:-2], x.shape[-2]

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, lead + (n, H, dh))
        nd = len(lead)
        return T.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))   # (..., H, T, dh)

    q = split(T.matmul(x, params.w_q))
    k = split(T.matmul(x, params.w_k))
    v = split(T.matmul(x, params.w_v))
    weights = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
    heads = T.matmul(weights, v)                                          # (..., H, T, dh)
    nd = len(lead)
    heads = T.transpose(heads, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    y = T.matmul(T.reshape(heads, lead + (n, d)), params.w_m)
    if trace is not None:
        trace["self_attention"] = weights.data
    if params.residual:
        y = T.layer_norm(y + x, params.ln_gamma, params.ln_beta)
    return y


def integrate_streams(u_sv: Tensor, u_sd: Tensor, params: SelfAttnParams,
                      trace: dict | None = None) -> Tensor:
    """Self-attend over [video stream; caption stream] and add the two halves."""
    if u_sv.shape[-2] != u_sd.shape[-2]:
        raise ValueError(f"integrate_streams: frame counts differ ({u_sv.shape[-2]} vs {u_sd.shape[-2]})")
    n = u_sv.shape[-2]
    both = multi_head_self_attention(T.concat([u_sv, u_sd], axis=-2), params, trace)
    return both[..., :n, :] + both[..., n:, :]

"""Frame-selection gates and the answer classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderParams, conv_encoder
from .tensor import Dense, Tensor

NUM_ANSWERS = 5


@dataclass
class GateParams:
    encoder: EncoderParams
    local: Dense      # d -> 1, supervised by frame labels
    glob: Dense       # d -> 1, trained by the answer loss only
    hidden: Dense     # 3d -> d
    out: Dense        # d -> 1

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, L: int = 2, N: int = 1, k: int = 3):
        return cls(EncoderParams.init(d, rng, L, N, k), Dense.init(rng, d, 1), Dense.init(rng, d, 1),
                   Dense.init(rng, 3 * d, d), Dense.init(rng, d, 1))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.encoder.named(f"{prefix}.en2"), **self.local.named(f"{prefix}.f_local"),
                **self.glob.named(f"{prefix}.f_global"), **self.hidden.named(f"{prefix}.cls_hidden"),
                **self.out.named(f"{prefix}.cls_out")}


@dataclass
class GatedFeatures:
    z_max: Tensor               # (..., d)
    z_gg_pooled: Tensor         # (..., d)
    z_gl_pooled: Tensor         # (..., d)
    gate_scores_local: Tensor   # (..., T_F)
    gate_scores_global: Tensor  # (..., T_F)


def frame_gates(z: Tensor, params: GateParams, train: bool = False, gated_pool: str = "sum",
                dropout: float = 0.0, rng: np.random.Generator | None = None,
                local_override: np.ndarray | None = None) -> GatedFeatures:
    """Re-encode frames, score them with two sigmoid gates and pool.

    ``local_override`` replaces the local gate scores with fixed values
    (evaluation hook for injecting an ideal frame selector).
    """
    if gated_pool not in ("sum", "max"):
        raise ValueError(f"unknown gated_pool {gated_pool!r}")
    z_hat = conv_encoder(z, params.encoder, train, dropout=dropout, rng=rng)
    g_local = T.sigmoid(params.local(z_hat))                 # (..., T_F, 1)
    if local_override is not None:
        g_local = Tensor(np.asarray(local_override, dtype=z.dtype)[..., None])
    g_global = T.sigmoid(params.glob(z_hat))
    z_gl = z_hat * g_local
    z_gg = z_hat * g_global
    if gated_pool == "sum":
        gl, gg = T.sum_(z_gl, axis=-2), T.sum_(z_gg, axis=-2)
    else:
        gl, gg = T.maxpool_over_axis(z_gl, axis=-2), T.maxpool_over_axis(z_gg, axis=-2)
    n = z.shape[-2]
    return GatedFeatures(
        z_max=T.maxpool_over_axis(z_hat, axis=-2),
        z_gg_pooled=gg,
        z_gl_pooled=gl,
        gate_scores_local=T.reshape(g_local, g_local.shape[:-2] + (n,)),
        gate_scores_global=T.reshape(g_global, g_global.shape[:-2] + (n,)),
    )


def classify(gated: GatedFeatures, params: GateParams, train: bool = False,
             dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Score each hypothesis.  Features carry a hypothesis axis at -2; returns (..., 5)."""
    if gated.z_max.shape[-2] != NUM_ANSWERS:
        raise ValueError(f"expected {NUM_ANSWERS} hypotheses, got {gated.z_max.shape[-2]}")
    x = T.concat([gated.z_max, gated.z_gg_pooled, gated.z_gl_pooled], axis=-1)
    h = T.dropout(T.relu(params.hidden(x)), dropout, train, rng)
    logits = params.out(h)
    return T.reshape(logits, logits.shape[:-1])


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the answer axis; np.argmax already resolves ties to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)

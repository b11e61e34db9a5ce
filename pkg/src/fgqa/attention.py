"""Dual-level attention: word/object level inside each frame, then frame level.

Shapes carry arbitrary leading batch axes.  A QA sequence is ``(..., T_qa, d)``
and one frame's context items (subtitle words, objects or dense-caption
words) are ``(..., T_c, d)``; the leading axes only need to broadcast, which is
how one encoded frame is shared by all five hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Dense, Tensor


@dataclass
class WordAttnParams:
    f1: Dense  # 3d -> d, shared by both attention directions
    f2: Dense  # 4d -> d

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        return cls(Dense.init(rng, 3 * d, d), Dense.init(rng, 4 * d, d))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.f1.named(f"{prefix}.f1"), **self.f2.named(f"{prefix}.f2")}


@dataclass
class FrameAttnParams:
    f3: Dense  # 4d -> d

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        return cls(Dense.init(rng, 4 * d, d))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return self.f3.named(f"{prefix}.f3")


def similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Dot products between the rows of ``a`` and the rows of ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"similarity_matrix: width mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return T.matmul(a, T.swap_last(b))


def _fuse(x: Tensor, y: Tensor, f: Dense) -> Tensor:
    """relu(f([x; y; x*y])) with f's weight split by input block.

    ``x`` may be smaller than ``y`` along broadcast axes; projecting it before
    broadcasting avoids repeating the same product for every hypothesis/frame.
    """
    d = x.shape[-1]
    w = f.w
    return T.relu(T.matmul(x, w[:d]) + T.matmul(y, w[d:2 * d])
                  + T.matmul(x * y, w[2 * d:]) + f.b)


def word_object_attend(qa: Tensor, qa_mask: np.ndarray, ctx: Tensor, ctx_mask: np.ndarray,
                       params: WordAttnParams, trace: dict | None = None) -> Tensor:
    """Fuse a hypothesis with one frame's context items into a single d-vector.

    Context-to-QA attention feeds a max over QA words, QA-to-context attention
    feeds a max over context items, and f2 merges the two pooled vectors.
    """
    qa_mask = np.asarray(qa_mask, dtype=bool)
    ctx_mask = np.asarray(ctx_mask, dtype=bool)
    sim = similarity_matrix(qa, ctx)                                   # (..., T_qa, T_c)

    ctx_weights = T.masked_softmax(sim, ctx_mask[..., None, :], axis=-1)
    ctx_att = T.matmul(ctx_weights, ctx)                               # (..., T_qa, d)
    qa_m = T.maxpool_over_axis(_fuse(qa, ctx_att, params.f1), axis=-2,
                               mask=qa_mask[..., :, None])

    qa_weights = T.masked_softmax(T.swap_last(sim), qa_mask[..., None, :], axis=-1)
    qa_att = T.matmul(qa_weights, qa)                                  # (..., T_c, d)
    ctx_m = T.maxpool_over_axis(_fuse(ctx, qa_att, params.f1), axis=-2,
                                mask=ctx_mask[..., :, None])

    if trace is not None:
        trace["similarity"] = sim.data
        trace["ctx_to_qa"] = ctx_weights.data
        trace["qa_to_ctx"] = qa_weights.data
    merged = T.concat([qa_m, ctx_m, qa_m * ctx_m, qa_m + ctx_m], axis=-1)
    return T.relu(params.f2(merged))


def frame_attend(s_w: Tensor, v_w: Tensor, params: FrameAttnParams,
                 attn_scale: float = 1.0, trace: dict | None = None) -> Tensor:
    """Cross-align two (..., T_F, d) frame sequences and sum the two views.

    ``attn_scale`` multiplies both attention matrices; 0 leaves only the
    residual path (a test hook).
    """
    if s_w.shape[-2] != v_w.shape[-2]:
        raise ValueError(f"frame_attend: frame counts differ ({s_w.shape[-2]} vs {v_w.shape[-2]})")
    sim = similarity_matrix(s_w, v_w)                                  # (..., T_F, T_F)
    a_sv = T.softmax(sim, axis=-1)
    a_vs = T.softmax(T.swap_last(sim), axis=-1)
    if attn_scale != 1.0:
        a_sv = a_sv * attn_scale
        a_vs = a_vs * attn_scale
    s_att = T.matmul(a_sv, s_w) + s_w
    v_hat = T.relu(params.f3(T.concat([v_w, s_att, v_w * s_att, v_w + s_att], axis=-1)))
    v_att = T.matmul(a_vs, v_w) + v_w
    s_hat = T.relu(params.f3(T.concat([s_w, v_att, s_w * v_att, s_w + v_att], axis=-1)))
    if trace is not None:
        trace["frame_similarity"] = sim.data
        trace["frame_attention"] = a_sv.data
        trace["s_att"] = s_att.data
    return s_hat + v_hat

"""Full model: embeddings, encoders, dual-level attention, fusion, gates, classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import FrameAttnParams, WordAttnParams, frame_attend, word_object_attend
from .data import Batch, Episode, Vocabulary, collate
from .encoder import EncoderParams, conv_encoder
from .fusion import SelfAttnParams, integrate_streams
from .gates import GateParams, classify, frame_gates
from .tensor import Tensor


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    L: int = 2
    N: int = 1
    kernel: int = 3
    dropout: float = 0.1
    dual_att: bool = True
    use_densecap: bool = True
    gated_pool: str = "sum"
    fusion_residual: bool = True
    emb_std: float = 3.0
    object_init: str = "label"
    cls_out_init: str = "zero"

    def validate(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"model width must be positive and even, got {self.d}")
        if self.d % self.heads:
            raise ValueError(f"{self.heads} heads do not divide width {self.d}")
        if self.L < 1 or self.N < 1:
            raise ValueError("encoder needs L >= 1 and N >= 1")
        if self.gated_pool not in ("sum", "max"):
            raise ValueError(f"gated_pool must be 'sum' or 'max', got {self.gated_pool!r}")
        if self.emb_std <= 0:
            raise ValueError("emb_std must be positive")
        if self.object_init not in ("label", "random"):
            raise ValueError(f"object_init must be 'label' or 'random', got {self.object_init!r}")
        if self.cls_out_init not in ("glorot", "zero"):
            raise ValueError(f"cls_out_init must be 'glorot' or 'zero', got {self.cls_out_init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Every learnable tensor of the model, addressable by a stable dotted name."""

    def __init__(self, cfg: ModelConfig, num_words: int, num_objects: int, seed: int = 0,
                 object_labels=None):
        """``object_labels[i]`` is the word ID naming object ``i`` (-1 for none).

        With ``object_init="label"`` and a label map, an object's embedding starts
        as a copy of its name's word embedding; the two tables train independently.
        Without a label map every object row is random.
        """
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.cfg = cfg
        self.word_emb = Tensor(rng.normal(0.0, cfg.emb_std, (num_words, d)).astype(np.float32), True)
        self.object_emb = Tensor(rng.normal(0.0, cfg.emb_std, (num_objects, d)).astype(np.float32), True)
        if cfg.object_init == "label" and object_labels is not None:
            labels = np.asarray(object_labels)
            if labels.shape != (num_objects,):
                raise ValueError(f"object_labels needs {num_objects} entries, got {labels.shape}")
            named = labels >= 0
            self.object_emb.data[named] = self.word_emb.data[labels[named]]
        enc = lambda: EncoderParams.init(d, rng, cfg.L, cfg.N, cfg.kernel)
        self.enc_qa, self.enc_sub, self.enc_vid, self.enc_dc = enc(), enc(), enc(), enc()
        self.att_sub = WordAttnParams.init(d, rng)
        self.att_vid = WordAttnParams.init(d, rng)
        self.att_dc = WordAttnParams.init(d, rng)
        self.frame_sv = FrameAttnParams.init(d, rng)
        self.frame_sd = FrameAttnParams.init(d, rng)
        self.fusion = SelfAttnParams.init(d, rng, cfg.heads, cfg.fusion_residual)
        self.gates = GateParams.init(d, rng, cfg.L, cfg.N, cfg.kernel)
        if cfg.cls_out_init == "zero":
            # uniform initial answer scores keep the hidden layer from dying in the first steps
            self.gates.out.w.data[:] = 0.0

    def named(self) -> dict[str, Tensor]:
        return {
            "emb.word": self.word_emb,
            "emb.object": self.object_emb,
            **self.enc_qa.named("enc.qa"), **self.enc_sub.named("enc.subtitle"),
            **self.enc_vid.named("enc.video"), **self.enc_dc.named("enc.densecap"),
            **self.att_sub.named("word_att.subtitle"), **self.att_vid.named("word_att.video"),
            **self.att_dc.named("word_att.densecap"),
            **self.frame_sv.named("frame_att.sv"), **self.frame_sd.named("frame_att.sd"),
            **self.fusion.named("fusion"),
            **self.gates.named("gates"),
        }

    def active(self) -> dict[str, Tensor]:
        """Parameters the configured variant actually uses."""
        out = self.named()
        if not self.cfg.use_densecap:
            out = {k: v for k, v in out.items()
                   if not k.startswith(("enc.densecap", "word_att.densecap", "frame_att.sd", "fusion"))}
        if not self.cfg.dual_att:
            out = {k: v for k, v in out.items() if not k.startswith("frame_att")}
        return out

    def zero_grad(self):
        for p in self.named().values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self.named().values())


@dataclass
class ForwardOutput:
    logits: Tensor          # (E, 5)
    gate_local: Tensor      # (E, 5, T_F)
    gate_global: Tensor     # (E, 5, T_F)
    trace: dict | None = None


@dataclass
class EmbeddedEpisode:
    qa: Tensor
    qa_mask: np.ndarray
    subtitle: Tensor
    subtitle_mask: np.ndarray
    visual: Tensor
    visual_mask: np.ndarray
    densecap: Tensor
    densecap_mask: np.ndarray


def embed_batch(batch: Batch, params: ModelParams) -> EmbeddedEpisode:
    return EmbeddedEpisode(
        T.embedding(params.word_emb, batch.qa), batch.qa_mask,
        T.embedding(params.word_emb, batch.subtitle), batch.subtitle_mask,
        T.embedding(params.object_emb, batch.objects), batch.objects_mask,
        T.embedding(params.word_emb, batch.densecap), batch.densecap_mask,
    )


def embed_episode(ep: Episode, vocab: Vocabulary, params: ModelParams) -> EmbeddedEpisode:
    """Features of one episode: five (question + answer) hypotheses and three frame streams."""
    return embed_batch(collate([ep], vocab), params)


def forward(params: ModelParams, batch: Batch, train: bool = False,
            rng: np.random.Generator | None = None, trace: bool = False,
            local_override: np.ndarray | None = None) -> ForwardOutput:
    cfg = params.cfg
    p = cfg.dropout if train else 0.0
    tr = {} if trace else None
    emb = embed_batch(batch, params)
    E, H, _ = batch.qa.shape
    n = batch.subtitle.shape[1]

    enc = lambda x, m, prm: conv_encoder(x, prm, train, mask=m, dropout=p, rng=rng)
    qa = enc(emb.qa, emb.qa_mask, params.enc_qa)                      # (E, 5, T_qa, d)
    qa = T.reshape(qa, (E, H, 1) + qa.shape[2:])                      # broadcast over frames
    qa_mask = emb.qa_mask[:, :, None, :]

    def stream(x, mask, enc_params, att_params, key):
        c = enc(x, mask, enc_params)                                   # (E, T_F, T_c, d)
        c = T.reshape(c, (E, 1) + c.shape[1:])                         # broadcast over hypotheses
        sub_trace = {} if tr is not None else None
        w = word_object_attend(qa, qa_mask, c, mask[:, None], att_params, sub_trace)
        if tr is not None:
            tr[key] = sub_trace
        return w                                                       # (E, 5, T_F, d)

    s_w = stream(emb.subtitle, emb.subtitle_mask, params.enc_sub, params.att_sub, "word_subtitle")
    v_w = stream(emb.visual, emb.visual_mask, params.enc_vid, params.att_vid, "word_video")

    def frame_level(a, b, prm, key):
        if not cfg.dual_att:
            return a + b
        sub_trace = {} if tr is not None else None
        u = frame_attend(a, b, prm, trace=sub_trace)
        if tr is not None:
            tr[key] = sub_trace
        return u

    u_sv = frame_level(s_w, v_w, params.frame_sv, "frame_sv")
    if cfg.use_densecap:
        d_w = stream(emb.densecap, emb.densecap_mask, params.enc_dc, params.att_dc, "word_densecap")
        u_sd = frame_level(s_w, d_w, params.frame_sd, "frame_sd")
        fus_trace = {} if tr is not None else None
        z = integrate_streams(u_sv, u_sd, params.fusion, fus_trace)
        if tr is not None:
            tr["fusion"] = fus_trace
    else:
        z = u_sv

    gated = frame_gates(z, params.gates, train, cfg.gated_pool, dropout=p, rng=rng,
                        local_override=None if local_override is None
                        else np.broadcast_to(np.asarray(local_override)[:, None, :], (E, H, n)))
    logits = classify(gated, params.gates, train, dropout=p, rng=rng)
    return ForwardOutput(logits, gated.gate_scores_local, gated.gate_scores_global, tr)

"""Answer and frame-selection objectives plus in/out frame-score diagnostics.

Frame losses take scores of shape (..., T_F) and same-shaped 0/1 labels and
return one loss per leading index, so a single call covers a whole batch of
(episode x hypothesis) rows.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLAMP_EPS = 1e-7
FRAME_INTERVAL_SEC = 2.0

LOSS_SETTINGS = ("none", "bce", "iofsm", "bce+iofsm", "bbce", "bbce+iofsm")


class EmptyClassWarning(UserWarning):
    """A frame-label vector had no in-frames or no out-frames."""


def span_to_labels(span: tuple[float, float], num_frames: int,
                   frame_interval: float = FRAME_INTERVAL_SEC) -> np.ndarray:
    """Frame t (at t * interval seconds) is 1 iff start <= t * interval <= end."""
    start, end = span
    if start < 0 or end < 0:
        raise ValueError(f"negative span time in {span}")
    if start > end:
        raise ValueError(f"span start {start} after end {end}")
    times = np.arange(num_frames) * frame_interval
    # tolerate float noise at the boundaries
    tol = 1e-9 * max(1.0, frame_interval)
    return ((times >= start - tol) & (times <= end + tol)).astype(np.int8)


def _as_scores(scores) -> Tensor:
    return scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))


def _labels_like(labels, scores: Tensor) -> np.ndarray:
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != scores.shape:
        y = np.broadcast_to(y, scores.shape)
    if scores.shape[-1] == 0:
        raise ValueError("frame losses need at least one frame")
    return y


def classification_loss(logits, gt) -> Tensor:
    """Softmax cross-entropy of the ground-truth answer, per leading index."""
    logits = _as_scores(logits)
    gt = np.asarray(gt)
    n = logits.shape[-1]
    if np.any(gt < 0) or np.any(gt >= n):
        raise ValueError(f"ground-truth index out of range [0, {n}): {gt}")
    onehot = (np.arange(n) == gt[..., None]).astype(logits.dtype)
    return -T.sum_(T.log_softmax(logits, axis=-1) * onehot, axis=-1)


def _clamped_logs(scores: Tensor):
    s = T.clip(scores, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return T.log(s), T.log(1.0 - s)


def bce_loss(scores, labels) -> Tensor:
    """Summed (not averaged) binary cross-entropy over frames."""
    scores = _as_scores(scores)
    y = _labels_like(labels, scores)
    log_s, log_1ms = _clamped_logs(scores)
    return -T.sum_(log_s * y + log_1ms * (1.0 - y), axis=-1)


def _class_weights(y: np.ndarray, name: str):
    n_in = y.sum(axis=-1, keepdims=True)
    n_out = y.shape[-1] - n_in
    if np.any(n_in == 0) or np.any(n_out == 0):
        warnings.warn(f"{name}: frame labels with an empty in- or out-class; "
                      "the missing term takes its ideal value", EmptyClassWarning, stacklevel=3)
    w_in = np.divide(y, n_in, out=np.zeros_like(y), where=n_in > 0)
    w_out = np.divide(1.0 - y, n_out, out=np.zeros_like(y), where=n_out > 0)
    return w_in, w_out, n_in[..., 0], n_out[..., 0]


def bbce_loss(scores, labels) -> Tensor:
    """Cross-entropy averaged separately over in- and out-frames, then summed."""
    scores = _as_scores(scores)
    y = _labels_like(labels, scores)
    w_in, w_out, _, _ = _class_weights(y, "bbce")
    log_s, log_1ms = _clamped_logs(scores)
    return -T.sum_(log_s * w_in + log_1ms * w_out, axis=-1)


def iofsm_loss(scores, labels) -> Tensor:
    """1 + mean(out-frame scores) - mean(in-frame scores).

    An empty class contributes its ideal mean (1 for in-frames, 0 for out-frames).
    """
    scores = _as_scores(scores)
    y = _labels_like(labels, scores)
    w_in, w_out, n_in, _ = _class_weights(y, "iofsm")
    ideal_in = (n_in == 0).astype(scores.dtype)
    return T.sum_(scores * (w_out - w_in), axis=-1) + (1.0 - ideal_in)


@dataclass(frozen=True)
class LossFlags:
    bce: bool = False
    bbce: bool = False
    iofsm: bool = False

    def __post_init__(self):
        if self.bce and self.bbce:
            raise ValueError("bce and bbce are exclusive frame losses")

    @property
    def frame(self) -> bool:
        return self.bce or self.bbce

    @classmethod
    def parse(cls, setting: str) -> "LossFlags":
        """Parse one of LOSS_SETTINGS, e.g. ``"bbce+iofsm"``."""
        if setting not in LOSS_SETTINGS:
            raise ValueError(f"unknown loss setting {setting!r}; choose from {LOSS_SETTINGS}")
        parts = set(setting.split("+")) - {"none"}
        return cls(bce="bce" in parts, bbce="bbce" in parts, iofsm="iofsm" in parts)

    def name(self) -> str:
        parts = [p for p, on in (("bce", self.bce), ("bbce", self.bbce), ("iofsm", self.iofsm)) if on]
        return "+".join(parts) or "none"


@dataclass
class LossBreakdown:
    cls: Tensor
    frame: Tensor | None
    io: Tensor | None
    total: Tensor
    flags: LossFlags

    def as_floats(self) -> dict:
        val = lambda t: None if t is None else float(t.data)
        return {"cls": val(self.cls), "frame": val(self.frame), "io": val(self.io),
                "total": val(self.total)}


def total_loss(cls: Tensor, frame: Tensor | None, io: Tensor | None,
               flags: LossFlags) -> LossBreakdown:
    """cls + frame term (BCE or BBCE) + IOFSM, each included only if its flag is on."""
    if flags.bce and flags.bbce:
        raise ValueError("bce and bbce are exclusive frame losses")
    total = cls
    if flags.frame:
        if frame is None:
            raise ValueError("frame loss enabled but not supplied")
        total = total + frame
    if flags.iofsm:
        if io is None:
            raise ValueError("iofsm enabled but not supplied")
        total = total + io
    return LossBreakdown(cls, frame if flags.frame else None, io if flags.iofsm else None,
                         total, flags)


@dataclass
class FrameScoreStats:
    """Mean and population std of local-gate scores on in-frames (IFS) and out-frames (OFS)."""

    ifs_avg: float | None
    ifs_std: float | None
    ofs_avg: float | None
    ofs_std: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def frame_score_stats(scores, labels) -> FrameScoreStats:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores/labels size mismatch: {s.shape} vs {y.shape}")

    def stats(x):
        return (float(x.mean()), float(x.std())) if x.size else (None, None)

    ifs = stats(s[y])
    ofs = stats(s[~y])
    return FrameScoreStats(ifs[0], ifs[1], ofs[0], ofs[1])

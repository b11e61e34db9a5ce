"""Optimiser, training loop, evaluation metrics and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import average_precision_score

from . import tensor as T
from .data import STREAMS, Batch, Corpus, Episode, Vocabulary, collate
from .losses import (EmptyClassWarning, LossFlags, bbce_loss, bce_loss, classification_loss,
                     frame_score_stats, iofsm_loss, total_loss)
from .model import ModelConfig, ModelParams, forward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FGQA"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, batch_ids: list[str]):
        super().__init__(message)
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_late: float = 2e-4
    lr_drop_after: int = 10
    batch_size: int = 16
    epochs: int = 30
    patience: int = 5
    clip_norm: float = 5.0       # global gradient-norm cap; 0 turns clipping off
    loss: str = "bbce+iofsm"
    frame_loss_hypotheses: str = "all"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        self.model.validate()
        LossFlags.parse(self.loss)
        if self.frame_loss_hypotheses not in ("all", "gt"):
            raise ValueError("frame_loss_hypotheses must be 'all' or 'gt'")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be positive")
        if self.lr <= 0 or self.lr_late <= 0:
            raise ValueError("learning rates must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")

    @property
    def flags(self) -> LossFlags:
        return LossFlags.parse(self.loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = d.pop("model", {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        bad_model = set(model) - set(ModelConfig.__dataclass_fields__)
        if unknown or bad_model:
            raise ValueError(f"unknown train config keys: {sorted(unknown | {'model.' + k for k in bad_model})}")
        return cls(**d, model=ModelConfig(**model))


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule over 1-based epochs: ``lr`` up to ``lr_drop_after``, ``lr_late`` after."""
    return cfg.lr if epoch <= cfg.lr_drop_after else cfg.lr_late


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: dict[str, T.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float = 0.0) -> bool:
    """One bias-corrected Adam update from each parameter's ``grad``.

    With ``clip_norm > 0`` all gradients are first scaled so their global L2
    norm is at most ``clip_norm``.  Returns False (and counts a skip) when any
    gradient is non-finite.
    """
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step skipped (%d so far)", state.skipped)
        return False
    if clip_norm > 0:
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if norm > clip_norm:
            grads = {k: g * np.float32(clip_norm / norm) for k, g in grads.items()}
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return True


# ---------------------------------------------------------------------------
# loss on a batch
# ---------------------------------------------------------------------------

def batch_loss(params: ModelParams, batch: Batch, flags: LossFlags, train: bool = False,
               rng: np.random.Generator | None = None, frame_loss_hypotheses: str = "all"):
    out = forward(params, batch, train=train, rng=rng)
    cls = T.mean(classification_loss(out.logits, batch.gt))
    scores = out.gate_local                                           # (E, 5, T_F)
    labels = batch.labels[:, None, :]
    if frame_loss_hypotheses == "gt":
        scores = scores[np.arange(len(batch)), batch.gt]
        labels = batch.labels
    frame = io = None
    if flags.bce:
        frame = T.mean(bce_loss(scores, labels))
    elif flags.bbce:
        frame = T.mean(bbce_loss(scores, labels))
    if flags.iofsm:
        io = T.mean(iofsm_loss(scores, labels))
    return total_loss(cls, frame, io, flags), out


def iterate_batches(episodes: list[Episode], vocab: Vocabulary, size: int,
                    order: np.ndarray | None = None):
    idx = np.arange(len(episodes)) if order is None else order
    for i in range(0, len(idx), size):
        yield collate([episodes[j] for j in idx[i:i + size]], vocab)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    per_stream_accuracy: dict
    frame_ap: float | None
    frame_stats: dict
    loss_means: dict
    num_episodes: int
    correct: np.ndarray = field(repr=False, default=None)
    predictions: np.ndarray = field(repr=False, default=None)

    def to_dict(self, per_episode: bool = False) -> dict:
        d = {"accuracy": self.accuracy, "per_stream_accuracy": self.per_stream_accuracy,
             "frame_ap": self.frame_ap, "frame_stats": self.frame_stats,
             "loss_means": self.loss_means, "num_episodes": self.num_episodes}
        if per_episode:
            d["correct"] = self.correct.astype(int).tolist()
            d["predictions"] = self.predictions.astype(int).tolist()
        return d


def frame_average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    y = np.asarray(labels).reshape(-1)
    if y.min() == y.max():
        return None
    return float(average_precision_score(y, np.asarray(scores, dtype=np.float64).reshape(-1)))


def evaluate(params: ModelParams, episodes: list[Episode], vocab: Vocabulary,
             batch_size: int = 100, local_override: bool = False) -> EvalReport:
    """Answer accuracy plus local-gate diagnostics on the ground-truth hypothesis.

    ``local_override`` forces the local gate to the frame labels (test hook).
    """
    if not episodes:
        raise ValueError("cannot evaluate an empty split")
    preds, gts, streams, gate, labels = [], [], [], [], []
    sums = {"cls": 0.0, "bce": 0.0, "bbce": 0.0, "iofsm": 0.0}
    with T.no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyClassWarning)
        for batch in iterate_batches(episodes, vocab, batch_size):
            out = forward(params, batch, local_override=batch.labels if local_override else None)
            logits = out.logits.data
            preds.append(np.argmax(logits, axis=-1))
            gts.append(batch.gt)
            streams += batch.streams
            g = out.gate_local.data[np.arange(len(batch)), batch.gt]
            gate.append(g)
            labels.append(batch.labels)
            all_scores, all_labels = out.gate_local, batch.labels[:, None, :]
            sums["cls"] += float(classification_loss(logits, batch.gt).data.sum())
            sums["bce"] += float(bce_loss(all_scores, all_labels).data.mean(-1).sum())
            sums["bbce"] += float(bbce_loss(all_scores, all_labels).data.mean(-1).sum())
            sums["iofsm"] += float(iofsm_loss(all_scores, all_labels).data.mean(-1).sum())
    preds, gts = np.concatenate(preds), np.concatenate(gts)
    gate, labels = np.concatenate(gate), np.concatenate(labels)
    correct = preds == gts
    streams = np.array(streams)
    per_stream = {s: (float(correct[streams == s].mean()) if np.any(streams == s) else None)
                  for s in STREAMS}
    n = len(episodes)
    return EvalReport(
        accuracy=float(correct.mean()),
        per_stream_accuracy=per_stream,
        frame_ap=frame_average_precision(gate, labels),
        frame_stats=frame_score_stats(gate, labels).to_dict(),
        loss_means={k: v / n for k, v in sums.items()},
        num_episodes=n,
        correct=correct,
        predictions=preds,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    optimizer: AdamState
    epoch: int
    history: list[dict]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: b"FGQA", uint32 LE version, uint32 LE header length,
    UTF-8 JSON header, then little-endian float32 blobs at the header's offsets."""
    tensors = [("param", k, p.data) for k, p in ckpt.params.named().items()]
    tensors += [("adam_m", k, a) for k, a in ckpt.optimizer.m.items()]
    tensors += [("adam_v", k, a) for k, a in ckpt.optimizer.v.items()]
    manifest, blobs, offset = [], [], 0
    for group, name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"group": group, "name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "optimizer": {"step": ckpt.optimizer.step, "skipped": ckpt.optimizer.skipped},
        "vocab_sizes": [int(ckpt.params.word_emb.shape[0]), int(ckpt.params.object_emb.shape[0])],
        "tensors": manifest,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    body = memoryview(raw)[12 + hlen:]
    cfg = TrainConfig.from_dict(header["config"])
    params = ModelParams(cfg.model, *header["vocab_sizes"], seed=cfg.seed)
    named = params.named()
    opt = AdamState(step=header["optimizer"]["step"], skipped=header["optimizer"]["skipped"])
    seen = set()
    for entry in header["tensors"]:
        arr = np.frombuffer(body[entry["offset"]: entry["offset"] + entry["nbytes"]],
                            dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        name = entry["name"]
        if entry["group"] == "param":
            if name not in named or name in seen:
                raise ValueError(f"{path}: unexpected or duplicate parameter {name!r}")
            if tuple(entry["shape"]) != named[name].shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            named[name].data = arr
            seen.add(name)
        elif entry["group"] == "adam_m":
            opt.m[name] = arr
        else:
            opt.v[name] = arr
    missing = set(named) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return Checkpoint(cfg, params, opt, header["epoch"], header["history"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    best_report: EvalReport


def train(cfg: TrainConfig, corpus: Corpus, out_dir=None, progress=None) -> TrainResult:
    """Train with early stopping on val accuracy; the best epoch's weights are returned.

    With ``out_dir`` set, ``metrics.jsonl`` gets one line per epoch and
    ``best.ckpt`` holds the best checkpoint.
    """
    cfg.validate()
    flags = cfg.flags
    rng = np.random.default_rng([cfg.seed, 1])
    params = ModelParams(cfg.model, len(corpus.vocab.words), len(corpus.vocab.objects), seed=cfg.seed,
                         object_labels=corpus.vocab.object_label_ids())
    named = params.active()
    opt = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")
    train_eps, val_eps = corpus["train"], corpus["val"]
    history: list[dict] = []
    best_acc, best_state, best_report, best_epoch, stale = -1.0, None, None, 0, 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(train_eps))
        totals = {"cls": 0.0, "frame": 0.0, "io": 0.0, "total": 0.0}
        n_batches = 0
        for batch in iterate_batches(train_eps, corpus.vocab, cfg.batch_size, order):
            params.zero_grad()
            losses, _ = batch_loss(params, batch, flags, train=True, rng=rng,
                                   frame_loss_hypotheses=cfg.frame_loss_hypotheses)
            value = float(losses.total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}",
                                       batch.ids)
            losses.total.backward()
            adam_step(named, opt, lr, clip_norm=cfg.clip_norm)
            for k, v in losses.as_floats().items():
                totals[k] += v or 0.0
            n_batches += 1
        report = evaluate(params, val_eps, corpus.vocab)
        row = {"epoch": epoch, "lr": lr, "seconds": round(time.perf_counter() - t0, 3),
               "train_loss": {k: v / n_batches for k, v in totals.items()},
               "val": report.to_dict(), "skipped_steps": opt.skipped}
        history.append(row)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if progress is not None:
            progress(row)
        if report.accuracy > best_acc:
            best_acc, best_report, best_epoch, stale = report.accuracy, report, epoch, 0
            best_state = ({k: p.data.copy() for k, p in params.named().items()},
                          AdamState({k: a.copy() for k, a in opt.m.items()},
                                    {k: a.copy() for k, a in opt.v.items()}, opt.step, opt.skipped))
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    for k, p in params.named().items():
        p.data = best_state[0][k]
    best = Checkpoint(cfg, params, best_state[1], best_epoch, history)
    if out_dir is not None:
        save_checkpoint(best, out_dir / "best.ckpt")
    return TrainResult(best, history, best_report)

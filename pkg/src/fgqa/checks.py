"""Gradient-check suite: every differentiable primitive plus the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Episode, Frame, Vocabulary, collate
from .losses import LossFlags
from .model import ModelConfig, ModelParams
from .tensor import Tensor

TOLERANCE = {32: 1e-3, 64: 1e-5}


def _primitive_cases():
    """name -> (function of (a, b) Tensors, shape of a, shape of b)."""
    keep = np.array([[1, 0, 1, 1], [1, 1, 0, 1], [0, 1, 1, 1]], dtype=bool)
    return {
        "matmul": (lambda a, b: T.matmul(a, b), (3, 4), (4, 2)),
        "add": (lambda a, b: a + b, (3, 4), (4,)),
        "multiply": (lambda a, b: a * b, (3, 4), (3, 4)),
        "concat": (lambda a, b: T.concat([a, b], axis=-1) * T.concat([b, a], axis=-1), (3, 2), (3, 2)),
        "relu": (lambda a, b: T.relu(a * b), (3, 4), (3, 4)),
        "sigmoid": (lambda a, b: T.sigmoid(a * b), (3, 4), (3, 4)),
        "softmax": (lambda a, b: T.masked_softmax(a, keep) * b, (3, 4), (3, 4)),
        "layer_norm": (lambda a, b: T.layer_norm(a, b[0], b[1]), (3, 4), (2, 4)),
        "conv1d_same": (lambda a, b: T.conv1d_same(a, T.reshape(b[:3], (3, 2, 2)), b[3, :2]),
                        (5, 2), (4, 4)),
        "maxpool_over_axis": (lambda a, b: T.maxpool_over_axis(a * b, axis=0,
                                                               mask=np.array([[1], [0], [1]], bool)),
                              (3, 4), (3, 4)),
        "dropout": (lambda a, b: T.dropout(a * b, 0.25, True, mask=keep), (3, 4), (3, 4)),
        "log_softmax": (lambda a, b: T.log_softmax(a * b), (3, 4), (3, 4)),
    }


def toy_episode() -> tuple[Episode, Vocabulary]:
    """Two frames, two words per context line, a two-word question."""
    words = ["<pad>", "<unk>", "what", "ent", "att0", "att1", "att2", "att3", "att4", "cue", "w"]
    objects = ["<pad>", "<unk>", "obj:ent", "obj:att0", "obj:thing"]
    frames = [Frame(["cue", "w"], ["obj:ent", "obj:att0"], ["ent", "att0"]),
              Frame(["w", "att1"], ["obj:thing", "obj:ent"], ["ent", "w"])]
    ep = Episode("toy-0", frames, ["what", "ent"], [[f"att{i}"] for i in range(5)], 0, (0.0, 0.0),
                 "object")
    return ep, Vocabulary(words, objects)


def full_loss_fn(params: ModelParams, batch, flags: LossFlags):
    from .train import batch_loss

    def fn():
        # re-embed with the current dtype; eval mode keeps the function deterministic
        losses, _ = batch_loss(params, batch, flags, train=False)
        return losses.total
    return fn


@dataclass
class CheckRow:
    name: str
    precision: int
    max_rel_err: float
    worst: tuple | None
    passed: bool


def run_checks(precisions=(32, 64), epsilon: float = 1e-5, include_model: bool = True,
               seed: int = 0) -> list[CheckRow]:
    rows = []
    rng = np.random.default_rng(seed)
    for name, (fn, sa, sb) in _primitive_cases().items():
        a = Tensor(rng.normal(size=sa), requires_grad=True)
        b = Tensor(rng.normal(size=sb), requires_grad=True)
        probe = fn(a, b)
        w = rng.normal(size=probe.shape)
        loss = lambda: T.sum_(fn(a, b) * Tensor(w.astype(a.dtype)))
        for prec, res in T.grad_check_multi(loss, {"a": a, "b": b}, epsilon, precisions).items():
            rows.append(CheckRow(name, prec, res["max_rel_err"], res["worst"],
                                 res["max_rel_err"] < TOLERANCE[prec]))
    if include_model:
        ep, vocab = toy_episode()
        cfg = ModelConfig(d=4, heads=2, dropout=0.0)
        params = ModelParams(cfg, len(vocab.words), len(vocab.objects), seed=seed)
        batch = collate([ep], vocab)
        flags = LossFlags.parse("bbce+iofsm")
        results = T.grad_check_multi(full_loss_fn(params, batch, flags), params.named(),
                                     epsilon, precisions)
        for prec, res in results.items():
            rows.append(CheckRow("full_loss", prec, res["max_rel_err"], res["worst"],
                                 res["max_rel_err"] < TOLERANCE[prec]))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = [f"{'check':20s} {'bits':>4s} {'max_rel_err':>12s}  result"]
    for r in rows:
        lines.append(f"{r.name:20s} {r.precision:4d} {r.max_rel_err:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.perf_counter()
    out = run_checks()
    print(format_rows(out))
    print(f"{time.perf_counter() - t0:.1f}s")

"""Ablation runner: named model/loss variants, several seeds, paired bootstrap.

A variant name reads ``<attention>-<loss>[-nodc]``, for example
``dual-bbce+iofsm`` (the full model), ``single-none`` or
``dual-bbce+iofsm-nodc`` (dense-caption stream removed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import STREAMS, Corpus
from .losses import LOSS_SETTINGS
from .train import TrainConfig, train

log = logging.getLogger(__name__)

FULL = "dual-bbce+iofsm"
TABLE3 = ("single-none", "dual-none", FULL, "dual-bbce+iofsm-nodc")
TABLE4 = ("dual-bce", "dual-iofsm", "dual-bce+iofsm", "dual-bbce", FULL)
# (better, worse) pairs whose one-sided p-value is reported
COMPARISONS = (
    ("dual-none", "single-none"),
    (FULL, "dual-none"),
    (FULL, "dual-bbce+iofsm-nodc"),
    ("dual-bce+iofsm", "dual-bce"),
    (FULL, "dual-bce"),
)


@dataclass(frozen=True)
class Variant:
    name: str
    dual_att: bool
    loss: str
    use_densecap: bool

    def apply(self, base: TrainConfig, seed: int) -> TrainConfig:
        model = replace(base.model, dual_att=self.dual_att, use_densecap=self.use_densecap)
        return replace(base, model=model, loss=self.loss, seed=seed)


def parse_variant(name: str) -> Variant:
    parts = name.split("-")
    use_dc = True
    if parts[-1] == "nodc":
        use_dc = False
        parts = parts[:-1]
    if len(parts) != 2 or parts[0] not in ("single", "dual") or parts[1] not in LOSS_SETTINGS:
        raise ValueError(f"unknown variant {name!r}; expected <single|dual>-<loss>[-nodc] "
                         f"with loss in {LOSS_SETTINGS}")
    return Variant(name, parts[0] == "dual", parts[1], use_dc)


def paired_bootstrap(correct_a, correct_b, resamples: int = 10_000,
                     rng: np.random.Generator | None = None) -> float:
    """One-sided p-value for "a is more accurate than b" on paired 0/1 outcomes.

    The fraction of resamples whose accuracy difference a - b is <= 0.
    """
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("paired bootstrap needs two equal-length, non-empty outcome vectors")
    rng = rng or np.random.default_rng(0)
    diff = a - b
    idx = rng.integers(0, diff.size, size=(resamples, diff.size))
    return float(np.mean(diff[idx].mean(axis=1) <= 0))


@dataclass
class RunRecord:
    variant: str
    seed: int
    report: dict          # EvalReport.to_dict(per_episode=True)
    best_epoch: int
    epochs_run: int
    seconds: float


@dataclass
class AblationResult:
    runs: dict[str, list[RunRecord]]
    pvalues: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = {}
        for name, recs in self.runs.items():
            acc = np.array([r.report["accuracy"] for r in recs])
            row = {"accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
                   "seeds": [r.seed for r in recs]}
            for s in STREAMS:
                vals = [r.report["per_stream_accuracy"][s] for r in recs
                        if r.report["per_stream_accuracy"][s] is not None]
                row[f"acc_{s}"] = float(np.mean(vals)) if vals else None
            aps = [r.report["frame_ap"] for r in recs if r.report["frame_ap"] is not None]
            row["frame_ap"] = float(np.mean(aps)) if aps else None
            for k in ("ifs_avg", "ifs_std", "ofs_avg", "ofs_std"):
                vals = [r.report["frame_stats"][k] for r in recs if r.report["frame_stats"][k] is not None]
                row[k] = float(np.mean(vals)) if vals else None
            out[name] = row
        return out

    def correct(self, name: str) -> np.ndarray:
        recs = sorted(self.runs[name], key=lambda r: r.seed)
        return np.concatenate([np.asarray(r.report["correct"]) for r in recs])

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "pvalues": self.pvalues}


def _run_path(cache_dir: Path, variant: str, seed: int) -> Path:
    return cache_dir / f"{variant}.seed{seed}.json"


def run_variant(variant: str, seed: int, base: TrainConfig, corpus: Corpus,
                cache_dir=None, progress=None) -> RunRecord:
    """Train one variant/seed pair, reusing a cached result whose config matches."""
    v = parse_variant(variant)
    cfg = v.apply(base, seed)
    path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = _run_path(cache_dir, variant, seed)
        if path.exists():
            cached = json.loads(path.read_text())
            # compare in JSON form: tuples come back from disk as lists
            same = lambda d: json.loads(json.dumps(d))
            if cached.get("config") == same(cfg.to_dict()) and cached.get("corpus") == same(corpus.config.to_dict()):
                return RunRecord(**cached["record"])
            log.info("cached run %s is stale; retraining", path)
    log.info("training %s seed %d", variant, seed)
    result = train(cfg, corpus, progress=progress)
    report = result.best_report.to_dict(per_episode=True)
    seconds = float(sum(row["seconds"] for row in result.history))
    rec = RunRecord(variant, seed, report, result.best.epoch, len(result.history), seconds)
    if path is not None:
        path.write_text(json.dumps({"config": cfg.to_dict(), "corpus": corpus.config.to_dict(),
                                    "record": rec.__dict__}) + "\n")
    return rec


def ablate(base: TrainConfig, corpus: Corpus, variants=TABLE3 + TABLE4, seeds=(0, 1, 2),
           cache_dir=None, resamples: int = 10_000, comparisons=COMPARISONS,
           progress=None) -> AblationResult:
    names = list(dict.fromkeys(variants))
    for name in names:
        parse_variant(name)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    runs = {name: [run_variant(name, s, base, corpus, cache_dir, progress) for s in seeds]
            for name in names}
    result = AblationResult(runs)
    rng = np.random.default_rng(12345)
    for better, worse in comparisons:
        if better in runs and worse in runs:
            result.pvalues[f"{better} > {worse}"] = paired_bootstrap(
                result.correct(better), result.correct(worse), resamples, rng)
    return result


def format_table(result: AblationResult) -> str:
    """Plain-text table of the summary and p-values."""
    cols = ["accuracy_mean", "accuracy_std", "acc_subtitle", "acc_object", "acc_densecap",
            "frame_ap", "ifs_avg", "ifs_std", "ofs_avg", "ofs_std"]
    fmt = lambda x: "-" if x is None else f"{x:.3f}"
    summary = result.summary()
    width = max(len(n) for n in summary) + 2
    lines = ["variant".ljust(width) + " ".join(c.rjust(13) for c in cols)]
    for name, row in summary.items():
        lines.append(name.ljust(width) + " ".join(fmt(row[c]).rjust(13) for c in cols))
    if result.pvalues:
        lines.append("")
        lines += [f"p({k}) = {v:.4f}" for k, v in result.pvalues.items()]
    return "\n".join(lines)

"""Command-line entry point: gen-data, train, eval, ablate, grad-check, inspect.

Settings merge as defaults <- ``--config`` JSON file <- command-line flags
(``--set key=value`` for any field, dotted for nested sections such as
``model.d=16``).  Every output directory receives ``resolved_config.json``
holding the merged values and where each one came from.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .ablate import TABLE3, TABLE4, ablate, format_table
from .checks import TOLERANCE, format_rows, run_checks
from .data import SPLITS, CorpusConfig, CorpusFormatError, audit_split, collate, generate_corpus, \
    load_corpus, save_corpus
from .model import forward
from .train import TrainConfig, TrainingDiverged, evaluate, load_checkpoint, train

log = logging.getLogger("fgqa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration merging
# ---------------------------------------------------------------------------

def _flatten(d: dict, sections: tuple[str, ...], prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if k in sections and isinstance(v, dict):
            out.update(_flatten(v, (), f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = v
    return out


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise UsageError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise UsageError(f"{key} expects a list of {len(default)} values, got {value!r}")
        return list(value)
    if isinstance(default, dict) and not isinstance(value, dict):
        raise UsageError(f"{key} expects an object, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise UsageError(f"{key} expects a string, got {value!r}")
    return value


def _parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(defaults: dict, sections: tuple[str, ...], config_path=None,
                   sets=(), flags: dict | None = None) -> tuple[dict, dict]:
    """Merge defaults <- file <- flags.  Returns (nested values, provenance per dotted key)."""
    values = _flatten(defaults, sections)
    source = {k: "default" for k in values}

    def apply(items: dict, origin: str):
        unknown = sorted(set(items) - set(values))
        if unknown:
            raise UsageError(f"unknown config keys from {origin}: {', '.join(unknown)}")
        for k, v in items.items():
            values[k] = _coerce(k, values[k], v)
            source[k] = origin

    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found; pass an existing JSON file to --config")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        apply(_flatten(loaded, sections), f"file:{path}")
    apply(dict(_parse_set(s) for s in sets), "flag")
    apply({k: v for k, v in (flags or {}).items() if v is not None}, "flag")
    return _unflatten(values), source


def _write_resolved(out_dir: Path, values: dict, provenance: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"values": values, "provenance": provenance}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _corpus_config(values: dict) -> CorpusConfig:
    cfg = CorpusConfig.from_dict(values)
    cfg.validate()
    return cfg


def _train_config(args) -> tuple[TrainConfig, dict]:
    values, prov = resolve_config(TrainConfig().to_dict(), ("model",), args.config, args.set)
    try:
        cfg = TrainConfig.from_dict(values)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training config: {e}") from e
    return cfg, (values, prov)


def _load_corpus(path):
    if path is None:
        raise UsageError("--corpus is required; create one with `fgqa gen-data --out DIR`")
    p = Path(path)
    if not (p / "config.json").is_file():
        raise UsageError(f"no corpus at {p}; create one with `fgqa gen-data --out {p}`")
    return load_corpus(p)


def _load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} not found; `fgqa train --out DIR` writes DIR/best.ckpt")
    return load_checkpoint(p)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    values, prov = resolve_config(CorpusConfig().to_dict(), (), args.config, args.set,
                                  {"seed": args.seed})
    try:
        cfg = _corpus_config(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid corpus config: {e}") from e
    corpus = generate_corpus(cfg)
    out = Path(args.out)
    save_corpus(corpus, out)
    _write_resolved(out, values, prov)
    for split in SPLITS:
        audit = audit_split(corpus[split])
        slots = " ".join(f"{x:.3f}" for x in audit["slot_fraction"])
        print(f"{split}: {len(corpus[split])} episodes, streams {audit['streams']}, "
              f"answer slots [{slots}], violations {len(audit['problems'])}")
    print(f"corpus written to {out}")
    return EXIT_OK


def _progress(row):
    v = row["val"]
    ap = "-" if v["frame_ap"] is None else f"{v['frame_ap']:.3f}"
    print(f"epoch {row['epoch']:3d}  lr {row['lr']:.0e}  loss {row['train_loss']['total']:.4f}  "
          f"val acc {v['accuracy']:.4f}  frame AP {ap}  {row['seconds']:.1f}s", flush=True)


def cmd_train(args) -> int:
    cfg, (values, prov) = _train_config(args)
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    _write_resolved(out, values, prov)
    result = train(cfg, corpus, out_dir=out, progress=_progress)
    rep = result.best_report
    print(f"best epoch {result.best.epoch}: val accuracy {rep.accuracy:.4f}; checkpoint {out / 'best.ckpt'}")
    (out / "best_report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    if not corpus[args.split]:
        raise UsageError(f"split {args.split!r} of {args.corpus} is empty")
    rep = evaluate(ckpt.params, corpus[args.split], corpus.vocab)
    text = json.dumps(rep.to_dict(), indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.json").write_text(text + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, (values, prov) = _train_config(args)
    corpus = _load_corpus(args.corpus)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as e:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from e
    variants = tuple(args.variants.split(",")) if args.variants else tuple(dict.fromkeys(TABLE3 + TABLE4))
    out = Path(args.out)
    _write_resolved(out, {**values, "seeds": list(seeds), "variants": list(variants)},
                    {**prov, "seeds": "flag", "variants": "flag" if args.variants else "default"})

    def progress(row):
        print(f"  epoch {row['epoch']:3d} val acc {row['val']['accuracy']:.4f}", flush=True)
    try:
        result = ablate(cfg, corpus, variants, seeds, cache_dir=out / "runs",
                        resamples=args.resamples, progress=progress if args.verbose else None)
    except ValueError as e:
        if "unknown variant" in str(e):
            raise UsageError(str(e)) from e
        raise
    table = format_table(result)
    print(table)
    (out / "table.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    precisions = (args.precision,) if args.precision else (32, 64)
    rows = run_checks(precisions, epsilon=args.epsilon)
    tol = {p: (args.tolerance if args.tolerance is not None else TOLERANCE[p]) for p in precisions}
    for r in rows:
        r.passed = r.max_rel_err < tol[r.precision]
    print(format_rows(rows))
    worst = max(r.max_rel_err for r in rows)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


def _matrix(title: str, m: np.ndarray, rows: list[str], cols: list[str]) -> list[str]:
    width = max([8] + [len(c) + 1 for c in cols])
    lead = max([6] + [len(r) + 1 for r in rows])
    lines = [f"# {title}", "".ljust(lead) + "".join(c.rjust(width) for c in cols)]
    for name, row in zip(rows, m):
        lines.append(name.ljust(lead) + "".join(f"{x:{width}.3f}" for x in row))
    return lines + [""]


def inspect_episode(ckpt, corpus, ep) -> tuple[str, dict]:
    """Text tables for one episode: word/object and frame attention, gate scores per frame."""
    batch = collate([ep], corpus.vocab)
    with T.no_grad():
        out = forward(ckpt.params, batch, trace=True)
    tr = out.trace
    h = int(np.argmax(out.logits.data[0]))
    gt = ep.gt_answer
    qa_tokens = ep.question + ep.answers[gt]
    labels = batch.labels[0]
    span_frames = [int(t) for t in np.flatnonzero(labels)]
    lines = [f"episode {ep.id}  evidence stream {ep.evidence_stream}  gt {gt}  predicted {h}",
             f"question: {' '.join(ep.question)}",
             *[f"  answer {k}: {' '.join(a)}" for k, a in enumerate(ep.answers)],
             f"logits: {' '.join(f'{x:.3f}' for x in out.logits.data[0])}", ""]
    streams = [("word_subtitle", "subtitle", lambda f: f.subtitle),
               ("word_video", "object", lambda f: f.objects),
               ("word_densecap", "densecap", lambda f: f.densecap)]
    for key, name, items in streams:
        if key not in tr:
            continue
        att = tr[key]["ctx_to_qa"][0, gt]                             # (T_F, T_qa, T_c)
        for t in span_frames:
            cols = items(ep.frames[t])
            if name == "subtitle" and not cols:
                continue
            m = att[t, : len(qa_tokens), : len(cols)] if cols else att[t, : len(qa_tokens), :1]
            lines += _matrix(f"{name} attention, frame {t} (rows: hypothesis {gt} tokens)", m,
                             qa_tokens, cols or ["<nearest>"])
    n = ep.num_frames
    frame_names = [f"f{t}" for t in range(n)]
    for key in ("frame_sv", "frame_sd"):
        if key in tr:
            lines += _matrix(f"{key} frame-level attention (hypothesis {gt})",
                             tr[key]["frame_attention"][0, gt], frame_names, frame_names)
    g_local = out.gate_local.data[0, gt]
    g_global = out.gate_global.data[0, gt]
    lines += ["# frame scores (hypothesis %d)" % gt, "frame  label  g_local  g_global"]
    lines += [f"{t:5d}  {int(labels[t]):5d}  {g_local[t]:7.4f}  {g_global[t]:8.4f}" for t in range(n)]
    inside = float(g_local[labels > 0].mean())
    outside = float(g_local[labels == 0].mean()) if np.any(labels == 0) else float("nan")
    lines.append(f"mean g_local in span {inside:.4f}, out of span {outside:.4f}")
    return "\n".join(lines) + "\n", {"id": ep.id, "in_span": inside, "out_span": outside,
                                     "predicted": h, "gt": gt}


def cmd_inspect(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    index = {ep.id: ep for split in SPLITS for ep in corpus[split]}
    ids = [i for i in args.episode_ids.split(",") if i]
    missing = [i for i in ids if i not in index]
    if missing:
        raise UsageError(f"unknown episode ids: {', '.join(missing)} (ids look like val-00003)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i in ids:
        text, row = inspect_episode(ckpt, corpus, index[i])
        (out / f"{i}.txt").write_text(text)
        summary.append(row)
        print(f"{i}: predicted {row['predicted']} (gt {row['gt']}), mean g_local in span "
              f"{row['in_span']:.4f} vs out of span {row['out_span']:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="fgqa", description="Video-QA model with frame-selection gates on a "
                     "synthetic planted-evidence corpus.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress details")
        return p

    def config_flags(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field (repeatable; dotted keys for model.*)")

    p = add("gen-data", "generate a synthetic corpus")
    config_flags(p)
    p.add_argument("--seed", type=int, default=None, help="corpus seed (overrides config)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = add("train", "train a model with early stopping on val accuracy")
    config_flags(p)
    p.add_argument("--corpus", default=None, help="corpus directory from gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = add("eval", "evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", default=None, help="corpus directory")
    p.add_argument("--split", choices=SPLITS, default="val", help="split to evaluate")
    p.add_argument("--out", default=None, help="optional directory for the JSON report")
    p.set_defaults(func=cmd_eval)

    p = add("ablate", "train every variant for several seeds and compare them")
    config_flags(p)
    p.add_argument("--corpus", default=None, help="corpus directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--variants", default=None,
                   help="comma-separated variant names such as dual-bbce+iofsm or single-none-nodc "
                        "(omit for every table variant)")
    p.add_argument("--resamples", type=int, default=10_000, help="bootstrap resamples")
    p.add_argument("--out", required=True, help="output directory (run cache under runs/)")
    p.set_defaults(func=cmd_ablate)

    p = add("grad-check", "compare backprop with finite differences")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None,
                   help="analytic precision (default: both)")
    p.add_argument("--tolerance", type=float, default=None,
                   help="max relative error (default: 1e-3 at 32 bits, 1e-5 at 64 bits)")
    p.add_argument("--epsilon", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=cmd_grad_check)

    p = add("inspect", "write attention and frame-score tables for chosen episodes")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", default=None, help="corpus directory")
    p.add_argument("--episode-ids", required=True, help="comma-separated ids, e.g. val-00000,val-00001")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("fgqa: choose a subcommand (see fgqa --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:             # --help
        return int(e.code or 0)
    except TrainingDiverged as e:
        print(f"error: {e}; offending batch: {', '.join(e.batch_ids)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CorpusFormatError, T.GradCheckError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Planted-evidence synthetic video-QA corpus.

Every episode asks what a given entity has "when" a cue happens.  The cue word
is spoken in the subtitles of the ground-truth span; the entity co-occurs with
the correct attribute inside the span, in exactly one evidence stream
(subtitle, objects or dense captions).  Some distractor attributes are planted
next to the same entity *outside* the span, so the answer is only recoverable
by localising the span.  Candidate attributes also appear as background noise
next to other entities, uniformly over the five candidates, so mere presence
of an attribute carries no information about correctness.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import FRAME_INTERVAL_SEC, span_to_labels

PAD, UNK = 0, 1
STREAMS = ("subtitle", "object", "densecap")
SPLITS = ("train", "val", "test")

_FUNCTION_WORDS = ["what", "does", "have", "when", "the", "a", "with", "near", "and", "is"]


class CorpusFormatError(ValueError):
    pass


@dataclass
class CorpusConfig:
    train: int = 2000
    val: int = 500
    test: int = 500
    num_frames: int = 12
    objects_per_frame: int = 6
    subtitle_len: tuple[int, int] = (4, 10)
    vocab_size: int = 400
    num_entities: int = 16
    num_attributes: int = 40
    num_cues: int = 24
    num_generic_objects: int = 24
    evidence_mix: dict = field(default_factory=lambda: {"subtitle": 0.4, "object": 0.3, "densecap": 0.3})
    span_len: tuple[int, int] = (2, 4)
    trapped_distractors: tuple[int, int] = (1, 4)
    noise_attribute_prob: float = 0.5
    seed: int = 0

    def validate(self):
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("episode counts must be >= 1")
        if abs(sum(self.evidence_mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"evidence_mix fractions must sum to 1, got {self.evidence_mix}")
        if set(self.evidence_mix) - set(STREAMS):
            raise ValueError(f"unknown evidence streams in {sorted(self.evidence_mix)}")
        if self.num_attributes < 5:
            raise ValueError("need at least 5 attributes for five distinct answers")
        if self.num_entities < 2 or self.num_cues < 2:
            raise ValueError("need at least 2 entities and 2 cues")
        lo, hi = self.span_len
        if not 1 <= lo <= hi <= self.num_frames - 1:
            raise ValueError(f"span_len {self.span_len} incompatible with {self.num_frames} frames")
        if self.subtitle_len[0] < 3 or self.subtitle_len[0] > self.subtitle_len[1]:
            raise ValueError("subtitle lines need room for a cue, entity and attribute")
        if self.objects_per_frame < 4:
            raise ValueError("need at least 4 objects per frame")
        t_lo, t_hi = self.trapped_distractors
        if not 0 <= t_lo <= t_hi <= 4:
            raise ValueError("trapped_distractors must lie within [0, 4]")
        needed = (2 + len(_FUNCTION_WORDS) + self.num_entities + self.num_attributes + self.num_cues
                  + self.num_generic_objects + 8)
        if self.vocab_size < needed:
            raise ValueError(f"vocab_size {self.vocab_size} too small; need >= {needed} "
                             "for distinct entities, attributes, cues and fillers")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("subtitle_len", "span_len", "trapped_distractors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Vocabulary:
    """Word and object codebooks with PAD=0 and UNK=1 in both."""

    def __init__(self, words: list[str], objects: list[str]):
        self.words = list(words)
        self.objects = list(objects)
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.object_index = {o: i for i, o in enumerate(self.objects)}

    @classmethod
    def build(cls, cfg: CorpusConfig) -> "Vocabulary":
        words = ["<pad>", "<unk>"] + _FUNCTION_WORDS
        words += entity_names(cfg) + attribute_names(cfg) + cue_names(cfg) + thing_names(cfg)
        words += filler_names(cfg)
        objects = ["<pad>", "<unk>"]
        objects += [f"obj:{x}" for x in entity_names(cfg) + attribute_names(cfg) + thing_names(cfg)]
        return cls(words, objects)

    def object_label_ids(self) -> np.ndarray:
        """Word ID naming each object (``obj:x`` -> ``x``); -1 where no word matches."""
        out = np.full(len(self.objects), -1, dtype=np.int64)
        out[PAD], out[UNK] = PAD, UNK
        for i, name in enumerate(self.objects):
            if name.startswith("obj:"):
                out[i] = self.word_index.get(name[4:], -1)
        return out

    def word_ids(self, tokens) -> list[int]:
        return [self.word_index.get(t, UNK) for t in tokens]

    def object_ids(self, names) -> list[int]:
        return [self.object_index.get(o, UNK) for o in names]

    def to_dict(self) -> dict:
        return {"words": self.words, "objects": self.objects}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d["objects"])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


def entity_names(cfg): return [f"ent{i:02d}" for i in range(cfg.num_entities)]
def attribute_names(cfg): return [f"att{i:02d}" for i in range(cfg.num_attributes)]
def cue_names(cfg): return [f"cue{i:02d}" for i in range(cfg.num_cues)]
def thing_names(cfg): return [f"thing{i:02d}" for i in range(cfg.num_generic_objects)]


def filler_names(cfg):
    used = (2 + len(_FUNCTION_WORDS) + cfg.num_entities + cfg.num_attributes + cfg.num_cues
            + cfg.num_generic_objects)
    return [f"w{i:03d}" for i in range(cfg.vocab_size - used)]


@dataclass
class Frame:
    subtitle: list[str]
    objects: list[str]
    densecap: list[str]


@dataclass
class Episode:
    id: str
    frames: list[Frame]
    question: list[str]
    answers: list[list[str]]
    gt_answer: int
    gt_span: tuple[float, float]
    evidence_stream: str

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def labels(self, frame_interval: float = FRAME_INTERVAL_SEC) -> np.ndarray:
        return span_to_labels(self.gt_span, self.num_frames, frame_interval)

    def to_json(self) -> str:
        d = asdict(self)
        d["gt_span"] = list(self.gt_span)
        return json.dumps(d, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        frames = [Frame(f["subtitle"], f["objects"], f["densecap"]) for f in d["frames"]]
        return cls(d["id"], frames, d["question"], d["answers"], int(d["gt_answer"]),
                   (float(d["gt_span"][0]), float(d["gt_span"][1])), d["evidence_stream"])


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    splits: dict[str, list[Episode]]

    def __getitem__(self, split: str) -> list[Episode]:
        return self.splits[split]

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.config == other.config
                and self.vocab == other.vocab and self.splits == other.splits)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _episode(rng: np.random.Generator, cfg: CorpusConfig, ep_id: str, stream: str, gt: int) -> Episode:
    ents, atts, cues = entity_names(cfg), attribute_names(cfg), cue_names(cfg)
    n = cfg.num_frames
    things = thing_names(cfg)
    fillers = filler_names(cfg)

    entity = ents[rng.integers(len(ents))]
    other_ents = [e for e in ents if e != entity]
    cue_order = rng.permutation(len(cues))
    cue, other_cues = cues[cue_order[0]], [cues[i] for i in cue_order[1:]]
    candidates = [atts[i] for i in rng.choice(len(atts), size=5, replace=False)]
    correct = candidates[gt]
    distractors = [a for i, a in enumerate(candidates) if i != gt]

    span_len = int(rng.integers(cfg.span_len[0], cfg.span_len[1] + 1))
    first = int(rng.integers(0, n - span_len + 1))
    span_frames = list(range(first, first + span_len))
    out_frames = [t for t in range(n) if t not in span_frames]
    # seconds: start in (2(first-1), 2 first], end in [2 last, 2(last+1)); stays inside the clip
    start = max(0.0, FRAME_INTERVAL_SEC * first - float(rng.choice([0.0, 0.5, 1.0, 1.5])))
    end = min(FRAME_INTERVAL_SEC * (n - 1),
              FRAME_INTERVAL_SEC * span_frames[-1] + float(rng.choice([0.0, 0.5, 1.0, 1.5])))

    # pairs (entity, attribute) to express in the evidence stream, per frame
    evidence: dict[int, list[tuple[str, str]]] = {t: [] for t in range(n)}
    hits = [t for t in span_frames if rng.random() < 0.6] or [int(rng.choice(span_frames))]
    for t in hits:
        evidence[t].append((entity, correct))
    n_trap = int(rng.integers(cfg.trapped_distractors[0], cfg.trapped_distractors[1] + 1))
    trap_frames = rng.choice(out_frames, size=min(n_trap, len(out_frames)), replace=False)
    for a, t in zip(rng.permutation(distractors)[:n_trap], trap_frames):
        evidence[int(t)].append((entity, str(a)))
    # frames carrying the question entity or cue must not host background candidates
    busy = set(span_frames) | {int(t) for t in trap_frames}
    noise_frames = [t for t in range(n) if t not in busy]
    noise: dict[int, list[tuple[str, str]]] = {t: [] for t in range(n)}
    for t in noise_frames:
        if rng.random() < cfg.noise_attribute_prob:
            noise[t].append((str(rng.choice(other_ents)), str(rng.choice(candidates))))
    # decoy cues: other cue words out of span, sometimes beside a trap
    decoy_cue = {t: str(rng.choice(other_cues)) for t in out_frames if rng.random() < 0.5}
    for t in trap_frames:
        if rng.random() < 0.7:
            decoy_cue[int(t)] = str(rng.choice(other_cues))

    frames = []
    for t in range(n):
        sub_items, obj_items, dc_items = [], [], []
        if t in span_frames:
            sub_items.append(cue)
        elif t in decoy_cue:
            sub_items.append(decoy_cue[t])
        planted = {s: [] for s in STREAMS}
        planted[stream] += evidence[t]
        # background attributes sit beside other entities in a random stream
        for pair in noise[t]:
            planted[STREAMS[rng.integers(3)]].append(pair)
        # non-candidate background so every stream always mentions entities/attributes
        bg_attr = [a for a in atts if a not in candidates]
        for s in STREAMS:
            if not planted[s] and rng.random() < 0.7:
                planted[s].append((str(rng.choice(other_ents)), str(rng.choice(bg_attr))))
        for e, a in planted["subtitle"]:
            sub_items += [e, a]
        for e, a in planted["object"]:
            obj_items += [f"obj:{e}", f"obj:{a}"]
        for e, a in planted["densecap"]:
            dc_items.append(["the", e, "with", a])

        length = int(rng.integers(cfg.subtitle_len[0], cfg.subtitle_len[1] + 1))
        length = max(length, len(sub_items))
        sub = list(sub_items) + [str(w) for w in rng.choice(fillers, size=length - len(sub_items))]
        sub = [sub[i] for i in rng.permutation(len(sub))]

        objs = obj_items[: cfg.objects_per_frame]
        objs += [f"obj:{x}" for x in rng.choice(things, size=cfg.objects_per_frame - len(objs),
                                                 replace=False)]
        objs = [objs[i] for i in rng.permutation(len(objs))]

        # background caption naming two generic objects of this frame
        present = [o[4:] for o in objs if o[4:] in things]
        thing_pair = rng.choice(present, size=2, replace=False)
        dc_items.append(["a", str(thing_pair[0]), "near", str(thing_pair[1])])
        order = rng.permutation(len(dc_items))
        dc = [w for i in order for w in dc_items[i]]
        frames.append(Frame(sub, objs, dc))

    question = ["what", "does", entity, "have", "when", cue]
    answers = [["the", a] for a in candidates]
    return Episode(ep_id, frames, question, answers, gt, (start, end), stream)


def generate_split(cfg: CorpusConfig, split: str, count: int) -> list[Episode]:
    streams = list(cfg.evidence_mix)
    probs = np.array([cfg.evidence_mix[s] for s in streams])
    split_seed = SPLITS.index(split) if split in SPLITS else zlib.crc32(split.encode())
    out = []
    for i in range(count):
        # answer slots cycle through a random permutation per block of five episodes,
        # so every split is balanced to within one episode per slot
        slots = np.random.default_rng([cfg.seed, split_seed, i // 5, 5]).permutation(5)
        # per-episode seed: generation order does not matter
        rng = np.random.default_rng([cfg.seed, split_seed, i])
        stream = streams[int(rng.choice(len(streams), p=probs))]
        out.append(_episode(rng, cfg, f"{split}-{i:05d}", stream, int(slots[i % 5])))
    return out


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    splits = {s: generate_split(cfg, s, getattr(cfg, s)) for s in SPLITS}
    return Corpus(cfg, Vocabulary.build(cfg), splits)


# ---------------------------------------------------------------------------
# invariants (model-free scan oracle)
# ---------------------------------------------------------------------------

def _frame_tokens(frame: Frame, stream: str) -> set[str]:
    if stream == "subtitle":
        return set(frame.subtitle)
    if stream == "object":
        return {o.split(":", 1)[-1] for o in frame.objects}
    return set(frame.densecap)


def audit_episode(ep: Episode, frame_interval: float = FRAME_INTERVAL_SEC) -> list[str]:
    """Return every violated Episode invariant (empty list when the episode is sound)."""
    problems = []
    if len(ep.answers) != 5:
        problems.append(f"{ep.id}: {len(ep.answers)} answers")
    if not 0 <= ep.gt_answer < 5:
        problems.append(f"{ep.id}: gt_answer {ep.gt_answer}")
    start, end = ep.gt_span
    if not 0 <= start <= end <= (ep.num_frames - 1) * frame_interval:
        problems.append(f"{ep.id}: span {ep.gt_span} outside clip")
    labels = ep.labels(frame_interval)
    if labels.sum() == 0:
        problems.append(f"{ep.id}: span covers no frame")
    if len({tuple(a) for a in ep.answers}) != 5:
        problems.append(f"{ep.id}: duplicate answers")
    if len(ep.question) < 3:
        return problems + [f"{ep.id}: question {ep.question} has no entity slot"]
    correct = set(ep.answers[ep.gt_answer]) - set(_FUNCTION_WORDS)
    q_tokens = set(ep.question) - set(_FUNCTION_WORDS)
    found_in_span = False
    for t, frame in enumerate(ep.frames):
        for s in STREAMS:
            toks = _frame_tokens(frame, s)
            together = correct <= toks and bool(q_tokens & toks)
            if together and not labels[t]:
                problems.append(f"{ep.id}: correct answer meets question tokens in out-of-span frame {t} ({s})")
            if labels[t] and q_tokens & toks:
                for k, ans in enumerate(ep.answers):
                    if k != ep.gt_answer and set(ans) - set(_FUNCTION_WORDS) <= toks:
                        problems.append(f"{ep.id}: distractor {k} meets question tokens in span frame {t} ({s})")
        # evidence: entity and answer together in the designated stream
        toks = _frame_tokens(frame, ep.evidence_stream)
        if labels[t] and correct <= toks and ep.question[2] in toks:
            found_in_span = True
    if not found_in_span:
        problems.append(f"{ep.id}: no in-span evidence in the {ep.evidence_stream} stream")
    for s in STREAMS:
        if s == ep.evidence_stream:
            continue
        for t, frame in enumerate(ep.frames):
            if ep.question[2] in _frame_tokens(frame, s):
                problems.append(f"{ep.id}: question entity leaks into {s} stream at frame {t}")
    return problems


def audit_split(episodes: list[Episode]) -> dict:
    """Scan a split: invariant violations plus the answer-slot histogram."""
    problems = [p for ep in episodes for p in audit_episode(ep)]
    slots = np.bincount([ep.gt_answer for ep in episodes], minlength=5)
    return {"problems": problems,
            "slot_fraction": (slots / max(1, len(episodes))).tolist(),
            "streams": {s: sum(ep.evidence_stream == s for ep in episodes) for s in STREAMS}}


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def save_episodes(episodes: list[Episode], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(ep.to_json() + "\n")


def load_episodes(path) -> list[Episode]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Episode.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
    return out


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus directory: config.json, vocab.json and one JSONL file per split."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(corpus.config.to_dict(), indent=2) + "\n")
    (root / "vocab.json").write_text(json.dumps(corpus.vocab.to_dict()) + "\n")
    for split, episodes in corpus.splits.items():
        save_episodes(episodes, root / f"{split}.jsonl")


def load_corpus(path) -> Corpus:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    cfg = CorpusConfig.from_dict(json.loads((root / "config.json").read_text()))
    vocab = Vocabulary.from_dict(json.loads((root / "vocab.json").read_text()))
    splits = {}
    for split in SPLITS:
        f = root / f"{split}.jsonl"
        splits[split] = load_episodes(f) if f.exists() else []
    return Corpus(cfg, vocab, splits)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Integer ID arrays and validity masks for a list of episodes."""

    qa: np.ndarray          # (E, 5, T_qa)
    qa_mask: np.ndarray
    subtitle: np.ndarray    # (E, T_F, T_s)
    subtitle_mask: np.ndarray
    objects: np.ndarray     # (E, T_F, K)
    objects_mask: np.ndarray
    densecap: np.ndarray    # (E, T_F, T_d)
    densecap_mask: np.ndarray
    labels: np.ndarray      # (E, T_F) 0/1
    gt: np.ndarray          # (E,)
    ids: list[str]
    streams: list[str]

    def __len__(self):
        return len(self.ids)


def _pad(rows: list[list[int]], width: int | None = None):
    width = width or max(1, max(len(r) for r in rows))
    ids = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        r = r[:width]
        ids[i, : len(r)] = r
    return ids, ids != PAD


def _nearest_nonempty(lines: list[list[int]]) -> list[list[int]]:
    """Frames with an empty subtitle line borrow the temporally nearest line."""
    full = [i for i, l in enumerate(lines) if l]
    if not full:
        return [[UNK] for _ in lines]
    return [l if l else lines[min(full, key=lambda j: (abs(j - i), j))] for i, l in enumerate(lines)]


def collate(episodes: list[Episode], vocab: Vocabulary,
            frame_interval: float = FRAME_INTERVAL_SEC) -> Batch:
    if not episodes:
        raise ValueError("cannot collate an empty episode list")
    n = episodes[0].num_frames
    if any(ep.num_frames != n for ep in episodes):
        raise ValueError("all episodes in a batch need the same frame count")

    def stack(per_ep):
        width = max(1, max(len(r) for rows in per_ep for r in rows))
        pairs = [_pad(rows, width) for rows in per_ep]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    qa = stack([[vocab.word_ids(ep.question + a) for a in ep.answers] for ep in episodes])
    sub = stack([_nearest_nonempty([vocab.word_ids(f.subtitle) for f in ep.frames]) for ep in episodes])
    obj = stack([[vocab.object_ids(f.objects) or [UNK] for f in ep.frames] for ep in episodes])
    dc = stack([[vocab.word_ids(f.densecap) or [UNK] for f in ep.frames] for ep in episodes])
    return Batch(qa[0], qa[1], sub[0], sub[1], obj[0], obj[1], dc[0], dc[1],
                 labels=np.stack([ep.labels(frame_interval) for ep in episodes]),
                 gt=np.array([ep.gt_answer for ep in episodes]),
                 ids=[ep.id for ep in episodes], streams=[ep.evidence_stream for ep in episodes])

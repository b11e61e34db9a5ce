import json
from dataclasses import replace

import numpy as np
import pytest

from fgqa.data import (
    PAD,
    UNK,
    CorpusConfig,
    CorpusFormatError,
    Episode,
    Frame,
    Vocabulary,
    audit_episode,
    audit_split,
    collate,
    generate_corpus,
    generate_split,
    load_corpus,
    load_episodes,
    save_corpus,
    save_episodes,
)
from fgqa.model import ModelConfig, ModelParams, embed_episode

SMALL = CorpusConfig(train=40, val=10, test=10)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(SMALL)


def test_same_seed_is_byte_identical(tmp_path, small):
    again = generate_corpus(SMALL)
    save_corpus(small, tmp_path / "a")
    save_corpus(again, tmp_path / "b")
    for name in ("config.json", "vocab.json", "train.jsonl", "val.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs():
    a = generate_split(SMALL, "train", 5)
    b = generate_split(replace(SMALL, seed=1), "train", 5)
    assert a != b


def test_generation_is_order_independent():
    full = generate_split(SMALL, "train", 20)
    assert generate_split(SMALL, "train", 5) == full[:5]


def test_episode_invariants(small):
    for split, eps in small.splits.items():
        report = audit_split(eps)
        assert report["problems"] == [], report["problems"][:3]
        for ep in eps:
            assert len(ep.answers) == 5
            assert 0 <= ep.gt_answer < 5
            start, end = ep.gt_span
            assert 0 <= start <= end <= (ep.num_frames - 1) * 2.0
            assert ep.labels().sum() >= 1


def test_answer_slots_uniform_over_5000():
    eps = generate_split(CorpusConfig(), "train", 5000)
    frac = np.bincount([ep.gt_answer for ep in eps], minlength=5) / len(eps)
    assert np.all(np.abs(frac - 0.2) <= 0.02), frac


def test_evidence_mix_respected():
    eps = generate_split(CorpusConfig(), "val", 2000)
    counts = {s: sum(ep.evidence_stream == s for ep in eps) / 2000 for s in ("subtitle", "object", "densecap")}
    assert abs(counts["subtitle"] - 0.4) < 0.04
    assert abs(counts["object"] - 0.3) < 0.04
    assert abs(counts["densecap"] - 0.3) < 0.04


def test_audit_flags_out_of_span_evidence(small):
    ep = small["train"][0]
    labels = ep.labels()
    out_t = int(np.flatnonzero(labels == 0)[0])
    bad = Episode.from_dict(json.loads(ep.to_json()))
    att = ep.answers[ep.gt_answer][1]
    bad.frames[out_t].densecap += ["the", ep.question[2], "with", att]
    assert any("out-of-span" in p for p in audit_episode(bad))


def test_audit_flags_question_without_entity(small):
    bad = Episode.from_dict(json.loads(small["train"][2].to_json()))
    bad.question = ["what", "does"]
    assert any("no entity slot" in p for p in audit_episode(bad))


def test_audit_flags_missing_evidence(small):
    ep = small["train"][1]
    bad = Episode.from_dict(json.loads(ep.to_json()))
    att = ep.answers[ep.gt_answer][1]
    for f in bad.frames:
        f.subtitle = [w for w in f.subtitle if w != att]
        f.objects = [o for o in f.objects if o != f"obj:{att}"]
        f.densecap = [w for w in f.densecap if w != att]
    assert any("no in-span evidence" in p for p in audit_episode(bad))


def test_densecap_evidence_absent_from_other_streams(small):
    for ep in small["train"]:
        if ep.evidence_stream != "densecap":
            continue
        ent = ep.question[2]
        for f in ep.frames:
            assert ent not in f.subtitle
            assert f"obj:{ent}" not in f.objects


@pytest.mark.parametrize("change", [
    {"evidence_mix": {"subtitle": 0.5, "object": 0.3, "densecap": 0.3}},
    {"train": 0},
    {"vocab_size": 20},
    {"num_attributes": 4},
])
def test_config_validation(change):
    with pytest.raises(ValueError):
        generate_corpus(replace(SMALL, **change))


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        CorpusConfig.from_dict({"trian": 5})


def test_config_dict_round_trip():
    assert CorpusConfig.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL


# -- serialisation ------------------------------------------------------------

def test_corpus_round_trip(tmp_path, small):
    save_corpus(small, tmp_path / "c")
    assert load_corpus(tmp_path / "c") == small


def test_ten_episode_round_trip(tmp_path, small):
    path = tmp_path / "ten.jsonl"
    save_episodes(small["train"][:10], path)
    assert load_episodes(path) == small["train"][:10]


def test_empty_file_is_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_episodes(path) == []


def test_truncated_line_names_line_number(tmp_path, small):
    path = tmp_path / "bad.jsonl"
    lines = [ep.to_json() for ep in small["train"][:3]]
    lines[1] = lines[1][: len(lines[1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match=r"bad\.jsonl:2"):
        load_episodes(path)


def test_missing_corpus_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope")


# -- vocabulary / batching ----------------------------------------------------

def test_vocab_reserved_ids(small):
    v = small.vocab
    assert v.words[PAD] == "<pad>" and v.words[UNK] == "<unk>"
    assert v.objects[PAD] == "<pad>" and v.objects[UNK] == "<unk>"
    assert v.word_ids(["never-seen"]) == [UNK]
    assert Vocabulary.from_dict(json.loads(json.dumps(v.to_dict()))) == v


def test_collate_shapes_and_masks(small):
    eps = small["train"][:4]
    b = collate(eps, small.vocab)
    assert b.qa.shape[:2] == (4, 5)
    assert b.subtitle.shape[:2] == (4, 12)
    assert b.objects.shape == (4, 12, 6)
    np.testing.assert_array_equal(b.qa_mask, b.qa != PAD)
    np.testing.assert_array_equal(b.labels, np.stack([ep.labels() for ep in eps]))
    for e, ep in enumerate(eps):
        for h in range(5):
            assert b.qa[e, h][b.qa_mask[e, h]].tolist() == small.vocab.word_ids(ep.question + ep.answers[h])


def test_empty_subtitle_borrows_nearest_line(small):
    ep = Episode.from_dict(json.loads(small["train"][0].to_json()))
    ep.frames[3].subtitle = []
    b = collate([ep], small.vocab)
    np.testing.assert_array_equal(b.subtitle[0, 3], b.subtitle[0, 2])


def test_embed_episode_five_hypotheses_and_unk(small):
    params = ModelParams(ModelConfig(d=8, heads=2), len(small.vocab.words), len(small.vocab.objects))
    ep = Episode.from_dict(json.loads(small["train"][0].to_json()))
    ep.frames[0].subtitle[0] = "zzz-unknown"
    emb = embed_episode(ep, small.vocab, params)
    assert emb.qa.shape[:2] == (1, 5)
    assert emb.qa.shape[-1] == 8
    np.testing.assert_array_equal(emb.subtitle.data[0, 0, 0], params.word_emb.data[UNK])


def test_uniform_random_answerer_is_chance():
    eps = generate_split(CorpusConfig(), "test", 3000)
    rng = np.random.default_rng(0)
    acc = np.mean(rng.integers(0, 5, len(eps)) == np.array([ep.gt_answer for ep in eps]))
    assert abs(acc - 0.2) < 0.03


def test_frame_dataclass_json_shape(small):
    d = json.loads(small["train"][0].to_json())
    assert set(d) == {"id", "frames", "question", "answers", "gt_answer", "gt_span", "evidence_stream"}
    assert set(d["frames"][0]) == {"subtitle", "objects", "densecap"}
    assert isinstance(Frame(**d["frames"][0]), Frame)

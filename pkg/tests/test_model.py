import numpy as np
import pytest

from fgqa import tensor as T
from fgqa.data import CorpusConfig, collate, generate_corpus
from fgqa.model import ModelConfig, ModelParams, forward

# a random output layer so logits carry signal in shape and determinism tests
SMALL = dict(d=8, heads=2, cls_out_init="glorot")


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(train=6, val=6, test=6, seed=11))


def _params(corpus, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    return ModelParams(cfg, len(corpus.vocab.words), len(corpus.vocab.objects), seed=0)


def test_output_shapes_and_ranges(corpus):
    batch = collate(corpus["train"], corpus.vocab)
    out = forward(_params(corpus), batch)
    n = len(batch)
    assert out.logits.shape == (n, 5)
    assert out.gate_local.shape == out.gate_global.shape == (n, 5, 12)
    assert np.all(np.isfinite(out.logits.data))
    for g in (out.gate_local.data, out.gate_global.data):
        assert np.all((g > 0) & (g < 1))


def test_training_runs_in_float32(corpus):
    out = forward(_params(corpus), collate(corpus["train"][:2], corpus.vocab))
    assert out.logits.dtype == np.float32


def test_eval_forward_deterministic(corpus):
    p = _params(corpus)
    batch = collate(corpus["train"], corpus.vocab)
    np.testing.assert_array_equal(forward(p, batch).logits.data, forward(p, batch).logits.data)


def test_train_forward_uses_dropout(corpus):
    p = _params(corpus, dropout=0.5)
    batch = collate(corpus["train"], corpus.vocab)
    a = forward(p, batch, train=True, rng=np.random.default_rng(0)).logits.data
    b = forward(p, batch, train=True, rng=np.random.default_rng(1)).logits.data
    c = forward(p, batch, train=True, rng=np.random.default_rng(0)).logits.data
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_episode_results_independent_of_batch(corpus):
    p = _params(corpus)
    eps = corpus["train"]
    whole = forward(p, collate(eps, corpus.vocab)).logits.data
    for i, ep in enumerate(eps):
        alone = forward(p, collate([ep], corpus.vocab)).logits.data[0]
        np.testing.assert_allclose(alone, whole[i], rtol=1e-4, atol=1e-5)


def test_parameter_names_stable_and_unique(corpus):
    p = _params(corpus)
    names = list(p.named())
    assert len(names) == len(set(names))
    assert "emb.word" in names and "emb.object" in names and "gates.f_local.w" in names
    assert p.num_values() == sum(t.data.size for t in p.named().values())


def test_same_seed_same_init(corpus):
    a, b = _params(corpus), _params(corpus)
    for k, t in a.named().items():
        np.testing.assert_array_equal(t.data, b.named()[k].data)


@pytest.mark.parametrize("kw,absent", [
    (dict(use_densecap=False), ("enc.densecap", "word_att.densecap", "frame_att.sd", "fusion")),
    (dict(dual_att=False), ("frame_att",)),
])
def test_active_parameters_follow_variant(corpus, kw, absent):
    p = _params(corpus, **kw)
    active = p.active()
    assert not any(k.startswith(absent) for k in active)
    batch = collate(corpus["train"][:3], corpus.vocab)
    out = forward(p, batch)
    T.sum_(out.logits).backward()
    unused = [k for k, t in p.named().items() if k not in active and t.grad is not None and np.any(t.grad)]
    assert unused == []


def test_densecap_off_ignores_densecap_tokens(corpus):
    p = _params(corpus, use_densecap=False)
    batch = collate(corpus["train"][:3], corpus.vocab)
    before = forward(p, batch).logits.data
    batch.densecap = np.where(batch.densecap_mask, 5, 0)
    np.testing.assert_array_equal(forward(p, batch).logits.data, before)


def test_embedding_scale(corpus):
    p = _params(corpus, emb_std=3.0)
    assert 2.5 < p.word_emb.data.std() < 3.5


def test_zero_classifier_output_init_gives_uniform_scores(corpus):
    p = _params(corpus, cls_out_init="zero")
    logits = forward(p, collate(corpus["train"], corpus.vocab)).logits.data
    np.testing.assert_array_equal(logits, 0.0)


@pytest.mark.parametrize("kw", [dict(d=7), dict(d=8, heads=3), dict(L=0), dict(gated_pool="mean"),
                                dict(dropout=1.0), dict(emb_std=0.0), dict(cls_out_init="ones")])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, **kw}).validate()


def test_trace_exposes_attention(corpus):
    p = _params(corpus)
    out = forward(p, collate(corpus["train"][:2], corpus.vocab), trace=True)
    tr = out.trace
    assert set(tr) >= {"word_subtitle", "word_video", "word_densecap", "frame_sv", "frame_sd", "fusion"}
    a = tr["frame_sv"]["frame_attention"]
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)

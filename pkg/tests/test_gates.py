import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgqa import tensor as T
from fgqa.gates import GatedFeatures, GateParams, classify, frame_gates, predict
from fgqa.encoder import conv_encoder
from fgqa.tensor import Tensor

D = 8


@pytest.fixture
def params():
    return GateParams.init(D, np.random.default_rng(0))


def _z(shape=(5, 6, D), seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def test_zero_local_gate_is_half(params):
    params.local.w.data[:] = 0
    params.local.b.data[:] = 0
    z = _z()
    g = frame_gates(z, params)
    np.testing.assert_allclose(g.gate_scores_local.data, 0.5)
    z_hat = conv_encoder(z, params.encoder).data
    np.testing.assert_allclose(g.z_gl_pooled.data, 0.5 * z_hat.sum(-2), rtol=1e-5, atol=1e-5)


def test_saturated_local_gate(params):
    params.local.w.data[:] = 0
    params.local.b.data[:] = -20
    g = frame_gates(_z(), params)
    assert np.all(g.gate_scores_local.data < 1e-8)
    assert np.all(np.abs(g.z_gl_pooled.data) < 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_scores_strictly_inside_unit_interval(seed):
    p = GateParams.init(D, np.random.default_rng(seed))
    g = frame_gates(_z(seed=seed), p)
    for s in (g.gate_scores_local.data, g.gate_scores_global.data):
        assert np.all((s > 0) & (s < 1))


def test_raising_local_bias_raises_every_score(params):
    z = _z()
    before = frame_gates(z, params).gate_scores_local.data
    params.local.b.data += 0.5
    after = frame_gates(z, params).gate_scores_local.data
    assert np.all(after > before)


def test_pooled_features_permutation_invariant(params):
    z_hat = Tensor(np.random.default_rng(2).normal(size=(5, 6, D)).astype(np.float32))
    perm = [3, 0, 5, 1, 4, 2]
    # permute the encoded frames directly to bypass the positional encoding
    g_local = T.sigmoid(params.local(z_hat))
    a = T.sum_(z_hat * g_local, axis=-2).data
    zp = Tensor(z_hat.data[:, perm])
    b = T.sum_(zp * T.sigmoid(params.local(zp)), axis=-2).data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(T.maxpool_over_axis(z_hat, -2).data, T.maxpool_over_axis(zp, -2).data)


def test_max_pool_option(params):
    g = frame_gates(_z(), params, gated_pool="max")
    assert g.z_gl_pooled.shape == (5, D)
    with pytest.raises(ValueError):
        frame_gates(_z(), params, gated_pool="mean")


def test_local_override(params):
    override = np.zeros((5, 6))
    override[:, 2] = 1.0
    g = frame_gates(_z(), params, local_override=override)
    np.testing.assert_array_equal(g.gate_scores_local.data, override)


def _features(x):
    x = Tensor(np.asarray(x, dtype=np.float32))
    return GatedFeatures(x, x, x, None, None)


def test_identical_hypotheses_tie_to_index_zero(params):
    feats = _features(np.tile(np.random.default_rng(3).normal(size=(1, D)), (5, 1)))
    logits = classify(feats, params).data
    assert np.allclose(logits, logits[0])
    assert predict(logits) == 0


def test_zero_classifier_gives_bias(params):
    params.hidden.w.data[:] = 0
    params.out.w.data[:] = 0
    params.out.b.data[:] = 1.25
    logits = classify(_features(np.random.default_rng(4).normal(size=(2, 5, D))), params).data
    np.testing.assert_allclose(logits, 1.25)


def test_wrong_hypothesis_count(params):
    with pytest.raises(ValueError):
        classify(_features(np.zeros((4, D))), params)


def test_prediction_shift_invariant():
    logits = np.random.default_rng(5).normal(size=(10, 5))
    np.testing.assert_array_equal(predict(logits), predict(logits + 3.7))


def test_gates_and_classifier_gradients():
    rng = np.random.default_rng(6)
    p = GateParams.init(4, rng)
    z = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
    fn = lambda: T.sum_(classify(frame_gates(z, p), p) * Tensor(rng.normal(size=5)))
    w = rng.normal(size=5)
    fn = lambda: T.sum_(classify(frame_gates(z, p), p) * Tensor(w.astype(z.dtype)))
    res = T.grad_check(fn, {"z": z, **p.named("gates")}, precision=32)
    assert res["max_rel_err"] < 1e-3, res["worst"]


def test_global_gate_unsupervised_names(params):
    names = params.named("gates")
    assert "gates.f_local.w" in names and "gates.f_global.w" in names
    assert names["gates.f_local.w"] is not names["gates.f_global.w"]

from pathlib import Path

import numpy as np
import pytest

from decoydiff import text
from decoydiff.diffusion import LatentCodec, NoiseSchedule, make_inpaint_context, q_sample
from decoydiff.formats import read_tnsr, write_tnsr
from decoydiff.predictor import (AttentionLayerId, cross_attention, dual_forward,
                                 init_predictor_weights, list_cross_attention_layers,
                                 predict_noise)
from decoydiff.tensor import Tensor, check_gradient, mse, no_grad, sum_

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def weights():
    rng = np.random.default_rng(33)
    w = text.init_encoder_weights(rng)
    w.update(init_predictor_weights(rng))
    return w


@pytest.fixture(scope="module")
def embedding(weights):
    with no_grad():
        e = text.encode(text.tokenize("a red circle"), weights)
    return e


@pytest.fixture(scope="module")
def context():
    rng = np.random.default_rng(8)
    codec = LatentCodec(7)
    sched = NoiseSchedule(100)
    x = rng.random((16, 16, 3)).astype(np.float32)
    mask = np.ones((16, 16), dtype=np.float32)
    mask[3:10, 4:12] = 0.0
    z0 = codec.encode_np(x)
    z_t = q_sample(z0, 42, rng.normal(size=z0.shape).astype(np.float32), sched)
    return make_inpaint_context(x, mask, None, Tensor(z_t), codec)


def test_list_layers(weights):
    ids = list_cross_attention_layers(weights)
    assert [l.resolution for l in ids] == [64, 16, 4, 16, 64]
    assert [l.index for l in ids] == list(range(5))
    sel = [l for l in ids if l.resolution in {16, 4}]
    assert len(sel) == 3
    assert [l for l in ids if l.resolution in set()] == []


def test_cross_attention_brute_force_oracle(weights, embedding):
    # identity projections make Q=phi, K=V=e; compare to a numpy oracle
    k = 32
    w = dict(weights)
    eye = Tensor(np.eye(k, dtype=np.float32))
    for nm in ("ca.wq", "ca.wk", "ca.wv"):
        w[f"pred.stage0.{nm}"] = eye
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(2, k)).astype(np.float32)
    with no_grad():
        a, ca = cross_attention(Tensor(phi), embedding, w, "pred.stage0")
    e = embedding.e.data
    scores = phi @ e.T / np.sqrt(k)
    ex = np.exp(scores - scores.max(-1, keepdims=True))
    a_ref = ex / ex.sum(-1, keepdims=True)
    assert np.max(np.abs(a.data - a_ref)) < 1e-6
    assert np.max(np.abs(ca.data - a_ref @ e)) < 1e-6


def test_cross_attention_decoy_concentration(weights, embedding):
    rng = np.random.default_rng(1)
    mask = text.make_token_mask(embedding, text.BOS)
    with no_grad():
        v = (embedding.e @ weights["pred.stage0.ca.wv"]).data
        for _ in range(20):
            phi = Tensor(rng.normal(size=(5, 32)).astype(np.float32))
            a, ca = cross_attention(phi, embedding, weights, "pred.stage0",
                                    mask=mask, c=1e4)
            assert a.data[:, 0].min() >= 1 - 1e-3
            rel = np.abs(ca.data - v[0]) / np.maximum(np.abs(v[0]), 1e-8)
            assert rel.max() < 1e-3


def test_cross_attention_all_ones_mask_is_identity(weights, embedding):
    rng = np.random.default_rng(2)
    phi = Tensor(rng.normal(size=(4, 32)).astype(np.float32))
    allmask = text.TokenMask(vec=np.ones(8, dtype=np.float32), target="ALL")
    with no_grad():
        a0, _ = cross_attention(phi, embedding, weights, "pred.stage0")
        a1, _ = cross_attention(phi, embedding, weights, "pred.stage0",
                                mask=allmask, c=1e4)
    assert np.max(np.abs(a0.data - a1.data)) < 1e-6


def test_cross_attention_bad_mask_length(weights, embedding):
    bad = text.TokenMask(vec=np.ones(5, dtype=np.float32), target="BOS")
    with pytest.raises(ValueError, match="mask length"):
        cross_attention(Tensor(np.zeros((2, 32), dtype=np.float32)),
                        embedding, weights, "pred.stage0", mask=bad)


def test_predict_noise_trace_flag_does_not_change_output(weights, embedding, context):
    with no_grad():
        e1, tr = predict_noise(context, 42, embedding, weights, trace=True)
        e2, none = predict_noise(context, 42, embedding, weights, trace=False)
    assert none is None
    assert np.array_equal(e1.data, e2.data)
    assert len(tr.entries) == len(list_cross_attention_layers(weights))


def test_predict_noise_allones_bias_matches_unmasked(weights, embedding, context):
    allmask = text.TokenMask(vec=np.ones(8, dtype=np.float32), target="ALL")
    with no_grad():
        e0, _ = predict_noise(context, 42, embedding, weights)
        e1, _ = predict_noise(context, 42, embedding, weights, mask=allmask)
    assert np.max(np.abs(e0.data - e1.data)) < 1e-5


def test_predict_noise_channel_check(weights, embedding, context):
    class BadCtx:
        def features(self):
            return Tensor(np.zeros((64, 12), dtype=np.float32))

    with pytest.raises(ValueError, match="17"):
        predict_noise(BadCtx(), 10, embedding, weights)


def test_predict_noise_golden_regression(weights, embedding, context):
    with no_grad():
        eps, _ = predict_noise(context, 42, embedding, weights)
    GOLDEN.mkdir(exist_ok=True)
    path = GOLDEN / "predict_noise_seed33.tnsr"
    if not path.exists():
        write_tnsr(path, eps.data)
    assert np.array_equal(eps.data, read_tnsr(path))


def test_attention_rows_stochastic_everywhere(weights, embedding, context):
    with no_grad():
        _, tr = predict_noise(context, 42, embedding, weights, trace=True)
    for ent in tr.entries:
        assert np.allclose(ent.attn.data.sum(-1), 1.0, atol=1e-6)
        assert ent.attn.data.shape[1] == 8


def test_dual_forward_decoy_and_divergence_point(weights, embedding, context):
    mask = text.make_token_mask(embedding, text.BOS)
    with no_grad():
        tm, tu = dual_forward(context, 42, embedding, weights, mask)
        v_bos = (embedding.e @ weights["pred.stage0.ca.wv"]).data[0]
    assert tm.masked and not tu.masked
    # masked branch concentrates on the decoy token at every layer
    for ent in tm.entries:
        assert ent.attn.data[:, 0].min() >= 1 - 1e-3
    # branches share everything up to the first cross-attention
    assert np.array_equal(tm.entries[0].phi_in.data, tu.entries[0].phi_in.data)
    # and diverge from the second stage on
    assert not np.array_equal(tm.entries[1].phi_in.data, tu.entries[1].phi_in.data)
    rel = np.abs(tm.entries[0].ca.data - v_bos) / np.maximum(np.abs(v_bos), 1e-8)
    assert rel.max() < 1e-3


def test_dual_forward_gradient_wrt_context(weights, embedding):
    """Finite differences through the full dual-branch computation."""
    rng = np.random.default_rng(4)
    codec = LatentCodec(7)
    sched = NoiseSchedule(100)
    x = rng.random((16, 16, 3)).astype(np.float32)
    mask_img = np.ones((16, 16), dtype=np.float32)
    mask_img[5:11, 5:11] = 0.0
    z0 = codec.encode_np(x)
    z_t = q_sample(z0, 30, rng.normal(size=z0.shape).astype(np.float32), sched)
    dm = text.make_token_mask(embedding, text.BOS)
    probe = Tensor(rng.normal(size=(8, 8, 8)).astype(np.float32) * 0.1)

    def branch_gap(zm):
        ctx = make_inpaint_context(x, mask_img, None, Tensor(z_t), codec)
        ctx.z0_masked = zm  # drive the context through its only delta path
        ctx._feats = None
        tm, tu = dual_forward(ctx, 30, embedding, weights, dm)
        total = None
        for em, eu in zip(tm.entries, tu.entries):
            d = mse(em.ca, eu.ca)
            total = d if total is None else total + d
        return sum_(probe * Tensor(np.zeros((8, 8, 8), dtype=np.float32))) + total

    zm0 = Tensor(codec.encode_np((x * mask_img[:, :, None]).astype(np.float32)))
    err = check_gradient(branch_gap, zm0, h=1e-2)
    assert err < 1e-3


def test_layer_id_values():
    lid = AttentionLayerId(2, 4)
    assert lid.index == 2 and lid.resolution == 4

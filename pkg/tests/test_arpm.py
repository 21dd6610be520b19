import numpy as np
import pytest

from mainet.arpm import (
    ARPM, CAFN, DAFN1, DAFN2, AttentionParams, BimodalInteraction, PrimaryBranch, Tokenizer,
    arpm_forward, attention_weights, cafn, dafn1, dafn2, mhca, mhsa, tokenize, zero_parameters,
)
from mainet.nn import Linear
from mainet.tensor import ConfigurationError, DimensionError, Tensor, grad_check, log, softmax

import oracles
from oracles import arpm_np, att_np, cafn_np, dafn1_np, dafn2_np

D, H = 16, 4


def randomize_biases(module, rng):
    for name, prm in module.named_parameters():
        if name.endswith("b1") or name.endswith("b2") or name.endswith("bias"):
            prm.assign_(rng.standard_normal(prm.shape) * 0.3)


class TestTokenize:
    def test_widths(self, rng):
        tok = Tokenizer(256, rng, n_tokens=4)
        assert tokenize(rng.standard_normal(512), tok).shape == (4, 256)

    def test_zero(self, rng):
        tok = Tokenizer(32, rng)
        assert not tokenize(np.zeros(512), tok).data.any()

    def test_against_reshape_project(self, rng):
        tok = Tokenizer(32, rng)
        tok.proj.bias.assign_(rng.standard_normal(32))
        f = rng.standard_normal(512)
        ref = np.array([f[i * 128:(i + 1) * 128] @ tok.proj.weight.data + tok.proj.bias.data for i in range(4)])
        np.testing.assert_allclose(tokenize(f, tok).data, ref, rtol=1e-12, atol=1e-13)

    def test_divisibility(self, rng):
        with pytest.raises(ConfigurationError):
            Tokenizer(32, rng, n_tokens=3)


class TestAttention:
    def test_singleton_sequence(self, rng):
        p = AttentionParams(D, H, rng)
        x = rng.standard_normal((1, D))
        heads = np.concatenate([x @ p.W_V.data[i] for i in range(H)], axis=1)
        np.testing.assert_allclose(mhsa(x, p).data, heads @ p.W_O.data, rtol=1e-12)

    def test_permutation_equivariance(self, rng):
        p = AttentionParams(D, H, rng)
        x = rng.standard_normal((6, D))
        perm = rng.permutation(6)
        np.testing.assert_allclose(mhsa(x[perm], p).data, mhsa(x, p).data[perm], rtol=1e-12, atol=1e-13)

    def test_self_against_loops(self, rng):
        for _ in range(5):
            p = AttentionParams(D, H, rng)
            x = rng.standard_normal((5, D))
            np.testing.assert_allclose(mhsa(x, p).data, att_np(x, x, p), rtol=1e-10, atol=1e-12)

    def test_cross_against_loops(self, rng):
        for _ in range(5):
            p = AttentionParams(D, H, rng)
            xq, xkv = rng.standard_normal((3, D)), rng.standard_normal((6, D))
            out = mhca(xq, xkv, p).data
            assert out.shape == (3, D)
            np.testing.assert_allclose(out, att_np(xq, xkv, p), rtol=1e-10, atol=1e-12)

    def test_cross_equals_self_when_same(self, rng):
        p = AttentionParams(D, H, rng)
        x = rng.standard_normal((4, D))
        np.testing.assert_array_equal(mhca(x, x, p).data, mhsa(x, p).data)

    def test_single_key(self, rng):
        p = AttentionParams(D, H, rng)
        xq, xkv = rng.standard_normal((5, D)), rng.standard_normal((1, D))
        row = np.concatenate([xkv @ p.W_V.data[i] for i in range(H)], axis=1) @ p.W_O.data
        np.testing.assert_allclose(mhca(xq, xkv, p).data, np.repeat(row, 5, axis=0), rtol=1e-12)

    def test_weights_are_distributions(self, rng):
        p = AttentionParams(D, H, rng)
        A = attention_weights(rng.standard_normal((2, 5, D)) * 3, rng.standard_normal((2, 7, D)), p).data
        assert A.shape == (2, H, 5, 7) and (A >= 0).all()
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-9)

    def test_qk_scale_invariance(self, rng):
        p = AttentionParams(D, H, rng)
        x = rng.standard_normal((5, D))
        before = attention_weights(x, x, p).data
        p.W_Q.assign_(p.W_Q.data * 3.7)
        p.W_K.assign_(p.W_K.data / 3.7)
        np.testing.assert_allclose(attention_weights(x, x, p).data, before, atol=1e-9)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            mhsa(np.zeros((3, D + 1)), AttentionParams(D, H, rng))

    def test_batched_equals_loop(self, rng):
        p = AttentionParams(D, H, rng)
        xq, xkv = rng.standard_normal((3, 4, D)), rng.standard_normal((3, 2, D))
        out = mhca(xq, xkv, p).data
        for i in range(3):
            np.testing.assert_allclose(out[i], mhca(xq[i], xkv[i], p).data, rtol=1e-12)


class TestCAFN:
    def test_zero_excitation(self, rng):
        p = CAFN(D, rng)
        for prm in (p.W1, p.b1, p.W2, p.b2, p.proj.bias):
            prm.assign_(np.zeros(prm.shape))
        fx, fy = rng.standard_normal((4, D)), rng.standard_normal((4, D))
        ref = 0.5 * np.concatenate([fx, fy], axis=1) @ p.proj.weight.data
        np.testing.assert_allclose(cafn(fx, fy, p).data, ref, rtol=1e-12)

    def test_zero_inputs(self, rng):
        assert not cafn(np.zeros((4, D)), np.zeros((4, D)), CAFN(D, rng)).data.any()

    def test_against_composition(self, rng):
        p = CAFN(D, rng)
        randomize_biases(p, rng)
        fx, fy = rng.standard_normal((4, D)), rng.standard_normal((4, D))
        np.testing.assert_allclose(cafn(fx, fy, p).data, cafn_np(fx, fy, p), rtol=1e-12, atol=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cafn(np.zeros((4, D)), np.zeros((3, D)), CAFN(D, rng))


class TestDAFN:
    def test_dafn1_zero(self, rng):
        p = DAFN1(D, H, rng)
        assert not dafn1(np.zeros((4, D)), np.zeros((4, D)), p).data.any()

    def test_dafn1_singleton_closed_form(self, rng):
        p = DAFN1(D, H, rng)
        fp, fa = rng.standard_normal((1, D)), rng.standard_normal((1, D))

        def value_path(x, ap):
            # a singleton softmax is 1, so attention reduces to concat_i(x W_V_i) W_O
            return np.concatenate([x @ ap.W_V.data[i] for i in range(H)], axis=1) @ ap.W_O.data

        S = value_path(fa, p.self_attn)
        C = value_path(fp, p.cross_attn)
        np.testing.assert_allclose(dafn1(fp, fa, p).data, value_path(S + C, p.refine_attn), rtol=1e-10)

    def test_dafn1_against_composition(self, rng):
        p = DAFN1(D, H, rng)
        fp, fa = rng.standard_normal((4, D)), rng.standard_normal((4, D))
        np.testing.assert_allclose(dafn1(fp, fa, p).data, dafn1_np(fp, fa, p), rtol=1e-10, atol=1e-12)

    def test_dafn2_symmetric_inputs(self, rng):
        p = DAFN2(D, H, rng)
        p.cross_ba = p.cross_ab
        f = rng.standard_normal((4, D))
        U = mhca(f, f, p.cross_ab)
        np.testing.assert_allclose(dafn2(f, f, p).data, mhsa(cafn(U, U, p.fuse), p.refine_attn).data, rtol=1e-12)

    def test_dafn2_zero(self, rng):
        assert not dafn2(np.zeros((4, D)), np.zeros((4, D)), DAFN2(D, H, rng)).data.any()

    def test_dafn2_against_composition(self, rng):
        p = DAFN2(D, H, rng)
        randomize_biases(p, rng)
        a, b = rng.standard_normal((4, D)), rng.standard_normal((4, D))
        np.testing.assert_allclose(dafn2(a, b, p).data, dafn2_np(a, b, p), rtol=1e-10, atol=1e-12)


class TestARPM:
    def test_residual_identity(self, rng):
        p = ARPM(D, H, rng)
        zero_parameters(p)
        Fs = [rng.standard_normal((4, D)) for _ in range(3)]
        for got, want in zip(arpm_forward(*Fs, p), Fs):
            np.testing.assert_array_equal(got.data, want)

    def test_shapes(self, rng):
        Fs = [rng.standard_normal((2, 4, D)) for _ in range(3)]
        assert [o.shape for o in arpm_forward(*Fs, ARPM(D, H, rng))] == [(2, 4, D)] * 3

    def test_against_pipeline_oracle(self, rng):
        p = ARPM(D, H, rng)
        randomize_biases(p, rng)
        Fs = [rng.standard_normal((4, D)) for _ in range(3)]
        for got, want in zip(arpm_forward(*Fs, p), arpm_np(Fs, p)):
            np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-11)

    def test_intermediates(self, rng):
        br = PrimaryBranch(D, H, rng)
        Fs = [rng.standard_normal((4, D)) for _ in range(3)]
        it = br(*Fs)
        np.testing.assert_allclose(it.F_ab.data, it.A_ab.data + it.G_ab.data)
        np.testing.assert_allclose(it.F_star.data, Fs[0] + it.A_abc.data)

    def test_branches_own_parameters(self, rng):
        p = ARPM(D, H, rng)
        ids = [{id(t) for t in p.branches[str(m)].parameters()} for m in range(3)]
        assert not (ids[0] & ids[1]) and not (ids[1] & ids[2])

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(9)
            p = ARPM(D, H, rng)
            Fs = [rng.standard_normal((4, D)) for _ in range(3)]
            outs.append(b"".join(o.data.tobytes() for o in arpm_forward(*Fs, p)))
        assert outs[0] == outs[1]

    def test_grad_through_arpm_head_ce(self, rng):
        d = 32
        p = ARPM(d, 4, rng)
        head = Linear(d, 3, rng)
        Fb, Fc = rng.standard_normal((4, d)), rng.standard_normal((4, d))

        def loss(Fa):
            outs = arpm_forward(Fa, Fb, Fc, p)
            total = None
            for o in outs:
                probs = softmax(head(o.mean(axis=-2)), axis=-1)
                term = -log(probs[1])
                total = term if total is None else total + term
            return total

        assert grad_check(loss, rng.standard_normal((4, d)), eps=1e-5) <= 1e-4


class TestBimodal:
    def test_zero_is_identity(self, rng):
        p = BimodalInteraction(D, H, rng)
        zero_parameters(p)
        x, y = rng.standard_normal((4, D)), rng.standard_normal((4, D))
        ox, oy = p(x, y)
        np.testing.assert_array_equal(ox.data, x)
        np.testing.assert_array_equal(oy.data, y)

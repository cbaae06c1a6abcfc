"""Rectangular vs decomposed attention and KG-head gradients."""
import json
import math

import numpy as np
import pytest

from atlaskv.attention import (
    KgHeads,
    SeqState,
    causal_self_attention,
    decomposed_attention,
    dump_instance,
    grad_check,
    kg_head_gradients,
    kg_logits,
    load_instance,
    mixing_weights,
    random_instance,
    rectangular_attention,
)
from atlaskv.errors import NonFiniteInput, ShapeMismatch


def naive_rectangular(seq, kg_k, kg_v, heads):
    """Scalar-loop reference: one softmax over M KG slots plus the causal prefix."""
    n, d = seq.x.shape
    m = kg_k.shape[0]
    qt = [[sum(heads.Wq_kg[a, b] * seq.x[i, b] for b in range(d)) for a in range(d)] for i in range(n)]
    kt = [[sum(heads.Wk_kg[a, b] * kg_k[j, b] for b in range(kg_k.shape[1])) for a in range(d)] for j in range(m)]
    vt = [[sum(heads.Wv_kg[a, b] * kg_v[j, b] for b in range(kg_v.shape[1])) for a in range(d)] for j in range(m)]
    y = np.zeros((n, d))
    for i in range(n):
        logits, rows = [], []
        for j in range(m):
            logits.append(sum(qt[i][a] * kt[j][a] for a in range(d)) / math.sqrt(d))
            rows.append(vt[j])
        for j in range(i + 1):
            logits.append(sum(seq.q[i, a] * seq.k[j, a] for a in range(d)) / math.sqrt(d))
            rows.append(list(seq.v[j]))
        top = max(logits)
        w = [math.exp(l - top) for l in logits]
        z = sum(w)
        for a in range(d):
            y[i, a] = sum(w[j] * rows[j][a] for j in range(len(w))) / z
    return y


class TestOracle:
    @pytest.mark.parametrize("seed, m, n, d, d_e", [(0, 3, 2, 4, 5), (1, 5, 4, 3, 2), (2, 1, 1, 2, 1), (3, 0, 3, 3, 2)])
    def test_matches_naive_loops(self, seed, m, n, d, d_e):
        seq, kk, kv, heads = random_instance(seed, m, n, d, d_e)
        ref = naive_rectangular(seq, kk, kv, heads)
        assert np.max(np.abs(rectangular_attention(seq, kk, kv, heads).y - ref)) <= 1e-12
        assert np.max(np.abs(decomposed_attention(seq, kk, kv, heads).y - ref)) <= 1e-12


class TestEquivalence:
    def test_random_instances(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for seed in range(30):
            m, n, d, d_e = (int(v) for v in rng.integers(1, [129, 33, 65, 97]))
            seq, kk, kv, heads = random_instance(seed, m, n, d, d_e)
            a = rectangular_attention(seq, kk, kv, heads)
            b = decomposed_attention(seq, kk, kv, heads)
            worst = max(worst, np.max(np.abs(a.y - b.y)), np.max(np.abs(a.lambda_kg - b.lambda_kg)))
        assert worst <= 1e-12

    def test_lambdas_convex(self):
        seq, kk, kv, heads = random_instance(4, 20, 6, 8, 10)
        out = decomposed_attention(seq, kk, kv, heads)
        assert np.all(out.lambda_kg > 0) and np.all(out.lambda_seq > 0)
        assert np.allclose(out.lambda_kg + out.lambda_seq, 1.0, atol=1e-15)
        assert np.allclose(out.kg_scores.sum(axis=1), 1.0)

    def test_no_kg_reduces_to_self_attention(self):
        seq, kk, kv, heads = random_instance(5, 0, 5, 6, 3)
        out = decomposed_attention(seq, kk, kv, heads)
        assert np.allclose(out.y, causal_self_attention(seq), atol=1e-15)
        assert np.all(out.lambda_kg == 0)

    def test_causal(self):
        seq, kk, kv, heads = random_instance(6, 7, 5, 6, 4)
        base = decomposed_attention(seq, kk, kv, heads).y
        x2 = seq.x.copy()
        x2[-1] += 3.0
        seq2 = SeqState(x2, seq.Wq, seq.Wk, seq.Wv)
        moved = decomposed_attention(seq2, kk, kv, heads).y
        assert np.array_equal(moved[:-1], base[:-1])

    def test_shift_invariance_of_mixing(self):
        rng = np.random.default_rng(0)
        lk, ls = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
        a = mixing_weights(lk, ls)
        b = mixing_weights(lk + 7.5, ls + 7.5)
        assert np.allclose(a[0], b[0], atol=1e-15)

    def test_saturation(self):
        # a query aligned with one KG key, 40+ logit units above everything else
        d = 4
        eye = np.eye(d)
        seq = SeqState(np.array([[0.0, 0, 0, 1], [20.0, 0, 0, 0]]), eye * 0.01, eye * 0.01, eye)
        kk = np.array([[20.0, 0, 0, 0], [0, 1.0, 0, 0]])
        kv = np.array([[1.0, 2, 3, 4], [5.0, 6, 7, 8]])
        heads = KgHeads(eye, eye, eye)
        out = decomposed_attention(seq, kk, kv, heads)
        assert kg_logits(seq, kk, heads)[1, 0] == 200.0
        assert out.lambda_kg[1] == pytest.approx(1.0, abs=1e-15)
        assert np.allclose(out.y[1], kv[0], atol=1e-12)
        assert np.all(np.isfinite(out.y))
        assert np.allclose(rectangular_attention(seq, kk, kv, heads).y, out.y, atol=1e-12)

    def test_validation(self):
        seq, kk, kv, heads = random_instance(8, 3, 2, 4, 5)
        with pytest.raises(ShapeMismatch):
            decomposed_attention(seq, kk[:, :4], kv[:, :4], heads)
        with pytest.raises(ShapeMismatch):
            decomposed_attention(seq, kk, kv[:2], heads)
        bad = kk.copy()
        bad[0, 0] = np.inf
        with pytest.raises(NonFiniteInput):
            decomposed_attention(seq, bad, kv, heads)
        with pytest.raises(ShapeMismatch):
            SeqState(np.zeros((2, 3)), np.eye(3), np.eye(3), np.eye(2))
        with pytest.raises(ShapeMismatch):
            KgHeads(np.eye(3), np.zeros((2, 4)), np.zeros((2, 4)))


class TestGradients:
    def test_grad_check_seeds(self):
        assert max(grad_check(s) for s in range(5)) <= 1e-4

    def test_narrow_and_empty(self):
        assert grad_check(0, m=3, n=2, d=4, d_e=1) <= 1e-4
        assert grad_check(0, m=0, n=2, d=4, d_e=3) == 0.0

    def test_linear_in_upstream(self):
        seq, kk, kv, heads = random_instance(9, 6, 3, 5, 4)
        rng = np.random.default_rng(1)
        g1, g2 = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        a = kg_head_gradients(seq, kk, kv, heads, g1)
        b = kg_head_gradients(seq, kk, kv, heads, g2)
        c = kg_head_gradients(seq, kk, kv, heads, g1 + 2 * g2)
        for x, y, z in zip(a, b, c):
            assert np.allclose(z, x + 2 * y, atol=1e-12)

    def test_upstream_shape(self):
        seq, kk, kv, heads = random_instance(9, 2, 3, 5, 4)
        with pytest.raises(ShapeMismatch):
            kg_head_gradients(seq, kk, kv, heads, np.zeros((2, 5)))


class TestDump:
    def test_roundtrip(self):
        inst = random_instance(10, 4, 3, 5, 6)
        back = load_instance(json.loads(json.dumps(dump_instance(*inst))))
        a = decomposed_attention(*inst).y
        assert np.array_equal(decomposed_attention(*back).y, a)

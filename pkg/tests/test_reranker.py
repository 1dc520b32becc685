import math

import numpy as np
import pytest

from tabtextqa.reranker import Reranker, build_rerank_space, expand, masked_mean, rerank_query, rerank_scores, source_of
from tabtextqa.tensor import Tensor

D = 6


def model(seed=0):
    return Reranker(np.random.default_rng(seed), D)


def inputs(rng, b=2, n=5, k=3, l=4):
    hq = Tensor(rng.normal(size=(b, n, D)))
    hd = Tensor(rng.normal(size=(b, k, l, D)))
    q_mask = np.ones((b, n), dtype=bool)
    d_mask = np.ones((b, k, l), dtype=bool)
    d_mask[0, -1, 2:] = False
    return hq, q_mask, hd, d_mask


def test_space_has_k_plus_one_vectors():
    rng = np.random.default_rng(1)
    hq, q_mask, hd, d_mask = inputs(rng)
    y = Tensor(rng.normal(size=(2, D)))
    assert build_rerank_space(model(), hq, q_mask, hd, d_mask, y).shape == (2, 4, D)


def test_single_sentence_question_vector_is_its_own():
    rng = np.random.default_rng(2)
    hq, q_mask, hd, d_mask = inputs(rng, k=1)
    m = model()
    space = m.build_space(hq, q_mask, hd, d_mask)
    y = Tensor(rng.normal(size=(2, D)))
    assert np.allclose(m.question_vector(y, space).data, space.h_q_per_sentence.data[:, 0])


def test_identical_sentences_pool_identically():
    rng = np.random.default_rng(3)
    hq, q_mask, _, _ = inputs(rng)
    one = rng.normal(size=(1, 1, 4, D))
    hd = Tensor(np.broadcast_to(one, (2, 3, 4, D)).copy())
    space = model().build_space(hq, q_mask, hd, np.ones((2, 3, 4), dtype=bool))
    h = space.h_sentences.data
    assert np.allclose(h[:, 0], h[:, 1]) and np.allclose(h[:, 1], h[:, 2])


def test_no_sentences_falls_back_to_pooled_question():
    rng = np.random.default_rng(4)
    hq, q_mask, _, _ = inputs(rng)
    y = Tensor(rng.normal(size=(2, D)))
    vec = build_rerank_space(model(), hq, q_mask, None, None, y)
    assert vec.shape == (2, 1, D)
    assert np.allclose(vec.data[:, 0], hq.data.mean(axis=1))


def test_masked_mean_ignores_padding():
    x = Tensor(np.array([[[1.0], [3.0], [100.0]]]))
    assert masked_mean(x, np.array([[True, True, False]])).data.tolist() == [[2.0]]
    assert masked_mean(x, np.array([[False, False, False]])).data.tolist() == [[0.0]]


def test_source_of_branches():
    rng = np.random.default_rng(5)
    token = Tensor(rng.normal(size=(3, D)))
    vectors = Tensor(rng.normal(size=(3, 4, D)))
    out = source_of(token, np.array([True, False, False]), np.array([-1, 2, 0]), vectors).data
    assert np.array_equal(out[0], token.data[0])  # operator or memory token
    assert np.array_equal(out[1], vectors.data[1, 2])  # copied from sentence 2
    assert np.array_equal(out[2], vectors.data[2, 0])  # copied from the question
    with pytest.raises(ValueError):
        source_of(token, np.array([False, False, False]), np.array([-1, 0, 0]), vectors)
    with pytest.raises(ValueError):
        source_of(token, np.array([False, False, False]), np.array([4, 0, 0]), vectors)


def test_query_cases():
    m = model()
    y = Tensor(np.random.default_rng(6).normal(size=(2, D)))
    assert np.array_equal(rerank_query(m, y, []).data, np.zeros((2, D)))
    row = Tensor(np.random.default_rng(7).normal(size=(2, D)))
    assert np.allclose(rerank_query(m, y, [row]).data, row.data)
    assert np.allclose(rerank_query(m, y, [row, row, row]).data, row.data)


def zero_scorer(m):
    m.score_out.weight.data[...] = 0.0
    m.score_out.bias.data[...] = 0.0
    return m


def test_uniform_logits_give_half_and_dsl_ones():
    m = zero_scorer(model())
    vectors = Tensor(np.random.default_rng(8).normal(size=(1, 2, D)))
    onehot = np.zeros((1, 5, 2))
    onehot[0, 2:4, 0] = 1.0
    onehot[0, 4, 1] = 1.0
    dsl = np.array([[True, True, False, False, False]])
    s = rerank_scores(m, Tensor(np.zeros((1, D))), vectors, np.array([[True]]), onehot, dsl).data
    assert s.tolist() == [[1.0, 1.0, 0.5, 0.5, 0.5]]


def test_softmax_arithmetic_and_expand_constant_per_sentence():
    probs = Tensor(np.exp([[math.log(2), 0.0, 0.0]]) / np.exp([[math.log(2), 0.0, 0.0]]).sum())
    assert np.allclose(probs.data, [[0.5, 0.25, 0.25]])
    onehot = np.zeros((1, 7, 3))
    block = [-1, 0, 0, 1, 1, 2, 2]
    for p, blk in enumerate(block):
        if blk >= 0:
            onehot[0, p, blk] = 1.0
    s = expand(probs, onehot, np.array([[b < 0 for b in block]])).data[0]
    assert s[0] == 1.0
    assert s[3] == s[4] == 0.25 and s[1] == s[2] == 0.5


def test_masked_sentences_get_no_mass():
    m = model()
    rng = np.random.default_rng(9)
    vectors = Tensor(rng.normal(size=(2, 4, D)))
    sent_mask = np.array([[True, True, False], [True, True, True]])
    p = m.probabilities(Tensor(rng.normal(size=(2, D))), vectors, sent_mask).data
    assert p[0, 3] == 0.0
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12

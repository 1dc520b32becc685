import math

import numpy as np
import pytest

from tabtextqa.config import RunConfig
from tabtextqa.data import DataError, Example, SynthSpec, gold_retrieval_labels, synthesize_dataset
from tabtextqa.dslprog import program_equal, serialize_program
from tabtextqa.generator import (
    C_MEM,
    Generator,
    decode_step,
    dsl_tokens,
    encode_inputs,
    generator_loss,
    train_generator,
)
from tabtextqa.linearize import Table
from tabtextqa.retriever import RankedPool
from tabtextqa.tensor import Tensor
from tabtextqa.textenc import build_vocab

CONFIG = RunConfig(d_model=16, n_layers=1, n_heads=2, num_buckets=64, max_seq_len=128, k=3)

FIG1 = Example(
    id="fig1",
    pre_text=["the segment was sold in 2017 ."],
    post_text=["sales in 2016 include $ 12 of returns ."],
    table=Table.from_grid([["", "2016", "2015"], ["third-party sales", "$ 1802", "$ 1882"], ["operating income", "$ 245", "$ 263"]]),
    question="what was the percentage change in third-party sales from 2015 to 2016 ?",
    program_text="subtract(1802, 1882), divide(#0, 1882)",
    answer=None,
)
VOCAB = build_vocab([FIG1], num_buckets=64)


def model(**kw):
    return Generator(VOCAB, CONFIG.replace(**kw))


def test_fig1_candidates():
    gen = model()
    item = gen.prepare(FIG1, [3, 4, 1], with_targets=True)
    texts = {c.token.text for c in item.candidates}
    assert {"1802", "1882", "third-party sales", "245"} <= texts
    assert item.targets[0][1] == -1 and item.targets[1][0] == -1
    gi = gen.encode([item])
    m = len(gen.dsl)
    # rows of H: question block then three sentence blocks, in retrieval order
    assert gi.hh.shape[1] == m + gi.hq.shape[1] + 3 * gi.hd.shape[2]
    assert list(np.unique(gi.block[0][m:])) in ([0, 1, 2, 3], [-1, 0, 1, 2, 3])


def test_k0_uses_question_only():
    gen = model(k=0)
    gi = gen.encode([gen.prepare(FIG1, [])])
    assert gi.hd is None
    assert gi.hh.shape[1] == len(gen.dsl) + gi.hq.shape[1]
    assert np.array_equal(gi.hh.data[0, len(gen.dsl):], gi.hq.data[0])
    cands = {c.token.text for c in gi.items[0].candidates}
    assert cands == {"2015", "2016"}


def test_missing_gold_argument_is_a_data_error():
    gen = model()
    with pytest.raises(DataError, match="fig1"):
        gen.prepare(FIG1, [1, 2], with_targets=True)


def test_unit_reranker_scores_leave_context_scores():
    gen = model()
    gi = gen.encode([gen.prepare(FIG1, [3, 4, 1])])
    state = gen.initial_state(1)
    ones = np.ones((1, gi.hh.shape[1]))
    scores, _, _ = decode_step(gen, state, gi, reranker_scores=ones)
    out = gen.step(gen.initial_state(1), gi, None, ones)
    assert np.array_equal(scores.data, out.context_scores.data)


def test_first_step_forbids_memory():
    gen = model()
    gi = gen.encode([gen.prepare(FIG1, [3, 4, 1])])
    legal = gen.legal_mask(gi, gen.initial_state(1), np.zeros(1, dtype=bool))
    assert not legal[0, gi.category[0] == C_MEM].any()
    assert legal[0].any()


def test_equal_scores_give_log_c():
    mask = np.array([[True, False, True, True, True]])
    loss = generator_loss(Tensor(np.full((1, 5), 0.7)), np.array([2]), mask)
    assert abs(loss.item() - math.log(4)) < 1e-12
    big = np.array([[0.0, 0.0, 60.0, 0.0, 0.0]])
    assert generator_loss(Tensor(big), np.array([2]), mask).item() < 1e-20
    with pytest.raises(DataError):
        generator_loss(Tensor(big), np.array([1]), mask)


def test_dsl_vocabulary():
    toks = [t.text for t in dsl_tokens(4)]
    assert toks[:2] == ["EOF", "none"]
    assert "#3" in toks and "#4" not in toks and "const_100" in toks


def test_teacher_forced_step_follows_gold():
    gen = model()
    gi = gen.encode([gen.prepare(FIG1, [3, 4, 1], with_targets=True)])
    state = gen.initial_state(1)
    for s in range(gi.targets.shape[1]):
        _, chosen, state = decode_step(gen, state, gi, gold=gi.targets[:, s])
        assert chosen[0] == gi.targets[0, s]
    assert state.t == gi.targets.shape[1] + 1


def test_overfit_single_example_reproduces_program():
    splits = synthesize_dataset(SynthSpec(n_train=1, n_dev=1, n_test=1, length_probs=(0.0, 1.0, 0.0), seed=5))
    ex = splits["train"][0]
    vocab = build_vocab([ex], num_buckets=64)
    pos, neg = gold_retrieval_labels(ex)
    ranked = {ex.id: RankedPool([(i, 1.0) for i in pos + neg], 3)}
    config = CONFIG.replace(generator_lr=1e-2, generator_epochs=150, generator_batch_size=1)
    gen, history = train_generator([ex], [], ranked, vocab, config)
    assert history[-1]["loss"] < 0.05
    gi = encode_inputs(gen, [ex], [ranked[ex.id].top])
    result = gen.decode_greedy(gi)[0]
    assert result.complete
    assert program_equal(result.program, ex.program), serialize_program(result.program)
    # one probability vector per emitted token, each over question + k sentences
    assert len(result.rerank_probs) == 3 * len(ex.program) + 1
    assert all(len(p) == 4 for p in result.rerank_probs)


def test_decoding_is_deterministic():
    gen = model()
    gi = gen.encode([gen.prepare(FIG1, [3, 4, 1])])
    a, b = gen.decode_greedy(gi)[0], gen.decode_greedy(gi)[0]
    assert serialize_program(a.program) == serialize_program(b.program)
    assert a.rerank_probs == b.rerank_probs

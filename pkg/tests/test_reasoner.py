import math

import numpy as np
import pytest

from crossview import reasoner
from crossview.errors import EmptyRegionError
from crossview.numcore import ParamSet, Tensor, grad_check, stack, sum_, take

K, DV, DR = 10, 6, 4
VOCAB = reasoner.Vocab("which object matches in view b yes no the red".split())


def params(seed=0):
    ps = ParamSet()
    reasoner.init_params(ps, DV, DR, len(VOCAB), 5, np.random.default_rng(seed))
    return ps


def regions(n, rng, k=K):
    return [Tensor(rng.normal(size=(k, DR))) for _ in range(n)]


def cues(rng):
    return Tensor(rng.normal(size=(1, DR))), Tensor(rng.normal(size=(1, DR)))


def test_tokenizer_and_vocab():
    assert reasoner.tokenize("Is <REGION> left of <region>?") == ["is", "<region>", "left", "of", "<region>", "?"]
    assert VOCAB.words[:2] == [reasoner.UNK, reasoner.REGION]
    assert VOCAB.ids(["zebra", "yes"])[0] == 0 and VOCAB.ids(["yes"])[0] > 1


def test_sequence_length_example():
    rng = np.random.default_rng(0)
    g, o = cues(rng)
    inp = reasoner.assemble_input("which object matches <region> in view b", regions(1, rng), g, o, VOCAB, params())
    assert inp.sequence.shape == (18, DR)
    assert [p for p, _ in inp.slot_map] == list(range(5, 15))
    np.testing.assert_array_equal(inp.sequence.data[0], g.data[0])
    np.testing.assert_array_equal(inp.sequence.data[1], o.data[0])


def test_zero_and_two_placeholders():
    rng = np.random.default_rng(1)
    g, o = cues(rng)
    ps = params()
    inp = reasoner.assemble_input("which object", [], g, o, VOCAB, ps)
    assert inp.sequence.shape[0] == 4 and inp.slot_map == []
    inp = reasoner.assemble_input("<region> the <region>", regions(2, rng), g, o, VOCAB, ps)
    assert len(inp.slot_map) == 2 * K
    assert {r for _, r in inp.slot_map} == {0, 1}
    with pytest.raises(ValueError):
        reasoner.assemble_input("<region>", regions(2, rng), g, o, VOCAB, ps)


def test_unknown_token_uses_unk_row():
    rng = np.random.default_rng(2)
    g, o = cues(rng)
    ps = params()
    inp = reasoner.assemble_input("zebra", [], g, o, VOCAB, ps)
    np.testing.assert_array_equal(inp.sequence.data[2], ps["rsn.embed"].data[0])


def test_adapter_zero_weights_gives_bias():
    ps = params()
    for k in ("w1", "b1", "w2"):
        ps[f"rsn.adapter.{k}"].data[:] = 0.0
    ps["rsn.adapter.b2"].data[:] = [1.0, 2.0, 3.0, 4.0]
    out = reasoner.adapt_regions(np.random.default_rng(3).normal(size=(K, DV)), np.ones(K, dtype=bool), ps)
    assert out.shape == (K, DR)
    np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (K, 1)))


def test_adapter_invalid_slots_get_null():
    ps = params()
    valid = np.array([True] * 3 + [False] * (K - 3))
    out = reasoner.adapt_regions(np.random.default_rng(4).normal(size=(K, DV)), valid, ps)
    np.testing.assert_array_equal(out.data[3:], np.tile(ps["rsn.null"].data, (K - 3, 1)))
    with pytest.raises(EmptyRegionError):
        reasoner.adapt_regions(np.zeros((K, DV)), np.zeros(K, dtype=bool), ps)


def test_cue_examples():
    ps = params()
    u, v = np.arange(DV, dtype=float), -np.ones(DV)
    aligned = Tensor(np.stack([np.tile(u, (K, 1)), np.tile(v, (K, 1))]))
    valid = np.ones((2, K), dtype=bool)
    g, o = reasoner.scene_and_target_cues(aligned, valid, take(aligned, 0), valid[0], ps)
    pre = (u + v) / 2
    np.testing.assert_allclose(g.data[0], pre @ ps["rsn.cue_g.w"].data + ps["rsn.cue_g.b"].data, atol=1e-12)
    np.testing.assert_allclose(o.data[0], u @ ps["rsn.cue_o.w"].data + ps["rsn.cue_o.b"].data, atol=1e-12)
    # one object: both cues come from the same pooled vector
    g1, o1 = reasoner.scene_and_target_cues(take(aligned, np.array([0])), valid[:1], take(aligned, 0), valid[0], ps)
    np.testing.assert_allclose(g1.data[0], u @ ps["rsn.cue_g.w"].data + ps["rsn.cue_g.b"].data, atol=1e-12)
    g2, _ = reasoner.scene_and_target_cues(aligned, valid, take(aligned, 0), valid[0], ps)
    assert g2.data.tobytes() == g.data.tobytes()


def test_identical_options_split_evenly_and_zero_w_uniform():
    rng = np.random.default_rng(5)
    ps = params()
    e_q = Tensor(rng.normal(size=(7, DR)))
    opt = rng.normal(size=DR)
    d = reasoner.score_answers(e_q, Tensor(np.stack([opt, opt])), ps)
    np.testing.assert_allclose(d.probs, [0.5, 0.5], atol=1e-12)
    ps["rsn.bilinear"].data[:] = 0.0
    for n in (2, 4):
        d = reasoner.score_answers(e_q, Tensor(rng.normal(size=(n, DR))), ps)
        np.testing.assert_allclose(d.probs, np.full(n, 1 / n), atol=1e-12)
        assert abs(reasoner.vqa_loss(d.log_scores, 1).item() - math.log(n)) <= 1e-9


def test_vqa_loss_confident_and_bad_gold():
    ls = Tensor(np.array([0.0, -800.0, -800.0]))
    assert reasoner.vqa_loss(ls, 0).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        reasoner.vqa_loss(ls, 3)


def test_probabilities_sum_to_one_and_need_two_options():
    rng = np.random.default_rng(6)
    ps = params()
    e_q = Tensor(rng.normal(size=(5, DR)))
    d = reasoner.score_answers(e_q, Tensor(rng.normal(size=(4, DR)) * 5), ps)
    assert abs(d.probs.sum() - 1.0) <= 1e-9
    with pytest.raises(ValueError):
        reasoner.score_answers(e_q, Tensor(rng.normal(size=(1, DR))), ps)
    with pytest.raises(ValueError):
        reasoner.score_answers(Tensor(np.zeros((0, DR))), Tensor(rng.normal(size=(2, DR))), ps)


def test_option_order_permutes_probabilities_exactly():
    rng = np.random.default_rng(7)
    ps = params()
    e_q = Tensor(rng.normal(size=(9, DR)))
    opts = rng.normal(size=(4, DR))
    base = reasoner.score_answers(e_q, Tensor(opts), ps).probs
    for _ in range(5):
        p = rng.permutation(4)
        got = reasoner.score_answers(e_q, Tensor(opts[p]), ps).probs
        np.testing.assert_allclose(got, base[p], rtol=0, atol=1e-15)


def test_option_embedding_mixes_text_and_regions():
    rng = np.random.default_rng(8)
    ps = params()
    reg = regions(1, rng)
    e = reasoner.option_embedding("the <region>", reg, VOCAB, ps)
    rows = np.concatenate([ps["rsn.embed"].data[[VOCAB.index["the"]]], reg[0].data])
    np.testing.assert_allclose(e.data, rows.mean(axis=0), atol=1e-12)


def test_single_pair_aggregation_is_identity():
    ls = Tensor(np.log(np.array([0.1, 0.2, 0.3, 0.4])))
    assert reasoner.aggregate([ls]) is ls
    two = reasoner.aggregate([ls, Tensor(np.zeros(4))])
    np.testing.assert_allclose(two.data, ls.data / 2)


@pytest.mark.parametrize("seed", range(20))
def test_adapter_gradients(seed):
    rng = np.random.default_rng(seed)
    ps = params(seed)
    x = rng.normal(size=(3, DV))
    valid = np.array([True, False, True])
    w = rng.normal(size=(3, DR))
    assert grad_check(lambda: sum_(reasoner.adapt_regions(x, valid, ps) * w), ps) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_scorer_gradients(seed):
    rng = np.random.default_rng(seed)
    ps = params(seed)
    aligned = Tensor(rng.normal(size=(2, K, DV)))
    valid = rng.random((2, K)) < 0.7
    valid[:, 0] = True

    def loss():
        adapted = reasoner.adapt_regions(aligned, valid, ps)
        g, o = reasoner.scene_and_target_cues(aligned, valid, take(aligned, 0), valid[0], ps)
        inp = reasoner.assemble_input("which object matches <region> in view b ?", [take(adapted, 0)], g, o,
                                      VOCAB, ps)
        opts = stack([reasoner.option_embedding("<region>", [take(adapted, 1)], VOCAB, ps),
                      reasoner.option_embedding("no", [], VOCAB, ps),
                      reasoner.option_embedding("the red <region>", [take(adapted, 0)], VOCAB, ps)])
        return reasoner.vqa_loss(reasoner.option_log_scores(inp.sequence, opts, ps), 2)

    assert grad_check(loss, ps) <= 1e-4

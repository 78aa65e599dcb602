import numpy as np
import pytest

from nre import tensor as T
from nre import tokenization as tok
from nre.encoder import (CnnEncoderParams, TransformerEncoderParams, cnn_encode,
                         cnn_forward_batch, pcnn_encode, transformer_encode)
from nre.optim import SgdState, sgd_step

from util import check_grad


def make_instance(tokens, head_span, tail_span):
    return tok.Instance(tokens=tokens, head=tok.EntityMention("h", "Q1", head_span),
                        tail=tok.EntityMention("t", "Q2", tail_span), relation="r")


def small_setup(seed=0, hidden=6, max_length=10, max_pos=4):
    rng = np.random.default_rng(seed)
    insts = [
        make_instance(["alice", "works", "for", "acme", "corp"], (0, 1), (3, 5)),
        make_instance(["bob", "visited", "paris", "in", "june"], (0, 1), (2, 3)),
    ]
    vocab = tok.build_vocab(insts)
    params = CnnEncoderParams.init(rng, len(vocab), d_w=5, d_p=2, hidden=hidden,
                                   window=3, max_pos=max_pos)
    encs = [tok.encode_instance(i, vocab, max_length, max_pos) for i in insts]
    return insts, vocab, params, encs


def oracle_features(enc, params):
    """Explicit feature matrix with PAD-embedding edge extension (window 3)."""
    n = int(enc.attention_mask.sum())
    hi = 2 * params.max_pos
    tok_ids = [tok.PAD] + list(enc.token_ids[:n]) + [tok.PAD] * (len(enc.token_ids) - n + 1)
    pos1 = [max(enc.pos1_ids[0] - 1, 0)] + list(enc.pos1_ids[:n]) + [
        min(enc.pos1_ids[n - 1] + k, hi) for k in range(1, len(enc.token_ids) - n + 2)]
    pos2 = [max(enc.pos2_ids[0] - 1, 0)] + list(enc.pos2_ids[:n]) + [
        min(enc.pos2_ids[n - 1] + k, hi) for k in range(1, len(enc.token_ids) - n + 2)]
    rows = [np.concatenate([params.word_emb.data[t], params.pos1_emb.data[p1],
                            params.pos2_emb.data[p2]])
            for t, p1, p2 in zip(tok_ids, pos1, pos2)]
    return np.stack(rows)


def oracle_cnn(enc, params):
    feats = oracle_features(enc, params)
    n = int(enc.attention_mask.sum())
    length = len(enc.token_ids)
    conv = np.stack([feats[i : i + 3].reshape(-1) @ params.conv_w.data + params.conv_b.data
                     for i in range(length)])
    return np.tanh(conv[:n].max(axis=0))


class TestCnnEncode:
    def test_matches_sliding_window_oracle(self):
        _, _, params, encs = small_setup()
        for enc in encs:
            out = cnn_encode(enc, params)
            np.testing.assert_allclose(out.data, oracle_cnn(enc, params), atol=1e-12)

    def test_invariant_to_padding_contents(self):
        _, _, params, encs = small_setup()
        enc = encs[0]
        clean = cnn_encode(enc, params).data
        dirty = tok.EncodedInstance(
            token_ids=enc.token_ids.copy(), pos1_ids=enc.pos1_ids.copy(),
            pos2_ids=enc.pos2_ids.copy(), segment_ids=enc.segment_ids.copy(),
            attention_mask=enc.attention_mask.copy(),
            head_span=enc.head_span, tail_span=enc.tail_span)
        pad = dirty.attention_mask == 0
        dirty.token_ids[pad] = 3
        dirty.pos1_ids[pad] = 1
        dirty.pos2_ids[pad] = 7
        np.testing.assert_array_equal(cnn_encode(dirty, params).data, clean)

    def test_all_pad_but_one_is_single_window_response(self):
        _, vocab, params, _ = small_setup()
        inst = make_instance(["alice", "works"], (0, 1), (1, 2))
        enc = tok.encode_instance(inst, vocab, max_length=6, max_pos=4)
        enc.attention_mask[1:] = 0
        enc.segment_ids[1:] = 0
        feats = oracle_features(enc, params)
        expected = np.tanh(feats[0:3].reshape(-1) @ params.conv_w.data + params.conv_b.data)
        np.testing.assert_allclose(cnn_encode(enc, params).data, expected, atol=1e-12)

    def test_outputs_finite(self):
        _, _, params, encs = small_setup()
        for enc in encs:
            assert np.isfinite(cnn_encode(enc, params).data).all()
            assert np.isfinite(pcnn_encode(enc, params).data).all()

    def test_id_out_of_table_range(self):
        _, _, params, encs = small_setup()
        enc = encs[0]
        enc.token_ids[0] = 10_000
        with pytest.raises(IndexError):
            cnn_encode(enc, params)


class TestPcnnEncode:
    def test_output_is_three_times_cnn_dim(self):
        _, _, params, encs = small_setup()
        assert pcnn_encode(encs[0], params).data.shape[0] == 3 * cnn_encode(encs[0], params).data.shape[0]

    def test_three_singleton_segments(self):
        _, vocab, params, _ = small_setup()
        inst = make_instance(["alice", "works", "acme"], (0, 1), (1, 2))
        enc = tok.encode_instance(inst, vocab, max_length=6, max_pos=4)
        np.testing.assert_array_equal(enc.segment_ids[:3], [1, 2, 3])
        feats = oracle_features(enc, params)
        responses = [np.tanh(feats[i : i + 3].reshape(-1) @ params.conv_w.data + params.conv_b.data)
                     for i in range(3)]
        np.testing.assert_allclose(pcnn_encode(enc, params).data,
                                   np.concatenate(responses), atol=1e-12)

    def test_empty_third_segment_saturates_to_minus_one(self):
        _, vocab, params, _ = small_setup()
        inst = make_instance(["alice", "works", "for", "acme"], (0, 1), (2, 4))
        enc = tok.encode_instance(inst, vocab, max_length=6, max_pos=4)
        assert 3 not in enc.segment_ids
        out = pcnn_encode(enc, params).data
        h = params.hidden
        np.testing.assert_allclose(out[2 * h :], np.full(h, np.tanh(T.POOL_FLOOR)), atol=1e-12)

    def test_first_block_ignores_distant_segments(self):
        # tokens far from segment 1 (beyond window spill) don't touch block 1
        _, vocab, params, _ = small_setup()
        a = make_instance(["alice", "works", "for", "acme", "corp"], (0, 1), (3, 5))
        b = make_instance(["alice", "works", "for", "paris", "june"], (0, 1), (3, 5))
        ea = tok.encode_instance(a, vocab, 10, 4)
        eb = tok.encode_instance(b, vocab, 10, 4)
        h = params.hidden
        np.testing.assert_array_equal(pcnn_encode(ea, params).data[:h],
                                      pcnn_encode(eb, params).data[:h])

    def test_gradient_check(self):
        _, _, params, encs = small_setup()
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 3 * params.hidden))
        tensors = list(params.parameters().values())

        def make_loss():
            reps, _ = cnn_forward_batch(encs, params, piecewise=True)
            return T.sum_all(T.mul(reps, T.Tensor(w)))

        check_grad(make_loss, tensors)


class TestGradientFlowToEmbeddings:
    def test_used_rows_nonzero_unused_zero(self):
        insts, vocab, params, encs = small_setup()
        reps, _ = cnn_forward_batch([encs[0]], params, piecewise=False)
        loss = T.sum_all(reps)
        T.backward(loss)
        used = set(encs[0].token_ids[encs[0].attention_mask == 1]) | {tok.PAD}
        grad = params.word_emb.grad
        for i in range(len(vocab)):
            if i in used:
                continue
            assert np.all(grad[i] == 0), f"unused row {i} has gradient"
        real_ids = set(encs[0].token_ids[encs[0].attention_mask == 1])
        assert any(np.any(grad[i] != 0) for i in real_ids)

        sgd_step(params.parameters(), SgdState(lr=0.1))


class TestTransformer:
    def make(self, pooling="cls", seed=0, **kw):
        rng = np.random.default_rng(seed)
        return TransformerEncoderParams.init(rng, vocab_size=20, d_model=8, n_heads=2,
                                             n_layers=2, d_ff=16, max_positions=16,
                                             pooling_mode=pooling, **kw)

    def test_shape_contracts(self):
        ids = [2, 5, 7, 3]
        cls_out = transformer_encode(ids, 1, 2, self.make("cls"))
        assert cls_out.data.shape == (8,)
        ent_out = transformer_encode(ids, 1, 2, self.make("entity_start"))
        assert ent_out.data.shape == (16,)

    def test_degenerate_weights_return_embedding_plus_positional(self):
        params = self.make("cls")
        params.use_layer_norm = False
        for layer in params.layers:
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                layer[name].data[:] = 0.0
        ids = [4, 9, 1]
        out = transformer_encode(ids, 0, 1, params)
        expected = params.tok_emb.data[4] + params.pos_emb.data[0]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        params = self.make("cls", seed=5)
        collected = []
        transformer_encode([2, 5, 7, 3, 11], 1, 2, params, collect_attention=collected)
        assert len(collected) == 2 * 2  # layers x heads
        for attn in collected:
            np.testing.assert_allclose(attn.sum(axis=1), np.ones(5), atol=1e-9)

    def test_marker_index_out_of_range(self):
        with pytest.raises(IndexError):
            transformer_encode([2, 5], 0, 9, self.make("entity_start"))

    def test_sequence_longer_than_position_table(self):
        with pytest.raises(IndexError):
            transformer_encode(list(range(17)), 0, 1, self.make("cls"))

    def test_gradient_check(self):
        params = self.make("entity_start", seed=7)
        ids = [2, 5, 7, 3]
        rng = np.random.default_rng(8)
        w = rng.standard_normal(16)
        tensors = [params.tok_emb, params.layers[0]["wq"], params.layers[1]["w1"],
                   params.layers[0]["ln1_gain"], params.layers[1]["ln2_offset"]]

        def make_loss():
            out = transformer_encode(ids, 1, 2, params)
            return T.sum_all(T.mul(out, T.Tensor(w)))

        check_grad(make_loss, tensors)

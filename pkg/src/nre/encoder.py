"""Sentence encoders: CNN, piecewise CNN, and a toy transformer.

Each maps fixed-length id sequences to a fixed-dimensional representation.
The convolutional encoders pad the sequence with PAD-token embeddings so the
window count equals the sequence length, and normalize everything at masked
positions (PAD token id, edge-extended position ids, segment 0) so outputs
never depend on the contents of the padding region.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tokenization import MAX_POS, PAD


def xavier_uniform(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class CnnEncoderParams:
    """Word/position embedding tables plus one convolutional filter bank."""

    word_emb: T.Tensor
    pos1_emb: T.Tensor
    pos2_emb: T.Tensor
    conv_w: T.Tensor  # [window * (d_w + 2 d_p), H]
    conv_b: T.Tensor  # [H]
    window: int
    max_pos: int

    @classmethod
    def init(cls, rng, vocab_size, d_w=50, d_p=5, hidden=230, window=3, max_pos=MAX_POS):
        if window % 2 != 1 or hidden <= 0:
            raise ValueError(f"window must be odd and hidden > 0, got {window}, {hidden}")
        feat = d_w + 2 * d_p
        return cls(
            word_emb=T.Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, d_w)), requires_grad=True),
            pos1_emb=T.Tensor(rng.uniform(-0.1, 0.1, size=(2 * max_pos + 1, d_p)), requires_grad=True),
            pos2_emb=T.Tensor(rng.uniform(-0.1, 0.1, size=(2 * max_pos + 1, d_p)), requires_grad=True),
            conv_w=T.Tensor(xavier_uniform(rng, (window * feat, hidden)), requires_grad=True),
            conv_b=T.Tensor(np.zeros(hidden), requires_grad=True),
            window=window,
            max_pos=max_pos,
        )

    @property
    def hidden(self):
        return self.conv_w.data.shape[1]

    def parameters(self):
        return {
            "cnn.word_emb": self.word_emb,
            "cnn.pos1_emb": self.pos1_emb,
            "cnn.pos2_emb": self.pos2_emb,
            "cnn.conv_w": self.conv_w,
            "cnn.conv_b": self.conv_b,
        }

    def describe(self):
        n_params = sum(int(p.data.size) for p in self.parameters().values())
        return {
            "d_w": self.word_emb.data.shape[1],
            "d_p": self.pos1_emb.data.shape[1],
            "hidden": self.hidden,
            "window": self.window,
            "max_pos": self.max_pos,
            "vocab_size": self.word_emb.data.shape[0],
            "n_params": n_params,
        }

    def load_state(self, state, prefix="cnn."):
        for name, p in self.parameters().items():
            p.data = np.asarray(state[name if name.startswith(prefix) else prefix + name])


def _normalized_arrays(encs, max_pos, pad):
    """Stack instances into padded id arrays with masked positions normalized."""
    length = len(encs[0].token_ids)
    lp = length + 2 * pad
    b = len(encs)
    tok = np.zeros((b, lp), dtype=np.int64)
    pos1 = np.zeros((b, lp), dtype=np.int64)
    pos2 = np.zeros((b, lp), dtype=np.int64)
    segs = np.zeros((b, length), dtype=np.int64)
    reals = np.zeros(b, dtype=np.int64)
    hi = 2 * max_pos
    for i, e in enumerate(encs):
        n = int(e.attention_mask.sum())
        if n == 0:
            raise T.DegenerateInputError("instance with empty attention mask")
        reals[i] = n
        tok[i, pad : pad + n] = e.token_ids[:n]
        tok[i, :pad] = PAD
        tok[i, pad + n :] = PAD
        for out, src in ((pos1, e.pos1_ids), (pos2, e.pos2_ids)):
            out[i, pad : pad + n] = src[:n]
            out[i, :pad] = np.clip(src[0] - np.arange(pad, 0, -1), 0, hi)
            out[i, pad + n :] = np.clip(src[n - 1] + np.arange(1, lp - pad - n + 1), 0, hi)
        segs[i, :n] = e.segment_ids[:n]
    return tok, pos1, pos2, segs, reals


def cnn_forward_batch(encs, params, piecewise, train=False, dropout_p=0.0, rng=None,
                      word_perturbation=None):
    """Encode a batch of instances; returns (reps, looked-up word vectors).

    reps is [B x H] for plain CNN or [B x 3H] for piecewise pooling. The word
    vector node is exposed so adversarial training can read its gradient and
    re-run with a perturbation added.
    """
    window = params.window
    pad = (window - 1) // 2
    length = len(encs[0].token_ids)
    lp = length + 2 * pad
    tok, pos1, pos2, segs, reals = _normalized_arrays(encs, params.max_pos, pad)

    word = T.embedding_gather(params.word_emb, tok.ravel())
    if word_perturbation is not None:
        word = T.add(word, T.Tensor(word_perturbation))
    feats = T.concat(
        [word,
         T.embedding_gather(params.pos1_emb, pos1.ravel()),
         T.embedding_gather(params.pos2_emb, pos2.ravel())],
        axis=1,
    )
    # windows never cross instance boundaries: centers are the L real slots
    base = (np.arange(len(encs))[:, None] * lp + np.arange(length)[None, :]).ravel()
    indices = base[:, None] + np.arange(window)[None, :]
    conv = T.add(T.windowed_matmul(feats, params.conv_w, indices), params.conv_b)

    pooled = []
    for i in range(len(encs)):
        rows = T.slice_rows(conv, i * length, (i + 1) * length)
        if piecewise:
            pooled.append(T.piecewise_max_pool(rows, segs[i]))
        else:
            real = T.slice_rows(rows, 0, int(reals[i]))
            pooled.append(T.max_pool_rows(real))
    reps = T.tanh(T.stack_rows(pooled))
    if train and dropout_p > 0.0:
        reps = T.dropout(reps, dropout_p, rng, train=True)
    return reps, word


def cnn_encode(enc, params):
    """Single-instance CNN encoding -> Tensor[H]."""
    reps, _ = cnn_forward_batch([enc], params, piecewise=False)
    return T.reshape(reps, (params.hidden,))


def pcnn_encode(enc, params):
    """Single-instance piecewise-CNN encoding -> Tensor[3H]."""
    reps, _ = cnn_forward_batch([enc], params, piecewise=True)
    return T.reshape(reps, (3 * params.hidden,))


# ---------------------------------------------------------------------------
# toy transformer


@dataclass
class TransformerEncoderParams:
    tok_emb: T.Tensor
    pos_emb: T.Tensor
    layers: list
    n_heads: int
    pooling_mode: str = "cls"  # "cls" | "entity_start"
    use_layer_norm: bool = True

    @classmethod
    def init(cls, rng, vocab_size, d_model=64, n_heads=4, n_layers=2, d_ff=128,
             max_positions=128, pooling_mode="cls"):
        if n_layers < 1 or d_model % n_heads != 0:
            raise ValueError("need n_layers >= 1 and d_model divisible by n_heads")
        layers = []
        for _ in range(n_layers):
            layer = {}
            for name in ("wq", "wk", "wv", "wo"):
                layer[name] = T.Tensor(xavier_uniform(rng, (d_model, d_model)), requires_grad=True)
            layer["w1"] = T.Tensor(xavier_uniform(rng, (d_model, d_ff)), requires_grad=True)
            layer["b1"] = T.Tensor(np.zeros(d_ff), requires_grad=True)
            layer["w2"] = T.Tensor(xavier_uniform(rng, (d_ff, d_model)), requires_grad=True)
            layer["b2"] = T.Tensor(np.zeros(d_model), requires_grad=True)
            for name in ("ln1_gain", "ln2_gain"):
                layer[name] = T.Tensor(np.ones(d_model), requires_grad=True)
            for name in ("ln1_offset", "ln2_offset"):
                layer[name] = T.Tensor(np.zeros(d_model), requires_grad=True)
            layers.append(layer)
        return cls(
            tok_emb=T.Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, d_model)), requires_grad=True),
            pos_emb=T.Tensor(rng.uniform(-0.1, 0.1, size=(max_positions, d_model)), requires_grad=True),
            layers=layers,
            n_heads=n_heads,
            pooling_mode=pooling_mode,
        )

    @property
    def d_model(self):
        return self.tok_emb.data.shape[1]

    @property
    def output_dim(self):
        return self.d_model if self.pooling_mode == "cls" else 2 * self.d_model

    def parameters(self):
        out = {"tf.tok_emb": self.tok_emb, "tf.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for name, p in layer.items():
                out[f"tf.layer{i}.{name}"] = p
        return out

    def describe(self):
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": len(self.layers),
            "pooling_mode": self.pooling_mode,
            "vocab_size": self.tok_emb.data.shape[0],
            "n_params": sum(int(p.data.size) for p in self.parameters().values()),
        }

    def load_state(self, state):
        for name, p in self.parameters().items():
            p.data = np.asarray(state[name])


def _norm(x, layer, which, params):
    if params.use_layer_norm:
        return T.layer_norm(x, layer[f"{which}_gain"], layer[f"{which}_offset"])
    return T.add(T.mul(x, layer[f"{which}_gain"]), layer[f"{which}_offset"])


def transformer_encode(ids, head_marker_index, tail_marker_index, params,
                       collect_attention=None):
    """Post-norm transformer stack over a subword id sequence.

    Pooling: CLS mode returns the hidden state at position 0 (Tensor[d]);
    entity-start mode concatenates the hidden states at the two opening
    marker indices (Tensor[2d]).
    """
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[0]
    if length > params.pos_emb.data.shape[0]:
        raise IndexError(f"sequence length {length} exceeds positional table")
    d = params.d_model
    dk = d // params.n_heads
    x = T.add(T.embedding_gather(params.tok_emb, ids),
              T.embedding_gather(params.pos_emb, np.arange(length)))
    for layer in params.layers:
        q = T.matmul(x, layer["wq"])
        k = T.matmul(x, layer["wk"])
        v = T.matmul(x, layer["wv"])
        heads = []
        for h in range(params.n_heads):
            lo, hi = h * dk, (h + 1) * dk
            qh, kh, vh = (T.slice_cols(t, lo, hi) for t in (q, k, v))
            attn = T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk)))
            if collect_attention is not None:
                collect_attention.append(attn.data)
            heads.append(T.matmul(attn, vh))
        mha = T.matmul(T.concat(heads, axis=1), layer["wo"])
        x = _norm(T.add(x, mha), layer, "ln1", params)
        ff = T.matmul(T.relu(T.add(T.matmul(x, layer["w1"]), layer["b1"])), layer["w2"])
        x = _norm(T.add(x, T.add(ff, layer["b2"])), layer, "ln2", params)

    if params.pooling_mode == "cls":
        return T.reshape(T.slice_rows(x, 0, 1), (d,))
    if not (0 <= head_marker_index < length and 0 <= tail_marker_index < length):
        raise IndexError("entity marker index outside the sequence")
    head = T.slice_rows(x, head_marker_index, head_marker_index + 1)
    tail = T.slice_rows(x, tail_marker_index, tail_marker_index + 1)
    return T.reshape(T.concat([head, tail], axis=1), (2 * d,))

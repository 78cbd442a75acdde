"""Utterance encoders and the window aggregator built from :mod:`.layers`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    PAD,
    UNK,
    Attention,
    BiLSTM,
    Conv1D,
    Dense,
    Embedding,
    Layer,
    LSTM,
    dropout_backward,
    dropout_forward,
    masked_max_backward,
    masked_max_forward,
    relu_backward,
    relu_forward,
)


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = ["<pad>", "<unk>"]
        self.stoi = {"<pad>": PAD, "<unk>": UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, tok):
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def ids(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens] or [PAD]


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    layer: Embedding

    @classmethod
    def random(cls, vocab, dim=300, seed=0, std=0.1):
        return cls(vocab, Embedding(len(vocab), dim, np.random.default_rng(seed), std=std))

    @classmethod
    def from_text(cls, vocab, path, dim=300, seed=0):
        """Random init, overwritten by ``token v1 .. v_dim`` lines of a vector file."""
        table = cls.random(vocab, dim, seed)
        E = table.layer.params["E"]
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip().split(" ")
                if len(parts) != dim + 1:
                    continue
                idx = vocab.stoi.get(parts[0])
                if idx is not None and idx != PAD:
                    E[idx] = np.array(parts[1:], dtype=float)
        return table


def batch_ids(vocab, utterances):
    """Right-padded (N, L) id matrix and mask; empty utterances become one PAD step."""
    seqs = [vocab.ids(u) for u in utterances]
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for n, s in enumerate(seqs):
        ids[n, :len(s)] = s
        mask[n, :len(s)] = 1.0
    return ids, mask


def embed(tokens, table: EmbeddingTable):
    """(n, dim) embedding matrix for one token sequence."""
    ids = np.array(table.vocab.ids(tokens))
    return table.layer.params["E"][ids]


class Module(Layer):
    """A layer made of named child layers; params are exposed as 'child.name'."""

    children: dict

    def _register(self, **children):
        self.children = children
        self.params = {}
        for cname, child in children.items():
            for pname, arr in child.params.items():
                self.params[f"{cname}.{pname}"] = arr

    def _child_grads(self, cname, grads):
        return {f"{cname}.{k}": v for k, v in grads.items()}


class CnnEncoder(Module):
    """Embedding, then ``n_layers`` stacked multi-width convolutions with ReLU, then max-over-time."""

    def __init__(self, vocab_size, emb_dim=300, n_filters=128, widths=(1, 2, 3), n_layers=3, rng=None,
                 embedding=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        emb = embedding or Embedding(vocab_size, emb_dim, rng)
        convs = {}
        n_in = emb.dim
        for k in range(n_layers):
            convs[f"conv{k}"] = Conv1D(n_in, n_filters, widths, rng)
            n_in = convs[f"conv{k}"].n_out
        self.n_out = n_in
        self.n_layers = n_layers
        self._register(emb=emb, **convs)

    def forward(self, ids, mask):
        e, c_emb = self.children["emb"].forward(ids)
        h = e * mask[:, :, None]
        caches = []
        for k in range(self.n_layers):
            z, c_conv = self.children[f"conv{k}"].forward(h)
            a, c_relu = relu_forward(z)
            h = a * mask[:, :, None]
            caches.append((c_conv, c_relu))
        y, c_pool = masked_max_forward(h, mask)
        return y, (mask, c_emb, caches, c_pool)

    def backward(self, dy, cache):
        mask, c_emb, caches, c_pool = cache
        grads = {}
        dh = masked_max_backward(dy, c_pool)
        for k in reversed(range(self.n_layers)):
            c_conv, c_relu = caches[k]
            dz = relu_backward(dh * mask[:, :, None], c_relu)
            dh, g = self.children[f"conv{k}"].backward(dz, c_conv)
            grads.update(self._child_grads(f"conv{k}", g))
        _, g = self.children["emb"].backward(dh * mask[:, :, None], c_emb)
        grads.update(self._child_grads("emb", g))
        return None, grads


class RnnEncoder(Module):
    """Embedding, BiLSTM, attention pooling."""

    def __init__(self, vocab_size, emb_dim=300, hidden=256, att_dim=None, rng=None, embedding=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        emb = embedding or Embedding(vocab_size, emb_dim, rng)
        lstm = BiLSTM(emb.dim, hidden, rng)
        att = Attention(lstm.n_out, att_dim or lstm.n_out, rng)
        self.n_out = lstm.n_out
        self._register(emb=emb, lstm=lstm, att=att)

    def forward(self, ids, mask):
        e, c_emb = self.children["emb"].forward(ids)
        h, c_lstm = self.children["lstm"].forward(e, mask)
        (y, alpha), c_att = self.children["att"].forward(h, mask)
        return y, (c_emb, c_lstm, c_att)

    def backward(self, dy, cache):
        c_emb, c_lstm, c_att = cache
        grads = {}
        dh, g = self.children["att"].backward(dy, c_att)
        grads.update(self._child_grads("att", g))
        de, g = self.children["lstm"].backward(dh, c_lstm)
        grads.update(self._child_grads("lstm", g))
        _, g = self.children["emb"].backward(de, c_emb)
        grads.update(self._child_grads("emb", g))
        return None, grads


def cnn_encode(tokens, encoder: CnnEncoder, vocab: Vocabulary):
    ids, mask = batch_ids(vocab, [tokens])
    return encoder.forward(ids, mask)[0][0]


def rnn_encode(tokens, encoder: RnnEncoder, vocab: Vocabulary):
    ids, mask = batch_ids(vocab, [tokens])
    return encoder.forward(ids, mask)[0][0]


class WindowAggregator(Module):
    """Unidirectional LSTM over the window slots, dense+ReLU+dropout, linear output."""

    def __init__(self, n_in, lstm_hidden=100, dense=256, n_classes=8, dropout=0.5, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in = n_in
        self.dropout = dropout
        self._register(
            lstm=LSTM(n_in, lstm_hidden, rng),
            dense=Dense(lstm_hidden, dense, rng),
            out=Dense(dense, n_classes, rng),
        )

    def forward(self, reps, train=False, rng=None):
        if reps.shape[-1] != self.n_in:
            raise ValueError(f"expected slot width {self.n_in}, got {reps.shape[-1]}")
        (_, h), c_lstm = self.children["lstm"].forward(reps)
        z, c_dense = self.children["dense"].forward(h)
        a, c_relu = relu_forward(z)
        a, c_drop = dropout_forward(a, self.dropout, rng, train)
        logits, c_out = self.children["out"].forward(a)
        return logits, (c_lstm, c_dense, c_relu, c_drop, c_out)

    def backward(self, dlogits, cache):
        c_lstm, c_dense, c_relu, c_drop, c_out = cache
        grads = {}
        da, g = self.children["out"].backward(dlogits, c_out)
        grads.update(self._child_grads("out", g))
        dz = relu_backward(dropout_backward(da, c_drop), c_relu)
        dh, g = self.children["dense"].backward(dz, c_dense)
        grads.update(self._child_grads("dense", g))
        dreps, g = self.children["lstm"].backward((None, dh), c_lstm)
        grads.update(self._child_grads("lstm", g))
        return dreps, grads


def aggregate_window(reps, aggregator: WindowAggregator, train=False, rng=None):
    """Logits for one window of ``m`` slot vectors, shape (m, n_in) -> (C,)."""
    reps = np.asarray(reps, dtype=float)
    return aggregator.forward(reps[None], train=train, rng=rng)[0][0]

"""Tokenization and recurrent encoding of directives.

The goal statement and each instruction run through two-layer recurrent
encoders of identical shape but separate weights; the final hidden state of
the top layer is the sentence feature.
"""

from __future__ import annotations

import re

import numpy as np

from . import autodiff as ad
from . import nn

UNK_ID = 0

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text):
    return _PUNCT.sub(" ", text.lower()).split()


class Vocab:
    """token -> id map; id 0 is reserved for unknown tokens."""

    def __init__(self, tokens=()):
        self.tokens = ["<unk>"] + [t for t in tokens if t != "<unk>"]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text):
        return [self.ids.get(t, UNK_ID) for t in tokenize(text)]

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @staticmethod
    def load(path):
        with open(path) as f:
            toks = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        v = Vocab.__new__(Vocab)
        v.tokens = toks
        v.ids = {t: i for i, t in enumerate(toks)}
        return v


def build_vocab(episodes):
    seen = []
    have = set()
    for ep in episodes:
        for text in [ep["directive"]["goal"]] + ep["directive"]["instructions"]:
            for t in tokenize(text):
                if t not in have:
                    have.add(t)
                    seen.append(t)
    return Vocab(sorted(seen))


def init_encoder_params(store, vocab_size, d, rng):
    store.add("word_embed", rng.normal(0, 0.1, (vocab_size, d)))
    for enc in ("enc_instr", "enc_goal"):
        nn.init_lstm(store, f"{enc}.l1", d, d, rng)
        nn.init_lstm(store, f"{enc}.l2", d, d, rng)


def encode_sentence(store, enc, token_ids, d, dropout_p, train, rng):
    """Last top-layer hidden state of the two-layer encoder."""
    if not token_ids:
        raise ValueError("cannot encode an empty instruction")
    h1, c1 = nn.zeros(d), nn.zeros(d)
    h2, c2 = nn.zeros(d), nn.zeros(d)
    keep = 1.0 - dropout_p
    for tid in token_ids:
        x = ad.embedding(store["word_embed"], tid)
        h1, c1 = nn.lstm_step(store, f"{enc}.l1", x, h1, c1)
        mid = ad.dropout(h1, keep, rng, train)
        h2, c2 = nn.lstm_step(store, f"{enc}.l2", mid, h2, c2)
    return ad.dropout(h2, keep, rng, train)


def encode_directive(store, vocab, directive, d, dropout_p=0.0, train=False,
                     rng=None):
    """Returns (list of instruction features s_1..s_L, goal feature h_G)."""
    rng = rng or np.random.default_rng(0)
    s_list = []
    for text in directive["instructions"]:
        ids = vocab.encode(text)
        s_list.append(encode_sentence(store, "enc_instr", ids, d,
                                      dropout_p, train, rng))
    g_ids = vocab.encode(directive["goal"])
    h_g = encode_sentence(store, "enc_goal", g_ids, d, dropout_p, train, rng)
    return s_list, h_g

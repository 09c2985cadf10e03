"""Expression tokenizer, closed vocabulary, and bidirectional GRU encoder.

Expressions are lowercased and whitespace-split against a closed vocabulary
(id 0 = unknown, id 1 = padding, known tokens from 2).  The encoder embeds
token ids and runs one GRU in each direction; the text feature is the sum of
the two final hidden states.  Batches of unequal length are padded and
masked, so the "final" state of each sample is the state after its own last
real token.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T

UNK_ID = 0
PAD_ID = 1
RESERVED = 2

MAX_TOKENS = 16


class Vocabulary:
    """Bijective token/id map with two reserved ids (unknown, padding)."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._tokens = tokens
        self._ids = {tok: i + RESERVED for i, tok in enumerate(tokens)}

    def __len__(self):
        """Total table size including the two reserved ids."""
        return len(self._tokens) + RESERVED

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token):
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx):
        if idx == UNK_ID:
            return "<unk>"
        if idx == PAD_ID:
            return "<pad>"
        return self._tokens[idx - RESERVED]

    def save(self, path):
        """One known token per line; line index equals id minus the offset."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.strip() for line in fh if line.strip()]
        return cls(tokens)

    @classmethod
    def from_expressions(cls, expressions):
        seen = {}
        for expr in expressions:
            for tok in expr.lower().split():
                seen.setdefault(tok, len(seen))
        return cls(sorted(seen, key=seen.get))


@dataclass
class TokenSequence:
    ids: list
    text: str = ""

    def __len__(self):
        return len(self.ids)


def tokenize(expression, vocab, max_tokens=MAX_TOKENS):
    """Lowercase, split on whitespace, map through the vocabulary.

    Unknown tokens become id 0.  Sequences longer than ``max_tokens`` are
    truncated with a warning.  An expression that is empty after trimming is
    an error.
    """
    text = expression.strip()
    if not text:
        raise ValueError("cannot tokenize an empty expression")
    words = text.lower().split()
    if len(words) > max_tokens:
        warnings.warn(
            f"expression truncated from {len(words)} to {max_tokens} tokens",
            stacklevel=2,
        )
        words = words[:max_tokens]
    return TokenSequence([vocab.id_of(w) for w in words], text)


def _gru_cell_params(rng, in_dim, hidden, dtype, requires_grad):
    """One direction's GRU parameters: update gate, reset gate, candidate."""
    lim = 1.0 / np.sqrt(hidden)
    params = {}
    for gate in ("z", "r", "h"):
        params["w" + gate] = T.Tensor(
            rng.uniform(-lim, lim, size=(in_dim, hidden)), requires_grad, dtype=dtype)
        params["u" + gate] = T.Tensor(
            rng.uniform(-lim, lim, size=(hidden, hidden)), requires_grad, dtype=dtype)
        params["b" + gate] = T.Tensor(
            np.zeros(hidden), requires_grad, dtype=dtype)
    return params


def _gru_step(p, x, h):
    """Standard GRU cell: h' = (1-z)*h + z*candidate."""
    z = T.sigmoid(T.add(T.add(T.matmul(x, p["wz"]), T.matmul(h, p["uz"])), p["bz"]))
    r = T.sigmoid(T.add(T.add(T.matmul(x, p["wr"]), T.matmul(h, p["ur"])), p["br"]))
    cand = T.tanh(T.add(T.add(T.matmul(x, p["wh"]), T.matmul(T.mul(r, h), p["uh"])), p["bh"]))
    return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, cand))


class TextEncoder:
    """Embedding table plus forward/backward GRUs; output dim = hidden size."""

    def __init__(self, vocab_size, embed_dim=64, hidden=128, seed=0,
                 dtype=np.float32, trainable=True):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.embedding = T.Tensor(
            rng.uniform(-0.08, 0.08, size=(vocab_size, embed_dim)),
            requires_grad=trainable, dtype=dtype)
        self.fwd = _gru_cell_params(rng, embed_dim, hidden, dtype, trainable)
        self.bwd = _gru_cell_params(rng, embed_dim, hidden, dtype, trainable)

    def parameters(self):
        out = {"text.embedding": self.embedding}
        for tag, p in (("fwd", self.fwd), ("bwd", self.bwd)):
            for name, t in p.items():
                out[f"text.{tag}.{name}"] = t
        return out

    def _run_direction(self, params, ids, mask):
        batch, steps = ids.shape
        h = T.Tensor(np.zeros((batch, self.hidden)), dtype=self.dtype)
        for t in range(steps):
            x = T.gather_rows(self.embedding, ids[:, t])
            hn = _gru_step(params, x, h)
            m = T.Tensor(mask[:, t:t + 1], dtype=self.dtype)
            h = T.add(T.mul(m, hn), T.mul(T.sub(1.0, m), h))
        return h

    def encode_batch(self, sequences):
        """Encode a batch of TokenSequence into a (batch, hidden) feature."""
        if not sequences:
            raise ValueError("encode_batch needs at least one sequence")
        lengths = [len(s) for s in sequences]
        if min(lengths) == 0:
            raise ValueError("cannot encode an empty token sequence")
        steps = max(lengths)
        batch = len(sequences)
        ids = np.full((batch, steps), PAD_ID, dtype=np.int64)
        rev = np.full((batch, steps), PAD_ID, dtype=np.int64)
        mask = np.zeros((batch, steps), dtype=np.float64)
        for i, seq in enumerate(sequences):
            n = lengths[i]
            arr = np.asarray(seq.ids, dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
                raise IndexError(
                    f"token id outside embedding table of {self.vocab_size} rows")
            ids[i, :n] = arr
            rev[i, :n] = arr[::-1]
            mask[i, :n] = 1.0
        h_fwd = self._run_direction(self.fwd, ids, mask)
        h_bwd = self._run_direction(self.bwd, rev, mask)
        return T.add(h_fwd, h_bwd)

    def encode(self, sequence):
        """Single-sequence convenience wrapper; returns a (1, hidden) tensor."""
        return self.encode_batch([sequence])

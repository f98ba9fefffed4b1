"""Turn token sequences and region features into utility matrices.

Utility matrices are laid out entity-major: (..., n, d), one row per word
position, region or candidate answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import core
from .core import ParameterRegistry, Tensor

PAD = "<pad>"
UNK = "<unk>"


class Vocabulary:
    """Closed token -> id map; id 0 is padding."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            tokens = [PAD] + [t for t in tokens if t != PAD]
        if UNK not in tokens:
            tokens.insert(1, UNK)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: k for k, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    def encode(self, text) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self.ids.get(w, self.unk_id) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps(self.ids, indent=0, sort_keys=False)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_map(cls, mapping: dict) -> "Vocabulary":
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense in [0, V)")
        if mapping.get(PAD) != 0 or UNK not in mapping:
            raise ValueError(f"vocabulary needs {PAD!r} = 0 and an {UNK!r} entry")
        return cls(sorted(mapping, key=mapping.get))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls.from_map(json.load(fh))


@dataclass
class TokenSequence:
    ids: list[int]
    true_length: int

    @classmethod
    def of(cls, ids) -> "TokenSequence":
        ids = [int(i) for i in ids]
        return cls(ids, len(ids))


def pad_or_truncate(seq: TokenSequence, n: int) -> TokenSequence:
    if n < 1:
        raise core.ContractError("pad_or_truncate: n must be >= 1")
    ids = list(seq.ids[:n]) + [0] * max(0, n - len(seq.ids))
    return TokenSequence(ids, min(seq.true_length, n))


def embed_tokens(ids, E: Tensor) -> Tensor:
    """Rows of the shared word-embedding table; shape ids.shape + (d_E,)."""
    return core.embedding(np.asarray(ids, dtype=np.int64), E)


@dataclass
class LstmParams:
    Wx: core.Parameter  # (4h, d_in), gate blocks ordered i, f, g, o
    Wh: core.Parameter  # (4h, h)
    b: core.Parameter   # (4h,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]


def make_lstm(registry: ParameterRegistry, name: str, d_in: int, d_h: int,
              rng: np.random.Generator, dtype=np.float64) -> LstmParams:
    Wx = rng.standard_normal((4 * d_h, d_in)) * np.sqrt(2.0 / d_in)
    Wh = rng.standard_normal((4 * d_h, d_h)) * np.sqrt(2.0 / d_h)
    b = np.zeros(4 * d_h)
    b[d_h:2 * d_h] = 1.0
    return LstmParams(registry.add(f"{name}.Wx", Wx.astype(dtype)),
                      registry.add(f"{name}.Wh", Wh.astype(dtype)),
                      registry.add(f"{name}.b", b.astype(dtype)))


def lstm_encode(x: Tensor, p: LstmParams) -> Tensor:
    """Run an LSTM from zero state over x of shape (N, n, d_in); returns (N, n, h).

    The recurrence runs across padded positions too.
    """
    N, n, _ = x.shape
    h_dim = p.hidden
    xz = core.linear(x, p.Wx, p.b)
    h = core.constant(np.zeros((N, h_dim), dtype=x.dtype), x.dtype)
    c = core.constant(np.zeros((N, h_dim), dtype=x.dtype), x.dtype)
    outs = []
    for t in range(n):
        z = core.add(core.index(xz, (slice(None), t)), core.linear(h, p.Wh))
        i = core.sigmoid(core.index(z, (slice(None), slice(0, h_dim))))
        f = core.sigmoid(core.index(z, (slice(None), slice(h_dim, 2 * h_dim))))
        g = core.tanh(core.index(z, (slice(None), slice(2 * h_dim, 3 * h_dim))))
        o = core.sigmoid(core.index(z, (slice(None), slice(3 * h_dim, 4 * h_dim))))
        c = core.add(core.mul(f, c), core.mul(i, g))
        h = core.mul(o, core.tanh(c))
        outs.append(h)
    return core.stack(outs, axis=1)


def last_states(H: Tensor, lengths=None) -> Tensor:
    """Hidden state at the padded end, or at true_length - 1 per row when
    ``lengths`` is given (empty sequences fall back to position 0)."""
    if lengths is None:
        return core.index(H, (slice(None), H.shape[1] - 1))
    pos = np.maximum(np.asarray(lengths, dtype=np.int64) - 1, 0)
    return core.index(H, (np.arange(H.shape[0]), pos))


def encode_text(ids, E: Tensor, lstm: LstmParams) -> Tensor:
    """(..., n) token ids -> (..., n, h) per-position hidden states."""
    ids = np.asarray(ids)
    lead = ids.shape[:-1]
    x = embed_tokens(ids.reshape(-1, ids.shape[-1]), E)
    H = lstm_encode(x, lstm)
    return core.reshape(H, lead + H.shape[1:])


def encode_answer_bank(ids, E: Tensor, lstm: LstmParams, lengths=None) -> Tensor:
    """(B, n_A, n_tok) candidate ids -> (B, n_A, h): one entity per whole answer."""
    ids = np.asarray(ids)
    if ids.shape[-2] < 2:
        raise core.ContractError("answer bank needs at least two candidates")
    B, nA, n = ids.shape
    x = embed_tokens(ids.reshape(B * nA, n), E)
    H = lstm_encode(x, lstm)
    flat_len = None if lengths is None else np.asarray(lengths).reshape(-1)
    last = last_states(H, flat_len)
    return core.reshape(last, (B, nA, lstm.hidden))


def encode_image(regions: Tensor, W: Tensor, b: Tensor | None, dropout_rate: float = 0.5,
                 train: bool = False, rng=None) -> Tensor:
    """1x1 convolution over regions (a shared per-region linear map), ReLU, dropout."""
    return core.dropout(core.relu(core.linear(regions, W, b)), dropout_rate, train, rng)

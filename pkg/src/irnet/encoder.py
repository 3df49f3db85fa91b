"""Instance feature extraction over a trainable token-embedding table.

Support utterances are encoded together with a class description through a
structured self-attention pooling; queries are mean-pooled.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ContractError, VocabularyError

PAD = "<pad>"
UNK = "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text: str) -> list[str]:
    """Lowercase split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def describe_label(label: str) -> str:
    """Default class description: the label name with underscores as spaces."""
    return " ".join(label.replace("_", " ").replace("-", " ").split())


class Vocab:
    """Token <-> index map. Index 0 is padding, index 1 is the unknown token."""

    reserved = (PAD, UNK)

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(self.reserved)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    @property
    def pad_index(self) -> int:
        return 0

    @property
    def unk_index(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_index) for t in tokens]

    def decode(self, indices: Sequence[int]) -> list[str]:
        try:
            return [self.itos[i] for i in indices]
        except IndexError as exc:
            raise VocabularyError(f"index out of range for vocabulary of {len(self)}") from exc

    @classmethod
    def build(cls, texts: Iterable[Sequence[str]]) -> "Vocab":
        seen = sorted({tok for toks in texts for tok in toks} - set(cls.reserved))
        return cls(seen)

    def save(self, path) -> None:
        """One token per line; line number (after the reserved entries) is the index."""
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(self.reserved):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls()
        for lineno, tok in enumerate(lines, 1):
            if not tok or tok in vocab:
                raise VocabularyError(f"{path}:{lineno}: empty or duplicate token {tok!r}")
            vocab.add(tok)
        return vocab


def _fan_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class EncoderParams:
    embedding: Parameter  # (|vocab|, d)
    W1: Parameter  # (d_a, d)
    b1: Parameter  # (d_a,)
    W2: Parameter  # (r, d_a)
    b2: Parameter  # (r,)
    W3: Parameter  # (d, d * r)
    b3: Parameter  # (d,)

    @property
    def hidden_size(self) -> int:
        return self.embedding.shape[1]

    @property
    def n_rows(self) -> int:
        return self.W2.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.embedding, self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    @classmethod
    def initialize(cls, vocab_size: int, d: int = 64, d_a: int = 64, r: int = 1,
                   rng: np.random.Generator | None = None, prefix: str = "encoder",
                   embedding_std: float = 0.02) -> "EncoderParams":
        if min(d, d_a, r) < 1 or vocab_size < 1:
            raise ContractError(f"encoder sizes must be positive (d={d}, d_a={d_a}, r={r})")
        rng = np.random.default_rng(0) if rng is None else rng
        emb = rng.normal(0.0, embedding_std, size=(vocab_size, d))
        return cls(
            embedding=Parameter(f"{prefix}.embedding", emb),
            W1=Parameter(f"{prefix}.W1", _fan_uniform(rng, d_a, d)),
            b1=Parameter(f"{prefix}.b1", np.zeros(d_a)),
            W2=Parameter(f"{prefix}.W2", _fan_uniform(rng, r, d_a)),
            b2=Parameter(f"{prefix}.b2", np.zeros(r)),
            W3=Parameter(f"{prefix}.W3", _fan_uniform(rng, d, d * r)),
            b3=Parameter(f"{prefix}.b3", np.zeros(d)),
        )


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed ``d x d`` orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def embed_tokens(tokens: Sequence[int], params: EncoderParams,
                 rotation: np.ndarray | None = None) -> Tensor:
    """Look up the ``n x d`` embedding rows of a token index sequence.

    An optional orthogonal ``rotation`` is applied to every row.
    """
    idx = np.asarray(tokens, dtype=np.int64)
    n_vocab = params.embedding.shape[0]
    if idx.ndim != 1:
        raise ContractError("token sequence must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= n_vocab):
        bad = int(idx[(idx < 0) | (idx >= n_vocab)][0])
        raise VocabularyError(f"token index {bad} outside vocabulary of size {n_vocab}")
    rows = ad.gather_rows(params.embedding, idx)
    return rows if rotation is None else rows @ rotation


def attention_weights(hidden: Tensor, params: EncoderParams) -> Tensor:
    """``(n+m) x r`` attention matrix; each column is a softmax over positions."""
    scores = ad.tanh(hidden @ params.W1.T + params.b1)
    logits = scores @ params.W2.T + params.b2
    return ad.softmax(logits, axis=0)


def encode_support(utterance: Sequence[int], class_desc: Sequence[int] | None,
                   params: EncoderParams, rotation: np.ndarray | None = None) -> Tensor:
    """Class-aware support feature of size ``d``.

    The utterance rows and description rows are stacked, attention-pooled
    into ``r`` weighted sums, passed through relu and an affine map.  Pass
    ``class_desc=None`` to encode the utterance alone.
    """
    if len(utterance) == 0 or (class_desc is not None and len(class_desc) == 0):
        raise ContractError("support utterance and class description must be nonempty")
    hidden = embed_tokens(utterance, params, rotation)
    if class_desc is not None:
        hidden = ad.concat([hidden, embed_tokens(class_desc, params, rotation)], axis=0)
    attn = attention_weights(hidden, params)
    pooled = attn.T @ hidden  # (r, d)
    flat = ad.reshape(pooled, (pooled.size,))
    return params.W3 @ ad.relu(flat) + params.b3


def encode_query(utterance: Sequence[int], params: EncoderParams,
                 rotation: np.ndarray | None = None) -> Tensor:
    """Mean of the token embeddings."""
    if len(utterance) == 0:
        raise ContractError("query utterance must be nonempty")
    return ad.mean(embed_tokens(utterance, params, rotation), axis=0)

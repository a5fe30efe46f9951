"""Token-level policies.

:class:`ToyPolicy` is a tiny autoregressive categorical model with exact
log-probabilities and analytic gradients. Its next-token logits are

    logits(context, prev, t) = table[prev, bucket(t)] + context_bias[context]

where ``prev`` is the previous token (or BOS at t=0) and ``bucket(t)`` clips
the position to ``n_buckets - 1``. It implements the same two-call interface
(:class:`PolicyOracle`) that an external LLM server adapter would.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ShapeError, VocabularyError
from .masks import ClassMap

EOS = "<eos>"


class PolicyOracle(Protocol):
    def sample(self, context: int, max_len: int, rng: np.random.Generator) -> list[int]: ...

    def logprobs(self, context: int, tokens: Sequence[int]) -> np.ndarray: ...


class RrleTokenizer:
    """Maps RRLE text to token ids: one token per label, digit, ``*``, ``|`` and newline."""

    STRUCTURAL = ("*", "|", "\n")
    DIGITS = tuple("0123456789")

    def __init__(self, labels: Sequence[str], digits: Sequence[str] | None = None):
        digits = tuple(self.DIGITS if digits is None else digits)
        self.vocab: list[str] = [EOS, *labels, *self.STRUCTURAL, *digits]
        if len(set(self.vocab)) != len(self.vocab):
            raise VocabularyError("tokenizer vocabulary has duplicates")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.eos_id = 0
        alternatives = sorted(self.vocab[1:], key=len, reverse=True)
        self._pattern = re.compile("|".join(re.escape(a) for a in alternatives) + r"|[ \t]+|.", re.S)

    @classmethod
    def for_class_map(cls, cm: ClassMap) -> "RrleTokenizer":
        return cls(cm.labels)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str, eos: bool = True) -> list[int]:
        ids = []
        for m in self._pattern.finditer(text):
            piece = m.group(0)
            if piece.isspace() and piece not in self.index:
                continue
            if piece not in self.index:
                raise VocabularyError(f"text piece {piece!r} is not in the vocabulary")
            ids.append(self.index[piece])
        if eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            tok = self.vocab[i]
            out.append(" *" if tok == "*" else tok)
        return "".join(out)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def context_id(key: str, n_contexts: int) -> int:
    """Stable bucket for an arbitrary context key (e.g. image + patch position)."""
    return zlib.crc32(key.encode()) % n_contexts


@dataclass(frozen=True)
class State:
    context: int
    prev: int
    bucket: int


class ToyPolicy:
    def __init__(
        self,
        vocab_size: int,
        n_contexts: int = 1,
        n_buckets: int = 16,
        params: np.ndarray | None = None,
        tokenizer: RrleTokenizer | None = None,
        eos_id: int = 0,
    ):
        if tokenizer is not None and len(tokenizer) != vocab_size:
            raise VocabularyError("tokenizer size does not match vocab_size")
        self.vocab_size = vocab_size
        self.n_contexts = n_contexts
        self.n_buckets = n_buckets
        self.tokenizer = tokenizer
        self.eos_id = eos_id
        self.bos = vocab_size
        self._table_shape = (vocab_size + 1, n_buckets, vocab_size)
        self._ctx_shape = (n_contexts, vocab_size)
        n = int(np.prod(self._table_shape) + np.prod(self._ctx_shape))
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        split = int(np.prod(self._table_shape))
        self.table = params[:split].reshape(self._table_shape)
        self.ctx_bias = params[split:].reshape(self._ctx_shape)

    @classmethod
    def for_tokenizer(cls, tokenizer: RrleTokenizer, **kw) -> "ToyPolicy":
        return cls(len(tokenizer), tokenizer=tokenizer, eos_id=tokenizer.eos_id, **kw)

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(
            self.vocab_size, self.n_contexts, self.n_buckets, params, self.tokenizer, self.eos_id
        )

    def copy(self) -> "ToyPolicy":
        return self.with_params(self.params.copy())

    def randomized(self, rng: np.random.Generator, scale: float = 1.0) -> "ToyPolicy":
        return self.with_params(rng.normal(0.0, scale, self.n_params))

    def bucket(self, t: int) -> int:
        return min(t, self.n_buckets - 1)

    def states(self, context: int, tokens: Sequence[int]) -> list[State]:
        """The state in which each token of ``tokens`` was chosen."""
        prevs = [self.bos, *tokens[:-1]]
        return [State(context, int(p), self.bucket(t)) for t, p in enumerate(prevs)]

    def logits(self, s: State) -> np.ndarray:
        return self.table[s.prev, s.bucket] + self.ctx_bias[s.context]

    def log_distribution(self, s: State) -> np.ndarray:
        return _log_softmax(self.logits(s))

    def _check(self, context: int, tokens: Sequence[int]) -> None:
        if not 0 <= context < self.n_contexts:
            raise VocabularyError(f"context {context} out of range")
        for w in tokens:
            if not 0 <= w < self.vocab_size:
                raise VocabularyError(f"token id {w} outside vocabulary of size {self.vocab_size}")

    def logprobs(self, context: int, tokens: Sequence[int]) -> np.ndarray:
        self._check(context, tokens)
        if len(tokens) == 0:
            return np.zeros(0)
        prevs = np.array([self.bos, *tokens[:-1]])
        buckets = np.minimum(np.arange(len(tokens)), self.n_buckets - 1)
        z = self.table[prevs, buckets] + self.ctx_bias[context]
        return _log_softmax(z)[np.arange(len(tokens)), np.asarray(tokens)]

    def sample(self, context: int, max_len: int, rng: np.random.Generator) -> list[int]:
        self._check(context, [])
        tokens: list[int] = []
        prev = self.bos
        for t in range(max_len):
            p = np.exp(self.log_distribution(State(context, prev, self.bucket(t))))
            cdf = np.cumsum(p)
            w = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), self.vocab_size - 1))
            tokens.append(w)
            if w == self.eos_id:
                break
            prev = w
        return tokens

    # --- gradients -------------------------------------------------------

    def accumulate_logit_grad(self, grad: np.ndarray, s: State, g_logits: np.ndarray) -> None:
        """Add d(objective)/d(logits at s) into a flat parameter gradient."""
        split = int(np.prod(self._table_shape))
        gt = grad[:split].reshape(self._table_shape)
        gc = grad[split:].reshape(self._ctx_shape)
        gt[s.prev, s.bucket] += g_logits
        gc[s.context] += g_logits

    def sequence_logprob_grad(self, context: int, tokens: Sequence[int]) -> np.ndarray:
        """Gradient of sum_t log pi(w_t | state_t) with respect to the parameters."""
        self._check(context, tokens)
        grad = np.zeros(self.n_params)
        for s, w in zip(self.states(context, tokens), tokens):
            g = -np.exp(self.log_distribution(s))
            g[w] += 1.0
            self.accumulate_logit_grad(grad, s, g)
        return grad
